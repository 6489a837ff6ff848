#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "feddg/spectral.hpp"

namespace feddg {

// One shared amplitude spectrum. Holds no phase by construction; phase is
// computed and discarded inside the owning client.
struct BankEntry {
    int client_id = 0;
    int sample_index = 0;
    int h = 0, w = 0, c = 0;
    std::vector<float> amplitude;  // centered layout, row-major (h,w,c), >= 0
};

// Cross-client store of amplitude spectra, write-once during setup and
// read-only during training.
class DistributionBank {
public:
    void add(BankEntry entry);
    bool has_client(int client_id) const { return entries_.count(client_id) > 0; }
    const std::vector<BankEntry>& entries_for(int client_id) const;
    std::vector<int> client_ids() const;
    size_t client_count() const { return entries_.size(); }
    size_t total_entries() const;

private:
    std::map<int, std::vector<BankEntry>> entries_;
};

// One entry per image, amplitude only.
std::vector<BankEntry> contribute(int client_id, const std::vector<Image>& images);

// Uniform draw of one entry per foreign client (every client in the bank
// except local_client_id), keyed ascending by client id.
std::map<int, const BankEntry*> sample_foreign(const DistributionBank& bank, int local_client_id,
                                               std::mt19937_64& rng);

struct LambdaSpec {
    enum class Mode { Fixed, Uniform } mode = Mode::Uniform;
    double fixed = 0.0;
    double lo = 0.0, hi = 1.0;

    static LambdaSpec fixed_value(double v) { return {Mode::Fixed, v, 0.0, 0.0}; }
    static LambdaSpec uniform(double lo, double hi) { return {Mode::Uniform, 0.0, lo, hi}; }

    double draw(std::mt19937_64& rng) const;
};

// K-1 style-transferred copies of img, one per foreign client, lambda drawn
// independently per foreign client. Output labels are the caller's original
// label; nothing label-related is touched here.
std::vector<Image> generate_meta_test(const Image& img, const DistributionBank& bank,
                                      int local_client_id, const FreqMask& mask,
                                      const LambdaSpec& lambda, std::mt19937_64& rng);

// Same, reusing a precomputed local spectrum (the per-sample spectrum is
// static, so trainers cache it).
std::vector<Image> generate_meta_test_from_spectrum(const Spectrum& local,
                                                    const DistributionBank& bank,
                                                    int local_client_id, const FreqMask& mask,
                                                    const LambdaSpec& lambda, std::mt19937_64& rng);

// Wire format, little-endian: magic "FDBK", version u16, client_id u32,
// H u32, W u32, C u32, count u32, then count float32 amplitude arrays
// row-major. serialize_entries is the same blob for an arbitrary entry list
// (used both for per-client bank files and single-entry messages).
std::vector<uint8_t> serialize_entries(int client_id, const std::vector<BankEntry>& entries);
std::vector<BankEntry> deserialize_entries(const std::vector<uint8_t>& bytes);

void save_bank(const DistributionBank& bank, const std::string& dir);
DistributionBank load_bank(const std::string& dir);

}  // namespace feddg
