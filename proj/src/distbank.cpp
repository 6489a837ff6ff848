#include "feddg/distbank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace feddg {

void DistributionBank::add(BankEntry entry) {
    auto& list = entries_[entry.client_id];
    for (const auto& e : list)
        if (e.sample_index == entry.sample_index)
            throw std::invalid_argument("bank: duplicate (client_id, sample_index) = (" +
                                        std::to_string(entry.client_id) + ", " +
                                        std::to_string(entry.sample_index) + ")");
    list.push_back(std::move(entry));
}

const std::vector<BankEntry>& DistributionBank::entries_for(int client_id) const {
    auto it = entries_.find(client_id);
    if (it == entries_.end())
        throw std::out_of_range("bank: unknown client " + std::to_string(client_id));
    return it->second;
}

std::vector<int> DistributionBank::client_ids() const {
    std::vector<int> ids;
    for (const auto& [id, _] : entries_) ids.push_back(id);
    return ids;
}

size_t DistributionBank::total_entries() const {
    size_t n = 0;
    for (const auto& [_, list] : entries_) n += list.size();
    return n;
}

std::vector<BankEntry> contribute(int client_id, const std::vector<Image>& images) {
    std::vector<BankEntry> out;
    out.reserve(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        // phase exists only inside this call and is dropped with the Spectrum
        Spectrum spec = forward_dft(images[i]);
        BankEntry e;
        e.client_id = client_id;
        e.sample_index = static_cast<int>(i);
        e.h = spec.h;
        e.w = spec.w;
        e.c = spec.c;
        e.amplitude.resize(spec.amplitude.size());
        for (size_t j = 0; j < spec.amplitude.size(); ++j)
            e.amplitude[j] = static_cast<float>(spec.amplitude[j]);
        out.push_back(std::move(e));
    }
    return out;
}

std::map<int, const BankEntry*> sample_foreign(const DistributionBank& bank, int local_client_id,
                                               std::mt19937_64& rng) {
    std::map<int, const BankEntry*> out;
    for (int id : bank.client_ids()) {
        if (id == local_client_id) continue;
        const auto& list = bank.entries_for(id);
        if (list.empty())
            throw std::runtime_error("bank: foreign client " + std::to_string(id) + " is empty");
        std::uniform_int_distribution<size_t> pick(0, list.size() - 1);
        out[id] = &list[pick(rng)];
    }
    return out;
}

double LambdaSpec::draw(std::mt19937_64& rng) const {
    if (mode == Mode::Fixed) {
        if (fixed < 0.0 || fixed > 1.0) throw std::invalid_argument("lambda: fixed value outside [0,1]");
        return fixed;
    }
    if (lo < 0.0 || hi > 1.0 || lo > hi) throw std::invalid_argument("lambda: bad uniform range");
    std::uniform_real_distribution<double> u(lo, hi);
    return u(rng);
}

std::vector<Image> generate_meta_test_from_spectrum(const Spectrum& local,
                                                    const DistributionBank& bank,
                                                    int local_client_id, const FreqMask& mask,
                                                    const LambdaSpec& lambda, std::mt19937_64& rng) {
    const auto picks = sample_foreign(bank, local_client_id, rng);
    std::vector<Image> out;
    out.reserve(picks.size());
    std::vector<double> foreign(local.amplitude.size());
    for (const auto& [id, entry] : picks) {
        if (entry->h != local.h || entry->w != local.w || entry->c != local.c)
            throw std::runtime_error("bank: entry shape mismatch for client " + std::to_string(id));
        for (size_t i = 0; i < foreign.size(); ++i) foreign[i] = entry->amplitude[i];
        const double lam = lambda.draw(rng);
        out.push_back(inverse_dft(interpolate_amplitude(local, foreign, mask, lam)));
    }
    return out;
}

std::vector<Image> generate_meta_test(const Image& img, const DistributionBank& bank,
                                      int local_client_id, const FreqMask& mask,
                                      const LambdaSpec& lambda, std::mt19937_64& rng) {
    return generate_meta_test_from_spectrum(forward_dft(img), bank, local_client_id, mask, lambda,
                                            rng);
}

namespace {

void push_u16(std::vector<uint8_t>& v, uint16_t x) {
    v.push_back(x & 0xff);
    v.push_back((x >> 8) & 0xff);
}
void push_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int b = 0; b < 4; ++b) v.push_back((x >> (8 * b)) & 0xff);
}
uint32_t pull_u32(const std::vector<uint8_t>& v, size_t off) {
    uint32_t x = 0;
    for (int b = 0; b < 4; ++b) x |= static_cast<uint32_t>(v[off + b]) << (8 * b);
    return x;
}

constexpr size_t kHeaderBytes = 4 + 2 + 4 + 4 + 4 + 4 + 4;

}  // namespace

std::vector<uint8_t> serialize_entries(int client_id, const std::vector<BankEntry>& entries) {
    if (entries.empty()) throw std::invalid_argument("serialize_entries: empty entry list");
    const int h = entries[0].h, w = entries[0].w, c = entries[0].c;
    std::vector<uint8_t> out;
    out.reserve(kHeaderBytes + entries.size() * static_cast<size_t>(h) * w * c * 4);
    out.insert(out.end(), {'F', 'D', 'B', 'K'});
    push_u16(out, 1);
    push_u32(out, static_cast<uint32_t>(client_id));
    push_u32(out, static_cast<uint32_t>(h));
    push_u32(out, static_cast<uint32_t>(w));
    push_u32(out, static_cast<uint32_t>(c));
    push_u32(out, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.h != h || e.w != w || e.c != c)
            throw std::invalid_argument("serialize_entries: mixed shapes");
        for (float f : e.amplitude) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            push_u32(out, bits);
        }
    }
    return out;
}

std::vector<BankEntry> deserialize_entries(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < kHeaderBytes || bytes[0] != 'F' || bytes[1] != 'D' || bytes[2] != 'B' ||
        bytes[3] != 'K')
        throw std::runtime_error("bank blob: bad magic");
    const uint16_t version = bytes[4] | (bytes[5] << 8);
    if (version != 1) throw std::runtime_error("bank blob: unsupported version");
    const int client_id = static_cast<int>(pull_u32(bytes, 6));
    const int h = static_cast<int>(pull_u32(bytes, 10));
    const int w = static_cast<int>(pull_u32(bytes, 14));
    const int c = static_cast<int>(pull_u32(bytes, 18));
    const uint32_t count = pull_u32(bytes, 22);
    const size_t plane = static_cast<size_t>(h) * w * c;
    if (bytes.size() != kHeaderBytes + count * plane * 4)
        throw std::runtime_error("bank blob: size does not match header (schema allows only "
                                 "amplitude payload)");
    std::vector<BankEntry> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        BankEntry e;
        e.client_id = client_id;
        e.sample_index = static_cast<int>(i);
        e.h = h;
        e.w = w;
        e.c = c;
        e.amplitude.resize(plane);
        for (size_t j = 0; j < plane; ++j) {
            const uint32_t bits = pull_u32(bytes, kHeaderBytes + (i * plane + j) * 4);
            float f;
            std::memcpy(&f, &bits, 4);
            if (!(f >= 0.f) || !std::isfinite(f))
                throw std::runtime_error("bank blob: invalid amplitude value");
            e.amplitude[j] = f;
        }
        out.push_back(std::move(e));
    }
    return out;
}

void save_bank(const DistributionBank& bank, const std::string& dir) {
    fs::create_directories(dir);
    for (int id : bank.client_ids()) {
        const auto bytes = serialize_entries(id, bank.entries_for(id));
        const fs::path path = fs::path(dir) / ("client_" + std::to_string(id) + ".fdbk");
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("save_bank: cannot write " + path.string());
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
}

DistributionBank load_bank(const std::string& dir) {
    DistributionBank bank;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.path().extension() == ".fdbk") files.push_back(entry.path());
    if (files.empty()) throw std::runtime_error("load_bank: no .fdbk files in " + dir);
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream f(path, std::ios::binary);
        std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
        for (auto& e : deserialize_entries(bytes)) bank.add(std::move(e));
    }
    return bank;
}

}  // namespace feddg
