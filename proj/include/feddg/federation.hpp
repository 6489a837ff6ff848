#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddg/config.hpp"
#include "feddg/distbank.hpp"
#include "feddg/episodic.hpp"
#include "feddg/metrics.hpp"
#include "feddg/segnet.hpp"
#include "feddg/synthdata.hpp"

namespace feddg {

// ------------------------------------------------------------- messaging

enum class MessageKind { ModelParams, BankEntry };

struct LedgerEntry {
    int round = 0;
    int sender = 0;    // -1 = server
    int receiver = 0;  // -1 = server (bank entries are uploads to the share point)
    MessageKind kind = MessageKind::ModelParams;
    size_t payload_bytes = 0;
};

// Append-only record of every cross-client message; payload bytes are kept
// so tests can decode everything that ever left a client.
class MessageLedger {
public:
    void record(int round, int sender, int receiver, MessageKind kind,
                std::vector<uint8_t> payload);
    const std::vector<LedgerEntry>& entries() const { return entries_; }
    const std::vector<uint8_t>& payload(size_t i) const { return payloads_[i]; }
    void write_csv(const std::string& path) const;

private:
    std::vector<LedgerEntry> entries_;
    std::vector<std::vector<uint8_t>> payloads_;
};

// Decodes every payload with its wire schema and checks that nothing but
// model parameters (matching the reference schema exactly) and amplitude
// bank entries ever crossed a client boundary. Throws on any violation.
void scan_ledger_privacy(const MessageLedger& ledger, const ad::ParamSet& reference_schema);

// ------------------------------------------------------------- clients

struct ClientState {
    int client_id = 0;
    const Dataset* data = nullptr;  // never shared with other clients
    ad::ParamSet theta;
    ad::AdamState adam;
    std::mt19937_64 rng;
    size_t sample_count = 0;  // N^k

    // per-sample caches, private to the client
    std::vector<EpisodicSample<float>> samples;
    std::vector<Spectrum> spectra;  // local amplitude AND phase; phase never leaves

    struct Stats {
        double l_seg_inner = 0.0;
        double l_seg_meta = 0.0;
        double l_boundary = 0.0;
        size_t steps = 0;
    };
};

struct RoundClientStats {
    int client_id = 0;
    double l_seg_inner = 0.0;
    double l_seg_meta = 0.0;
    double l_boundary = 0.0;
    size_t n_samples = 0;
};

struct RoundReport {
    int round = 0;
    std::vector<RoundClientStats> clients;
    uint64_t theta_checksum = 0;
    std::optional<AggregateMetrics> val;  // held-out metrics when evaluated
    double wall_seconds = 0.0;
};

// ------------------------------------------------------------- operations

// Elementwise weighted mean with weights n_k / sum(n); fixed left-fold in
// the given order, double accumulation.
ad::ParamSet fed_avg(const std::vector<const ad::ParamSet*>& params_list,
                     const std::vector<double>& weights);
ad::ParamSet fed_avg(const std::vector<ad::ParamSet>& params_list,
                     const std::vector<double>& weights);

uint64_t fnv1a(const std::vector<uint8_t>& bytes);

enum class TrainMode { Elcfs, FedavgBaseline };

struct RoundContext {
    SegNetConfig net;
    EpisodicConfig episodic;
    LambdaSpec lambda;
    double lr = 1e-3;
    int batch = 5;
    TrainMode mode = TrainMode::Elcfs;
    bool no_cfsi = false;  // lambda forced to 0
    bool no_bel = false;   // transforms become plain augmentation, no episodic split
    const FreqMask* mask = nullptr;
    int threads = 1;  // client-parallel execution when > 1
};

// One federated round: broadcast the global parameters (through serialized
// bytes), train E local epochs per client, FedAvg-aggregate, log messages.
ad::ParamSet run_round(const ad::ParamSet& global_theta, std::vector<ClientState>& clients,
                       const DistributionBank& bank, const RoundContext& ctx, int epochs,
                       int round_index, MessageLedger& ledger, RoundReport& report);

AggregateMetrics evaluate_model(const ad::ParamSet& theta, const SegNetConfig& net,
                                const std::vector<SyntheticSample>& samples);

// ------------------------------------------------------------- experiment

struct RunResult {
    std::string mode_label;
    std::string held_out;
    uint64_t seed = 0;
    int n_sources = 0;
    std::vector<RoundReport> rounds;
    AggregateMetrics final_eval;
    ad::ParamSet final_theta;
    std::shared_ptr<MessageLedger> ledger;
    nlohmann::json summary_row() const;
};

// Leave-one-domain-out run: builds the suite, banks amplitudes from source
// clients only, trains `rounds` federated rounds, evaluates on the held-out
// test split every eval_interval rounds and at the end.
RunResult run_experiment(const ExperimentConfig& cfg, uint64_t seed, int n_sources = -1);

std::string mode_label(const ExperimentConfig& cfg);

// Full CLI entry: expands seeds and the optional client-count sweep, writes
// report.csv / summary.json (and ledger.csv, checkpoints) under cfg.out.
nlohmann::json run_and_report(const ExperimentConfig& cfg);

}  // namespace feddg
