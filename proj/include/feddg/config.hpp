#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "feddg/distbank.hpp"

namespace feddg {

// Resolved experiment configuration. Precedence: built-in defaults, then a
// flat key=value config file, then command-line flags. Keys mirror flag
// names with dashes or underscores.
struct ExperimentConfig {
    std::string task = "synth4";
    std::string hold_out = "D";
    std::string mode = "elcfs";  // elcfs | fedavg
    bool no_cfsi = false;
    bool no_bel = false;
    bool no_boundary_loss = false;
    std::string lambda_mode = "uniform:0,1";
    double alpha = 0.01;
    double gamma = 0.1;
    double tau = 0.05;
    double beta = 1e-3;  // inner (meta) step size
    double lr = 1e-3;
    int rounds = 100;
    int local_epochs = 1;
    int batch = 5;
    std::vector<uint64_t> seeds = {1};
    std::string clients;  // "" = all sources; "n" or "a..b" sweeps source counts
    std::string out = "runs/out";
    int eval_interval = 10;
    bool dry_run = false;
    bool dump_ledger = false;

    int img_size = 64;
    int base_width = 8;
    int depth = 3;
    int num_classes = 2;
    int n_train = 60;
    int n_test = 20;
    int r_bd = 1;
    int r_bg = 3;
    bool infonce_standard = false;
    bool bank_crop = false;
    bool parallel_clients = false;

    LambdaSpec lambda() const;
    std::vector<int> client_counts(int max_sources) const;  // sweep expansion

    // Returns a warning string when a degenerate flag combination was
    // normalized (elcfs with both no_cfsi and no_bel is the baseline).
    std::string normalize();
    void validate() const;
    nlohmann::json to_json() const;
};

// key = value lines, '#' comments. Unknown keys are an error.
void apply_config_file(ExperimentConfig& cfg, const std::string& path);
void apply_key_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

std::vector<uint64_t> parse_seed_list(const std::string& s);

}  // namespace feddg
