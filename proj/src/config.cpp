#include "feddg/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace feddg {

namespace {

std::string normalize_key(std::string k) {
    std::replace(k.begin(), k.end(), '-', '_');
    while (!k.empty() && k.front() == '_') k.erase(k.begin());
    return k;
}

bool parse_bool(const std::string& v) {
    if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "off" || v == "no") return false;
    throw std::invalid_argument("config: bad boolean value '" + v + "'");
}

}  // namespace

LambdaSpec ExperimentConfig::lambda() const {
    const auto colon = lambda_mode.find(':');
    const std::string kind = lambda_mode.substr(0, colon);
    const std::string args = colon == std::string::npos ? "" : lambda_mode.substr(colon + 1);
    if (kind == "fixed") {
        if (args.empty()) throw std::invalid_argument("lambda-mode: fixed needs a value");
        return LambdaSpec::fixed_value(std::stod(args));
    }
    if (kind == "uniform") {
        if (args.empty()) return LambdaSpec::uniform(0.0, 1.0);
        const auto comma = args.find(',');
        if (comma == std::string::npos)
            throw std::invalid_argument("lambda-mode: uniform needs lo,hi");
        return LambdaSpec::uniform(std::stod(args.substr(0, comma)),
                                   std::stod(args.substr(comma + 1)));
    }
    throw std::invalid_argument("lambda-mode: unknown mode '" + kind + "'");
}

std::vector<int> ExperimentConfig::client_counts(int max_sources) const {
    if (clients.empty()) return {max_sources};
    const auto dots = clients.find("..");
    if (dots == std::string::npos) {
        const int n = std::stoi(clients);
        if (n < 1 || n > max_sources)
            throw std::invalid_argument("clients: count outside [1, " +
                                        std::to_string(max_sources) + "]");
        return {n};
    }
    const int lo = std::stoi(clients.substr(0, dots));
    int hi = std::stoi(clients.substr(dots + 2));
    hi = std::min(hi, max_sources);
    if (lo < 1 || lo > hi) throw std::invalid_argument("clients: bad sweep range");
    std::vector<int> out;
    for (int n = lo; n <= hi; ++n) out.push_back(n);
    return out;
}

std::string ExperimentConfig::normalize() {
    if (mode == "elcfs" && no_cfsi && no_bel) {
        mode = "fedavg";
        no_cfsi = no_bel = false;
        return "warning: --no-cfsi with --no-bel removes both components; running the FedAvg "
               "baseline";
    }
    return "";
}

void ExperimentConfig::validate() const {
    if (mode != "elcfs" && mode != "fedavg")
        throw std::invalid_argument("mode must be 'elcfs' or 'fedavg'");
    if (task != "synth4" && task.rfind("external:", 0) != 0)
        throw std::invalid_argument("task must be 'synth4' or 'external:<dir>'");
    if (!(alpha > 0.0 && alpha <= 0.5)) throw std::invalid_argument("alpha must be in (0, 0.5]");
    if (!(tau > 0.0)) throw std::invalid_argument("tau must be > 0");
    if (!(beta > 0.0)) throw std::invalid_argument("beta must be > 0");
    if (gamma < 0.0) throw std::invalid_argument("gamma must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be > 0");
    if (rounds < 1) throw std::invalid_argument("rounds must be >= 1");
    if (local_epochs < 0) throw std::invalid_argument("local-epochs must be >= 0");
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("at least one seed required");
    if (eval_interval < 1) throw std::invalid_argument("eval-interval must be >= 1");
    if (r_bd < 1 || r_bg <= r_bd) throw std::invalid_argument("need r_bg > r_bd >= 1");
    lambda();  // throws on malformed lambda-mode
}

nlohmann::json ExperimentConfig::to_json() const {
    return {
        {"task", task},
        {"hold_out", hold_out},
        {"mode", mode},
        {"no_cfsi", no_cfsi},
        {"no_bel", no_bel},
        {"no_boundary_loss", no_boundary_loss},
        {"lambda_mode", lambda_mode},
        {"alpha", alpha},
        {"gamma", gamma},
        {"tau", tau},
        {"beta", beta},
        {"lr", lr},
        {"rounds", rounds},
        {"local_epochs", local_epochs},
        {"batch", batch},
        {"seeds", seeds},
        {"clients", clients},
        {"eval_interval", eval_interval},
        {"img_size", img_size},
        {"base_width", base_width},
        {"depth", depth},
        {"num_classes", num_classes},
        {"n_train", n_train},
        {"n_test", n_test},
        {"r_bd", r_bd},
        {"r_bg", r_bg},
        {"infonce_standard", infonce_standard},
        {"bank_crop", bank_crop},
        {"parallel_clients", parallel_clients},
    };
}

void apply_key_value(ExperimentConfig& cfg, const std::string& raw_key, const std::string& value) {
    const std::string key = normalize_key(raw_key);
    if (key == "task") cfg.task = value;
    else if (key == "hold_out") cfg.hold_out = value;
    else if (key == "mode") cfg.mode = value;
    else if (key == "no_cfsi") cfg.no_cfsi = parse_bool(value);
    else if (key == "no_bel") cfg.no_bel = parse_bool(value);
    else if (key == "no_boundary_loss") cfg.no_boundary_loss = parse_bool(value);
    else if (key == "lambda_mode") cfg.lambda_mode = value;
    else if (key == "alpha") cfg.alpha = std::stod(value);
    else if (key == "gamma") cfg.gamma = std::stod(value);
    else if (key == "tau") cfg.tau = std::stod(value);
    else if (key == "beta") cfg.beta = std::stod(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "rounds") cfg.rounds = std::stoi(value);
    else if (key == "local_epochs") cfg.local_epochs = std::stoi(value);
    else if (key == "batch") cfg.batch = std::stoi(value);
    else if (key == "seed" || key == "seeds") cfg.seeds = parse_seed_list(value);
    else if (key == "clients") cfg.clients = value;
    else if (key == "out") cfg.out = value;
    else if (key == "eval_interval") cfg.eval_interval = std::stoi(value);
    else if (key == "dump_ledger") cfg.dump_ledger = parse_bool(value);
    else if (key == "img_size") cfg.img_size = std::stoi(value);
    else if (key == "base_width") cfg.base_width = std::stoi(value);
    else if (key == "depth") cfg.depth = std::stoi(value);
    else if (key == "num_classes") cfg.num_classes = std::stoi(value);
    else if (key == "n_train") cfg.n_train = std::stoi(value);
    else if (key == "n_test") cfg.n_test = std::stoi(value);
    else if (key == "r_bd") cfg.r_bd = std::stoi(value);
    else if (key == "r_bg") cfg.r_bg = std::stoi(value);
    else if (key == "infonce_standard") cfg.infonce_standard = parse_bool(value);
    else if (key == "bank_crop") cfg.bank_crop = parse_bool(value);
    else if (key == "parallel_clients") cfg.parallel_clients = parse_bool(value);
    else throw std::invalid_argument("config: unknown key '" + raw_key + "'");
}

void apply_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        apply_key_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
    std::vector<uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoull(item));
    if (out.empty()) throw std::invalid_argument("seed: empty list");
    return out;
}

}  // namespace feddg
