#include "feddg/federation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <thread>

#include "feddg/checkpoint.hpp"

namespace fs = std::filesystem;

namespace feddg {

// ------------------------------------------------------------- messaging

void MessageLedger::record(int round, int sender, int receiver, MessageKind kind,
                           std::vector<uint8_t> payload) {
    entries_.push_back({round, sender, receiver, kind, payload.size()});
    payloads_.push_back(std::move(payload));
}

void MessageLedger::write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("ledger: cannot write " + path);
    f << "round,sender,receiver,kind,payload_bytes\n";
    for (const auto& e : entries_)
        f << e.round << ',' << e.sender << ',' << e.receiver << ','
          << (e.kind == MessageKind::ModelParams ? "model_params" : "bank_entry") << ','
          << e.payload_bytes << '\n';
}

void scan_ledger_privacy(const MessageLedger& ledger, const ad::ParamSet& reference_schema) {
    for (size_t i = 0; i < ledger.entries().size(); ++i) {
        const auto& e = ledger.entries()[i];
        const auto& payload = ledger.payload(i);
        if (payload.empty()) throw std::runtime_error("ledger: empty payload");
        if (e.kind == MessageKind::ModelParams) {
            const auto params = ad::deserialize_params<float>(payload, false);
            if (params.size() != reference_schema.size())
                throw std::runtime_error("ledger: model message with unexpected tensor count");
            for (size_t j = 0; j < params.size(); ++j) {
                if (params.names[j] != reference_schema.names[j])
                    throw std::runtime_error("ledger: unexpected tensor name " + params.names[j]);
                if (params.tensors[j].shape() != reference_schema.tensors[j].shape())
                    throw std::runtime_error("ledger: unexpected tensor shape for " +
                                             params.names[j]);
            }
        } else if (e.kind == MessageKind::BankEntry) {
            // deserialize_entries rejects any blob whose byte size leaves room
            // for more than count amplitude arrays, so a phase plane or raw
            // image cannot hide inside
            const auto entries = deserialize_entries(payload);
            if (entries.empty()) throw std::runtime_error("ledger: empty bank message");
            for (const auto& be : entries)
                if (be.client_id != e.sender)
                    throw std::runtime_error("ledger: bank entry sender mismatch");
        } else {
            throw std::runtime_error("ledger: unknown message kind");
        }
    }
}

// ------------------------------------------------------------- fed_avg

ad::ParamSet fed_avg(const std::vector<const ad::ParamSet*>& params_list,
                     const std::vector<double>& weights) {
    if (params_list.empty()) throw std::invalid_argument("fed_avg: empty parameter list");
    if (params_list.size() != weights.size())
        throw std::invalid_argument("fed_avg: weight count mismatch");
    double total = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw std::invalid_argument("fed_avg: weights must be > 0");
        total += w;
    }
    const auto& ref = *params_list[0];
    for (const auto* p : params_list) {
        if (p->size() != ref.size()) throw std::invalid_argument("fed_avg: schema mismatch");
        for (size_t j = 0; j < ref.size(); ++j)
            if (p->names[j] != ref.names[j] || p->tensors[j].shape() != ref.tensors[j].shape())
                throw std::invalid_argument("fed_avg: schema mismatch at " + ref.names[j]);
    }

    ad::ParamSet out;
    for (size_t j = 0; j < ref.size(); ++j) {
        const size_t n = ref.tensors[j].numel();
        std::vector<double> acc(n, 0.0);
        // fixed left-fold in list order (callers pass ascending client id)
        for (size_t k = 0; k < params_list.size(); ++k) {
            const double w = weights[k] / total;
            const auto& v = params_list[k]->tensors[j].value();
            for (size_t t = 0; t < n; ++t) acc[t] += w * static_cast<double>(v[t]);
        }
        std::vector<float> vout(n);
        for (size_t t = 0; t < n; ++t) vout[t] = static_cast<float>(acc[t]);
        out.add(ref.names[j], ad::Tensor::leaf(ref.tensors[j].shape(), std::move(vout), true));
    }
    return out;
}

ad::ParamSet fed_avg(const std::vector<ad::ParamSet>& params_list,
                     const std::vector<double>& weights) {
    std::vector<const ad::ParamSet*> ptrs;
    for (const auto& p : params_list) ptrs.push_back(&p);
    return fed_avg(ptrs, weights);
}

uint64_t fnv1a(const std::vector<uint8_t>& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

// ------------------------------------------------------------- training

namespace {

// Plain Dice training step: mean Dice over raw batch, plus (no_bel mode)
// mean Dice over the transforms, one Adam step at theta.
ClientState::Stats plain_step(ClientState& c, const RoundContext& ctx,
                              const std::vector<const EpisodicSample<float>*>& batch,
                              const std::vector<std::vector<Image>>& transforms) {
    c.theta.zero_grad();
    ad::Tensor raw_acc;
    for (const auto* s : batch) {
        auto out = segnet_forward(c.theta, ctx.net, *s->image);
        auto term = dice_loss(out.probs, s->label);
        raw_acc = raw_acc.defined() ? ad::add(raw_acc, term) : term;
    }
    auto loss = ad::scale(raw_acc, 1.f / static_cast<float>(batch.size()));
    ClientState::Stats st;
    st.l_seg_inner = loss.item();

    if (!transforms.empty()) {
        ad::Tensor t_acc;
        size_t t_count = 0;
        for (size_t i = 0; i < batch.size(); ++i)
            for (const auto& timg : transforms[i]) {
                auto out = segnet_forward(c.theta, ctx.net, timg);
                auto term = dice_loss(out.probs, batch[i]->label);
                t_acc = t_acc.defined() ? ad::add(t_acc, term) : term;
                ++t_count;
            }
        if (t_count) {
            auto t_loss = ad::scale(t_acc, 1.f / static_cast<float>(t_count));
            st.l_seg_meta = t_loss.item();
            loss = ad::add(loss, t_loss);
        }
    }
    ad::backward(loss);
    ad::adam_step(c.theta, ctx.lr, c.adam);
    st.steps = 1;
    return st;
}

// One CFSI transform against a uniformly chosen foreign client (no_bel
// augmentation path: one augmented view per sample per step).
Image single_transform(ClientState& c, const DistributionBank& bank, const RoundContext& ctx,
                       size_t sample_idx) {
    std::vector<int> foreign;
    for (int id : bank.client_ids())
        if (id != c.client_id) foreign.push_back(id);
    if (foreign.empty()) throw std::runtime_error("no_bel: no foreign bank entries");
    std::uniform_int_distribution<size_t> pick_client(0, foreign.size() - 1);
    const auto& entries = bank.entries_for(foreign[pick_client(c.rng)]);
    std::uniform_int_distribution<size_t> pick_entry(0, entries.size() - 1);
    const BankEntry& e = entries[pick_entry(c.rng)];
    const auto& spec = c.spectra[sample_idx];
    std::vector<double> amp(e.amplitude.begin(), e.amplitude.end());
    return inverse_dft(interpolate_amplitude(spec, amp, *ctx.mask, ctx.lambda.draw(c.rng)));
}

void train_client_round(ClientState& c, const DistributionBank& bank, const RoundContext& ctx,
                        int epochs, ClientState::Stats& total) {
    const bool elcfs = ctx.mode == TrainMode::Elcfs;

    for (int e = 0; e < epochs; ++e) {
        std::vector<size_t> idx(c.samples.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), c.rng);
        for (size_t start = 0; start < idx.size(); start += ctx.batch) {
            const size_t end = std::min(idx.size(), start + ctx.batch);
            std::vector<const EpisodicSample<float>*> batch;
            std::vector<std::vector<Image>> transforms;
            for (size_t i = start; i < end; ++i) {
                batch.push_back(&c.samples[idx[i]]);
                if (!elcfs) continue;
                if (ctx.no_cfsi) {
                    // lambda pinned to 0: the transform is the identity, so
                    // meta-test carries exact copies of the raw input
                    transforms.emplace_back(bank.client_count() - 1, *c.samples[idx[i]].image);
                } else if (ctx.no_bel) {
                    transforms.push_back({single_transform(c, bank, ctx, idx[i])});
                } else {
                    transforms.push_back(generate_meta_test_from_spectrum(
                        c.spectra[idx[i]], bank, c.client_id, *ctx.mask, ctx.lambda, c.rng));
                }
            }
            ClientState::Stats st;
            if (ctx.mode == TrainMode::Elcfs && !ctx.no_bel) {
                auto rec = episodic_step(c.theta, c.adam, ctx.lr, ctx.net, ctx.episodic, batch,
                                         transforms);
                st.l_seg_inner = rec.l_seg_inner;
                st.l_seg_meta = rec.l_seg_meta;
                st.l_boundary = rec.l_boundary;
                st.steps = 1;
            } else {
                st = plain_step(c, ctx, batch, transforms);
            }
            total.l_seg_inner += st.l_seg_inner;
            total.l_seg_meta += st.l_seg_meta;
            total.l_boundary += st.l_boundary;
            total.steps += st.steps;
        }
    }
}

std::shared_ptr<const std::vector<BinaryMask>> alias_label(const SyntheticSample& s) {
    // non-owning: datasets outlive clients within a run
    return std::shared_ptr<const std::vector<BinaryMask>>(
        std::shared_ptr<const std::vector<BinaryMask>>(), &s.label);
}

}  // namespace

ad::ParamSet run_round(const ad::ParamSet& global_theta, std::vector<ClientState>& clients,
                       const DistributionBank& bank, const RoundContext& ctx, int epochs,
                       int round_index, MessageLedger& ledger, RoundReport& report) {
    const auto t0 = std::chrono::steady_clock::now();
    if (clients.empty()) throw std::invalid_argument("run_round: no clients");
    for (const auto& c : clients)
        if (!c.data || c.samples.empty()) throw std::invalid_argument("run_round: client with empty dataset");

    // broadcast through serialized bytes; every client starts bit-identical
    const auto global_bytes = ad::serialize_params(global_theta);
    for (auto& c : clients) {
        ledger.record(round_index, -1, c.client_id, MessageKind::ModelParams, global_bytes);
        c.theta = ad::deserialize_params<float>(global_bytes, true);
    }

    std::vector<ClientState::Stats> stats(clients.size());
    if (ctx.threads > 1) {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < ctx.threads; ++t)
            pool.emplace_back([&]() {
                for (size_t i = next.fetch_add(1); i < clients.size(); i = next.fetch_add(1))
                    train_client_round(clients[i], bank, ctx, epochs, stats[i]);
            });
        for (auto& th : pool) th.join();
    } else {
        for (size_t i = 0; i < clients.size(); ++i)
            train_client_round(clients[i], bank, ctx, epochs, stats[i]);
    }

    // upload and aggregate, ascending client id (construction order)
    std::vector<ad::ParamSet> uploaded;
    std::vector<double> weights;
    for (auto& c : clients) {
        auto bytes = ad::serialize_params(c.theta);
        uploaded.push_back(ad::deserialize_params<float>(bytes, true));
        weights.push_back(static_cast<double>(c.sample_count));
        ledger.record(round_index, c.client_id, -1, MessageKind::ModelParams, std::move(bytes));
    }
    auto new_global = fed_avg(uploaded, weights);

    report.round = round_index;
    report.theta_checksum = fnv1a(ad::serialize_params(new_global));
    for (size_t i = 0; i < clients.size(); ++i) {
        const auto& st = stats[i];
        const double n = std::max<size_t>(1, st.steps);
        report.clients.push_back({clients[i].client_id, st.l_seg_inner / n, st.l_seg_meta / n,
                                  st.l_boundary / n, clients[i].sample_count});
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return new_global;
}

AggregateMetrics evaluate_model(const ad::ParamSet& theta, const SegNetConfig& net,
                                const std::vector<SyntheticSample>& samples) {
    std::vector<SampleMetrics> per_sample;
    for (const auto& s : samples) {
        auto out = segnet_forward(theta, net, s.image);
        const int nc = out.probs.shape()[0], h = out.probs.shape()[1], w = out.probs.shape()[2];
        std::vector<BinaryMask> pred;
        for (int c = 0; c < nc; ++c) {
            BinaryMask m(h, w);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x)
                    if (out.probs.value()[(static_cast<size_t>(c) * h + y) * w + x] > 0.5f)
                        m.set(y, x, 1);
            pred.push_back(std::move(m));
        }
        per_sample.push_back(evaluate_sample(pred, s.label));
    }
    return aggregate(per_sample);
}

// ------------------------------------------------------------- experiment

std::string mode_label(const ExperimentConfig& cfg) {
    if (cfg.mode == "fedavg") return "fedavg";
    std::string label = "elcfs";
    if (cfg.no_cfsi) label += "_no_cfsi";
    if (cfg.no_bel) label += "_no_bel";
    if (cfg.no_boundary_loss) label += "_no_boundary_loss";
    return label;
}

namespace {

uint64_t mix(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

int resolve_domain(const std::string& name, int k) {
    int id = -1;
    if (name.size() == 1 && name[0] >= 'A' && name[0] <= 'Z')
        id = name[0] - 'A';
    else if (!name.empty() && std::all_of(name.begin(), name.end(), ::isdigit))
        id = std::stoi(name);
    if (id < 0 || id >= k)
        throw std::invalid_argument("hold-out domain '" + name + "' is not one of the " +
                                    std::to_string(k) + " domains");
    return id;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, uint64_t seed, int n_sources) {
    cfg.validate();

    std::vector<Dataset> suite;
    if (cfg.task == "synth4") {
        SynthConfig sc;
        sc.img_size = cfg.img_size;
        sc.n_train = cfg.n_train;
        sc.n_test = cfg.n_test;
        suite = default_domain_suite(4, seed, sc);
    } else {
        suite = load_external(cfg.task.substr(std::string("external:").size()));
    }
    const int k_domains = static_cast<int>(suite.size());
    const int held_out = resolve_domain(cfg.hold_out, k_domains);

    std::vector<int> source_ids;
    for (const auto& ds : suite)
        if (ds.domain_id != held_out) source_ids.push_back(ds.domain_id);
    if (n_sources > 0 && n_sources < static_cast<int>(source_ids.size()))
        source_ids.resize(n_sources);

    SegNetConfig net;
    net.in_channels = suite[0].train.at(0).image.c;
    net.base_width = cfg.base_width;
    net.depth = cfg.depth;
    net.num_classes = cfg.num_classes;

    EpisodicConfig ep;
    ep.beta = cfg.beta;
    ep.gamma = cfg.no_boundary_loss ? 0.0 : cfg.gamma;
    ep.tau = cfg.tau;
    ep.infonce_standard = cfg.infonce_standard;
    ep.r_bd = cfg.r_bd;
    ep.r_bg = cfg.r_bg;

    const int img_h = suite[0].train.at(0).image.h;
    const int img_w = suite[0].train.at(0).image.w;
    FreqMask mask = build_mask(img_h, img_w, cfg.alpha);

    RoundContext ctx;
    ctx.net = net;
    ctx.episodic = ep;
    ctx.lambda = cfg.lambda();
    ctx.lr = cfg.lr;
    ctx.batch = cfg.batch;
    ctx.mode = cfg.mode == "fedavg" ? TrainMode::FedavgBaseline : TrainMode::Elcfs;
    ctx.no_cfsi = cfg.no_cfsi;
    ctx.no_bel = cfg.no_bel;
    ctx.mask = &mask;
    ctx.threads = 1;
    if (cfg.parallel_clients) {
        const char* env = std::getenv("FEDDG_THREADS");
        ctx.threads = env ? std::max(1, std::atoi(env))
                          : static_cast<int>(std::thread::hardware_concurrency());
    }

    RunResult result;
    result.mode_label = mode_label(cfg);
    result.held_out = suite[held_out].name;
    result.seed = seed;
    result.n_sources = static_cast<int>(source_ids.size());
    result.ledger = std::make_shared<MessageLedger>();

    // clients over the source domains; the held-out domain contributes
    // neither parameters nor amplitudes
    std::vector<ClientState> clients;
    DistributionBank bank;
    for (int id : source_ids) {
        const Dataset& ds = suite[id];
        ClientState c;
        c.client_id = id;
        c.data = &ds;
        c.rng.seed(mix(seed, 1000 + static_cast<uint64_t>(id)));
        c.sample_count = ds.train.size();
        for (const auto& s : ds.train) {
            c.samples.push_back(
                make_episodic_sample<float>(s.image, alias_label(s), cfg.r_bd, cfg.r_bg));
            c.spectra.push_back(forward_dft(s.image));
        }
        std::vector<Image> imgs;
        for (const auto& s : ds.train) imgs.push_back(s.image);
        auto entries = contribute(id, imgs);
        if (cfg.bank_crop)
            for (auto& e : entries)
                for (int y = 0; y < e.h; ++y)
                    for (int x = 0; x < e.w; ++x)
                        if (!mask.at(y, x))
                            for (int ch = 0; ch < e.c; ++ch)
                                e.amplitude[(static_cast<size_t>(y) * e.w + x) * e.c + ch] = 0.f;
        for (auto& e : entries) {
            result.ledger->record(0, id, -1, MessageKind::BankEntry,
                                  serialize_entries(id, {e}));
            bank.add(std::move(e));
        }
        clients.push_back(std::move(c));
    }

    ad::ParamSet global = segnet_init<float>(net, mix(seed, 0x5eed));
    for (int round = 1; round <= cfg.rounds; ++round) {
        RoundReport report;
        global = run_round(global, clients, bank, ctx, cfg.local_epochs, round, *result.ledger,
                           report);
        if (round % cfg.eval_interval == 0 || round == cfg.rounds)
            report.val = evaluate_model(global, net, suite[held_out].test);
        result.rounds.push_back(std::move(report));
    }
    result.final_eval = result.rounds.back().val.value();
    result.final_theta = global;
    return result;
}

nlohmann::json RunResult::summary_row() const {
    nlohmann::json per_class = nlohmann::json::array();
    for (size_t c = 0; c < final_eval.mean_per_class.size(); ++c)
        per_class.push_back({{"class", c},
                             {"dice", final_eval.mean_per_class[c].dice},
                             {"hd", final_eval.mean_per_class[c].hd}});
    return {{"mode", mode_label},     {"held_out", held_out},
            {"seed", seed},           {"n_sources", n_sources},
            {"dice", final_eval.mean_dice}, {"hd", final_eval.mean_hd},
            {"per_class", per_class}};
}

// ------------------------------------------------------------- reporting

namespace {

void write_report_csv(const std::string& path, const RunResult& r) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("report: cannot write " + path);
    f << "round,mode,held_out,client_id,l_seg_inner,l_seg_meta,l_boundary,val_dice,val_hd\n";
    for (const auto& round : r.rounds) {
        for (const auto& c : round.clients)
            f << round.round << ',' << r.mode_label << ',' << r.held_out << ',' << c.client_id
              << ',' << c.l_seg_inner << ',' << c.l_seg_meta << ',' << c.l_boundary << ",,\n";
        if (round.val)
            f << round.round << ',' << r.mode_label << ',' << r.held_out << ",-1,,,,"
              << round.val->mean_dice << ',' << round.val->mean_hd << '\n';
    }
}

std::string run_tag(const RunResult& r, bool sweep) {
    std::string tag = r.mode_label + "_" + r.held_out + "_s" + std::to_string(r.seed);
    if (sweep) tag += "_c" + std::to_string(r.n_sources);
    return tag;
}

}  // namespace

nlohmann::json run_and_report(const ExperimentConfig& raw_cfg) {
    ExperimentConfig cfg = raw_cfg;
    const std::string warning = cfg.normalize();
    if (!warning.empty()) std::cerr << warning << "\n";
    cfg.validate();

    nlohmann::json summary;
    summary["config"] = cfg.to_json();
    if (!warning.empty()) summary["warning"] = warning;
    if (cfg.dry_run) {
        std::cout << "resolved configuration (dry run):\n" << cfg.to_json().dump(2) << "\n";
        return summary;
    }

    fs::create_directories(cfg.out);
    int max_sources = 3;  // synth4 leave-one-out
    if (cfg.task.rfind("external:", 0) == 0)
        max_sources =
            static_cast<int>(load_external(cfg.task.substr(9)).size()) - 1;
    const auto counts = cfg.client_counts(max_sources);
    const bool sweep = counts.size() > 1;

    nlohmann::json rows = nlohmann::json::array();
    std::vector<RunResult> results;
    for (int n_sources : counts)
        for (uint64_t seed : cfg.seeds) {
            RunResult r = run_experiment(cfg, seed, n_sources);
            write_report_csv((fs::path(cfg.out) / ("report_" + run_tag(r, sweep) + ".csv")).string(),
                             r);
            ad::save_checkpoint(r.final_theta,
                                (fs::path(cfg.out) / ("theta_" + run_tag(r, sweep) + ".fdck")).string());
            if (cfg.dump_ledger)
                r.ledger->write_csv((fs::path(cfg.out) / ("ledger_" + run_tag(r, sweep) + ".csv")).string());
            rows.push_back(r.summary_row());
            results.push_back(std::move(r));
        }
    summary["runs"] = rows;

    // per (held_out, mode, n_sources): mean +- std over seeds
    nlohmann::json agg = nlohmann::json::array();
    for (int n_sources : counts) {
        std::vector<double> dices, hds;
        for (const auto& r : results)
            if (r.n_sources == n_sources) {
                dices.push_back(r.final_eval.mean_dice);
                hds.push_back(r.final_eval.mean_hd);
            }
        const double n = static_cast<double>(dices.size());
        const double dmean = std::accumulate(dices.begin(), dices.end(), 0.0) / n;
        const double hmean = std::accumulate(hds.begin(), hds.end(), 0.0) / n;
        double dvar = 0, hvar = 0;
        for (size_t i = 0; i < dices.size(); ++i) {
            dvar += (dices[i] - dmean) * (dices[i] - dmean);
            hvar += (hds[i] - hmean) * (hds[i] - hmean);
        }
        agg.push_back({{"held_out", cfg.hold_out},
                       {"mode", mode_label(cfg)},
                       {"n_sources", n_sources},
                       {"seeds", cfg.seeds.size()},
                       {"dice_mean", dmean},
                       {"dice_std", std::sqrt(dvar / n)},
                       {"hd_mean", hmean},
                       {"hd_std", std::sqrt(hvar / n)}});
    }
    summary["aggregate"] = agg;

    std::ofstream sf(fs::path(cfg.out) / "summary.json");
    sf << summary.dump(2) << "\n";
    return summary;
}

}  // namespace feddg
