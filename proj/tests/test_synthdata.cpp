#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "feddg/federation.hpp"
#include "feddg/synthdata.hpp"

using namespace feddg;
namespace fs = std::filesystem;

namespace {

// Mean amplitude energy over the annulus at integer radius f (+- 1 bin).
double annulus_energy(const Image& img, double freq) {
    auto spec = forward_dft(img);
    const int cy = img.h / 2, cx = img.w / 2;
    double acc = 0.0;
    size_t count = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double r = std::hypot(y - cy, x - cx);
            if (std::abs(r - freq) <= 1.0) {
                const double a = spec.amplitude[static_cast<size_t>(y) * img.w + x];
                acc += a * a;
                ++count;
            }
        }
    return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("make_domain: determinism and style rendering") {
    auto style = preset_styles()[0];
    auto a = make_domain(0, style, 6, 42, 32);
    auto b = make_domain(0, style, 6, 42, 32);
    REQUIRE(a.size() == 6);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.data == b[i].image.data);
        CHECK(a[i].label[0].m == b[i].label[0].m);
        CHECK(a[i].label[1].m == b[i].label[1].m);
    }
    auto c = make_domain(0, style, 6, 43, 32);
    CHECK(a[0].image.data != c[0].image.data);

    SUBCASE("zero texture and noise leaves piecewise-constant plus gradient") {
        DomainStyle flat;
        flat.intensity_bias = 0.1;
        flat.contrast_gain = 1.0;
        flat.texture_amp = 0.0;
        flat.noise_sigma = 0.0;
        flat.grad_dx = 0.2;
        flat.grad_dy = -0.1;
        auto samples = make_domain(1, flat, 2, 7, 32);
        for (const auto& s : samples) {
            // subtracting the planar gradient must leave exactly 3 values
            std::set<float> levels;
            for (int y = 0; y < 32; ++y)
                for (int x = 0; x < 32; ++x) {
                    const double u = x / 31.0, v = y / 31.0;
                    const double base =
                        s.image.at(y, x, 0) - 0.2 * (u - 0.5) - (-0.1) * (v - 0.5);
                    levels.insert(static_cast<float>(std::round(base * 1e5) / 1e5));
                }
            CHECK(levels.size() <= 3);
        }
    }
    SUBCASE("degenerate style rejected") {
        DomainStyle bad;
        bad.contrast_gain = 0.0;
        CHECK_THROWS_AS(make_domain(0, bad, 1, 1, 32), std::invalid_argument);
        DomainStyle neg;
        neg.noise_sigma = -1.0;
        CHECK_THROWS_AS(make_domain(0, neg, 1, 1, 32), std::invalid_argument);
    }
}

TEST_CASE("labels satisfy nesting and area invariants for every sample") {
    for (int d = 0; d < 4; ++d) {
        auto samples = make_domain(d, preset_styles()[d], 40, 11, 64);
        for (const auto& s : samples) {
            REQUIRE(s.label.size() == 2);
            const double frame = 64.0 * 64.0;
            for (const auto& cls : s.label) {
                const double frac = cls.count() / frame;
                CHECK(frac >= 0.02);
                CHECK(frac <= 0.40);
            }
            for (size_t i = 0; i < s.label[1].m.size(); ++i)
                if (s.label[1].m[i]) CHECK(s.label[0].m[i] == 1);  // cup inside disc
        }
    }
}

TEST_CASE("spectral energy concentrates at each domain's texture frequency") {
    // Below ~4 cycles/image the ellipse content itself dominates the
    // annulus, so the lowest usable texture band for this check starts at 4;
    // measured ratios there are ~4.8x and ~16x.
    DomainStyle low = preset_styles()[0];
    low.texture_freq = 4.0;
    DomainStyle high = preset_styles()[0];
    high.texture_freq = 12.0;

    double low_at4 = 0, high_at4 = 0, low_at12 = 0, high_at12 = 0;
    const int n = 100;
    auto ls = make_domain(0, low, n, 5, 64);
    auto hs = make_domain(1, high, n, 5, 64);
    for (int i = 0; i < n; ++i) {
        low_at4 += annulus_energy(ls[i].image, 4.0);
        high_at4 += annulus_energy(hs[i].image, 4.0);
        low_at12 += annulus_energy(ls[i].image, 12.0);
        high_at12 += annulus_energy(hs[i].image, 12.0);
    }
    CHECK(low_at4 / high_at4 >= 3.0);
    CHECK(high_at12 / low_at12 >= 3.0);
}

TEST_CASE("default_domain_suite: presets, splits, and geometry parity") {
    SynthConfig cfg;
    cfg.n_train = 50;  // 200 samples across 4 domains for the Monte-Carlo check
    auto suite = default_domain_suite(4, 9, cfg);
    REQUIRE(suite.size() == 4);
    for (const auto& ds : suite) {
        CHECK(ds.train.size() == 50);
        CHECK(ds.test.size() == 20);
        std::set<int> ids;
        for (const auto& s : ds.train) ids.insert(s.sample_id);
        for (const auto& s : ds.test) {
            CHECK(ids.count(s.sample_id) == 0);  // split disjoint by sample_id
            ids.insert(s.sample_id);
        }
    }
    CHECK_THROWS_AS(default_domain_suite(9, 1, cfg), std::invalid_argument);

    // style-only shift: mean foreground area per domain within +-10%
    std::vector<double> mean_area(4, 0.0);
    for (int d = 0; d < 4; ++d) {
        for (const auto& s : suite[d].train) mean_area[d] += static_cast<double>(s.label[0].count());
        mean_area[d] /= suite[d].train.size();
    }
    const double overall = (mean_area[0] + mean_area[1] + mean_area[2] + mean_area[3]) / 4.0;
    for (int d = 0; d < 4; ++d) {
        CHECK(mean_area[d] >= 0.9 * overall);
        CHECK(mean_area[d] <= 1.1 * overall);
    }
}

TEST_CASE("dataset save/load roundtrip is exact") {
    SynthConfig cfg;
    cfg.img_size = 32;
    cfg.n_train = 3;
    cfg.n_test = 2;
    auto suite = default_domain_suite(2, 21, cfg);
    const std::string dir = "/tmp/feddg_ds_test";
    fs::remove_all(dir);
    save_dataset(dir, suite);
    auto loaded = load_external(dir);
    REQUIRE(loaded.size() == 2);
    for (int d = 0; d < 2; ++d) {
        REQUIRE(loaded[d].train.size() == 3);
        REQUIRE(loaded[d].test.size() == 2);
        for (size_t i = 0; i < 3; ++i) {
            CHECK(loaded[d].train[i].image.data == suite[d].train[i].image.data);
            CHECK(loaded[d].train[i].label[0].m == suite[d].train[i].label[0].m);
            CHECK(loaded[d].train[i].label[1].m == suite[d].train[i].label[1].m);
            CHECK(loaded[d].train[i].sample_id == suite[d].train[i].sample_id);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("cross-domain shift is real: single-domain training drops >= 5 Dice points") {
    // calibration run for the preset severity: plain Dice training on domain
    // A only, evaluated on A vs B test splits
    SynthConfig sc;
    auto suite = default_domain_suite(4, 1, sc);

    SegNetConfig net;
    auto theta = segnet_init<float>(net, 99);
    ad::AdamState adam;
    std::mt19937_64 rng(7);

    std::vector<EpisodicSample<float>> samples;
    std::vector<std::shared_ptr<const std::vector<BinaryMask>>> labels;
    for (const auto& s : suite[0].train) {
        labels.push_back(std::shared_ptr<const std::vector<BinaryMask>>(
            std::shared_ptr<void>(), &s.label));
        samples.push_back(make_episodic_sample<float>(s.image, labels.back(), 1, 3));
    }
    const int steps = 400, batch = 5;
    for (int step = 0; step < steps; ++step) {
        theta.zero_grad();
        ad::Tensor acc;
        for (int b = 0; b < batch; ++b) {
            const auto& s = samples[rng() % samples.size()];
            auto out = segnet_forward(theta, net, *s.image);
            auto term = dice_loss(out.probs, s.label);
            acc = acc.defined() ? ad::add(acc, term) : term;
        }
        auto loss = ad::scale(acc, 1.f / batch);
        ad::backward(loss);
        ad::adam_step(theta, 1e-3, adam);
    }

    const double on_a = evaluate_model(theta, net, suite[0].test).mean_dice;
    const double on_b = evaluate_model(theta, net, suite[1].test).mean_dice;
    const double on_d = evaluate_model(theta, net, suite[3].test).mean_dice;
    INFO("dice A=", on_a, " B=", on_b, " D=", on_d);
    CHECK(on_a > 0.80);  // the task itself is learnable in-domain
    CHECK(on_a - on_b >= 0.05);
    CHECK(on_a - on_d >= 0.05);
}

TEST_CASE("load_external error paths name the offending sample") {
    const std::string dir = "/tmp/feddg_ds_err";
    fs::remove_all(dir);

    SUBCASE("empty directory is an error") {
        fs::create_directories(dir);
        CHECK_THROWS_AS(load_external(dir), std::runtime_error);
    }
    SUBCASE("missing label file") {
        SynthConfig cfg;
        cfg.img_size = 32;
        cfg.n_train = 2;
        cfg.n_test = 1;
        save_dataset(dir, default_domain_suite(2, 3, cfg));
        fs::remove(fs::path(dir) / "d0_s1.lbl");
        try {
            load_external(dir);
            FAIL("expected an exception");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("d0_s1") != std::string::npos);
        }
    }
    SUBCASE("label shape mismatch") {
        SynthConfig cfg;
        cfg.img_size = 32;
        cfg.n_train = 2;
        cfg.n_test = 1;
        save_dataset(dir, default_domain_suite(2, 3, cfg));
        // rewrite one label with the wrong spatial size
        std::ofstream f(fs::path(dir) / "d0_s0.lbl", std::ios::binary);
        const uint32_t magic = 0x424c4446, h = 16, w = 16, c = 2;
        f.write(reinterpret_cast<const char*>(&magic), 4);
        f.write(reinterpret_cast<const char*>(&h), 4);
        f.write(reinterpret_cast<const char*>(&w), 4);
        f.write(reinterpret_cast<const char*>(&c), 4);
        std::vector<float> payload(16 * 16 * 2, 0.f);
        f.write(reinterpret_cast<const char*>(payload.data()), payload.size() * 4);
        f.close();
        try {
            load_external(dir);
            FAIL("expected an exception");
        } catch (const std::runtime_error& e) {
            CHECK(std::string(e.what()).find("d0_s0") != std::string::npos);
        }
    }
    fs::remove_all(dir);
}
