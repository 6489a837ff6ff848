#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "feddg/objectives.hpp"
#include "feddg/segnet.hpp"
#include "feddg/synthdata.hpp"

using namespace feddg;

namespace {

Image random_image(int h, int w, int c, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    Image img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(d(rng));
    return img;
}

}  // namespace

TEST_CASE("init_params: deterministic per seed, distinct across seeds") {
    SegNetConfig cfg;
    auto a = segnet_init<float>(cfg, 5);
    auto b = segnet_init<float>(cfg, 5);
    auto c = segnet_init<float>(cfg, 6);
    REQUIRE(a.size() == b.size());
    bool all_equal = true, any_diff_c = false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].value() != b[i].value()) all_equal = false;
        if (a[i].value() != c[i].value()) any_diff_c = true;
    }
    CHECK(all_equal);
    CHECK(any_diff_c);
}

TEST_CASE("parameter budget stays under 100k at the default config") {
    SegNetConfig cfg;
    auto p = segnet_init<float>(cfg, 1);
    CHECK(p.numel() < 100000);
    CHECK(p.numel() > 1000);
}

TEST_CASE("forward: probability range, shape contract, determinism") {
    SegNetConfig cfg;
    auto params = segnet_init<float>(cfg, 2);
    for (int n : {32, 64, 96}) {
        if (n % (1 << cfg.depth)) continue;
        auto img = random_image(n, n, 1, 100 + n);
        auto out = segnet_forward(params, cfg, img);
        CHECK(out.probs.shape() == ad::Shape{cfg.num_classes, n, n});
        CHECK(out.feat_maps.shape() == ad::Shape{cfg.feat_channels(), n, n});
        for (float v : out.probs.value()) {
            CHECK(v >= 0.f);
            CHECK(v <= 1.f);
        }
    }
    auto img = random_image(32, 32, 1, 7);
    auto o1 = segnet_forward(params, cfg, img);
    auto o2 = segnet_forward(params, cfg, img);
    CHECK(o1.probs.value() == o2.probs.value());
    CHECK(o1.feat_maps.value() == o2.feat_maps.value());
}

TEST_CASE("forward rejects channel mismatch") {
    SegNetConfig cfg;
    auto params = segnet_init<float>(cfg, 3);
    auto img = random_image(32, 32, 3, 9);
    CHECK_THROWS_AS(segnet_forward(params, cfg, img), std::invalid_argument);
    SegNetConfig bad;
    bad.base_width = 2;
    CHECK_THROWS_AS(segnet_init<float>(bad, 1), std::invalid_argument);
}

TEST_CASE("gradient reaches essentially every parameter") {
    SegNetConfig cfg;
    auto params = segnet_init<float>(cfg, 11);
    auto img = random_image(32, 32, 1, 13);
    std::vector<float> lv(static_cast<size_t>(cfg.num_classes) * 32 * 32, 0.f);
    std::mt19937_64 rng(17);
    for (auto& v : lv) v = rng() % 4 == 0 ? 1.f : 0.f;
    auto label = ad::Tensor::leaf({cfg.num_classes, 32, 32}, lv, false);

    params.zero_grad();
    auto out = segnet_forward(params, cfg, img);
    auto loss = ad::add(dice_loss(out.probs, label), ad::mean(out.feat_maps));
    ad::backward(loss);

    size_t zero = 0, total = 0;
    for (const auto& t : params.tensors)
        for (float g : t.grad_view()) {
            total += 1;
            if (g == 0.f) ++zero;
        }
    CHECK(static_cast<double>(zero) / static_cast<double>(total) <= 0.01);
}

TEST_CASE("initial loss sits near the 0.5-predictor dice on the synthetic corpus") {
    SegNetConfig cfg;
    auto params = segnet_init<float>(cfg, 21);
    auto samples = make_domain(0, preset_styles()[0], 10, 31, 64);

    // expected dice loss of a constant-0.5 predictor on these labels
    double expect = 0.0, got = 0.0;
    for (const auto& s : samples) {
        double per_class = 0.0;
        for (const auto& cls : s.label) {
            const double ones = static_cast<double>(cls.count());
            per_class += 1.0 - (2.0 * 0.5 * ones + 1e-5) / (0.5 * 64 * 64 + ones + 1e-5);
        }
        expect += per_class / 2.0;

        std::vector<float> lv(static_cast<size_t>(2) * 64 * 64);
        for (int c = 0; c < 2; ++c)
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    lv[(static_cast<size_t>(c) * 64 + y) * 64 + x] = s.label[c].at(y, x);
        auto label = ad::Tensor::leaf({2, 64, 64}, lv, false);
        auto out = segnet_forward(params, cfg, s.image);
        got += dice_loss(out.probs, label).item();
    }
    expect /= samples.size();
    got /= samples.size();
    CHECK(std::abs(got - expect) <= 0.15);
}
