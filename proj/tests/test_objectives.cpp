#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "feddg/objectives.hpp"

using namespace feddg;
using T = ad::TensorT<double>;

namespace {

T make_feat(int c, int h, int w, uint64_t seed, bool requires_grad = true) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    std::vector<double> v(static_cast<size_t>(c) * h * w);
    for (auto& x : v) x = d(rng);
    return T::leaf({c, h, w}, std::move(v), requires_grad);
}

BinaryMask solid_square(int n, int y0, int x0, int side) {
    BinaryMask m(n, n);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m.set(y, x, 1);
    return m;
}

BinaryMask random_blob(int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pos(2, n - 5);
    std::uniform_int_distribution<int> side(2, n / 2);
    return solid_square(n, pos(rng) % (n / 2), pos(rng) % (n / 2), side(rng));
}

// Plain-double evaluation of Eq. 6 / Eq. 7 with no autodiff anywhere. The
// brute-force pair loop is the oracle the implementation must match.
double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double oracle_info_nce(size_t m, size_t p, const std::vector<std::vector<double>>& vecs,
                       const std::vector<int>& kind, double tau, bool standard) {
    double denom = 0.0;
    for (size_t q = 0; q < vecs.size(); ++q) {
        if (q == m || kind[q] == kind[m]) continue;
        denom += std::exp(cosine(vecs[m], vecs[q]) / tau);
    }
    if (standard) denom += std::exp(cosine(vecs[m], vecs[p]) / tau);
    return -std::log(std::exp(cosine(vecs[m], vecs[p]) / tau) / denom);
}

double oracle_boundary(const std::vector<std::vector<double>>& vecs, const std::vector<int>& kind,
                       double tau, size_t k) {
    double acc = 0.0;
    for (size_t m = 0; m < vecs.size(); ++m)
        for (size_t p = m + 1; p < vecs.size(); ++p)
            if (kind[m] == kind[p]) acc += oracle_info_nce(m, p, vecs, kind, tau, false);
    return acc / static_cast<double>(k * (k - 1));
}

}  // namespace

TEST_CASE("dice_loss: perfect prediction, total miss, half-confidence oracle") {
    const int h = 8, w = 8;
    std::vector<double> lbl(static_cast<size_t>(2) * h * w, 0.0);
    for (int i = 0; i < h * w / 2; ++i) lbl[i] = 1.0;               // class 0: half ones
    for (int i = h * w; i < h * w + 10; ++i) lbl[i] = 1.0;          // class 1: 10 ones
    auto label = T::leaf({2, h, w}, lbl, false);

    SUBCASE("probs equal to binary label") {
        auto probs = T::leaf({2, h, w}, lbl, false);
        CHECK(dice_loss(probs, label).item() < 1e-4);
    }
    SUBCASE("probs = 1 - label") {
        std::vector<double> inv(lbl.size());
        for (size_t i = 0; i < lbl.size(); ++i) inv[i] = 1.0 - lbl[i];
        auto probs = T::leaf({2, h, w}, inv, false);
        CHECK(dice_loss(probs, label).item() > 0.999);
    }
    SUBCASE("constant 0.5 against the closed-form oracle") {
        auto probs = T::full({2, h, w}, 0.5, false);
        const double s = 1e-5;
        auto cls = [&](double ones) {
            return 1.0 - (2.0 * 0.5 * ones + s) / (0.5 * h * w + ones + s);
        };
        const double expect = 0.5 * (cls(h * w / 2.0) + cls(10.0));
        CHECK(dice_loss(probs, label).item() == doctest::Approx(expect).epsilon(1e-9));
    }
    SUBCASE("non-binary label rejected") {
        auto bad = T::full({2, h, w}, 0.4, false);
        auto probs = T::full({2, h, w}, 0.5, false);
        CHECK_THROWS_AS(dice_loss(probs, bad), std::invalid_argument);
    }
}

TEST_CASE("dice_loss lives in [0,1] and decreases toward the label") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    const int h = 8, w = 8;
    std::vector<double> lbl(static_cast<size_t>(2) * h * w);
    for (auto& v : lbl) v = d(rng) > 0.6 ? 1.0 : 0.0;
    auto label = T::leaf({2, h, w}, lbl, false);
    std::vector<double> start(lbl.size());
    for (auto& v : start) v = d(rng);

    double prev = 2.0;
    for (int step = 0; step <= 4; ++step) {
        const double a = step / 4.0;
        std::vector<double> probs(lbl.size());
        for (size_t i = 0; i < lbl.size(); ++i) probs[i] = (1 - a) * start[i] + a * lbl[i];
        const double loss = dice_loss(T::leaf({2, h, w}, probs, false), label).item();
        CHECK(loss >= 0.0);
        CHECK(loss <= 1.0);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("extract_boundary_masks: enumerated 5x5 square in 11x11") {
    // brute-force morphology oracle on the explicit grid
    auto oracle_dilate = [](const BinaryMask& m, int r) {
        BinaryMask cur = m;
        for (int it = 0; it < r; ++it) {
            BinaryMask next(cur.h, cur.w);
            for (int y = 0; y < cur.h; ++y)
                for (int x = 0; x < cur.w; ++x) {
                    bool v = cur.at(y, x);
                    if (y > 0) v = v || cur.at(y - 1, x);
                    if (y < cur.h - 1) v = v || cur.at(y + 1, x);
                    if (x > 0) v = v || cur.at(y, x - 1);
                    if (x < cur.w - 1) v = v || cur.at(y, x + 1);
                    next.set(y, x, v);
                }
            cur = next;
        }
        return cur;
    };
    auto oracle_erode = [](const BinaryMask& m, int r) {
        BinaryMask cur = m;
        for (int it = 0; it < r; ++it) {
            BinaryMask next(cur.h, cur.w);
            for (int y = 0; y < cur.h; ++y)
                for (int x = 0; x < cur.w; ++x) {
                    bool v = cur.at(y, x);
                    v = v && (y > 0 && cur.at(y - 1, x)) && (y < cur.h - 1 && cur.at(y + 1, x)) &&
                        (x > 0 && cur.at(y, x - 1)) && (x < cur.w - 1 && cur.at(y, x + 1));
                    next.set(y, x, v);
                }
            cur = next;
        }
        return cur;
    };

    auto label = solid_square(11, 3, 3, 5);
    auto masks = extract_boundary_masks(label, 1, 2);
    REQUIRE(masks.usable());

    const auto d1 = oracle_dilate(label, 1);
    const auto e1 = oracle_erode(label, 1);
    const auto d3 = oracle_dilate(label, 3);
    size_t bd_expect = 0, bg_expect = 0;
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            if (d1.at(y, x) != e1.at(y, x)) ++bd_expect;
            if (d3.at(y, x) && !d1.at(y, x)) ++bg_expect;
        }
    CHECK(masks.bd.count() == bd_expect);
    CHECK(masks.bg.count() == bg_expect);
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            CHECK(masks.bd.at(y, x) == (d1.at(y, x) != e1.at(y, x) ? 1 : 0));
            CHECK(masks.bg.at(y, x) == ((d3.at(y, x) && !d1.at(y, x)) ? 1 : 0));
        }
}

TEST_CASE("extract_boundary_masks: degenerate labels are flagged, not fatal") {
    BinaryMask empty(9, 9);
    auto m0 = extract_boundary_masks(empty, 1, 3);
    CHECK(m0.label_empty);
    CHECK_FALSE(m0.usable());

    BinaryMask full(9, 9);
    for (auto& v : full.m) v = 1;
    auto m1 = extract_boundary_masks(full, 1, 3);
    CHECK_FALSE(m1.label_empty);
    CHECK(m1.bg_empty);  // dilation saturates the frame, no background ring
    CHECK_FALSE(m1.usable());
    CHECK(erode(full, 1).count() > 0);

    CHECK_THROWS_AS(extract_boundary_masks(full, 0, 3), std::invalid_argument);
    CHECK_THROWS_AS(extract_boundary_masks(full, 2, 2), std::invalid_argument);
}

TEST_CASE("boundary and background masks are disjoint on random blobs") {
    for (int trial = 0; trial < 1000; ++trial) {
        auto label = random_blob(16, 9000 + trial);
        auto masks = extract_boundary_masks(label, 1, 3);
        auto overlap = mask_and(masks.bd, masks.bg);
        CHECK(overlap.count() == 0);
    }
}

TEST_CASE("masked_average_pool: constants, single pixel, brute-force oracle") {
    SUBCASE("constant per channel") {
        std::vector<double> v;
        for (int c = 0; c < 3; ++c) v.insert(v.end(), 16, 1.5 * (c + 1));
        auto feat = T::leaf({3, 4, 4}, v, false);
        auto mask = solid_square(4, 1, 1, 2);
        auto emb = masked_average_pool(feat, mask, RegionKind::Boundary, 0);
        for (int c = 0; c < 3; ++c)
            CHECK(emb.vector.value()[c] == doctest::Approx(1.5 * (c + 1)));
        CHECK(emb.kind == RegionKind::Boundary);
    }
    SUBCASE("single pixel mask picks that pixel") {
        auto feat = make_feat(3, 4, 4, 77, false);
        BinaryMask mask(4, 4);
        mask.set(2, 3, 1);
        auto emb = masked_average_pool(feat, mask, RegionKind::Background, 1);
        for (int c = 0; c < 3; ++c)
            CHECK(emb.vector.value()[c] ==
                  doctest::Approx(feat.value()[(c * 4 + 2) * 4 + 3]));
    }
    SUBCASE("random feature map against a double-loop oracle") {
        auto feat = make_feat(5, 6, 7, 78, false);
        auto mask = random_blob(6, 79);
        mask.w = 6;  // random_blob is square; rebuild at the right shape
        BinaryMask m(6, 7);
        std::mt19937_64 rng(80);
        for (auto& v : m.m) v = rng() % 3 == 0;
        if (m.count() == 0) m.set(0, 0, 1);
        auto emb = masked_average_pool(feat, m, RegionKind::Boundary, 0);
        for (int c = 0; c < 5; ++c) {
            double acc = 0.0, cnt = 0.0;
            for (int y = 0; y < 6; ++y)
                for (int x = 0; x < 7; ++x)
                    if (m.at(y, x)) {
                        acc += feat.value()[(static_cast<size_t>(c) * 6 + y) * 7 + x];
                        cnt += 1.0;
                    }
            CHECK(emb.vector.value()[c] == doctest::Approx(acc / cnt).epsilon(1e-9));
        }
    }
    SUBCASE("empty mask rejected") {
        auto feat = make_feat(2, 4, 4, 81, false);
        BinaryMask empty(4, 4);
        CHECK_THROWS_AS(masked_average_pool(feat, empty, RegionKind::Boundary, 0),
                        std::invalid_argument);
    }
}

TEST_CASE("info_nce_pair: scale invariance, K=2 oracle, closed form") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    const int dim = 6;
    auto mk = [&](int kind, double scale_factor) {
        std::vector<double> v(dim);
        for (auto& x : v) x = d(rng) * scale_factor;
        return std::pair<std::vector<double>, int>(v, kind);
    };

    SUBCASE("cosine scale invariance") {
        std::vector<std::vector<double>> vecs;
        std::vector<int> kind = {0, 0, 1, 1};
        for (int i = 0; i < 4; ++i) vecs.push_back(mk(kind[i], 1.0).first);

        auto build = [&](double c) {
            std::vector<RegionEmbeddingT<double>> all;
            for (int i = 0; i < 4; ++i) {
                std::vector<double> v = vecs[i];
                for (auto& x : v) x *= c;
                all.push_back({T::leaf({dim}, v, false),
                               kind[i] == 0 ? RegionKind::Boundary : RegionKind::Background, i});
            }
            return info_nce_pair(0, 1, all, 0.05).item();
        };
        CHECK(std::abs(build(1.0) - build(7.3)) < 1e-6);
        CHECK(std::abs(build(1.0) - build(0.01)) < 1e-6);
    }

    SUBCASE("K=2 hand-specified vectors match the scalar oracle") {
        std::vector<std::vector<double>> vecs = {{1.0, 0.2, -0.3, 0.5, 0.0, 0.1},
                                                 {0.8, 0.1, -0.2, 0.6, 0.1, 0.0},
                                                 {-0.5, 0.9, 0.4, -0.1, 0.3, -0.7},
                                                 {-0.4, 0.8, 0.5, 0.0, 0.2, -0.6}};
        std::vector<int> kind = {0, 0, 1, 1};
        std::vector<RegionEmbeddingT<double>> all;
        for (int i = 0; i < 4; ++i)
            all.push_back({T::leaf({dim}, vecs[i], false),
                           kind[i] == 0 ? RegionKind::Boundary : RegionKind::Background, i});
        for (double tau : {0.05, 0.5}) {
            CHECK(info_nce_pair(0, 1, all, tau).item() ==
                  doctest::Approx(oracle_info_nce(0, 1, vecs, kind, tau, false)).epsilon(1e-9));
            CHECK(info_nce_pair(2, 3, all, tau).item() ==
                  doctest::Approx(oracle_info_nce(2, 3, vecs, kind, tau, false)).epsilon(1e-9));
            CHECK(info_nce_pair(0, 1, all, tau, true).item() ==
                  doctest::Approx(oracle_info_nce(0, 1, vecs, kind, tau, true)).epsilon(1e-9));
        }
    }

    SUBCASE("colinear positive with orthogonal negatives: -1/tau + log 2") {
        const double tau = 0.05;
        std::vector<std::vector<double>> vecs = {{1, 0, 0, 0, 0, 0},
                                                 {2, 0, 0, 0, 0, 0},
                                                 {0, 1, 0, 0, 0, 0},
                                                 {0, 0, 1, 0, 0, 0}};
        std::vector<int> kind = {0, 0, 1, 1};
        std::vector<RegionEmbeddingT<double>> all;
        for (int i = 0; i < 4; ++i)
            all.push_back({T::leaf({dim}, vecs[i], false),
                           kind[i] == 0 ? RegionKind::Boundary : RegionKind::Background, i});
        CHECK(info_nce_pair(0, 1, all, tau).item() ==
              doctest::Approx(-1.0 / tau + std::log(2.0)).epsilon(1e-9));
    }

    SUBCASE("errors: bad tau, zero-norm, non-positive pair") {
        std::vector<RegionEmbeddingT<double>> all;
        std::vector<int> kind = {0, 0, 1, 1};
        for (int i = 0; i < 4; ++i)
            all.push_back({T::leaf({2}, {1.0 * (i + 1), 0.5}, false),
                           kind[i] == 0 ? RegionKind::Boundary : RegionKind::Background, i});
        CHECK_THROWS_AS(info_nce_pair(0, 1, all, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(info_nce_pair(0, 2, all, 0.05), std::invalid_argument);
        all[1].vector = T::leaf({2}, {0.0, 0.0}, false);
        CHECK_THROWS_AS(info_nce_pair(0, 1, all, 0.05), std::invalid_argument);
    }
}

TEST_CASE("boundary_loss: pair counts and exhaustive-pair oracle for K in {2,3,4}") {
    std::mt19937_64 rng(123);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    const int dim = 8;
    for (size_t k : {2u, 3u, 4u}) {
        std::vector<std::vector<double>> vecs(2 * k, std::vector<double>(dim));
        std::vector<int> kind(2 * k);
        for (size_t i = 0; i < 2 * k; ++i) {
            for (auto& x : vecs[i]) x = d(rng);
            kind[i] = i < k ? 0 : 1;
        }
        EmbeddingPairT<double> local{T::leaf({dim}, vecs[0], false),
                                     T::leaf({dim}, vecs[k], false)};
        std::vector<EmbeddingPairT<double>> trans;
        for (size_t i = 1; i < k; ++i)
            trans.push_back({T::leaf({dim}, vecs[i], false), T::leaf({dim}, vecs[k + i], false)});

        const double got = boundary_loss(local, trans, 0.05).item();
        const double want = oracle_boundary(vecs, kind, 0.05, k);
        CHECK(got == doctest::Approx(want).epsilon(1e-9));

        // positive pair count = 2*C(K,2) = K*(K-1)
        size_t pairs = 0;
        for (size_t m = 0; m < 2 * k; ++m)
            for (size_t p = m + 1; p < 2 * k; ++p)
                if (kind[m] == kind[p]) ++pairs;
        CHECK(pairs == k * (k - 1));
    }

    EmbeddingPairT<double> lone{T::leaf({2}, {1.0, 0.0}, false), T::leaf({2}, {0.0, 1.0}, false)};
    CHECK_THROWS_AS(boundary_loss(lone, {}, 0.05), std::invalid_argument);
}

TEST_CASE("boundary_loss: symmetrized variant is permutation-invariant") {
    // The literal Eq.-7 sum anchors each pair's denominator at the
    // lower-indexed embedding, so reordering the transforms changes which
    // denominators appear; the symmetrized option restores exact invariance.
    std::mt19937_64 rng(321);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    const int dim = 8;
    const size_t k = 4;
    std::vector<std::vector<double>> bd(k, std::vector<double>(dim));
    std::vector<std::vector<double>> bg(k, std::vector<double>(dim));
    for (auto& v : bd)
        for (auto& x : v) x = d(rng);
    for (auto& v : bg)
        for (auto& x : v) x = d(rng);

    auto build = [&](const std::vector<size_t>& order, bool symmetrized) {
        EmbeddingPairT<double> local{T::leaf({dim}, bd[0], false), T::leaf({dim}, bg[0], false)};
        std::vector<EmbeddingPairT<double>> trans;
        for (size_t i : order)
            trans.push_back({T::leaf({dim}, bd[i], false), T::leaf({dim}, bg[i], false)});
        return boundary_loss(local, trans, 0.05, false, symmetrized).item();
    };
    const double base = build({1, 2, 3}, true);
    CHECK(std::abs(base - build({2, 3, 1}, true)) < 1e-6);
    CHECK(std::abs(base - build({3, 1, 2}, true)) < 1e-6);
    CHECK(std::abs(base - build({3, 2, 1}, true)) < 1e-6);
}

TEST_CASE("boundary_loss gradient passes finite differences at float64") {
    std::mt19937_64 rng(55);
    std::uniform_real_distribution<double> d(-1.0, 1.0);
    const int c = 4, h = 6, w = 6;
    std::vector<double> fv(static_cast<size_t>(c) * h * w * 3);
    for (auto& x : fv) x = d(rng);

    auto label = solid_square(h, 1, 1, 3);
    auto masks = extract_boundary_masks(label, 1, 2);
    REQUIRE(masks.usable());

    std::vector<T> feats;
    for (int i = 0; i < 3; ++i)
        feats.push_back(T::leaf({c, h, w},
                                std::vector<double>(fv.begin() + i * c * h * w,
                                                    fv.begin() + (i + 1) * c * h * w),
                                true));

    auto build = [&] {
        EmbeddingPairT<double> local{
            masked_average_pool(feats[0], masks.bd, RegionKind::Boundary, 0).vector,
            masked_average_pool(feats[0], masks.bg, RegionKind::Background, 0).vector};
        std::vector<EmbeddingPairT<double>> trans;
        for (int i = 1; i < 3; ++i)
            trans.push_back({masked_average_pool(feats[i], masks.bd, RegionKind::Boundary, i).vector,
                             masked_average_pool(feats[i], masks.bg, RegionKind::Background, i).vector});
        return boundary_loss(local, trans, 0.5);
    };

    for (auto& f : feats) f.zero_grad();
    auto loss = build();
    ad::backward(loss);

    std::mt19937_64 pick(77);
    for (int trial = 0; trial < 60; ++trial) {
        const size_t fi = pick() % feats.size();
        const size_t ei = pick() % feats[fi].numel();
        const double keep = feats[fi].value()[ei];
        const double eps = 1e-5;
        feats[fi].value()[ei] = keep + eps;
        const double up = build().item();
        feats[fi].value()[ei] = keep - eps;
        const double dn = build().item();
        feats[fi].value()[ei] = keep;
        const double fd = (up - dn) / (2 * eps);
        const double got = feats[fi].grad_view()[ei];
        CHECK(std::abs(got - fd) / std::max(std::abs(fd), 1e-6) < 1e-3);
    }
}

TEST_CASE("boundary_loss: ideal geometry scores below random perturbations") {
    // same-class colinear, cross-class orthogonal is the intended optimum
    const int dim = 8;
    std::vector<double> e0(dim, 0.0), e1(dim, 0.0);
    e0[0] = 1.0;
    e1[1] = 1.0;
    auto ideal_loss = [&] {
        EmbeddingPairT<double> local{T::leaf({dim}, e0, false), T::leaf({dim}, e1, false)};
        std::vector<EmbeddingPairT<double>> trans;
        for (int i = 0; i < 2; ++i) {
            std::vector<double> b0 = e0, b1 = e1;
            for (auto& x : b0) x *= (1.5 + i);
            for (auto& x : b1) x *= (2.0 + i);
            trans.push_back({T::leaf({dim}, b0, false), T::leaf({dim}, b1, false)});
        }
        return boundary_loss(local, trans, 0.05).item();
    }();

    std::mt19937_64 rng(999);
    std::normal_distribution<double> noise(0.0, 0.35);
    int worse = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto perturb = [&](const std::vector<double>& v) {
            std::vector<double> out = v;
            for (auto& x : out) x += noise(rng);
            return out;
        };
        EmbeddingPairT<double> local{T::leaf({dim}, perturb(e0), false),
                                     T::leaf({dim}, perturb(e1), false)};
        std::vector<EmbeddingPairT<double>> trans;
        for (int i = 0; i < 2; ++i)
            trans.push_back({T::leaf({dim}, perturb(e0), false),
                             T::leaf({dim}, perturb(e1), false)});
        if (boundary_loss(local, trans, 0.05).item() > ideal_loss) ++worse;
    }
    CHECK(worse == 100);
}
