#include "feddg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace feddg {

namespace {

struct Pixel {
    int y, x;
};

std::vector<Pixel> pixels_of(const BinaryMask& m) {
    std::vector<Pixel> out;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) out.push_back({y, x});
    return out;
}

long sq_dist(const Pixel& a, const Pixel& b) {
    const long dy = a.y - b.y, dx = a.x - b.x;
    return dy * dy + dx * dx;
}

// max over a in A\B of min over b in boundary(B). For a in B the distance is
// zero; for a outside B the nearest pixel of B is always one of B's
// 4-boundary pixels, so this equals the full-set directed distance.
long directed_sq(const BinaryMask& a, const BinaryMask& b, const std::vector<Pixel>& b_boundary) {
    long worst = 0;
    for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
            if (!a.at(y, x) || b.at(y, x)) continue;
            const Pixel p{y, x};
            long best = std::numeric_limits<long>::max();
            for (const auto& q : b_boundary) best = std::min(best, sq_dist(p, q));
            worst = std::max(worst, best);
        }
    return worst;
}

void check_same(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("metrics: shape mismatch");
}

double frame_diagonal(const BinaryMask& m) {
    return std::sqrt(static_cast<double>(m.h - 1) * (m.h - 1) +
                     static_cast<double>(m.w - 1) * (m.w - 1));
}

}  // namespace

double dice_coefficient(const BinaryMask& pred, const BinaryMask& gt) {
    check_same(pred, gt);
    size_t inter = 0, total = 0;
    for (size_t i = 0; i < pred.m.size(); ++i) {
        inter += pred.m[i] & gt.m[i];
        total += pred.m[i] + gt.m[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

HausdorffResult hausdorff(const BinaryMask& pred, const BinaryMask& gt) {
    check_same(pred, gt);
    if (pred.empty() || gt.empty()) return {frame_diagonal(pred), true};
    const auto bp = pixels_of(boundary_pixels(pred));
    const auto bg = pixels_of(boundary_pixels(gt));
    const long d = std::max(directed_sq(pred, gt, bg), directed_sq(gt, pred, bp));
    return {std::sqrt(static_cast<double>(d)), false};
}

HausdorffResult hausdorff95(const BinaryMask& pred, const BinaryMask& gt) {
    check_same(pred, gt);
    if (pred.empty() || gt.empty()) return {frame_diagonal(pred), true};
    const auto bp = pixels_of(boundary_pixels(pred));
    const auto bg = pixels_of(boundary_pixels(gt));
    std::vector<double> dists;
    auto collect = [&dists](const BinaryMask& a, const BinaryMask& b, const std::vector<Pixel>& bb) {
        for (int y = 0; y < a.h; ++y)
            for (int x = 0; x < a.w; ++x) {
                if (!a.at(y, x)) continue;
                if (b.at(y, x)) {
                    dists.push_back(0.0);
                    continue;
                }
                const Pixel p{y, x};
                long best = std::numeric_limits<long>::max();
                for (const auto& q : bb) best = std::min(best, sq_dist(p, q));
                dists.push_back(std::sqrt(static_cast<double>(best)));
            }
    };
    collect(pred, gt, bg);
    collect(gt, pred, bp);
    std::sort(dists.begin(), dists.end());
    const size_t idx = static_cast<size_t>(std::ceil(0.95 * dists.size())) - 1;
    return {dists[std::min(idx, dists.size() - 1)], false};
}

SampleMetrics evaluate_sample(const std::vector<BinaryMask>& pred_classes,
                              const std::vector<BinaryMask>& gt_classes) {
    if (pred_classes.size() != gt_classes.size() || pred_classes.empty())
        throw std::invalid_argument("evaluate_sample: class count mismatch");
    SampleMetrics out;
    for (size_t c = 0; c < pred_classes.size(); ++c) {
        ClassMetrics cm;
        cm.dice = dice_coefficient(pred_classes[c], gt_classes[c]);
        cm.hd = hausdorff(pred_classes[c], gt_classes[c]).distance;
        out.per_class.push_back(cm);
        out.mean_dice += cm.dice;
        out.mean_hd += cm.hd;
    }
    out.mean_dice /= static_cast<double>(pred_classes.size());
    out.mean_hd /= static_cast<double>(pred_classes.size());
    return out;
}

AggregateMetrics aggregate(const std::vector<SampleMetrics>& samples) {
    AggregateMetrics out;
    if (samples.empty()) return out;
    const size_t nc = samples[0].per_class.size();
    out.n = samples.size();
    out.mean_per_class.resize(nc);
    out.std_per_class.resize(nc);
    for (const auto& s : samples) {
        if (s.per_class.size() != nc) throw std::invalid_argument("aggregate: ragged class counts");
        for (size_t c = 0; c < nc; ++c) {
            out.mean_per_class[c].dice += s.per_class[c].dice;
            out.mean_per_class[c].hd += s.per_class[c].hd;
        }
        out.mean_dice += s.mean_dice;
        out.mean_hd += s.mean_hd;
    }
    const double n = static_cast<double>(samples.size());
    for (size_t c = 0; c < nc; ++c) {
        out.mean_per_class[c].dice /= n;
        out.mean_per_class[c].hd /= n;
    }
    out.mean_dice /= n;
    out.mean_hd /= n;
    for (const auto& s : samples) {
        for (size_t c = 0; c < nc; ++c) {
            const double dd = s.per_class[c].dice - out.mean_per_class[c].dice;
            const double dh = s.per_class[c].hd - out.mean_per_class[c].hd;
            out.std_per_class[c].dice += dd * dd;
            out.std_per_class[c].hd += dh * dh;
        }
        out.std_dice += (s.mean_dice - out.mean_dice) * (s.mean_dice - out.mean_dice);
        out.std_hd += (s.mean_hd - out.mean_hd) * (s.mean_hd - out.mean_hd);
    }
    for (size_t c = 0; c < nc; ++c) {
        out.std_per_class[c].dice = std::sqrt(out.std_per_class[c].dice / n);
        out.std_per_class[c].hd = std::sqrt(out.std_per_class[c].hd / n);
    }
    out.std_dice = std::sqrt(out.std_dice / n);
    out.std_hd = std::sqrt(out.std_hd / n);
    return out;
}

}  // namespace feddg
