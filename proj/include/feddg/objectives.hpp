#pragma once

#include <vector>

#include "feddg/autodiff.hpp"
#include "feddg/morphology.hpp"

namespace feddg {

// Mean over classes of 1 - (2*sum(p*y)+s)/(sum(p)+sum(y)+s), s = 1e-5.
// probs and label are [C,H,W]; label must be exactly binary.
template <class S>
ad::TensorT<S> dice_loss(const ad::TensorT<S>& probs, const ad::TensorT<S>& label,
                         double smooth = 1e-5) {
    if (probs.shape() != label.shape() || probs.shape().size() != 3)
        throw std::invalid_argument("dice_loss: expects matching [C,H,W] shapes");
    for (S v : label.value())
        if (v != S(0) && v != S(1)) throw std::invalid_argument("dice_loss: non-binary label");
    const int nc = probs.shape()[0];
    ad::TensorT<S> acc;
    for (int c = 0; c < nc; ++c) {
        auto p = ad::slice0(probs, c);
        auto y = ad::slice0(label, c);
        auto numer = ad::add_scalar(ad::scale(ad::sum(ad::mul(p, y)), S(2)), static_cast<S>(smooth));
        auto denom = ad::add_scalar(ad::add(ad::sum(p), ad::sum(y)), static_cast<S>(smooth));
        auto term = ad::sub(ad::TensorT<S>::scalar(S(1)), ad::div(numer, denom));
        acc = acc.defined() ? ad::add(acc, term) : term;
    }
    return ad::scale(acc, S(1) / static_cast<S>(nc));
}

// Boundary band and surrounding background ring of a binary label, built
// with iterated 3x3-cross dilation/erosion.
struct BoundaryMasks {
    BinaryMask bd;  // dilate(y, r_bd) XOR erode(y, r_bd)
    BinaryMask bg;  // dilate(y, r_bd + r_bg) AND NOT dilate(y, r_bd)
    bool label_empty = false;
    bool bd_empty = false;
    bool bg_empty = false;

    bool usable() const { return !label_empty && !bd_empty && !bg_empty; }
};

inline BoundaryMasks extract_boundary_masks(const BinaryMask& label, int r_bd, int r_bg) {
    if (r_bd < 1 || r_bg <= r_bd)
        throw std::invalid_argument("extract_boundary_masks: need r_bg > r_bd >= 1");
    BoundaryMasks out;
    if (label.empty()) {
        out.label_empty = out.bd_empty = out.bg_empty = true;
        out.bd = BinaryMask(label.h, label.w);
        out.bg = BinaryMask(label.h, label.w);
        return out;
    }
    const BinaryMask d_in = dilate(label, r_bd);
    out.bd = mask_xor(d_in, erode(label, r_bd));
    out.bg = mask_and_not(dilate(label, r_bd + r_bg), d_in);
    out.bd_empty = out.bd.empty();
    out.bg_empty = out.bg.empty();
    return out;
}

enum class RegionKind { Boundary, Background };

template <class S>
struct RegionEmbeddingT {
    ad::TensorT<S> vector;  // [feat channels]
    RegionKind kind = RegionKind::Boundary;
    int source_distribution = 0;  // 0 = local, 1..K-1 = transform index
};

// Eq.-5 pooling: per-channel (sum feat*mask)/(sum mask); gradient flows
// into feat only.
template <class S>
RegionEmbeddingT<S> masked_average_pool(const ad::TensorT<S>& feat, const BinaryMask& mask,
                                        RegionKind kind, int source_distribution) {
    if (feat.shape().size() != 3 || feat.shape()[1] != mask.h || feat.shape()[2] != mask.w)
        throw std::invalid_argument("masked_average_pool: feat/mask shape mismatch");
    std::vector<S> m(mask.m.size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = static_cast<S>(mask.m[i]);
    RegionEmbeddingT<S> out;
    out.vector = ad::masked_mean(feat, m);
    out.kind = kind;
    out.source_distribution = source_distribution;
    return out;
}

// Literal pairwise InfoNCE: the denominator sums over the anchor's
// NEGATIVES only (cross-class pairs). standard_denominator adds the
// positive term back, giving the textbook variant.
template <class S>
ad::TensorT<S> info_nce_pair(size_t m, size_t p, const std::vector<RegionEmbeddingT<S>>& all,
                             double tau, bool standard_denominator = false) {
    if (!(tau > 0.0)) throw std::invalid_argument("info_nce_pair: tau must be > 0");
    if (m >= all.size() || p >= all.size() || m == p)
        throw std::invalid_argument("info_nce_pair: bad indices");
    if (all[m].kind != all[p].kind)
        throw std::invalid_argument("info_nce_pair: (m, p) is not a positive pair");
    const S inv_tau = static_cast<S>(1.0 / tau);
    auto cos_mp = ad::cosine_similarity(all[m].vector, all[p].vector);
    ad::TensorT<S> denom;
    for (size_t q = 0; q < all.size(); ++q) {
        if (q == m || all[q].kind == all[m].kind) continue;
        auto term = ad::exp(ad::scale(ad::cosine_similarity(all[m].vector, all[q].vector), inv_tau));
        denom = denom.defined() ? ad::add(denom, term) : term;
    }
    if (!denom.defined()) throw std::invalid_argument("info_nce_pair: no negative pairs");
    if (standard_denominator) denom = ad::add(denom, ad::exp(ad::scale(cos_mp, inv_tau)));
    return ad::add(ad::neg(ad::scale(cos_mp, inv_tau)), ad::log(denom));
}

template <class S>
struct EmbeddingPairT {
    ad::TensorT<S> bd, bg;
};

// Sum of l(h_m, h_p) over the ordered enumeration m < p of positive pairs
// within the 2K embeddings [bd_local, bd_t1.., bg_local, bg_t1..], divided
// by 2*C(K,2). l anchors its denominator at h_m per the printed formula;
// symmetrized averages l(m,p) and l(p,m), which makes the total invariant
// to the transform order.
template <class S>
ad::TensorT<S> boundary_loss(const EmbeddingPairT<S>& local,
                             const std::vector<EmbeddingPairT<S>>& transformed, double tau,
                             bool standard_denominator = false, bool symmetrized = false) {
    const size_t k = 1 + transformed.size();
    if (k < 2) throw std::invalid_argument("boundary_loss: K < 2, no positive pairs");
    std::vector<RegionEmbeddingT<S>> all;
    all.reserve(2 * k);
    all.push_back({local.bd, RegionKind::Boundary, 0});
    for (size_t i = 0; i < transformed.size(); ++i)
        all.push_back({transformed[i].bd, RegionKind::Boundary, static_cast<int>(i + 1)});
    all.push_back({local.bg, RegionKind::Background, 0});
    for (size_t i = 0; i < transformed.size(); ++i)
        all.push_back({transformed[i].bg, RegionKind::Background, static_cast<int>(i + 1)});

    ad::TensorT<S> acc;
    for (size_t m = 0; m < all.size(); ++m)
        for (size_t p = m + 1; p < all.size(); ++p) {
            if (all[m].kind != all[p].kind) continue;
            auto term = info_nce_pair(m, p, all, tau, standard_denominator);
            if (symmetrized)
                term = ad::scale(ad::add(term, info_nce_pair(p, m, all, tau, standard_denominator)),
                                 S(0.5));
            acc = acc.defined() ? ad::add(acc, term) : term;
        }
    const double pairs = static_cast<double>(k * (k - 1));  // 2 * C(K,2)
    return ad::scale(acc, static_cast<S>(1.0 / pairs));
}

}  // namespace feddg
