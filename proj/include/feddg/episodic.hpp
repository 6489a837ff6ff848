#pragma once

// Boundary-oriented episodic learning: SGD inner update on the raw batch,
// meta objective (transform Dice + gamma * boundary InfoNCE) evaluated at
// the inner-updated parameters, both gradients applied to the original
// parameters in one Adam step. First-order meta gradients: the inner-step
// Jacobian is treated as identity; a finite-difference mode quantifies the
// approximation on small toys.

#include <functional>
#include <memory>
#include <vector>

#include "feddg/autodiff.hpp"
#include "feddg/distbank.hpp"
#include "feddg/objectives.hpp"
#include "feddg/segnet.hpp"

namespace feddg {

struct EpisodicConfig {
    double beta = 1e-3;   // inner learning rate
    double gamma = 0.1;   // boundary loss weight
    double tau = 0.05;    // InfoNCE temperature
    enum class MetaGradMode { FirstOrder, FiniteDifferenceCheck } meta_grad_mode =
        MetaGradMode::FirstOrder;
    bool infonce_standard = false;
    int r_bd = 1;
    int r_bg = 3;

    void validate() const {
        if (!(beta > 0.0)) throw std::invalid_argument("episodic: beta must be > 0");
        if (gamma < 0.0) throw std::invalid_argument("episodic: gamma must be >= 0");
        if (!(tau > 0.0)) throw std::invalid_argument("episodic: tau must be > 0");
    }
};

// Loss closure over a parameter set; used so the same machinery runs the
// segmentation net and the toy models in tests.
template <class S>
using LossFn = std::function<ad::TensorT<S>(ad::ParamSetT<S>&)>;

// theta_hat = theta - beta * grad(loss_fn(theta)); theta values untouched,
// but theta's grads hold the inner gradient afterwards (episodic_step adds
// the meta gradient on top). Fresh leaves, no tape history.
template <class S>
ad::ParamSetT<S> inner_update(ad::ParamSetT<S>& theta, const LossFn<S>& inner_loss, double beta,
                              double* loss_value = nullptr) {
    if (beta < 0.0) throw std::invalid_argument("inner_update: beta must be >= 0");
    theta.zero_grad();
    auto loss = inner_loss(theta);
    ad::backward(loss);
    if (loss_value) *loss_value = static_cast<double>(loss.item());
    ad::ParamSetT<S> hat;
    for (size_t i = 0; i < theta.size(); ++i) {
        std::vector<S> v = theta.tensors[i].value();
        const auto& g = theta.tensors[i].grad_view();
        for (size_t j = 0; j < v.size(); ++j) v[j] -= static_cast<S>(beta) * g[j];
        hat.add(theta.names[i], ad::TensorT<S>::leaf(theta.tensors[i].shape(), std::move(v), true));
    }
    return hat;
}

struct StepRecord {
    double l_seg_inner = 0.0;
    double l_seg_meta = 0.0;
    double l_boundary = 0.0;
    double l_meta = 0.0;
};

template <class S>
std::vector<double> exact_meta_gradient_fd(const ad::ParamSetT<S>& theta,
                                           const LossFn<S>& inner_loss, const LossFn<S>& meta_loss,
                                           double beta, double eps, double* center_value = nullptr);

// One combined episodic step on arbitrary inner/meta losses. In first-order
// mode the total gradient w.r.t. theta is grad_inner(theta) +
// grad_meta(theta_hat) mapped one-to-one onto theta; in finite-difference
// mode the exact meta gradient through the inner step is estimated by
// central differences (small models only).
template <class S>
StepRecord episodic_step_custom(ad::ParamSetT<S>& theta, ad::AdamStateT<S>& adam, double lr,
                                const EpisodicConfig& cfg, const LossFn<S>& inner_loss,
                                const LossFn<S>& meta_loss) {
    StepRecord rec;
    auto hat = inner_update(theta, inner_loss, cfg.beta, &rec.l_seg_inner);

    if (cfg.meta_grad_mode == EpisodicConfig::MetaGradMode::FiniteDifferenceCheck) {
        if (theta.numel() > 64)
            throw std::invalid_argument(
                "episodic: finite_difference_check mode is for toy models (<= 64 parameters)");
        auto g = exact_meta_gradient_fd(theta, inner_loss, meta_loss, cfg.beta, 1e-4, &rec.l_meta);
        size_t off = 0;
        for (auto& t : theta.tensors) {
            auto& tg = t.grad();
            for (size_t j = 0; j < tg.size(); ++j) tg[j] += static_cast<S>(g[off + j]);
            off += tg.size();
        }
    } else {
        hat.zero_grad();
        auto lm = meta_loss(hat);
        ad::backward(lm);
        rec.l_meta = static_cast<double>(lm.item());
        for (size_t i = 0; i < theta.size(); ++i) {
            auto& tg = theta.tensors[i].grad();
            const auto& hg = hat.tensors[i].grad_view();
            for (size_t j = 0; j < tg.size(); ++j) tg[j] += hg[j];
        }
    }
    ad::adam_step(theta, lr, adam);
    return rec;
}

// d/dtheta of meta_loss(theta - beta * grad inner_loss(theta)) by central
// differences, component by component. Exact up to O(eps^2); used to bound
// the first-order approximation error on toys.
template <class S>
std::vector<double> exact_meta_gradient_fd(const ad::ParamSetT<S>& theta,
                                           const LossFn<S>& inner_loss, const LossFn<S>& meta_loss,
                                           double beta, double eps, double* center_value) {
    auto eval = [&](const std::vector<S>& flat) {
        auto work = theta.clone(true);
        work.unflatten(flat);
        auto hat = inner_update(work, inner_loss, beta);
        auto lm = meta_loss(hat);
        return static_cast<double>(lm.item());
    };
    const auto base = theta.flatten();
    if (center_value) *center_value = eval(base);
    std::vector<double> grad(base.size());
    for (size_t j = 0; j < base.size(); ++j) {
        auto plus = base, minus = base;
        plus[j] += static_cast<S>(eps);
        minus[j] -= static_cast<S>(eps);
        grad[j] = (eval(plus) - eval(minus)) / (2.0 * eps);
    }
    return grad;
}

// ----------------------------------------------------------- production step

// One training sample as seen by a client: image, per-class label tensors
// and precomputed boundary/background masks (labels never change, so masks
// are computed once per sample).
template <class S>
struct EpisodicSample {
    const Image* image = nullptr;
    ad::TensorT<S> label;  // [num_classes, H, W] constant
    std::vector<BoundaryMasks> masks;  // per class
    std::shared_ptr<const std::vector<BinaryMask>> label_ref;  // shared with the dataset
};

template <class S>
EpisodicSample<S> make_episodic_sample(const Image& img,
                                       std::shared_ptr<const std::vector<BinaryMask>> label,
                                       int r_bd, int r_bg) {
    EpisodicSample<S> s;
    s.image = &img;
    s.label_ref = label;
    const int nc = static_cast<int>(label->size());
    const int h = (*label)[0].h, w = (*label)[0].w;
    std::vector<S> lv(static_cast<size_t>(nc) * h * w);
    for (int c = 0; c < nc; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                lv[(static_cast<size_t>(c) * h + y) * w + x] = static_cast<S>((*label)[c].at(y, x));
        s.masks.push_back(extract_boundary_masks((*label)[c], r_bd, r_bg));
    }
    s.label = ad::TensorT<S>::leaf({nc, h, w}, std::move(lv), false);
    return s;
}

// Meta objective at theta_hat: mean Dice over the K-1 transforms plus
// gamma * boundary loss built from embeddings of the raw inputs and all
// transforms. Returns the scalar plus the component values.
template <class S>
ad::TensorT<S> meta_objective(const ad::ParamSetT<S>& theta_hat, const SegNetConfig& net,
                              const std::vector<const EpisodicSample<S>*>& batch,
                              const std::vector<std::vector<Image>>& transforms,
                              const EpisodicConfig& cfg, StepRecord* rec = nullptr) {
    if (batch.size() != transforms.size())
        throw std::invalid_argument("meta_objective: batch/transform count mismatch");
    ad::TensorT<S> seg_acc;
    size_t seg_terms = 0;
    ad::TensorT<S> bnd_acc;
    size_t bnd_terms = 0;
    const size_t num_classes = batch.empty() ? 0 : batch[0]->masks.size();

    for (size_t i = 0; i < batch.size(); ++i) {
        const auto& sample = *batch[i];
        const bool want_feats = cfg.gamma > 0.0 && !transforms[i].empty();
        // byte-identical inputs (e.g. every lambda = 0 makes transforms copies
        // of x) share one forward subgraph; values and gradients are exactly
        // those of repeated passes
        ForwardOutputT<S> local_out;
        if (want_feats) local_out = segnet_forward(theta_hat, net, *sample.image);

        constexpr size_t kLocal = static_cast<size_t>(-1);
        std::vector<size_t> group(transforms[i].size());
        std::vector<size_t> uniq;
        for (size_t n = 0; n < transforms[i].size(); ++n) {
            if (want_feats && transforms[i][n].data == sample.image->data) {
                group[n] = kLocal;
                continue;
            }
            group[n] = n;
            for (size_t u : uniq)
                if (transforms[i][u].data == transforms[i][n].data) {
                    group[n] = u;
                    break;
                }
            if (group[n] == n) uniq.push_back(n);
        }
        std::vector<ad::TensorT<S>> t_feats(transforms[i].size());
        size_t local_count = 0;
        for (size_t n = 0; n < transforms[i].size(); ++n)
            if (group[n] == kLocal) {
                t_feats[n] = local_out.feat_maps;
                ++local_count;
            }
        if (local_count) {
            auto term = dice_loss(local_out.probs, sample.label);
            if (local_count > 1) term = ad::scale(term, static_cast<S>(local_count));
            seg_acc = seg_acc.defined() ? ad::add(seg_acc, term) : term;
            seg_terms += local_count;
        }
        for (size_t u : uniq) {
            auto out = segnet_forward(theta_hat, net, transforms[i][u]);
            size_t count = 0;
            for (size_t n = 0; n < transforms[i].size(); ++n)
                if (group[n] == u) {
                    if (want_feats) t_feats[n] = out.feat_maps;
                    ++count;
                }
            auto term = dice_loss(out.probs, sample.label);
            if (count > 1) term = ad::scale(term, static_cast<S>(count));
            seg_acc = seg_acc.defined() ? ad::add(seg_acc, term) : term;
            seg_terms += count;
        }
        if (want_feats) {
            for (size_t c = 0; c < num_classes; ++c) {
                ++bnd_terms;  // skipped classes still count: they contribute zero
                if (!sample.masks[c].usable()) continue;
                EmbeddingPairT<S> local{
                    masked_average_pool(local_out.feat_maps, sample.masks[c].bd,
                                        RegionKind::Boundary, 0).vector,
                    masked_average_pool(local_out.feat_maps, sample.masks[c].bg,
                                        RegionKind::Background, 0).vector};
                std::vector<EmbeddingPairT<S>> trans;
                for (size_t n = 0; n < t_feats.size(); ++n)
                    trans.push_back(
                        {masked_average_pool(t_feats[n], sample.masks[c].bd, RegionKind::Boundary,
                                             static_cast<int>(n + 1)).vector,
                         masked_average_pool(t_feats[n], sample.masks[c].bg,
                                             RegionKind::Background, static_cast<int>(n + 1)).vector});
                auto bl = boundary_loss(local, trans, cfg.tau, cfg.infonce_standard);
                bnd_acc = bnd_acc.defined() ? ad::add(bnd_acc, bl) : bl;
            }
        }
    }

    ad::TensorT<S> seg = seg_terms
                             ? ad::scale(seg_acc, S(1) / static_cast<S>(seg_terms))
                             : ad::TensorT<S>::scalar(S(0));
    ad::TensorT<S> bnd = bnd_acc.defined()
                             ? ad::scale(bnd_acc, S(1) / static_cast<S>(bnd_terms))
                             : ad::TensorT<S>::scalar(S(0));
    if (rec) {
        rec->l_seg_meta = static_cast<double>(seg.item());
        rec->l_boundary = static_cast<double>(bnd.item());
    }
    return ad::add(seg, ad::scale(bnd, static_cast<S>(cfg.gamma)));
}

// Full ELCFS step: Eq.-4 inner update on the raw batch, meta objective on
// the transforms, combined first-order gradient, one Adam step.
template <class S>
StepRecord episodic_step(ad::ParamSetT<S>& theta, ad::AdamStateT<S>& adam, double lr,
                         const SegNetConfig& net, const EpisodicConfig& cfg,
                         const std::vector<const EpisodicSample<S>*>& batch,
                         const std::vector<std::vector<Image>>& transforms) {
    cfg.validate();
    StepRecord rec;
    LossFn<S> inner = [&](ad::ParamSetT<S>& p) {
        ad::TensorT<S> acc;
        for (const auto* s : batch) {
            auto out = segnet_forward(p, net, *s->image);
            auto term = dice_loss(out.probs, s->label);
            acc = acc.defined() ? ad::add(acc, term) : term;
        }
        return ad::scale(acc, S(1) / static_cast<S>(batch.size()));
    };
    auto hat = inner_update(theta, inner, cfg.beta, &rec.l_seg_inner);

    hat.zero_grad();
    auto lm = meta_objective(hat, net, batch, transforms, cfg, &rec);
    ad::backward(lm);
    rec.l_meta = static_cast<double>(lm.item());
    for (size_t i = 0; i < theta.size(); ++i) {
        auto& tg = theta.tensors[i].grad();
        const auto& hg = hat.tensors[i].grad_view();
        for (size_t j = 0; j < tg.size(); ++j) tg[j] += hg[j];
    }
    ad::adam_step(theta, lr, adam);
    return rec;
}

}  // namespace feddg
