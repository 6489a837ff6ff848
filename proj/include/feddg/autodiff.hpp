#pragma once

// Minimal dense-tensor reverse-mode autodiff: enough ops for a small
// encoder-decoder segmentation net, Dice / InfoNCE losses and first-order
// meta updates. Templated on the scalar so training runs float32 while
// gradient tests run float64.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace feddg::ad {

// Training allocates and frees many activation buffers above glibc's
// default mmap threshold; keeping them on the heap avoids per-op page
// faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
    [[maybe_unused]] static const int once = [] {
        mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
        return 0;
    }();
#endif
}

using Shape = std::vector<int>;

inline size_t numel_of(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

template <class S>
struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backprop;  // pushes this->grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

template <class S>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

    static TensorT leaf(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (data.size() != numel_of(shape))
            throw std::invalid_argument("tensor: data length does not match shape");
        tune_allocator();
        auto n = std::make_shared<Node<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return TensorT(n);
    }
    static TensorT zeros(Shape shape, bool requires_grad = false) {
        std::vector<S> d(numel_of(shape), S(0));
        return leaf(std::move(shape), std::move(d), requires_grad);
    }
    static TensorT full(Shape shape, S v, bool requires_grad = false) {
        std::vector<S> d(numel_of(shape), v);
        return leaf(std::move(shape), std::move(d), requires_grad);
    }
    static TensorT scalar(S v, bool requires_grad = false) { return full({1}, v, requires_grad); }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    size_t numel() const { return n_->value.size(); }
    std::vector<S>& value() { return n_->value; }
    const std::vector<S>& value() const { return n_->value; }
    std::vector<S>& grad() { n_->ensure_grad(); return n_->grad; }
    const std::vector<S>& grad_view() const { return n_->grad; }
    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    bool requires_grad() const { return n_->requires_grad; }
    bool is_leaf() const { return n_->is_leaf; }
    S item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
        return n_->value[0];
    }
    void zero_grad() { n_->grad.assign(n_->value.size(), S(0)); }
    std::shared_ptr<Node<S>> node() const { return n_; }

    // Frozen copy: same values, no tape participation.
    TensorT detach() const {
        auto n = std::make_shared<Node<S>>();
        n->shape = n_->shape;
        n->value = n_->value;
        return TensorT(n);
    }

private:
    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <class S>
TensorT<S> make_op(Shape shape, std::vector<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
                   std::function<void(Node<S>&)> backprop) {
    tune_allocator();
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->is_leaf = false;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    n->requires_grad = needs;
    if (needs) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return TensorT<S>(n);
}

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace detail

// ---------------------------------------------------------------- basic ops

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<S>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<S>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<S>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] / b.value()[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa, pb}, [pa, pb](Node<S>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) {
                const S bv = pb->value[i];
                pb->grad[i] -= n.grad[i] * pa->value[i] / (bv * bv);
            }
        }
    });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S k) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * k;
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa, k](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * k;
    });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, S k) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + k;
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

template <class S>
TensorT<S> neg(const TensorT<S>& a) { return scale(a, S(-1)); }

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] > S(0) ? a.value()[i] : S(0);
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        const S* __restrict g = n.grad.data();
        const S* __restrict x = pa->value.data();
        S* __restrict d = pa->grad.data();
#pragma omp simd
        for (size_t i = 0; i < n.grad.size(); ++i)
            d[i] += x[i] > S(0) ? g[i] : S(0);
    });
}

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) {
        const S x = a.value()[i];
        v[i] = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                         : std::exp(x) / (S(1) + std::exp(x));
    }
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            const S y = n.value[i];
            pa->grad[i] += n.grad[i] * y * (S(1) - y);
        }
    });
}

template <class S>
TensorT<S> exp(const TensorT<S>& a) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.value()[i]);
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * n.value[i];
    });
}

template <class S>
TensorT<S> log(const TensorT<S>& a) {
    std::vector<S> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) {
        if (!(a.value()[i] > S(0))) throw std::domain_error("log: nonpositive input");
        v[i] = std::log(a.value()[i]);
    }
    auto pa = a.node();
    return detail::make_op<S>(a.shape(), std::move(v), {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pa->value[i];
    });
}

template <class S>
TensorT<S> sum(const TensorT<S>& a) {
    S acc = 0;
    for (S x : a.value()) acc += x;
    auto pa = a.node();
    return detail::make_op<S>({1}, {acc}, {pa}, [pa](Node<S>& n) {
        pa->ensure_grad();
        const S g = n.grad[0];
        for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
}

template <class S>
TensorT<S> mean(const TensorT<S>& a) {
    S acc = 0;
    for (S x : a.value()) acc += x;
    const S inv = S(1) / static_cast<S>(a.numel());
    auto pa = a.node();
    return detail::make_op<S>({1}, {acc * inv}, {pa}, [pa, inv](Node<S>& n) {
        pa->ensure_grad();
        const S g = n.grad[0] * inv;
        for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
    });
}

// -------------------------------------------------------- structure ops

// Concatenate along axis 0; trailing dimensions must agree.
template <class S>
TensorT<S> concat0(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || sa.empty())
        throw std::invalid_argument("concat0: rank mismatch");
    for (size_t i = 1; i < sa.size(); ++i)
        if (sa[i] != sb[i]) throw std::invalid_argument("concat0: trailing shape mismatch");
    Shape out = sa;
    out[0] += sb[0];
    std::vector<S> v;
    v.reserve(a.numel() + b.numel());
    v.insert(v.end(), a.value().begin(), a.value().end());
    v.insert(v.end(), b.value().begin(), b.value().end());
    auto pa = a.node(), pb = b.node();
    const size_t na = a.numel();
    return detail::make_op<S>(std::move(out), std::move(v), {pa, pb}, [pa, pb, na](Node<S>& n) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < na; ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = na; i < n.grad.size(); ++i) pb->grad[i - na] += n.grad[i];
        }
    });
}

// Select index i along axis 0; result drops that axis.
template <class S>
TensorT<S> slice0(const TensorT<S>& a, int idx) {
    const Shape& sa = a.shape();
    if (sa.empty() || idx < 0 || idx >= sa[0]) throw std::invalid_argument("slice0: index out of range");
    Shape out(sa.begin() + 1, sa.end());
    if (out.empty()) out = {1};
    const size_t plane = numel_of(out);
    std::vector<S> v(a.value().begin() + idx * plane, a.value().begin() + (idx + 1) * plane);
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), std::move(v), {pa}, [pa, idx, plane](Node<S>& n) {
        pa->ensure_grad();
        for (size_t i = 0; i < plane; ++i) pa->grad[idx * plane + i] += n.grad[i];
    });
}

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<S> v(static_cast<size_t>(m) * n, S(0));
    for (int i = 0; i < m; ++i)
        for (int t = 0; t < k; ++t) {
            const S av = a.value()[static_cast<size_t>(i) * k + t];
            const S* brow = &b.value()[static_cast<size_t>(t) * n];
            S* orow = &v[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>({m, n}, std::move(v), {pa, pb}, [pa, pb, m, k, n](Node<S>& nd) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int t = 0; t < k; ++t) {
                    S acc = 0;
                    const S* grow = &nd.grad[static_cast<size_t>(i) * n];
                    const S* brow = &pb->value[static_cast<size_t>(t) * n];
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    pa->grad[static_cast<size_t>(i) * k + t] += acc;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int t = 0; t < k; ++t)
                for (int i = 0; i < m; ++i) {
                    const S av = pa->value[static_cast<size_t>(i) * k + t];
                    const S* grow = &nd.grad[static_cast<size_t>(i) * n];
                    S* brow = &pb->grad[static_cast<size_t>(t) * n];
                    for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

// ------------------------------------------------------------ conv & pool

namespace detail {

// Zero-padded copy of a [C,H,W] plane stack with a one-pixel border.
template <class S>
std::vector<S> pad1(const S* x, int c, int h, int w) {
    const int ph = h + 2, pw = w + 2;
    std::vector<S> out(static_cast<size_t>(c) * ph * pw, S(0));
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
            std::copy_n(x + (static_cast<size_t>(ch) * h + y) * w, w,
                        out.begin() + (static_cast<size_t>(ch) * ph + y + 1) * pw + 1);
    return out;
}

// dst[t] += sum of the nine taps around (row, t) in a padded plane.
template <class S>
inline void conv3x3_row(S* __restrict dst, const S* __restrict r0, const S* __restrict r1,
                        const S* __restrict r2, const S* k, int n) {
    const S k0 = k[0], k1 = k[1], k2 = k[2], k3 = k[3], k4 = k[4], k5 = k[5], k6 = k[6],
            k7 = k[7], k8 = k[8];
#pragma omp simd
    for (int t = 0; t < n; ++t)
        dst[t] += k0 * r0[t] + k1 * r0[t + 1] + k2 * r0[t + 2] + k3 * r1[t] + k4 * r1[t + 1] +
                  k5 * r1[t + 2] + k6 * r2[t] + k7 * r2[t + 1] + k8 * r2[t + 2];
}

// Two output rows from the same three source rows; halves load pressure.
template <class S>
inline void conv3x3_row2(S* __restrict da, S* __restrict db, const S* __restrict r0,
                         const S* __restrict r1, const S* __restrict r2, const S* ka, const S* kb,
                         int n) {
    const S a0 = ka[0], a1 = ka[1], a2 = ka[2], a3 = ka[3], a4 = ka[4], a5 = ka[5], a6 = ka[6],
            a7 = ka[7], a8 = ka[8];
    const S b0 = kb[0], b1 = kb[1], b2 = kb[2], b3 = kb[3], b4 = kb[4], b5 = kb[5], b6 = kb[6],
            b7 = kb[7], b8 = kb[8];
#pragma omp simd
    for (int t = 0; t < n; ++t) {
        const S x00 = r0[t], x01 = r0[t + 1], x02 = r0[t + 2];
        const S x10 = r1[t], x11 = r1[t + 1], x12 = r1[t + 2];
        const S x20 = r2[t], x21 = r2[t + 1], x22 = r2[t + 2];
        da[t] += a0 * x00 + a1 * x01 + a2 * x02 + a3 * x10 + a4 * x11 + a5 * x12 + a6 * x20 +
                 a7 * x21 + a8 * x22;
        db[t] += b0 * x00 + b1 * x01 + b2 * x02 + b3 * x10 + b4 * x11 + b5 * x12 + b6 * x20 +
                 b7 * x21 + b8 * x22;
    }
}

}  // namespace detail

// x: [IC,H,W], w: [OC,IC,KH,KW], bias: [OC] or undefined. Cross-correlation
// as in every DL framework. 3x3/stride-1/pad-1 (the shape the network uses
// everywhere) runs through a padded-row kernel; everything else takes the
// generic path.
template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& bias,
                  int stride = 1, int pad = 0) {
    if (x.shape().size() != 3 || w.shape().size() != 4)
        throw std::invalid_argument("conv2d: expects x[IC,H,W], w[OC,IC,KH,KW]");
    const int ic = x.shape()[0], h = x.shape()[1], ww = x.shape()[2];
    const int oc = w.shape()[0], kic = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (ic != kic) throw std::invalid_argument("conv2d: channel mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (ww + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: output collapses to zero");
    if (bias.defined() && (bias.shape().size() != 1 || bias.shape()[0] != oc))
        throw std::invalid_argument("conv2d: bias shape mismatch");

    std::vector<S> out(static_cast<size_t>(oc) * oh * ow, S(0));
    if (bias.defined())
        for (int o = 0; o < oc; ++o)
            std::fill_n(&out[static_cast<size_t>(o) * oh * ow], static_cast<size_t>(oh) * ow,
                        bias.value()[o]);

    const S* xp = x.value().data();
    const S* wp = w.value().data();
    const bool fast3x3 = kh == 3 && kw == 3 && stride == 1 && pad == 1;
    std::shared_ptr<std::vector<S>> xpad_cache;  // reused by the weight-gradient pass
    if (fast3x3) {
        const int pw = ww + 2;
        xpad_cache = std::make_shared<std::vector<S>>(detail::pad1(xp, ic, h, ww));
        const auto& xpad = *xpad_cache;
        int o = 0;
        for (; o + 1 < oc; o += 2)
            for (int i = 0; i < ic; ++i) {
                const S* ka = &wp[(static_cast<size_t>(o) * ic + i) * 9];
                const S* kb = &wp[(static_cast<size_t>(o + 1) * ic + i) * 9];
                const S* base = &xpad[static_cast<size_t>(i) * (h + 2) * pw];
                for (int oy = 0; oy < oh; ++oy)
                    detail::conv3x3_row2(&out[(static_cast<size_t>(o) * oh + oy) * ow],
                                         &out[(static_cast<size_t>(o + 1) * oh + oy) * ow],
                                         base + static_cast<size_t>(oy) * pw,
                                         base + static_cast<size_t>(oy + 1) * pw,
                                         base + static_cast<size_t>(oy + 2) * pw, ka, kb, ow);
            }
        for (; o < oc; ++o)
            for (int i = 0; i < ic; ++i) {
                const S* k = &wp[(static_cast<size_t>(o) * ic + i) * 9];
                const S* base = &xpad[static_cast<size_t>(i) * (h + 2) * pw];
                for (int oy = 0; oy < oh; ++oy)
                    detail::conv3x3_row(&out[(static_cast<size_t>(o) * oh + oy) * ow],
                                        base + static_cast<size_t>(oy) * pw,
                                        base + static_cast<size_t>(oy + 1) * pw,
                                        base + static_cast<size_t>(oy + 2) * pw, k, ow);
            }
        if (!w.requires_grad()) xpad_cache.reset();
    } else {
        for (int o = 0; o < oc; ++o)
            for (int i = 0; i < ic; ++i)
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const S wv = wp[((static_cast<size_t>(o) * ic + i) * kh + ky) * kw + kx];
                        if (wv == S(0)) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            S* dst = &out[(static_cast<size_t>(o) * oh + oy) * ow];
                            const S* src = &xp[(static_cast<size_t>(i) * h + iy) * ww];
                            if (stride == 1) {
                                const int x0 = std::max(0, pad - kx);
                                const int x1 = std::min(ow, ww + pad - kx);
                                const S* s = src + (x0 + kx - pad);
                                for (int t = x0; t < x1; ++t) dst[t] += wv * s[t - x0];
                            } else {
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < ww) dst[ox] += wv * src[ix];
                                }
                            }
                        }
                    }
    }

    auto px = x.node(), pw = w.node();
    std::vector<std::shared_ptr<Node<S>>> parents = {px, pw};
    std::shared_ptr<Node<S>> pbias = bias.defined() ? bias.node() : nullptr;
    if (pbias) parents.push_back(pbias);

    return detail::make_op<S>(
        {oc, oh, ow}, std::move(out), std::move(parents),
        [px, pw, pbias, ic, h, ww, oc, kh, kw, oh, ow, stride, pad, fast3x3,
         xpad_cache](Node<S>& n) {
            const S* gp = n.grad.data();
            if (fast3x3 && px->requires_grad) {
                px->ensure_grad();
                // dX is a 3x3 correlation of the padded output grad with the
                // flipped kernel
                const int pw2 = ww + 2;
                const auto gpad = detail::pad1(gp, oc, oh, ow);
                int i = 0;
                for (; i + 1 < ic; i += 2)
                    for (int o = 0; o < oc; ++o) {
                        const S* ka = &pw->value[(static_cast<size_t>(o) * ic + i) * 9];
                        const S* kb = &pw->value[(static_cast<size_t>(o) * ic + i + 1) * 9];
                        S kfa[9], kfb[9];
                        for (int j = 0; j < 9; ++j) {
                            kfa[j] = ka[8 - j];
                            kfb[j] = kb[8 - j];
                        }
                        const S* base = &gpad[static_cast<size_t>(o) * (oh + 2) * pw2];
                        for (int iy = 0; iy < h; ++iy)
                            detail::conv3x3_row2(
                                &px->grad[(static_cast<size_t>(i) * h + iy) * ww],
                                &px->grad[(static_cast<size_t>(i + 1) * h + iy) * ww],
                                base + static_cast<size_t>(iy) * pw2,
                                base + static_cast<size_t>(iy + 1) * pw2,
                                base + static_cast<size_t>(iy + 2) * pw2, kfa, kfb, ww);
                    }
                for (; i < ic; ++i)
                    for (int o = 0; o < oc; ++o) {
                        const S* k = &pw->value[(static_cast<size_t>(o) * ic + i) * 9];
                        S kf[9];
                        for (int j = 0; j < 9; ++j) kf[j] = k[8 - j];
                        const S* base = &gpad[static_cast<size_t>(o) * (oh + 2) * pw2];
                        for (int iy = 0; iy < h; ++iy)
                            detail::conv3x3_row(&px->grad[(static_cast<size_t>(i) * h + iy) * ww],
                                                base + static_cast<size_t>(iy) * pw2,
                                                base + static_cast<size_t>(iy + 1) * pw2,
                                                base + static_cast<size_t>(iy + 2) * pw2, kf, ww);
                    }
            } else if (px->requires_grad) {
                px->ensure_grad();
                for (int o = 0; o < oc; ++o)
                    for (int i = 0; i < ic; ++i)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const S wv =
                                    pw->value[((static_cast<size_t>(o) * ic + i) * kh + ky) * kw + kx];
                                if (wv == S(0)) continue;
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    const S* grow = &gp[(static_cast<size_t>(o) * oh + oy) * ow];
                                    S* drow = &px->grad[(static_cast<size_t>(i) * h + iy) * ww];
                                    if (stride == 1) {
                                        const int x0 = std::max(0, pad - kx);
                                        const int x1 = std::min(ow, ww + pad - kx);
                                        S* d = drow + (x0 + kx - pad);
                                        for (int t = x0; t < x1; ++t) d[t - x0] += wv * grow[t];
                                    } else {
                                        for (int ox = 0; ox < ow; ++ox) {
                                            const int ix = ox * stride + kx - pad;
                                            if (ix >= 0 && ix < ww) drow[ix] += wv * grow[ox];
                                        }
                                    }
                                }
                            }
            }
            if (fast3x3 && pw->requires_grad) {
                pw->ensure_grad();
                const int pw2 = ww + 2;
                const auto& xpad = *xpad_cache;
                for (int o = 0; o < oc; ++o)
                    for (int i = 0; i < ic; ++i) {
                        const S* base = &xpad[static_cast<size_t>(i) * (h + 2) * pw2];
                        S* dw = &pw->grad[(static_cast<size_t>(o) * ic + i) * 9];
                        S a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
                        for (int oy = 0; oy < oh; ++oy) {
                            const S* __restrict grow = &gp[(static_cast<size_t>(o) * oh + oy) * ow];
                            const S* __restrict r0 = base + static_cast<size_t>(oy) * pw2;
                            const S* __restrict r1 = base + static_cast<size_t>(oy + 1) * pw2;
                            const S* __restrict r2 = base + static_cast<size_t>(oy + 2) * pw2;
#pragma omp simd reduction(+ : a0, a1, a2, a3, a4, a5, a6, a7, a8)
                            for (int t = 0; t < ow; ++t) {
                                const S g = grow[t];
                                a0 += g * r0[t];
                                a1 += g * r0[t + 1];
                                a2 += g * r0[t + 2];
                                a3 += g * r1[t];
                                a4 += g * r1[t + 1];
                                a5 += g * r1[t + 2];
                                a6 += g * r2[t];
                                a7 += g * r2[t + 1];
                                a8 += g * r2[t + 2];
                            }
                        }
                        dw[0] += a0; dw[1] += a1; dw[2] += a2;
                        dw[3] += a3; dw[4] += a4; dw[5] += a5;
                        dw[6] += a6; dw[7] += a7; dw[8] += a8;
                    }
            } else if (pw->requires_grad) {
                pw->ensure_grad();
                for (int o = 0; o < oc; ++o)
                    for (int i = 0; i < ic; ++i)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                S acc = 0;
                                for (int oy = 0; oy < oh; ++oy) {
                                    const int iy = oy * stride + ky - pad;
                                    if (iy < 0 || iy >= h) continue;
                                    const S* grow = &gp[(static_cast<size_t>(o) * oh + oy) * ow];
                                    const S* srow = &px->value[(static_cast<size_t>(i) * h + iy) * ww];
                                    if (stride == 1) {
                                        const int x0 = std::max(0, pad - kx);
                                        const int x1 = std::min(ow, ww + pad - kx);
                                        const S* s = srow + (x0 + kx - pad);
#pragma omp simd reduction(+ : acc)
                                        for (int t = x0; t < x1; ++t) acc += grow[t] * s[t - x0];
                                    } else {
                                        for (int ox = 0; ox < ow; ++ox) {
                                            const int ix = ox * stride + kx - pad;
                                            if (ix >= 0 && ix < ww) acc += grow[ox] * srow[ix];
                                        }
                                    }
                                }
                                pw->grad[((static_cast<size_t>(o) * ic + i) * kh + ky) * kw + kx] += acc;
                            }
            }
            if (pbias && pbias->requires_grad) {
                pbias->ensure_grad();
                for (int o = 0; o < oc; ++o) {
                    S acc = 0;
                    const S* grow = &gp[static_cast<size_t>(o) * oh * ow];
#pragma omp simd reduction(+ : acc)
                    for (int t = 0; t < oh * ow; ++t) acc += grow[t];
                    pbias->grad[o] += acc;
                }
            }
        });
}

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, int stride = 1, int pad = 0) {
    return conv2d(x, w, TensorT<S>(), stride, pad);
}

// 2x2 average pooling, stride 2. H and W must be even.
template <class S>
TensorT<S> avg_pool2x2(const TensorT<S>& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("avg_pool2x2: expects [C,H,W]");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2x2: H and W must be even");
    const int oh = h / 2, ow = w / 2;
    std::vector<S> v(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                const S* r0 = &x.value()[(static_cast<size_t>(ch) * h + 2 * oy) * w + 2 * ox];
                const S* r1 = r0 + w;
                v[(static_cast<size_t>(ch) * oh + oy) * ow + ox] =
                    (r0[0] + r0[1] + r1[0] + r1[1]) * S(0.25);
            }
    auto px = x.node();
    return detail::make_op<S>({c, oh, ow}, std::move(v), {px}, [px, c, h, w, oh, ow](Node<S>& n) {
        px->ensure_grad();
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    const S g = n.grad[(static_cast<size_t>(ch) * oh + oy) * ow + ox] * S(0.25);
                    S* r0 = &px->grad[(static_cast<size_t>(ch) * h + 2 * oy) * w + 2 * ox];
                    S* r1 = r0 + w;
                    r0[0] += g; r0[1] += g; r1[0] += g; r1[1] += g;
                }
    });
}

namespace detail {

// Half-pixel-center source taps for 2x upsampling of an n-long axis.
template <class S>
struct UpTaps {
    std::vector<int> i0, i1;
    std::vector<S> w1;  // weight of i1; i0 gets (1 - w1)

    explicit UpTaps(int n) : i0(2 * n), i1(2 * n), w1(2 * n) {
        for (int o = 0; o < 2 * n; ++o) {
            const double f = 0.5 * o - 0.25;
            const int lo = static_cast<int>(std::floor(f));
            w1[o] = static_cast<S>(f - lo);
            i0[o] = std::clamp(lo, 0, n - 1);
            i1[o] = std::clamp(lo + 1, 0, n - 1);
        }
    }
};

}  // namespace detail

// Bilinear 2x upsampling with half-pixel centers and edge clamping.
template <class S>
TensorT<S> bilinear_upsample2x(const TensorT<S>& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("bilinear_upsample2x: expects [C,H,W]");
    const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int oh = 2 * h, ow = 2 * w;
    const detail::UpTaps<S> ty(h), tx(w);

    std::vector<S> v(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch) {
        const S* base = &x.value()[static_cast<size_t>(ch) * h * w];
        for (int oy = 0; oy < oh; ++oy) {
            const S* r0 = base + static_cast<size_t>(ty.i0[oy]) * w;
            const S* r1 = base + static_cast<size_t>(ty.i1[oy]) * w;
            const S wy = ty.w1[oy];
            S* dst = &v[(static_cast<size_t>(ch) * oh + oy) * ow];
            for (int ox = 0; ox < ow; ++ox) {
                const S wx = tx.w1[ox];
                const int x0 = tx.i0[ox], x1 = tx.i1[ox];
                dst[ox] = (S(1) - wy) * ((S(1) - wx) * r0[x0] + wx * r0[x1]) +
                          wy * ((S(1) - wx) * r1[x0] + wx * r1[x1]);
            }
        }
    }
    auto px = x.node();
    return detail::make_op<S>({c, oh, ow}, std::move(v), {px}, [px, c, h, w, oh, ow](Node<S>& n) {
        px->ensure_grad();
        // Transposed taps: input index i gathers from output indices
        // 2i-1 .. 2i+2; clamped forward taps fold into the same slots.
        auto transpose_taps = [](int len) {
            const detail::UpTaps<S> f(len);
            std::vector<std::array<S, 4>> t(len, {S(0), S(0), S(0), S(0)});
            for (int o = 0; o < 2 * len; ++o) {
                const int j0 = o - (2 * f.i0[o] - 1);
                const int j1 = o - (2 * f.i1[o] - 1);
                if (j0 >= 0 && j0 < 4) t[f.i0[o]][j0] += S(1) - f.w1[o];
                if (j1 >= 0 && j1 < 4) t[f.i1[o]][j1] += f.w1[o];
            }
            return t;
        };
        const auto ty = transpose_taps(h);
        const auto tx = transpose_taps(w);
        std::vector<S> tmp(static_cast<size_t>(ow));
        for (int ch = 0; ch < c; ++ch) {
            const S* gbase = &n.grad[static_cast<size_t>(ch) * oh * ow];
            S* dbase = &px->grad[static_cast<size_t>(ch) * h * w];
            for (int iy = 0; iy < h; ++iy) {
                std::fill(tmp.begin(), tmp.end(), S(0));
                for (int j = 0; j < 4; ++j) {
                    const S wy = ty[iy][j];
                    const int oy = 2 * iy - 1 + j;
                    if (wy == S(0) || oy < 0 || oy >= oh) continue;
                    const S* __restrict g = gbase + static_cast<size_t>(oy) * ow;
                    S* __restrict dst = tmp.data();
#pragma omp simd
                    for (int t = 0; t < ow; ++t) dst[t] += wy * g[t];
                }
                S* __restrict drow = dbase + static_cast<size_t>(iy) * w;
                for (int ix = 0; ix < w; ++ix) {
                    S acc = 0;
                    for (int j = 0; j < 4; ++j) {
                        const int ox = 2 * ix - 1 + j;
                        if (ox >= 0 && ox < ow) acc += tx[ix][j] * tmp[ox];
                    }
                    drow[ix] += acc;
                }
            }
        }
    });
}

// (sum feat*mask) / (sum mask) per channel; the mask is a constant, gradient
// flows only through feat.
template <class S>
TensorT<S> masked_mean(const TensorT<S>& feat, const std::vector<S>& mask) {
    if (feat.shape().size() != 3) throw std::invalid_argument("masked_mean: expects [C,H,W]");
    const int c = feat.shape()[0];
    const size_t hw = static_cast<size_t>(feat.shape()[1]) * feat.shape()[2];
    if (mask.size() != hw) throw std::invalid_argument("masked_mean: mask shape mismatch");
    S msum = 0;
    for (S m : mask) msum += m;
    if (!(msum > S(0))) throw std::invalid_argument("masked_mean: empty mask");
    std::vector<S> v(c, S(0));
    for (int ch = 0; ch < c; ++ch) {
        const S* __restrict f = &feat.value()[ch * hw];
        const S* __restrict m = mask.data();
        S acc = 0;
#pragma omp simd reduction(+ : acc)
        for (size_t i = 0; i < hw; ++i) acc += f[i] * m[i];
        v[ch] = acc / msum;
    }
    auto pf = feat.node();
    return detail::make_op<S>({c}, std::move(v), {pf}, [pf, mask, msum, c, hw](Node<S>& n) {
        pf->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            const S g = n.grad[ch] / msum;
            S* __restrict d = &pf->grad[ch * hw];
            const S* __restrict m = mask.data();
#pragma omp simd
            for (size_t i = 0; i < hw; ++i) d[i] += g * m[i];
        }
    });
}

template <class S>
TensorT<S> cosine_similarity(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "cosine_similarity");
    S dot = 0, na2 = 0, nb2 = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        dot += a.value()[i] * b.value()[i];
        na2 += a.value()[i] * a.value()[i];
        nb2 += b.value()[i] * b.value()[i];
    }
    if (!(na2 > S(0)) || !(nb2 > S(0)))
        throw std::invalid_argument("cosine_similarity: zero-norm embedding");
    const S na = std::sqrt(na2), nb = std::sqrt(nb2);
    const S cosv = dot / (na * nb);
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>({1}, {cosv}, {pa, pb}, [pa, pb, na, nb, cosv](Node<S>& n) {
        const S g = n.grad[0];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < pa->value.size(); ++i)
                pa->grad[i] += g * (pb->value[i] / (na * nb) - cosv * pa->value[i] / (na * na));
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < pb->value.size(); ++i)
                pb->grad[i] += g * (pa->value[i] / (na * nb) - cosv * pb->value[i] / (nb * nb));
        }
    });
}

// ------------------------------------------------------------- backward

template <class S>
void backward(TensorT<S>& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!loss.requires_grad()) return;

    // Topological order over the subgraph that requires grad.
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Intermediates start each backward pass at zero; leaf grads accumulate
    // across calls.
    for (Node<S>* n : order)
        if (!n->is_leaf) n->grad.assign(n->value.size(), S(0));
    Node<S>* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] += S(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<S>* n = *it;
        if (!n->is_leaf && n->backprop) n->backprop(*n);
    }
}

// ------------------------------------------------------------- parameters

template <class S>
struct ParamSetT {
    std::vector<std::string> names;
    std::vector<TensorT<S>> tensors;

    void add(const std::string& name, TensorT<S> t) {
        for (const auto& n : names)
            if (n == name) throw std::invalid_argument("ParamSet: duplicate name " + name);
        names.push_back(name);
        tensors.push_back(std::move(t));
    }
    size_t size() const { return tensors.size(); }
    size_t numel() const {
        size_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }
    TensorT<S>& operator[](size_t i) { return tensors[i]; }
    const TensorT<S>& operator[](size_t i) const { return tensors[i]; }

    void zero_grad() {
        for (auto& t : tensors) t.zero_grad();
    }

    std::vector<S> flatten() const {
        std::vector<S> out;
        out.reserve(numel());
        for (const auto& t : tensors) out.insert(out.end(), t.value().begin(), t.value().end());
        return out;
    }
    void unflatten(const std::vector<S>& flat) {
        if (flat.size() != numel()) throw std::invalid_argument("unflatten: length mismatch");
        size_t off = 0;
        for (auto& t : tensors) {
            std::copy(flat.begin() + off, flat.begin() + off + t.numel(), t.value().begin());
            off += t.numel();
        }
    }

    // Deep copy; copies values only, fresh leaves.
    ParamSetT clone(bool requires_grad) const {
        ParamSetT out;
        for (size_t i = 0; i < tensors.size(); ++i)
            out.add(names[i], TensorT<S>::leaf(tensors[i].shape(), tensors[i].value(), requires_grad));
        return out;
    }
};

// ------------------------------------------------------------- optimizers

template <class S>
void sgd_step(ParamSetT<S>& params, double lr) {
    for (auto& t : params.tensors) {
        if (!t.has_grad()) throw std::runtime_error("sgd_step: missing grad");
        auto& v = t.value();
        const auto& g = t.grad_view();
        for (size_t i = 0; i < v.size(); ++i) v[i] -= static_cast<S>(lr) * g[i];
    }
}

template <class S>
struct AdamStateT {
    std::vector<std::vector<S>> m, v;
    long t = 0;
};

template <class S>
void adam_step(ParamSetT<S>& params, double lr, AdamStateT<S>& state, double beta1 = 0.9,
               double beta2 = 0.99, double eps = 1e-8) {
    if (state.m.empty()) {
        for (const auto& t : params.tensors) {
            state.m.emplace_back(t.numel(), S(0));
            state.v.emplace_back(t.numel(), S(0));
        }
    }
    if (state.m.size() != params.size()) throw std::runtime_error("adam_step: state size mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, state.t);
    const double bc2 = 1.0 - std::pow(beta2, state.t);
    for (size_t k = 0; k < params.size(); ++k) {
        auto& t = params.tensors[k];
        if (!t.has_grad()) throw std::runtime_error("adam_step: missing grad");
        auto& val = t.value();
        const auto& g = t.grad_view();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (size_t i = 0; i < val.size(); ++i) {
            m[i] = static_cast<S>(beta1) * m[i] + static_cast<S>(1.0 - beta1) * g[i];
            v[i] = static_cast<S>(beta2) * v[i] + static_cast<S>(1.0 - beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            val[i] -= static_cast<S>(lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

using Tensor = TensorT<float>;
using ParamSet = ParamSetT<float>;
using AdamState = AdamStateT<float>;

}  // namespace feddg::ad
