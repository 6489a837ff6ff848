#pragma once

// Small encoder-decoder fully-convolutional segmentation net. Every level
// runs at base_width channels: depth x [conv3x3+relu, conv3x3+relu,
// 2x avg-pool] down, a two-conv bottleneck, then mirrored bilinear-upsample
// + skip-concat + two-conv blocks up, and a 1x1 per-class sigmoid head.
// The last two decoder activation maps, upsampled to input size and
// concatenated, are exposed for boundary feature pooling.

#include <random>
#include <string>

#include "feddg/autodiff.hpp"
#include "feddg/spectral.hpp"

namespace feddg {

struct SegNetConfig {
    int in_channels = 1;
    int base_width = 8;
    int depth = 3;        // down/up levels; >= 2 so two decoder maps exist
    int num_classes = 2;  // nested disc/cup-style targets

    void validate() const {
        if (in_channels != 1 && in_channels != 3)
            throw std::invalid_argument("segnet: in_channels must be 1 or 3");
        if (base_width < 4) throw std::invalid_argument("segnet: base_width must be >= 4");
        if (depth < 2) throw std::invalid_argument("segnet: depth must be >= 2");
        if (num_classes < 1) throw std::invalid_argument("segnet: num_classes must be >= 1");
    }
    // feat_maps channel count: width(level1) + width(level0)
    int feat_channels() const { return 2 * base_width; }
};

template <class S>
struct ForwardOutputT {
    ad::TensorT<S> probs;      // [num_classes, H, W], per-class sigmoid
    ad::TensorT<S> feat_maps;  // [2*base_width, H, W]
};

namespace segnet_detail {

template <class S>
ad::TensorT<S> he_conv(std::mt19937_64& rng, int oc, int ic, int k) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (ic * k * k)));
    std::vector<S> w(static_cast<size_t>(oc) * ic * k * k);
    for (auto& v : w) v = static_cast<S>(dist(rng));
    return ad::TensorT<S>::leaf({oc, ic, k, k}, std::move(w), true);
}

}  // namespace segnet_detail

// Parameter naming: enc{L}_conv{0,1}, bot_conv{0,1}, dec{L}_conv{0,1},
// head; each with _w / _b.
template <class S>
ad::ParamSetT<S> segnet_init(const SegNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed ^ 0xfeddc0defeddc0deull);
    ad::ParamSetT<S> p;
    const int w = cfg.base_width;
    auto add_conv = [&](const std::string& name, int oc, int ic, int k) {
        p.add(name + "_w", segnet_detail::he_conv<S>(rng, oc, ic, k));
        // small positive bias keeps narrow relu blocks alive at init
        p.add(name + "_b", ad::TensorT<S>::full({oc}, static_cast<S>(0.05), true));
    };
    for (int l = 0; l < cfg.depth; ++l) {
        add_conv("enc" + std::to_string(l) + "_conv0", w, l == 0 ? cfg.in_channels : w, 3);
        add_conv("enc" + std::to_string(l) + "_conv1", w, w, 3);
    }
    add_conv("bot_conv0", w, w, 3);
    add_conv("bot_conv1", w, w, 3);
    for (int l = cfg.depth - 1; l >= 0; --l) {
        add_conv("dec" + std::to_string(l) + "_conv0", w, 2 * w, 3);  // upsampled + skip concat
        add_conv("dec" + std::to_string(l) + "_conv1", w, w, 3);
    }
    add_conv("head", cfg.num_classes, w, 1);
    return p;
}

template <class S>
ad::TensorT<S> image_to_tensor(const Image& img) {
    std::vector<S> v(img.size());
    for (int ch = 0; ch < img.c; ++ch)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                v[(static_cast<size_t>(ch) * img.h + y) * img.w + x] = static_cast<S>(img.at(y, x, ch));
    return ad::TensorT<S>::leaf({img.c, img.h, img.w}, std::move(v), false);
}

template <class S>
ForwardOutputT<S> segnet_forward(const ad::ParamSetT<S>& params, const SegNetConfig& cfg,
                                 const ad::TensorT<S>& img) {
    cfg.validate();
    if (img.shape().size() != 3 || img.shape()[0] != cfg.in_channels)
        throw std::invalid_argument("segnet: input channels do not match config");
    const int h = img.shape()[1], w = img.shape()[2];
    if (h % (1 << cfg.depth) || w % (1 << cfg.depth))
        throw std::invalid_argument("segnet: input size must be divisible by 2^depth");

    auto find = [&params](const std::string& name) -> const ad::TensorT<S>& {
        for (size_t i = 0; i < params.size(); ++i)
            if (params.names[i] == name) return params.tensors[i];
        throw std::invalid_argument("segnet: missing parameter " + name);
    };
    auto conv_block = [&](const ad::TensorT<S>& x, const std::string& name) {
        auto y = ad::relu(ad::conv2d(x, find(name + "_conv0_w"), find(name + "_conv0_b"), 1, 1));
        return ad::relu(ad::conv2d(y, find(name + "_conv1_w"), find(name + "_conv1_b"), 1, 1));
    };

    std::vector<ad::TensorT<S>> skips;
    ad::TensorT<S> x = img;
    for (int l = 0; l < cfg.depth; ++l) {
        x = conv_block(x, "enc" + std::to_string(l));
        skips.push_back(x);
        x = ad::avg_pool2x2(x);
    }
    x = conv_block(x, "bot");

    ad::TensorT<S> last1;  // second-to-last decoder map, upsampled to H x W below
    for (int l = cfg.depth - 1; l >= 0; --l) {
        x = ad::bilinear_upsample2x(x);
        x = ad::concat0(x, skips[l]);
        x = conv_block(x, "dec" + std::to_string(l));
        if (l == 1) last1 = x;
    }

    ForwardOutputT<S> out;
    auto logits = ad::conv2d(x, find("head_w"), find("head_b"), 1, 0);
    out.probs = ad::sigmoid(logits);
    auto up1 = last1;
    while (up1.shape()[1] < h) up1 = ad::bilinear_upsample2x(up1);
    out.feat_maps = ad::concat0(up1, x);
    return out;
}

template <class S>
ForwardOutputT<S> segnet_forward(const ad::ParamSetT<S>& params, const SegNetConfig& cfg,
                                 const Image& img) {
    return segnet_forward(params, cfg, image_to_tensor<S>(img));
}

}  // namespace feddg
