#pragma once

#include <complex>
#include <cstdint>
#include <vector>

namespace feddg {

// Dense real image, row-major (h, w, c) interleaved. C is 1 or 3.
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h_, int w_, int c_) : h(h_), w(w_), c(c_), data(static_cast<size_t>(h_) * w_ * c_, 0.f) {}

    float& at(int y, int x, int ch) { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    float at(int y, int x, int ch) const { return data[(static_cast<size_t>(y) * w + x) * c + ch]; }
    size_t size() const { return data.size(); }
};

// Amplitude/phase split of the 2D DFT of one image, stored in centered
// layout: zero frequency sits at spatial index (h/2, w/2).
struct Spectrum {
    int h = 0, w = 0, c = 0;
    std::vector<double> amplitude;  // >= 0, same (h, w, c) layout as Image
    std::vector<double> phase;      // in (-pi, pi]
};

// Binary low-frequency mask: 1 exactly on the centered rectangle of
// half-extents (half_h, half_w), 0 elsewhere.
struct FreqMask {
    int h = 0, w = 0;
    int half_h = 0, half_w = 0;
    std::vector<uint8_t> m;  // h*w

    bool at(int y, int x) const { return m[static_cast<size_t>(y) * w + x] != 0; }
};

// Unnormalized centered complex 2D DFT of a single channel; exposed so the
// linearity property can be checked on the complex field and so tests can
// compare against a direct double-sum evaluation.
std::vector<std::complex<double>> dft2_centered(const Image& img, int channel);

// Throws std::invalid_argument when the Image invariants are violated.
void validate_image(const Image& img);

Spectrum forward_dft(const Image& img);
Image inverse_dft(const Spectrum& spec);

FreqMask build_mask(int h, int w, double alpha);

// Phase kept untouched; amplitude kept outside the mask, convex
// interpolation (1-lambda)*local + lambda*foreign inside.
Spectrum interpolate_amplitude(const Spectrum& local, const std::vector<double>& foreign_amp,
                               const FreqMask& mask, double lambda);

// forward_dft -> interpolate_amplitude -> inverse_dft
Image transform_image(const Image& img, const std::vector<double>& foreign_amp,
                      const FreqMask& mask, double lambda);

}  // namespace feddg
