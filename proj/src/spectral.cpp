#include "feddg/spectral.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "feddg/fft.hpp"

namespace feddg {

namespace {

void validate(const Image& img) {
    if (img.h < 4 || img.w < 4) throw std::invalid_argument("Image: H and W must be >= 4");
    if (img.c != 1 && img.c != 3) throw std::invalid_argument("Image: C must be 1 or 3");
    if (img.data.size() != static_cast<size_t>(img.h) * img.w * img.c)
        throw std::invalid_argument("Image: data length does not match shape");
    for (float v : img.data)
        if (!std::isfinite(v)) throw std::invalid_argument("Image: non-finite value");
}

// Index map between raw DFT layout (bin 0 at [0][0]) and centered layout
// (bin 0 at [h/2][w/2]).
inline int to_raw(int centered, int n) { return (centered + n - n / 2) % n; }

}  // namespace

void validate_image(const Image& img) { validate(img); }

std::vector<std::complex<double>> dft2_centered(const Image& img, int channel) {
    const int h = img.h, w = img.w;
    std::vector<std::complex<double>> grid(static_cast<size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            grid[static_cast<size_t>(y) * w + x] = img.at(y, x, channel);
    fft::forward2d(grid, h, w);
    std::vector<std::complex<double>> centered(grid.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            centered[static_cast<size_t>(y) * w + x] =
                grid[static_cast<size_t>(to_raw(y, h)) * w + to_raw(x, w)];
    return centered;
}

Spectrum forward_dft(const Image& img) {
    validate(img);
    Spectrum spec;
    spec.h = img.h;
    spec.w = img.w;
    spec.c = img.c;
    spec.amplitude.resize(img.size());
    spec.phase.resize(img.size());
    for (int ch = 0; ch < img.c; ++ch) {
        auto field = dft2_centered(img, ch);
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const auto v = field[static_cast<size_t>(y) * img.w + x];
                const size_t i = (static_cast<size_t>(y) * img.w + x) * img.c + ch;
                spec.amplitude[i] = std::abs(v);
                spec.phase[i] = std::atan2(v.imag(), v.real());
            }
    }
    return spec;
}

Image inverse_dft(const Spectrum& spec) {
    if (spec.amplitude.size() != spec.phase.size())
        throw std::invalid_argument("inverse_dft: amplitude/phase shape mismatch");
    if (spec.amplitude.size() != static_cast<size_t>(spec.h) * spec.w * spec.c)
        throw std::invalid_argument("inverse_dft: data length does not match shape");
    const int h = spec.h, w = spec.w;
    Image img(h, w, spec.c);
    std::vector<std::complex<double>> grid(static_cast<size_t>(h) * w);
    for (int ch = 0; ch < spec.c; ++ch) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const size_t i = (static_cast<size_t>(y) * w + x) * spec.c + ch;
                grid[static_cast<size_t>(to_raw(y, h)) * w + to_raw(x, w)] =
                    std::polar(spec.amplitude[i], spec.phase[i]);
            }
        fft::inverse2d(grid, h, w);
        double max_im = 0.0;
        for (const auto& v : grid) max_im = std::max(max_im, std::abs(v.imag()));
        if (max_im >= 1e-5)
            throw std::runtime_error("inverse_dft: imaginary residue " + std::to_string(max_im) +
                                     " exceeds 1e-5; spectrum not sourced from a real image?");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                img.at(y, x, ch) = static_cast<float>(grid[static_cast<size_t>(y) * w + x].real());
    }
    return img;
}

FreqMask build_mask(int h, int w, double alpha) {
    if (!(alpha > 0.0 && alpha <= 0.5))
        throw std::invalid_argument("build_mask: alpha must be in (0, 0.5]");
    if (h < 4 || w < 4) throw std::invalid_argument("build_mask: H and W must be >= 4");
    FreqMask mask;
    mask.h = h;
    mask.w = w;
    mask.half_h = std::max(1, static_cast<int>(std::floor(alpha * h)));
    mask.half_w = std::max(1, static_cast<int>(std::floor(alpha * w)));
    mask.m.assign(static_cast<size_t>(h) * w, 0);
    const int cy = h / 2, cx = w / 2;
    for (int y = cy - mask.half_h; y <= cy + mask.half_h; ++y)
        for (int x = cx - mask.half_w; x <= cx + mask.half_w; ++x)
            if (y >= 0 && y < h && x >= 0 && x < w) mask.m[static_cast<size_t>(y) * w + x] = 1;
    return mask;
}

Spectrum interpolate_amplitude(const Spectrum& local, const std::vector<double>& foreign_amp,
                               const FreqMask& mask, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw std::invalid_argument("interpolate_amplitude: lambda must be in [0, 1]");
    if (foreign_amp.size() != local.amplitude.size())
        throw std::invalid_argument("interpolate_amplitude: foreign amplitude shape mismatch");
    if (mask.h != local.h || mask.w != local.w)
        throw std::invalid_argument("interpolate_amplitude: mask shape mismatch");
    Spectrum out = local;  // phase copied bit-for-bit
    for (int y = 0; y < local.h; ++y)
        for (int x = 0; x < local.w; ++x) {
            if (!mask.at(y, x)) continue;
            for (int ch = 0; ch < local.c; ++ch) {
                const size_t i = (static_cast<size_t>(y) * local.w + x) * local.c + ch;
                out.amplitude[i] = (1.0 - lambda) * local.amplitude[i] + lambda * foreign_amp[i];
            }
        }
    return out;
}

Image transform_image(const Image& img, const std::vector<double>& foreign_amp,
                      const FreqMask& mask, double lambda) {
    return inverse_dft(interpolate_amplitude(forward_dft(img), foreign_amp, mask, lambda));
}

}  // namespace feddg
