#include "feddg/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace feddg::fft {

namespace {

constexpr double kPi = std::numbers::pi;

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

size_t next_pow2(size_t n) {
    size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Iterative Cooley-Tukey, n must be a power of two. sign = -1 forward.
void fft_pow2(std::vector<cdouble>& a, int sign) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * kPi / static_cast<double>(len);
        const cdouble wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            cdouble w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                cdouble u = a[i + k];
                cdouble v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
}

// Bluestein chirp-z transform for arbitrary n, expressed through a
// power-of-two convolution. sign = -1 forward.
void fft_bluestein(std::vector<cdouble>& x, int sign) {
    const size_t n = x.size();
    const size_t m = next_pow2(2 * n - 1);

    std::vector<cdouble> chirp(n);
    for (size_t j = 0; j < n; ++j) {
        // j^2 mod 2n keeps the angle argument small for large n
        const size_t j2 = (j * j) % (2 * n);
        const double ang = sign * kPi * static_cast<double>(j2) / static_cast<double>(n);
        chirp[j] = cdouble(std::cos(ang), std::sin(ang));
    }

    std::vector<cdouble> a(m, cdouble(0.0, 0.0));
    std::vector<cdouble> b(m, cdouble(0.0, 0.0));
    for (size_t j = 0; j < n; ++j) a[j] = x[j] * chirp[j];
    b[0] = std::conj(chirp[0]);
    for (size_t j = 1; j < n; ++j) b[j] = b[m - j] = std::conj(chirp[j]);

    fft_pow2(a, -1);
    fft_pow2(b, -1);
    for (size_t j = 0; j < m; ++j) a[j] *= b[j];
    fft_pow2(a, +1);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (size_t k = 0; k < n; ++k) x[k] = a[k] * inv_m * chirp[k];
}

void transform(std::vector<cdouble>& data, int sign) {
    if (data.empty()) throw std::invalid_argument("fft: empty input");
    if (data.size() == 1) return;
    if (is_pow2(data.size()))
        fft_pow2(data, sign);
    else
        fft_bluestein(data, sign);
}

}  // namespace

void forward(std::vector<cdouble>& data) { transform(data, -1); }

void inverse(std::vector<cdouble>& data) {
    transform(data, +1);
    const double inv_n = 1.0 / static_cast<double>(data.size());
    for (auto& v : data) v *= inv_n;
}

void forward2d(std::vector<cdouble>& grid, int h, int w) {
    if (h <= 0 || w <= 0 || grid.size() != static_cast<size_t>(h) * w)
        throw std::invalid_argument("fft: grid size does not match h*w");
    std::vector<cdouble> line;
    for (int r = 0; r < h; ++r) {
        line.assign(grid.begin() + static_cast<size_t>(r) * w,
                    grid.begin() + static_cast<size_t>(r + 1) * w);
        forward(line);
        std::copy(line.begin(), line.end(), grid.begin() + static_cast<size_t>(r) * w);
    }
    line.resize(h);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) line[r] = grid[static_cast<size_t>(r) * w + c];
        forward(line);
        for (int r = 0; r < h; ++r) grid[static_cast<size_t>(r) * w + c] = line[r];
    }
}

void inverse2d(std::vector<cdouble>& grid, int h, int w) {
    if (h <= 0 || w <= 0 || grid.size() != static_cast<size_t>(h) * w)
        throw std::invalid_argument("fft: grid size does not match h*w");
    for (auto& v : grid) v = std::conj(v);
    forward2d(grid, h, w);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (auto& v : grid) v = std::conj(v) * inv;
}

}  // namespace feddg::fft
