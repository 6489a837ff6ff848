#pragma once

#include <complex>
#include <vector>

namespace feddg::fft {

using cdouble = std::complex<double>;

// In-place forward DFT of length data.size(). Unnormalized
// (X_k = sum_j x_j exp(-2*pi*i*j*k/n)). Radix-2 for powers of two,
// Bluestein chirp-z fallback for everything else.
void forward(std::vector<cdouble>& data);

// In-place inverse DFT with 1/n normalization.
void inverse(std::vector<cdouble>& data);

// Row-major 2D transforms over an h x w grid.
void forward2d(std::vector<cdouble>& grid, int h, int w);
void inverse2d(std::vector<cdouble>& grid, int h, int w);

}  // namespace feddg::fft
