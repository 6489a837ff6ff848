#pragma once

#include <cstdint>
#include <vector>

namespace feddg {

// Binary grid, row-major h*w, values 0/1.
struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> m;

    BinaryMask() = default;
    BinaryMask(int h_, int w_) : h(h_), w(w_), m(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t at(int y, int x) const { return m[static_cast<size_t>(y) * w + x]; }
    void set(int y, int x, uint8_t v) { m[static_cast<size_t>(y) * w + x] = v; }
    size_t count() const;
    bool empty() const { return count() == 0; }
};

// Dilation/erosion with a 3x3 cross structuring element, iterated r times.
BinaryMask dilate(const BinaryMask& m, int r);
BinaryMask erode(const BinaryMask& m, int r);

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b);
BinaryMask mask_and_not(const BinaryMask& a, const BinaryMask& b);

// Foreground pixels with at least one 4-neighbor outside the set (frame
// border counts as outside).
BinaryMask boundary_pixels(const BinaryMask& m);

}  // namespace feddg
