#include "feddg/morphology.hpp"

#include <numeric>
#include <stdexcept>

namespace feddg {

size_t BinaryMask::count() const {
    return std::accumulate(m.begin(), m.end(), size_t{0});
}

namespace {

void check_same(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("mask: shape mismatch");
}

// Out-of-frame is treated as background: dilation never grows past the
// frame, erosion strips foreground touching the border.
BinaryMask cross_pass(const BinaryMask& in, bool dilation) {
    BinaryMask out(in.h, in.w);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            const bool c = in.at(y, x);
            const bool up = y > 0 && in.at(y - 1, x);
            const bool dn = y < in.h - 1 && in.at(y + 1, x);
            const bool lf = x > 0 && in.at(y, x - 1);
            const bool rt = x < in.w - 1 && in.at(y, x + 1);
            if (dilation)
                out.set(y, x, (c || up || dn || lf || rt) ? 1 : 0);
            else
                out.set(y, x, (c && up && dn && lf && rt) ? 1 : 0);
        }
    return out;
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, int r) {
    if (r < 0) throw std::invalid_argument("dilate: negative radius");
    BinaryMask out = m;
    for (int i = 0; i < r; ++i) out = cross_pass(out, true);
    return out;
}

BinaryMask erode(const BinaryMask& m, int r) {
    if (r < 0) throw std::invalid_argument("erode: negative radius");
    BinaryMask out = m;
    for (int i = 0; i < r; ++i) out = cross_pass(out, false);
    return out;
}

BinaryMask mask_and(const BinaryMask& a, const BinaryMask& b) {
    check_same(a, b);
    BinaryMask out(a.h, a.w);
    for (size_t i = 0; i < out.m.size(); ++i) out.m[i] = a.m[i] & b.m[i];
    return out;
}

BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b) {
    check_same(a, b);
    BinaryMask out(a.h, a.w);
    for (size_t i = 0; i < out.m.size(); ++i) out.m[i] = a.m[i] ^ b.m[i];
    return out;
}

BinaryMask mask_and_not(const BinaryMask& a, const BinaryMask& b) {
    check_same(a, b);
    BinaryMask out(a.h, a.w);
    for (size_t i = 0; i < out.m.size(); ++i) out.m[i] = a.m[i] & static_cast<uint8_t>(!b.m[i]);
    return out;
}

BinaryMask boundary_pixels(const BinaryMask& m) {
    BinaryMask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            if (!m.at(y, x)) continue;
            const bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1;
            if (edge || !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1))
                out.set(y, x, 1);
        }
    return out;
}

}  // namespace feddg
