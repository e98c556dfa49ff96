#pragma once

// Orthonormal block DCT-II and the low-pass perturbation codec.

#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "advshield/tensor.hpp"

namespace advshield {

inline constexpr std::size_t kBlock = 8;

// Standard JPEG luminance quantization table (Annex K), row-major.
inline constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

// C[u][x] = a(u) cos((2x+1) u pi / 2p), a(0) = sqrt(1/p), a(u>0) = sqrt(2/p).
inline const std::array<double, 64>& dct_matrix() {
    static const std::array<double, 64> c = [] {
        std::array<double, 64> m{};
        const double p = static_cast<double>(kBlock);
        for (std::size_t u = 0; u < kBlock; ++u)
            for (std::size_t x = 0; x < kBlock; ++x) {
                double a = u == 0 ? std::sqrt(1.0 / p) : std::sqrt(2.0 / p);
                m[u * kBlock + x] = a * std::cos((2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) *
                                                 std::numbers::pi / (2.0 * p));
            }
        return m;
    }();
    return c;
}

using Block = std::array<double, 64>;

// out = C * in * C^T
inline Block dct2(const Block& in) {
    const auto& c = dct_matrix();
    Block tmp{}, out{};
    for (std::size_t u = 0; u < kBlock; ++u)
        for (std::size_t y = 0; y < kBlock; ++y) {
            double s = 0;
            for (std::size_t x = 0; x < kBlock; ++x) s += c[u * kBlock + x] * in[x * kBlock + y];
            tmp[u * kBlock + y] = s;
        }
    for (std::size_t u = 0; u < kBlock; ++u)
        for (std::size_t v = 0; v < kBlock; ++v) {
            double s = 0;
            for (std::size_t y = 0; y < kBlock; ++y) s += tmp[u * kBlock + y] * c[v * kBlock + y];
            out[u * kBlock + v] = s;
        }
    return out;
}

// out = C^T * in * C
inline Block idct2(const Block& in) {
    const auto& c = dct_matrix();
    Block tmp{}, out{};
    for (std::size_t x = 0; x < kBlock; ++x)
        for (std::size_t v = 0; v < kBlock; ++v) {
            double s = 0;
            for (std::size_t u = 0; u < kBlock; ++u) s += c[u * kBlock + x] * in[u * kBlock + v];
            tmp[x * kBlock + v] = s;
        }
    for (std::size_t x = 0; x < kBlock; ++x)
        for (std::size_t y = 0; y < kBlock; ++y) {
            double s = 0;
            for (std::size_t v = 0; v < kBlock; ++v) s += tmp[x * kBlock + v] * c[v * kBlock + y];
            out[x * kBlock + y] = s;
        }
    return out;
}

inline std::size_t blocks_for(std::size_t n) { return (n + kBlock - 1) / kBlock; }

// [c,h,w] -> [c, ceil(h/8), ceil(w/8), 8, 8]; the tail is zero-padded.
inline Tensor dct_patchify(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("dct_patchify expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), bh = blocks_for(h), bw = blocks_for(w);
    std::vector<double> out(c * bh * bw * 64);
    auto xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < bh; ++by)
            for (std::size_t bx = 0; bx < bw; ++bx) {
                Block blk{};
                for (std::size_t i = 0; i < kBlock; ++i)
                    for (std::size_t j = 0; j < kBlock; ++j) {
                        std::size_t y = by * kBlock + i, xx = bx * kBlock + j;
                        blk[i * kBlock + j] = (y < h && xx < w) ? xv[(ch * h + y) * w + xx] : 0.0;
                    }
                Block f = dct2(blk);
                std::copy(f.begin(), f.end(), out.begin() + static_cast<std::ptrdiff_t>(((ch * bh + by) * bw + bx) * 64));
            }
    return Tensor({c, bh, bw, kBlock, kBlock}, std::move(out));
}

// Inverse of dct_patchify, cropping the padding back to (h, w).
inline Tensor dct_unpatchify(const Tensor& coeffs, std::size_t h, std::size_t w) {
    if (coeffs.rank() != 5 || coeffs.dim(3) != kBlock || coeffs.dim(4) != kBlock)
        throw ShapeError("dct_unpatchify expects [c,h',w',8,8], got " + shape_str(coeffs.shape()));
    std::size_t c = coeffs.dim(0), bh = coeffs.dim(1), bw = coeffs.dim(2);
    if (blocks_for(h) != bh || blocks_for(w) != bw)
        throw ShapeError("dct_unpatchify: " + std::to_string(h) + "x" + std::to_string(w) + " does not match " +
                         shape_str(coeffs.shape()));
    std::vector<double> out(c * h * w);
    auto cv = coeffs.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t by = 0; by < bh; ++by)
            for (std::size_t bx = 0; bx < bw; ++bx) {
                Block f;
                std::copy_n(cv.begin() + static_cast<std::ptrdiff_t>(((ch * bh + by) * bw + bx) * 64), 64, f.begin());
                Block blk = idct2(f);
                for (std::size_t i = 0; i < kBlock; ++i)
                    for (std::size_t j = 0; j < kBlock; ++j) {
                        std::size_t y = by * kBlock + i, xx = bx * kBlock + j;
                        if (y < h && xx < w) out[(ch * h + y) * w + xx] = blk[i * kBlock + j];
                    }
            }
    return Tensor({c, h, w}, std::move(out));
}

// Keeps DCT coefficient (u,v) iff the luminance table entry there is below
// the threshold (40 by default: 23 of 64 coefficients, DC included).
struct LowPassCodec {
    std::array<bool, 64> keep{};

    explicit LowPassCodec(int threshold = 40) {
        for (std::size_t i = 0; i < 64; ++i) keep[i] = kLuminanceTable[i] < threshold;
    }
    std::size_t kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }
};

// IDCT(DCT(x) * M_lp), per 8x8 patch and channel, padding stripped. A
// projection (idempotent) when h and w are multiples of 8.
inline Tensor low_pass_filter(const LowPassCodec& codec, const Tensor& x) {
    Tensor f = dct_patchify(x);
    std::vector<double> v = f.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (!codec.keep[i % 64]) v[i] = 0.0;
    return dct_unpatchify(Tensor(f.shape(), std::move(v)), x.dim(1), x.dim(2));
}

}  // namespace advshield
