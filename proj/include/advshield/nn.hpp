#pragma once

// Linear-algebra and convolution primitives on top of tensor.hpp.

#include "advshield/tensor.hpp"

namespace advshield {

// Batched matrix product over the last two axes; leading axes must agree.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || a.rank() != b.rank())
        throw ShapeError("matmul: ranks of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const Shape &as = a.shape(), &bs = b.shape();
    std::size_t r = as.size();
    for (std::size_t i = 0; i + 2 < r; ++i)
        if (as[i] != bs[i])
            throw ShapeError("matmul: batch dims differ " + shape_str(as) + " vs " + shape_str(bs));
    std::size_t m = as[r - 2], k = as[r - 1], n = bs[r - 1];
    if (bs[r - 2] != k) throw ShapeError("matmul: inner dims differ " + shape_str(as) + " vs " + shape_str(bs));
    std::size_t batch = a.numel() / (m * k);
    Shape os = as;
    os[r - 1] = n;
    std::vector<double> out(batch * m * n, 0.0);
    auto av = a.data(), bv = b.data();
    for (std::size_t t = 0; t < batch; ++t) {
        const double* A = av.data() + t * m * k;
        const double* B = bv.data() + t * k * n;
        double* C = out.data() + t * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                double aip = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j) C[i * n + j] += aip * B[p * n + j];
            }
    }
    return make_result(os, std::move(out), {a, b}, [a, b, batch, m, k, n](detail::Node& self) {
        auto av = a.data(), bv = b.data();
        for (std::size_t t = 0; t < batch; ++t) {
            const double* G = self.grad.data() + t * m * n;
            if (a.requires_grad()) {
                double* GA = a.node().grad_buffer().data() + t * m * k;
                const double* B = bv.data() + t * k * n;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0;
                        for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                        GA[i * k + p] += s;
                    }
            }
            if (b.requires_grad()) {
                double* GB = b.node().grad_buffer().data() + t * k * n;
                const double* A = av.data() + t * m * k;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double aip = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
                    }
            }
        }
    });
}

// x[n,k] * w[k,m] + bias[m] (bias broadcast over rows).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    if (!bias.defined()) return y;
    std::size_t rows = y.dim(0), cols = y.dim(1);
    if (bias.numel() != cols) throw ShapeError("linear: bias " + shape_str(bias.shape()) + " vs output " + shape_str(y.shape()));
    std::vector<double> out = y.values();
    auto bv = bias.data();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += bv[j];
    return make_result(y.shape(), std::move(out), {y, bias}, [y, bias, rows, cols](detail::Node& self) {
        if (y.requires_grad()) {
            auto& g = y.node().grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bias.requires_grad()) {
            auto& g = bias.node().grad_buffer();
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) g[j] += self.grad[i * cols + j];
        }
    });
}

struct Padding {
    std::size_t top = 0, bottom = 0, left = 0, right = 0;
};

// Zero padding of a [c,h,w] tensor.
inline Tensor pad2d(const Tensor& x, Padding p) {
    if (x.rank() != 3) throw ShapeError("pad2d expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::size_t H = h + p.top + p.bottom, W = w + p.left + p.right;
    if (H == h && W == w) return x;
    std::vector<double> out(c * H * W, 0.0);
    auto xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            std::copy_n(xv.data() + (ch * h + i) * w, w, out.data() + (ch * H + i + p.top) * W + p.left);
    return make_result({c, H, W}, std::move(out), {x}, [x, c, h, w, H, W, p](detail::Node& self) {
        auto& g = x.node().grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    g[(ch * h + i) * w + j] += self.grad[(ch * H + i + p.top) * W + j + p.left];
    });
}

// Cross-correlation of x[c_in,h,w] with weight[c_out,c_in,kh,kw], optional bias[c_out].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0) {
    if (input.rank() != 3 || weight.rank() != 4)
        throw ShapeError("conv2d expects x[c,h,w] and w[o,c,kh,kw], got " + shape_str(input.shape()) + " and " +
                         shape_str(weight.shape()));
    if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
    Tensor x = pad2d(input, {padding, padding, padding, padding});
    std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::size_t co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != ci)
        throw ShapeError("conv2d: channel mismatch " + shape_str(input.shape()) + " vs " + shape_str(weight.shape()));
    if (kh > h || kw > w)
        throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    if (bias.defined() && bias.numel() != co) throw ShapeError("conv2d: bias size " + shape_str(bias.shape()));
    std::size_t oh = (h - kh) / stride + 1, ow = (w - kw) / stride + 1;
    std::vector<double> out(co * oh * ow, 0.0);
    // im2col: one row of oh*ow input samples per (c,u,v) tap, then a
    // row-times-scalar accumulation into each output plane.
    const std::size_t taps = ci * kh * kw, n = oh * ow;
    std::vector<double> col(taps * n);
    const double* xv = x.data().data();
    for (std::size_t c = 0; c < ci; ++c)
        for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
                double* C = col.data() + ((c * kh + u) * kw + v) * n;
                for (std::size_t i = 0; i < oh; ++i) {
                    const double* X = xv + (c * h + i * stride + u) * w + v;
                    for (std::size_t j = 0; j < ow; ++j) C[i * ow + j] = X[j * stride];
                }
            }
    const double* wv = weight.data().data();
    for (std::size_t o = 0; o < co; ++o) {
        double b = bias.defined() ? bias[o] : 0.0;
        std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * n), out.begin() + static_cast<std::ptrdiff_t>((o + 1) * n), b);
    }
    // Four output planes at a time so each im2col load feeds four accumulators.
    std::size_t o = 0;
    for (; o + 4 <= co; o += 4) {
        double* __restrict Y0 = out.data() + o * n;
        double* __restrict Y1 = Y0 + n;
        double* __restrict Y2 = Y1 + n;
        double* __restrict Y3 = Y2 + n;
        for (std::size_t t = 0; t < taps; ++t) {
            double w0 = wv[o * taps + t], w1 = wv[(o + 1) * taps + t];
            double w2 = wv[(o + 2) * taps + t], w3 = wv[(o + 3) * taps + t];
            const double* __restrict C = col.data() + t * n;
            for (std::size_t p = 0; p < n; ++p) {
                double cv = C[p];
                Y0[p] += w0 * cv;
                Y1[p] += w1 * cv;
                Y2[p] += w2 * cv;
                Y3[p] += w3 * cv;
            }
        }
    }
    for (; o < co; ++o) {
        double* __restrict Y = out.data() + o * n;
        for (std::size_t t = 0; t < taps; ++t) {
            double wt = wv[o * taps + t];
            const double* __restrict C = col.data() + t * n;
            for (std::size_t p = 0; p < n; ++p) Y[p] += wt * C[p];
        }
    }
    return make_result({co, oh, ow}, std::move(out), {x, weight, bias},
                       [x, weight, bias, ci, h, w, co, kh, kw, oh, ow, stride](detail::Node& self) {
                           auto xv = x.data(), wv = weight.data();
                           const double* G = self.grad.data();
                           if (bias.defined() && bias.requires_grad()) {
                               auto& gb = bias.node().grad_buffer();
                               for (std::size_t o = 0; o < co; ++o)
                                   for (std::size_t i = 0; i < oh * ow; ++i) gb[o] += G[o * oh * ow + i];
                           }
                           bool gx = x.requires_grad(), gw = weight.requires_grad();
                           double* GX = gx ? x.node().grad_buffer().data() : nullptr;
                           double* GW = gw ? weight.node().grad_buffer().data() : nullptr;
                           for (std::size_t o = 0; o < co; ++o)
                               for (std::size_t c = 0; c < ci; ++c)
                                   for (std::size_t u = 0; u < kh; ++u)
                                       for (std::size_t v = 0; v < kw; ++v) {
                                           std::size_t widx = ((o * ci + c) * kh + u) * kw + v;
                                           double wt = wv[widx], acc = 0;
                                           for (std::size_t i = 0; i < oh; ++i) {
                                               std::size_t xrow = (c * h + i * stride + u) * w + v;
                                               const double* Gr = G + (o * oh + i) * ow;
                                               for (std::size_t j = 0; j < ow; ++j) {
                                                   if (gx) GX[xrow + j * stride] += wt * Gr[j];
                                                   if (gw) acc += xv[xrow + j * stride] * Gr[j];
                                               }
                                           }
                                           if (gw) GW[widx] += acc;
                                       }
                       });
}

// Window means over [c,h,w]; the geometry must tile exactly.
inline Tensor pool_avg(const Tensor& x, std::pair<std::size_t, std::size_t> kernel,
                       std::pair<std::size_t, std::size_t> stride) {
    if (x.rank() != 3) throw ShapeError("pool_avg expects [c,h,w], got " + shape_str(x.shape()));
    auto [kh, kw] = kernel;
    auto [sh, sw] = stride;
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w || (h - kh) % sh || (w - kw) % sw)
        throw ShapeError("pool_avg: kernel (" + std::to_string(kh) + "," + std::to_string(kw) + ") stride (" +
                         std::to_string(sh) + "," + std::to_string(sw) + ") does not tile " + shape_str(x.shape()));
    std::size_t oh = (h - kh) / sh + 1, ow = (w - kw) / sw + 1;
    double inv = 1.0 / static_cast<double>(kh * kw);
    std::vector<double> out(c * oh * ow, 0.0);
    auto xv = x.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double s = 0;
                for (std::size_t u = 0; u < kh; ++u)
                    for (std::size_t v = 0; v < kw; ++v) s += xv[(ch * h + i * sh + u) * w + j * sw + v];
                out[(ch * oh + i) * ow + j] = s * inv;
            }
    return make_result({c, oh, ow}, std::move(out), {x}, [=](detail::Node& self) {
        auto& g = x.node().grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double gv = self.grad[(ch * oh + i) * ow + j] * inv;
                    for (std::size_t u = 0; u < kh; ++u)
                        for (std::size_t v = 0; v < kw; ++v) g[(ch * h + i * sh + u) * w + j * sw + v] += gv;
                }
    });
}

}  // namespace advshield
