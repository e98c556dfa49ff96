#pragma once

// Separable resampling of [c,h,w] tensors. Every interpolation mode here is a
// linear map that factors into one sparse matrix per axis, so a single
// differentiable op covers nearest, bilinear and area (box) resizing.

#include <cmath>
#include <string>

#include "advshield/tensor.hpp"

namespace advshield {

// Sparse rows of a resampling matrix: taps[i] lists (source index, weight).
struct AxisWeights {
    std::size_t in = 0, out = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> taps;
};

inline void check_axis(std::size_t in, std::size_t out) {
    if (in == 0 || out == 0)
        throw ShapeError("resample: degenerate axis " + std::to_string(in) + " -> " + std::to_string(out));
}

// src = floor(dst * in / out)
inline AxisWeights nearest_weights(std::size_t in, std::size_t out) {
    check_axis(in, out);
    AxisWeights a{in, out, {}};
    a.taps.resize(out);
    for (std::size_t i = 0; i < out; ++i) a.taps[i] = {{std::min(i * in / out, in - 1), 1.0}};
    return a;
}

// Half-pixel centres (align_corners = false), negative coordinates clamped to 0,
// upper neighbour clamped to the last row.
inline AxisWeights bilinear_weights(std::size_t in, std::size_t out) {
    check_axis(in, out);
    AxisWeights a{in, out, {}};
    a.taps.resize(out);
    double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        if (src < 0) src = 0;
        auto y0 = static_cast<std::size_t>(std::floor(src));
        if (y0 > in - 1) y0 = in - 1;
        std::size_t y1 = std::min(y0 + 1, in - 1);
        double l1 = src - static_cast<double>(y0);
        a.taps[i] = {{y0, 1.0 - l1}, {y1, l1}};
    }
    return a;
}

// Box filter: output cell i covers source interval [i*in/out, (i+1)*in/out).
// Computed in integer units scaled by `out`, so the weights are exact ratios
// overlap/in. This is also the replication-count weighting of nearest
// upscaling to in*out followed by average pooling with kernel `in`.
inline AxisWeights area_weights(std::size_t in, std::size_t out) {
    check_axis(in, out);
    AxisWeights a{in, out, {}};
    a.taps.resize(out);
    double inv = 1.0 / static_cast<double>(in);
    for (std::size_t i = 0; i < out; ++i) {
        std::size_t lo = i * in, hi = (i + 1) * in;
        for (std::size_t y = lo / out; y * out < hi; ++y) {
            std::size_t a0 = std::max(y * out, lo), a1 = std::min((y + 1) * out, hi);
            if (a1 > a0) a.taps[i].emplace_back(y, static_cast<double>(a1 - a0) * inv);
        }
    }
    return a;
}

// out[c,i,j] = sum_y wy[i,y] sum_x wx[j,x] x[c,y,x]
inline Tensor resample(const Tensor& x, const AxisWeights& wy, const AxisWeights& wx) {
    if (x.rank() != 3) throw ShapeError("resample expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (wy.in != h || wx.in != w) throw ShapeError("resample: weights do not match input " + shape_str(x.shape()));
    std::size_t oh = wy.out, ow = wx.out;
    auto xv = x.data();
    std::vector<double> tmp(c * h * ow, 0.0), out(c * oh * ow, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y) {
            const double* row = xv.data() + (ch * h + y) * w;
            double* t = tmp.data() + (ch * h + y) * ow;
            for (std::size_t j = 0; j < ow; ++j) {
                double s = 0;
                for (auto [sx, wt] : wx.taps[j]) s += wt * row[sx];
                t[j] = s;
            }
        }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < oh; ++i) {
            double* o = out.data() + (ch * oh + i) * ow;
            for (auto [sy, wt] : wy.taps[i]) {
                const double* t = tmp.data() + (ch * h + sy) * ow;
                for (std::size_t j = 0; j < ow; ++j) o[j] += wt * t[j];
            }
        }
    return make_result({c, oh, ow}, std::move(out), {x}, [x, wy, wx, c, h, w, oh, ow](detail::Node& self) {
        std::vector<double> gtmp(c * h * ow, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < oh; ++i) {
                const double* g = self.grad.data() + (ch * oh + i) * ow;
                for (auto [sy, wt] : wy.taps[i]) {
                    double* t = gtmp.data() + (ch * h + sy) * ow;
                    for (std::size_t j = 0; j < ow; ++j) t[j] += wt * g[j];
                }
            }
        auto& gx = x.node().grad_buffer();
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y) {
                const double* t = gtmp.data() + (ch * h + y) * ow;
                double* row = gx.data() + (ch * h + y) * w;
                for (std::size_t j = 0; j < ow; ++j)
                    for (auto [sx, wt] : wx.taps[j]) row[sx] += wt * t[j];
            }
    });
}

enum class ResizeMode { nearest, bilinear, area };

inline const char* to_string(ResizeMode m) {
    switch (m) {
        case ResizeMode::nearest: return "nearest";
        case ResizeMode::bilinear: return "bilinear";
        case ResizeMode::area: return "area";
    }
    return "?";
}

inline AxisWeights axis_weights(ResizeMode mode, std::size_t in, std::size_t out) {
    switch (mode) {
        case ResizeMode::nearest: return nearest_weights(in, out);
        case ResizeMode::bilinear: return bilinear_weights(in, out);
        case ResizeMode::area: return area_weights(in, out);
    }
    throw std::invalid_argument("unknown resize mode");
}

inline Tensor resize(const Tensor& x, std::pair<std::size_t, std::size_t> target, ResizeMode mode) {
    if (x.rank() != 3) throw ShapeError("resize expects [c,h,w], got " + shape_str(x.shape()));
    if (target.first == 0 || target.second == 0)
        throw ShapeError("resize: zero target dimension (" + std::to_string(target.first) + "," +
                         std::to_string(target.second) + ")");
    return resample(x, axis_weights(mode, x.dim(1), target.first), axis_weights(mode, x.dim(2), target.second));
}

}  // namespace advshield
