#pragma once

// Seeded synthetic face-like images on the 8-bit grid: gradient backdrop,
// skin ellipse, hair cap, eyes and mouth, plus mild texture.

#include <cmath>
#include <cstdint>

#include "advshield/models.hpp"
#include "advshield/tensor.hpp"

namespace advshield {

inline Tensor synthetic_face(std::uint64_t seed, std::size_t size = 64) {
    WeightRng rng(seed * 0x9E3779B97F4A7C15ULL + 1);
    auto u = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform01(); };
    const double n = static_cast<double>(size);

    double bg0[3], bg1[3], skin[3], hair[3];
    for (int c = 0; c < 3; ++c) {
        bg0[c] = u(0.1, 0.9);
        bg1[c] = u(0.1, 0.9);
        hair[c] = u(0.05, 0.35);
    }
    double tone = u(0.45, 0.95);
    skin[0] = tone;
    skin[1] = tone * u(0.7, 0.85);
    skin[2] = tone * u(0.55, 0.75);

    double cx = n * u(0.45, 0.55), cy = n * u(0.48, 0.56);
    double rx = n * u(0.26, 0.34), ry = n * u(0.34, 0.42);
    double eye_dy = ry * u(0.2, 0.3), eye_dx = rx * u(0.35, 0.45), eye_r = n * u(0.035, 0.05);
    double mouth_dy = ry * u(0.45, 0.55), mouth_w = rx * u(0.35, 0.55), mouth_h = n * u(0.02, 0.035);
    double tex_f = u(0.2, 0.6), tex_p = u(0, 6.28);

    std::vector<double> img(3 * size * size);
    for (std::size_t i = 0; i < size; ++i)
        for (std::size_t j = 0; j < size; ++j) {
            double y = static_cast<double>(i) + 0.5, x = static_cast<double>(j) + 0.5;
            double t = (x + y) / (2 * n);
            double col[3];
            for (int c = 0; c < 3; ++c) col[c] = bg0[c] * (1 - t) + bg1[c] * t;

            double ex = (x - cx) / rx, ey = (y - cy) / ry;
            double r2 = ex * ex + ey * ey;
            if (r2 < 1.0) {
                double shade = 1.0 - 0.25 * r2;
                for (int c = 0; c < 3; ++c) col[c] = skin[c] * shade;
                if (ey < -0.55)
                    for (int c = 0; c < 3; ++c) col[c] = hair[c];
                for (double side : {-1.0, 1.0}) {
                    double dx = x - (cx + side * eye_dx), dy = y - (cy - eye_dy);
                    if (dx * dx + dy * dy < eye_r * eye_r)
                        for (int c = 0; c < 3; ++c) col[c] = 0.08;
                }
                double mx = (x - cx) / mouth_w, my = (y - (cy + mouth_dy)) / mouth_h;
                if (mx * mx + my * my < 1.0) {
                    col[0] = 0.55 * tone;
                    col[1] = 0.15;
                    col[2] = 0.18;
                }
            } else if (r2 < 1.35 && ey < 0) {
                for (int c = 0; c < 3; ++c) col[c] = hair[c];
            }
            double tex = 0.03 * std::sin(tex_f * x + tex_p) * std::cos(tex_f * 0.7 * y);
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(col[c] + tex, 0.0, 1.0);
                img[(static_cast<std::size_t>(c) * size + i) * size + j] = std::round(v * 255.0) / 255.0;
            }
        }
    return Tensor({3, size, size}, std::move(img));
}

// Uniform noise image on the 8-bit grid.
inline Tensor random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
    WeightRng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    std::vector<double> v(3 * h * w);
    for (auto& e : v) e = std::floor(rng.uniform01() * 256.0) / 255.0;
    for (auto& e : v) e = std::min(e, 1.0);
    return Tensor({3, h, w}, std::move(v));
}

}  // namespace advshield
