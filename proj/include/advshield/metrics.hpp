#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "advshield/dct.hpp"
#include "advshield/models.hpp"
#include "advshield/tensor.hpp"

namespace advshield {

inline constexpr double kPsnrCap = 80.0;

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline double mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

// Root-mean-square difference.
inline double l2_dist(const Tensor& a, const Tensor& b) { return std::sqrt(mse(a, b)); }

// Peak 1.0; identical (or near-identical) images report the 80 dB cap.
inline double psnr(const Tensor& a, const Tensor& b) {
    double m = mse(a, b);
    if (m < 1e-8) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

inline constexpr std::size_t kSsimWindow = 8;

// Single-scale SSIM with an 8x8 uniform window slid over every valid
// position, population statistics, averaged over windows and channels.
inline double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 3 || a.dim(1) < kSsimWindow || a.dim(2) < kSsimWindow)
        throw ShapeError("ssim needs [c,h,w] with h,w >= 8, got " + shape_str(a.shape()));
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    const double n = kSsimWindow * kSsimWindow;
    double total = 0;
    std::size_t count = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i + kSsimWindow <= h; ++i)
            for (std::size_t j = 0; j + kSsimWindow <= w; ++j) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t u = 0; u < kSsimWindow; ++u)
                    for (std::size_t v = 0; v < kSsimWindow; ++v) {
                        std::size_t k = (ch * h + i + u) * w + j + v;
                        double x = a[k], y = b[k];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                double ma = sa / n, mb = sb / n;
                double va = saa / n - ma * ma, vb = sbb / n - mb * mb, cov = sab / n - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / static_cast<double>(count);
}

// Energy in the kept DCT band over energy in the discarded band, on the
// codec's 8x8 partition. An empty discarded band reports +infinity.
inline double frequency_rate(const Tensor& delta, const LowPassCodec& codec = LowPassCodec()) {
    Tensor f = dct_patchify(delta);
    double low = 0, high = 0;
    for (std::size_t i = 0; i < f.numel(); ++i) (codec.keep[i % 64] ? low : high) += f[i] * f[i];
    if (low == 0 && high == 0) throw std::invalid_argument("frequency_rate: zero perturbation");
    if (high <= 1e-12 * std::max(1.0, low)) return std::numeric_limits<double>::infinity();
    return low / high;
}

inline double ism_toy(const ToyModelBundle& b, const Tensor& src, const Tensor& out) {
    return cosine_similarity(b.identity.forward(src), b.identity.forward(out)).item();
}

struct MetricReport {
    double l2 = 0, psnr = kPsnrCap, ssim = 1, fr = 0, ism_toy = 1;
};

// `fr` is measured on protected - clean, and is 0 for identical images.
inline MetricReport compute_metrics(const ToyModelBundle& b, const Tensor& clean, const Tensor& protected_img) {
    require_same_shape(clean, protected_img, "compute_metrics");
    MetricReport r;
    r.l2 = l2_dist(clean, protected_img);
    r.psnr = psnr(clean, protected_img);
    r.ssim = ssim(clean, protected_img);
    r.ism_toy = ism_toy(b, clean, protected_img);
    Tensor delta = sub(protected_img, clean);
    bool zero = std::all_of(delta.data().begin(), delta.data().end(), [](double v) { return v == 0.0; });
    r.fr = zero ? 0.0 : frequency_rate(delta);
    return r;
}

}  // namespace advshield
