#pragma once

// Sign-gradient PGD with the two noise-shaping stages applied after every
// step: Gaussian smoothing restricted to Sobel edges of the perturbation, and
// the 8x8 DCT low-pass projection. Each step ends with a projection back onto
// the l_inf ball intersected with the valid image box.

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "advshield/dct.hpp"
#include "advshield/losses.hpp"
#include "advshield/metrics.hpp"
#include "advshield/models.hpp"
#include "advshield/tensor.hpp"

namespace advshield {

struct BlurConfig {
    bool enabled = true;
    double sobel_threshold = 0.25;  // fraction of the max gradient magnitude
    std::size_t dilation = 9;       // square structuring element
    std::size_t kernel = 5;
    double sigma = 1.0;
};

struct LowPassConfig {
    bool enabled = true;
    std::size_t patch = kBlock;
    int threshold = 40;
};

struct AttackConfig {
    double eta = 12.0 / 255.0;
    double step = 1.0 / 255.0;
    std::size_t steps = 30;
    BlurConfig blur;
    LowPassConfig lowpass;
    LossConfig losses;
    bool random_start = false;  // uniform in [-step, step] instead of zero
    std::uint64_t seed = 0;

    void validate() const {
        if (!(eta > 0 && eta <= 1)) throw std::invalid_argument("eta must be in (0,1]");
        if (!(step > 0 && step <= eta)) throw std::invalid_argument("step size must satisfy 0 < step <= eta");
        if (lowpass.patch != kBlock) throw std::invalid_argument("low-pass patch size must be 8");
        if (blur.kernel % 2 == 0 || blur.kernel == 0) throw std::invalid_argument("blur kernel must be odd");
        if (blur.dilation % 2 == 0 || blur.dilation == 0) throw std::invalid_argument("mask dilation must be odd");
        if (!(blur.sigma > 0)) throw std::invalid_argument("blur sigma must be positive");
        if (!(blur.sobel_threshold >= 0 && blur.sobel_threshold < 1))
            throw std::invalid_argument("sobel threshold must be in [0,1)");
        if (!losses.enabled.any()) throw std::invalid_argument("at least one loss must be enabled");
        losses.validate();
        const auto& w = losses.weights;
        const auto& on = losses.enabled;
        if ((!on.proj || w.proj == 0) && (!on.attn || w.attn == 0) && (!on.mtcnn || w.mtcnn == 0) &&
            (!on.id || w.id == 0))
            throw std::invalid_argument("every enabled loss has weight zero");
    }
};

class NumericError : public std::runtime_error {
   public:
    NumericError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
    std::size_t step() const { return step_; }

   private:
    std::size_t step_;
};

// Clamp into [max(-eta, -x), min(eta, 1-x)]. With these bounds x + d, rounded
// in double precision, stays inside [0, 1] and |d| <= eta holds exactly.
inline Tensor project_delta(const Tensor& delta, const Tensor& x, double eta, std::size_t* changed = nullptr) {
    std::vector<double> d = delta.values();
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        double lo = std::max(-eta, -x[i]), hi = std::min(eta, 1.0 - x[i]);
        double v = std::clamp(d[i], lo, hi);
        n += v != d[i];
        d[i] = v;
    }
    if (changed) *changed = n;
    return Tensor(delta.shape(), std::move(d));
}

// d' = clamp(d - step * sign(grad), -eta, eta), then kept inside the image box.
inline Tensor pgd_step(const Tensor& delta, const Tensor& grad, const Tensor& x, const AttackConfig& cfg,
                       std::size_t step_index = 0) {
    if (delta.shape() != grad.shape() || delta.shape() != x.shape())
        throw ShapeError("pgd_step: shapes differ " + shape_str(delta.shape()) + ", " + shape_str(grad.shape()) +
                         ", " + shape_str(x.shape()));
    std::vector<double> d = delta.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(grad[i]))
            throw NumericError("non-finite gradient at step " + std::to_string(step_index), step_index);
        d[i] = std::clamp(d[i] - cfg.step * sign_of(grad[i]), -cfg.eta, cfg.eta);
    }
    return project_delta(Tensor(delta.shape(), std::move(d)), x, cfg.eta);
}

// ---------------------------------------------------------------------------
// Edge mask

// Sobel magnitude per channel (edge-replicated borders), max over channels.
inline std::vector<double> sobel_magnitude(const Tensor& d) {
    if (d.rank() != 3) throw ShapeError("sobel expects [c,h,w], got " + shape_str(d.shape()));
    std::size_t c = d.dim(0), h = d.dim(1), w = d.dim(2);
    auto px = [&](std::size_t ch, long i, long j) {
        i = std::clamp<long>(i, 0, static_cast<long>(h) - 1);
        j = std::clamp<long>(j, 0, static_cast<long>(w) - 1);
        return d[(ch * h + static_cast<std::size_t>(i)) * w + static_cast<std::size_t>(j)];
    };
    std::vector<double> g(h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (long i = 0; i < static_cast<long>(h); ++i)
            for (long j = 0; j < static_cast<long>(w); ++j) {
                double gx = (px(ch, i - 1, j + 1) + 2 * px(ch, i, j + 1) + px(ch, i + 1, j + 1)) -
                            (px(ch, i - 1, j - 1) + 2 * px(ch, i, j - 1) + px(ch, i + 1, j - 1));
                double gy = (px(ch, i + 1, j - 1) + 2 * px(ch, i + 1, j) + px(ch, i + 1, j + 1)) -
                            (px(ch, i - 1, j - 1) + 2 * px(ch, i - 1, j) + px(ch, i - 1, j + 1));
                auto k = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j);
                g[k] = std::max(g[k], std::sqrt(gx * gx + gy * gy));
            }
    return g;
}

// Binary [h,w] mask of strong edges in the perturbation, thickened by a
// square dilation.
inline Tensor sobel_mask(const Tensor& delta, const BlurConfig& cfg) {
    std::size_t h = delta.dim(1), w = delta.dim(2);
    std::vector<double> g = sobel_magnitude(delta);
    double gmax = *std::max_element(g.begin(), g.end());
    std::vector<double> m(h * w, 0.0);
    if (gmax <= 0) return Tensor({h, w}, std::move(m));
    double thr = cfg.sobel_threshold * gmax;
    auto r = static_cast<long>(cfg.dilation / 2);
    for (long i = 0; i < static_cast<long>(h); ++i)
        for (long j = 0; j < static_cast<long>(w); ++j) {
            if (!(g[static_cast<std::size_t>(i) * w + static_cast<std::size_t>(j)] > thr)) continue;
            for (long u = std::max(0L, i - r); u <= std::min<long>(static_cast<long>(h) - 1, i + r); ++u)
                for (long v = std::max(0L, j - r); v <= std::min<long>(static_cast<long>(w) - 1, j + r); ++v)
                    m[static_cast<std::size_t>(u) * w + static_cast<std::size_t>(v)] = 1.0;
        }
    return Tensor({h, w}, std::move(m));
}

// ---------------------------------------------------------------------------
// Gaussian refinement

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
    std::vector<double> k(size);
    double c = static_cast<double>(size / 2), s = 0;
    for (std::size_t i = 0; i < size; ++i) {
        double t = static_cast<double>(i) - c;
        s += k[i] = std::exp(-t * t / (2 * sigma * sigma));
    }
    for (auto& v : k) v /= s;
    return k;
}

// Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
inline std::size_t reflect_index(long i, std::size_t n) {
    if (n == 1) return 0;
    const long m = static_cast<long>(n);
    while (i < 0 || i >= m) i = i < 0 ? -i : 2 * (m - 1) - i;
    return static_cast<std::size_t>(i);
}

// Separable normalized Gaussian with reflect padding.
inline Tensor gaussian_blur(const Tensor& d, const BlurConfig& cfg) {
    std::size_t c = d.dim(0), h = d.dim(1), w = d.dim(2);
    auto k = gaussian_kernel(cfg.kernel, cfg.sigma);
    auto r = static_cast<long>(cfg.kernel / 2);
    std::vector<double> tmp(d.numel()), out(d.numel());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double s = 0;
                for (long t = -r; t <= r; ++t)
                    s += k[static_cast<std::size_t>(t + r)] *
                         d[(ch * h + i) * w + reflect_index(static_cast<long>(j) + t, w)];
                tmp[(ch * h + i) * w + j] = s;
            }
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double s = 0;
                for (long t = -r; t <= r; ++t)
                    s += k[static_cast<std::size_t>(t + r)] *
                         tmp[(ch * h + reflect_index(static_cast<long>(i) + t, h)) * w + j];
                out[(ch * h + i) * w + j] = s;
            }
    return Tensor(d.shape(), std::move(out));
}

// d_blur = G(d) * M + d * (1 - M), then clamped back to the eta-ball.
inline Tensor gaussian_blur_refine(const Tensor& delta, const Tensor& mask, const BlurConfig& cfg, double eta) {
    std::size_t c = delta.dim(0), hw = delta.dim(1) * delta.dim(2);
    if (mask.numel() != hw) throw ShapeError("gaussian_blur_refine: mask " + shape_str(mask.shape()) +
                                             " does not match " + shape_str(delta.shape()));
    Tensor blurred = gaussian_blur(delta, cfg);
    std::vector<double> out = delta.values();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p)
            if (mask[p] != 0) out[ch * hw + p] = std::clamp(blurred[ch * hw + p], -eta, eta);
    return Tensor(delta.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Driver

struct TraceRow {
    std::size_t step = 0;
    LossValues losses;      // at the perturbation entering this step
    double linf = 0;        // after the step's update
    double fr = 0;          // frequency rate after the update
    std::size_t clipped = 0;  // coordinates moved by the final re-projection
};

inline constexpr const char* kTraceHeader = "step,l_proj,l_attn,l_mtcnn,l_id,total,linf,fr,clipped";

inline std::string format_trace_row(const TraceRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%zu", r.step, r.losses.proj,
                  r.losses.attn, r.losses.mtcnn, r.losses.id, r.losses.total, r.linf, r.fr, r.clipped);
    return buf;
}

inline void write_trace(std::ostream& os, const std::vector<TraceRow>& rows) {
    os << kTraceHeader << '\n';
    for (const auto& r : rows) os << format_trace_row(r) << '\n';
}

struct ProtectResult {
    Tensor protected_image;
    Tensor delta;
    std::vector<TraceRow> trace;
    LossValues initial;  // at delta = start
    LossValues final;    // at the returned delta
    std::vector<std::string> warnings;
};

class AttackAborted : public NumericError {
   public:
    AttackAborted(const std::string& what, std::size_t step, std::vector<TraceRow> trace)
        : NumericError(what, step), trace_(std::move(trace)) {}
    const std::vector<TraceRow>& trace() const { return trace_; }

   private:
    std::vector<TraceRow> trace_;
};

inline double linf_norm(const Tensor& t) {
    double m = 0;
    for (double v : t.data()) m = std::max(m, std::fabs(v));
    return m;
}

// Called after every step with the step index and the projected perturbation.
using StepObserver = std::function<void(std::size_t, const Tensor&)>;

inline ProtectResult protect(const Tensor& x, const ToyModelBundle& bundle, const AttackConfig& cfg,
                             const StepObserver& observe = {}) {
    cfg.validate();
    for (double v : x.data())
        if (!(v >= 0 && v <= 1)) throw std::invalid_argument("protect: image values must lie in [0,1]");
    AttackObjective objective(bundle, x, cfg.losses);
    const Tensor& xc = objective.image();
    LowPassCodec codec(cfg.lowpass.threshold);

    ProtectResult res;
    if (objective.detector_state().scales.empty())
        res.warnings.push_back("no admissible detector scales; detector loss is inactive");

    Tensor delta = Tensor::zeros(xc.shape());
    if (cfg.random_start) {
        WeightRng rng(cfg.seed);
        for (auto& v : delta.mutable_data()) v = rng.symmetric(cfg.step);
        delta = project_delta(delta, xc, cfg.eta);
    }

    for (std::size_t k = 1; k <= cfg.steps; ++k) {
        Tensor leaf = delta.detach();
        leaf.set_requires_grad(true);
        auto ev = objective.evaluate(leaf);
        if (k == 1) res.initial = ev.values;
        TraceRow row;
        row.step = k;
        row.losses = ev.values;
        if (!std::isfinite(ev.values.total))
            throw AttackAborted("non-finite loss at step " + std::to_string(k), k, res.trace);
        backward(ev.descent);
        try {
            delta = pgd_step(delta, leaf.grad_tensor(), xc, cfg, k);
        } catch (const NumericError& e) {
            throw AttackAborted(e.what(), k, res.trace);
        }
        if (cfg.blur.enabled) delta = gaussian_blur_refine(delta, sobel_mask(delta, cfg.blur), cfg.blur, cfg.eta);
        if (cfg.lowpass.enabled) delta = low_pass_filter(codec, delta);
        delta = project_delta(delta, xc, cfg.eta, &row.clipped);

        row.linf = linf_norm(delta);
        bool zero = row.linf == 0;
        row.fr = zero ? 0.0 : frequency_rate(delta, codec);
        res.trace.push_back(row);
        if (observe) observe(k, delta);
    }

    auto ev = objective.evaluate(delta);
    res.final = ev.values;
    if (cfg.steps == 0) res.initial = ev.values;
    res.delta = delta;
    std::vector<double> img(xc.numel());
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = xc[i] + delta[i];
    res.protected_image = Tensor(xc.shape(), std::move(img));
    return res;
}

}  // namespace advshield
