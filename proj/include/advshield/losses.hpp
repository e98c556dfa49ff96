#pragma once

// Adversarial objectives against the toy bundle:
//   L_proj  = -|| P(x+d) - P(x) ||_1
//   L_attn  = || (sigma_max - Var(A'(x+d))) * M_var ||_2^2
//   L_mtcnn = sum over scales and resize paths of || (T(x+d) - p_gt) * M_prob ||_2^2
//   L_id    = cos(A(x+d), A(x)) - 1
// and their weighted sum. Weights for L_proj and L_id are non-positive; the
// PGD loop descends descent_objective, where every term enters with |lambda|.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advshield/models.hpp"
#include "advshield/nn.hpp"
#include "advshield/resample.hpp"
#include "advshield/tensor.hpp"

namespace advshield {

struct LossWeights {
    double proj = -1.0;
    double attn = 1.0;
    double mtcnn = 1.0;
    double id = -1.0;

    void validate() const {
        if (proj > 0) throw std::invalid_argument("lambda_proj must be <= 0");
        if (attn < 0) throw std::invalid_argument("lambda_attn must be >= 0");
        if (mtcnn < 0) throw std::invalid_argument("lambda_mtcnn must be >= 0");
        if (id > 0) throw std::invalid_argument("lambda_id must be <= 0");
    }
    bool all_zero() const { return proj == 0 && attn == 0 && mtcnn == 0 && id == 0; }
};

// sigma_max = (1/seq) ((1 - 1/seq)^2 + (seq - 1) / seq^2), the variance of a one-hot row.
inline double sigma_max(std::size_t seq) {
    if (seq == 0) throw std::invalid_argument("sigma_max: seq must be >= 1");
    double n = static_cast<double>(seq);
    return (1.0 / n) * ((1.0 - 1.0 / n) * (1.0 - 1.0 / n) + (n - 1.0) * (1.0 / (n * n)));
}

// [h, res, seq] -> [h, res]
inline Tensor attention_variance(const Tensor& a_map) {
    if (a_map.rank() != 3) throw ShapeError("attention_variance expects [h,res,seq], got " + shape_str(a_map.shape()));
    return variance(a_map, 2);
}

// Lower nearest-rank quantile: the floor(t * n)-th smallest value (at least the smallest).
inline double lower_quantile(std::vector<double> v, double t) {
    if (v.empty()) throw std::invalid_argument("quantile of an empty set");
    std::sort(v.begin(), v.end());
    auto rank = static_cast<std::size_t>(std::floor(t * static_cast<double>(v.size())));
    rank = std::clamp<std::size_t>(rank, 1, v.size());
    return v[rank - 1];
}

inline Tensor build_var_mask(const Tensor& a_var, double t_var) {
    if (!(t_var > 0 && t_var < 1)) throw std::invalid_argument("t_var must be in (0,1)");
    double q = lower_quantile(a_var.values(), t_var);
    std::vector<double> m(a_var.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = a_var[i] <= q ? 1.0 : 0.0;
    return Tensor(a_var.shape(), std::move(m));
}

// Strict: cells above the detection threshold.
inline Tensor build_prob_mask(const Tensor& p_true, double t_prob) {
    if (!(t_prob > 0 && t_prob < 1)) throw std::invalid_argument("t_prob must be in (0,1)");
    std::vector<double> m(p_true.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p_true[i] > t_prob ? 1.0 : 0.0;
    return Tensor(p_true.shape(), std::move(m));
}

// ---------------------------------------------------------------------------
// Projector

inline Tensor proj_divergence(const Tensor& tokens_adv, const Tensor& tokens_clean) {
    return neg(sum(abs(sub(tokens_adv, tokens_clean))));
}

inline Tensor loss_proj(const ToyModelBundle& b, const Tensor& x, const Tensor& delta) {
    return proj_divergence(b.projector.forward(add(x, delta)), b.projector.forward(x));
}

// ---------------------------------------------------------------------------
// Attention disruption

struct AttentionAttackState {
    Tensor var_mask;     // [h, res], from the clean image, frozen
    Tensor clean_query;  // Q_x
    double sigma_max = 0;
    double t_var = 0.5;

    bool ready() const { return var_mask.defined() && clean_query.defined(); }
};

inline AttentionAttackState prepare_attention_attack(const ToyModelBundle& b, const Tensor& x, double t_var) {
    AttentionAttackState s;
    s.t_var = t_var;
    s.clean_query = b.attention.query(x);
    Tensor a_map = CrossAttentionBlock::attention_map(s.clean_query, b.attention.keys(b.projector.forward(x)));
    s.var_mask = build_var_mask(attention_variance(a_map), t_var);
    s.sigma_max = sigma_max(a_map.dim(2));
    return s;
}

// Var(A') with Q from the clean image and K from the given (perturbed) tokens.
inline Tensor perturbed_attention_variance(const AttentionAttackState& s, const ToyModelBundle& b,
                                           const Tensor& tokens_adv) {
    return attention_variance(CrossAttentionBlock::attention_map(s.clean_query, b.attention.keys(tokens_adv)));
}

inline Tensor attn_loss_from_tokens(const AttentionAttackState& s, const ToyModelBundle& b, const Tensor& tokens_adv) {
    if (!s.ready()) throw std::logic_error("loss_attn: variance mask has not been precomputed");
    Tensor a_var = perturbed_attention_variance(s, b, tokens_adv);
    Tensor gap = mul(sub(Tensor::full(a_var.shape(), s.sigma_max), a_var), s.var_mask);
    return sum(square(gap));
}

inline Tensor loss_attn(const AttentionAttackState& s, const ToyModelBundle& b, const Tensor& x, const Tensor& delta) {
    if (!s.ready()) throw std::logic_error("loss_attn: variance mask has not been precomputed");
    return attn_loss_from_tokens(s, b, b.projector.forward(add(x, delta)));
}

inline double masked_mean(const Tensor& values, const Tensor& mask) {
    double s = 0, n = 0;
    for (std::size_t i = 0; i < values.numel(); ++i)
        if (mask[i] != 0) {
            s += values[i];
            n += 1;
        }
    return n > 0 ? s / n : 0.0;
}

// ---------------------------------------------------------------------------
// Detector (P-Net) attack

inline constexpr double kDefaultCell = 12.0;  // P-Net receptive field
inline constexpr double kDefaultMinSize = 12.0;

// { s_i = (d_cell/d_min) k^(i-1) : s_i d_land <= d_cell, s_i d_adv >= d_min }, decreasing.
inline std::vector<double> select_scales(double d_land, double d_cell, double d_min, double d_adv, double k) {
    if (!(k > 0 && k < 1)) throw std::invalid_argument("select_scales: k must be in (0,1)");
    if (d_land < 1 || d_adv < 1) throw std::invalid_argument("select_scales: sizes must be >= 1");
    if (!(d_cell > 0 && d_min > 0)) throw std::invalid_argument("select_scales: cell and minimum sizes must be positive");
    std::vector<double> out;
    double first = d_cell / d_min;
    for (int i = 0;; ++i) {
        double s = first * std::pow(k, i);
        if (s * d_adv < d_min) break;
        if (s * d_land <= d_cell) out.push_back(s);
    }
    return out;
}

inline std::size_t scaled_extent(std::size_t n, double s) {
    double v = std::floor(s * static_cast<double>(n) + 1e-9);
    if (!(v >= 1)) throw ShapeError("scale " + std::to_string(s) + " collapses an axis of " + std::to_string(n));
    return static_cast<std::size_t>(v);
}

// Nearest upscale to (h*h', w*w') followed by (h,w) average pooling, where
// (h',w') = floor(s*(h,w)). Evaluated as exact replication-count weights;
// integer reduction factors go through pool_avg directly.
inline Tensor robust_resize(const Tensor& x, double s) {
    if (x.rank() != 3) throw ShapeError("robust_resize expects [c,h,w], got " + shape_str(x.shape()));
    std::size_t h = x.dim(1), w = x.dim(2);
    std::size_t oh = scaled_extent(h, s), ow = scaled_extent(w, s);
    if (oh <= h && ow <= w && h % oh == 0 && w % ow == 0) return pool_avg(x, {h / oh, w / ow}, {h / oh, w / ow});
    return resample(x, area_weights(h, oh), area_weights(w, ow));
}

inline Tensor bilinear_resize_path(const Tensor& x, double s) {
    if (x.rank() != 3) throw ShapeError("bilinear_resize_path expects [c,h,w], got " + shape_str(x.shape()));
    return resize(x, {scaled_extent(x.dim(1), s), scaled_extent(x.dim(2), s)}, ResizeMode::bilinear);
}

enum class ResizePath { area, bilinear };

inline Tensor resize_path(const Tensor& x, double s, ResizePath p) {
    return p == ResizePath::area ? robust_resize(x, s) : bilinear_resize_path(x, s);
}

struct DetectorAttackState {
    std::vector<double> scales;
    double t_prob = 0.6;
    double beta = 0.3;

    // (P_F target, P_T target)
    std::pair<double, double> p_gt() const { return {t_prob + beta, t_prob - beta}; }
};

inline DetectorAttackState make_detector_state(std::vector<double> scales, double t_prob, double beta) {
    if (!(t_prob > 0 && t_prob < 1)) throw std::invalid_argument("t_prob must be in (0,1)");
    if (!(beta > 0 && beta < 1)) throw std::invalid_argument("beta must be in (0,1)");
    if (!(t_prob - beta > 0)) throw std::invalid_argument("t_prob - beta must be positive");
    return {std::move(scales), t_prob, beta};
}

struct DetectorLoss {
    Tensor value;
    bool no_scales = false;  // nothing to attack; value is 0
    std::vector<Tensor> masks;  // one per (scale, path), scale-major, area path first
    std::size_t active_cells = 0;
};

inline constexpr ResizePath kResizePaths[] = {ResizePath::area, ResizePath::bilinear};

// Masks are recomputed from the current P_T unless `fixed_masks` supplies them.
inline DetectorLoss loss_mtcnn(const DetectorAttackState& s, const ToyModelBundle& b, const Tensor& x,
                               const Tensor& delta, const std::vector<Tensor>* fixed_masks = nullptr) {
    DetectorLoss r;
    if (s.scales.empty()) {
        r.value = Tensor::scalar(0.0);
        r.no_scales = true;
        return r;
    }
    if (fixed_masks && fixed_masks->size() != 2 * s.scales.size())
        throw std::invalid_argument("loss_mtcnn: expected one fixed mask per scale and path");
    auto [pf_target, pt_target] = s.p_gt();
    Tensor x_adv = add(x, delta);
    Tensor total;
    std::size_t idx = 0;
    for (double sc : s.scales)
        for (ResizePath path : kResizePaths) {
            Tensor out = b.pnet.forward(resize_path(x_adv, sc, path));
            Tensor p_false = select(out, 0), p_true = select(out, 1);
            Tensor mask = fixed_masks ? (*fixed_masks)[idx] : build_prob_mask(p_true, s.t_prob);
            ++idx;
            for (std::size_t i = 0; i < mask.numel(); ++i) r.active_cells += mask[i] != 0;
            Tensor term = add(sum(square(mul(sub(p_false, pf_target), mask))),
                              sum(square(mul(sub(p_true, pt_target), mask))));
            total = total.defined() ? add(total, term) : term;
            r.masks.push_back(mask);
        }
    r.value = total;
    return r;
}

// ---------------------------------------------------------------------------
// Identity

// cos(a,b) - 1, evaluated as -|a/|a| - b/|b||^2 / 2. The two are equal, but
// the squared-distance form does not cancel when the cosine is close to 1.
inline Tensor id_loss_from_embeddings(const Tensor& emb_adv, const Tensor& emb_clean) {
    Tensor d = sub(l2_normalize(emb_adv), l2_normalize(emb_clean));
    return mul(sum(square(d)), -0.5);
}

inline Tensor loss_id(const ToyModelBundle& b, const Tensor& x, const Tensor& delta) {
    return id_loss_from_embeddings(b.identity.forward(add(x, delta)), b.identity.forward(x));
}

// ---------------------------------------------------------------------------
// Total

struct LossTerms {
    Tensor proj, attn, mtcnn, id;
};

inline Tensor loss_total(const LossWeights& w, const LossTerms& t) {
    w.validate();
    Tensor total = Tensor::scalar(0.0);
    auto acc = [&total](double lambda, const Tensor& term) {
        if (lambda != 0 && term.defined()) total = add(total, mul(term, lambda));
    };
    acc(w.proj, t.proj);
    acc(w.attn, t.attn);
    acc(w.mtcnn, t.mtcnn);
    acc(w.id, t.id);
    return total;
}

// The objective the PGD step actually descends. A negative weight marks a term
// whose magnitude is to grow (L_proj, L_id are negated divergences), so each
// term enters with |lambda| and every loss moves in its intended direction.
// Descending the signed sum instead would pull both divergences back to zero.
inline Tensor descent_objective(const LossWeights& w, const LossTerms& t) {
    w.validate();
    LossWeights a{-w.proj, w.attn, w.mtcnn, -w.id};
    Tensor total = Tensor::scalar(0.0);
    auto acc = [&total](double lambda, const Tensor& term) {
        if (lambda != 0 && term.defined()) total = add(total, mul(term, lambda));
    };
    acc(a.proj, t.proj);
    acc(a.attn, t.attn);
    acc(a.mtcnn, t.mtcnn);
    acc(a.id, t.id);
    return total;
}

inline double loss_total(const LossWeights& w, double proj, double attn, double mtcnn, double id) {
    w.validate();
    return w.proj * proj + w.attn * attn + w.mtcnn * mtcnn + w.id * id;
}

// ---------------------------------------------------------------------------
// Everything a PGD run needs, with the clean-image quantities computed once.

struct LossToggles {
    bool proj = true, attn = true, mtcnn = true, id = true;
    bool any() const { return proj || attn || mtcnn || id; }
};

struct LossConfig {
    LossWeights weights;
    LossToggles enabled;
    double t_var = 0.5;
    double t_prob = 0.6;
    double beta = 0.3;
    double scale_k = 0.709;
    double d_cell = kDefaultCell;
    double d_min = kDefaultMinSize;
    double d_land = 0;  // 0: a quarter of the image side

    void validate() const {
        weights.validate();
        if (!(t_var > 0 && t_var < 1)) throw std::invalid_argument("t_var must be in (0,1)");
        if (!(t_prob > 0 && t_prob < 1)) throw std::invalid_argument("t_prob must be in (0,1)");
        if (!(beta > 0 && beta < 1) || !(t_prob - beta > 0))
            throw std::invalid_argument("beta must be in (0,1) with t_prob - beta > 0");
        if (!(scale_k > 0 && scale_k < 1)) throw std::invalid_argument("scale_k must be in (0,1)");
        if (d_land < 0) throw std::invalid_argument("d_land must be >= 0");
    }
};

struct LossValues {
    double proj = 0, attn = 0, mtcnn = 0, id = 0, total = 0;
};

class AttackObjective {
   public:
    struct Evaluation {
        Tensor total;
        Tensor descent;  // what the PGD step differentiates
        LossValues values;
        DetectorLoss detector;
        Tensor attention_variance;  // Var(A') at x + delta
    };

    AttackObjective(const ToyModelBundle& bundle, const Tensor& x, const LossConfig& cfg)
        : bundle_(bundle), x_(x.detach()), cfg_(cfg) {
        cfg_.validate();
        require_image(x_, 16, true, "AttackObjective");
        clean_tokens_ = bundle_.projector.forward(x_);
        clean_embedding_ = bundle_.identity.forward(x_);
        attention_ = prepare_attention_attack(bundle_, x_, cfg_.t_var);
        double side = static_cast<double>(x_.dim(1));
        double d_land = cfg_.d_land > 0 ? cfg_.d_land : side / 4.0;
        detector_ = make_detector_state(select_scales(d_land, cfg_.d_cell, cfg_.d_min, side, cfg_.scale_k),
                                        cfg_.t_prob, cfg_.beta);
    }

    Evaluation evaluate(const Tensor& delta, const std::vector<Tensor>* fixed_masks = nullptr) const {
        Evaluation e;
        Tensor x_adv = add(x_, delta);
        Tensor tokens = bundle_.projector.forward(x_adv);
        LossTerms t;
        t.proj = proj_divergence(tokens, clean_tokens_);
        e.attention_variance = perturbed_attention_variance(attention_, bundle_, tokens);
        t.attn = attn_loss_from_tokens(attention_, bundle_, tokens);
        e.detector = loss_mtcnn(detector_, bundle_, x_, delta, fixed_masks);
        t.mtcnn = e.detector.value;
        t.id = id_loss_from_embeddings(bundle_.identity.forward(x_adv), clean_embedding_);

        LossWeights w = cfg_.weights;
        if (!cfg_.enabled.proj) w.proj = 0;
        if (!cfg_.enabled.attn) w.attn = 0;
        if (!cfg_.enabled.mtcnn) w.mtcnn = 0;
        if (!cfg_.enabled.id) w.id = 0;
        e.total = loss_total(w, t);
        e.descent = descent_objective(w, t);
        e.values = {t.proj.item(), t.attn.item(), t.mtcnn.item(), t.id.item(), e.total.item()};
        return e;
    }

    const Tensor& image() const { return x_; }
    const ToyModelBundle& bundle() const { return bundle_; }
    const LossConfig& config() const { return cfg_; }
    const AttentionAttackState& attention_state() const { return attention_; }
    const DetectorAttackState& detector_state() const { return detector_; }

   private:
    ToyModelBundle bundle_;
    Tensor x_;
    LossConfig cfg_;
    Tensor clean_tokens_, clean_embedding_;
    AttentionAttackState attention_;
    DetectorAttackState detector_;
};

}  // namespace advshield
