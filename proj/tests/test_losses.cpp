#include <gtest/gtest.h>

#include <cmath>

#include "advshield/gradcheck.hpp"
#include "advshield/losses.hpp"
#include "advshield/synthetic.hpp"
#include "commands.hpp"

using namespace advshield;
using advshield::cli::seeded_tensor;

TEST(SigmaMax, OneHotAttainsItAndClosedForm) {
    for (std::size_t n : {1, 2, 3, 4, 8, 16, 77}) {
        std::vector<double> row(n, 0.0);
        row[0] = 1.0;
        double v = variance(Tensor({1, n}, row), 1).item();
        EXPECT_NEAR(v, sigma_max(n), 1e-15);
        EXPECT_NEAR(sigma_max(n), (static_cast<double>(n) - 1) / (static_cast<double>(n) * n), 1e-15);
    }
    EXPECT_THROW(sigma_max(0), std::invalid_argument);
}

TEST(SigmaMax, UniformRowHasZeroVariance) {
    EXPECT_NEAR(variance(Tensor::full({1, 8}, 0.125), 1).item(), 0.0, 1e-18);
}

TEST(VarMask, LowerQuantileCountBounds) {
    for (std::size_t n : {5, 16, 33}) {
        Tensor v = seeded_tensor(n, {1, n}, 0, 1);
        for (double t : {0.1, 0.25, 0.5, 0.9}) {
            Tensor m = build_var_mask(v, t);
            double frac = 0;
            for (double e : m.data()) frac += e;
            frac /= static_cast<double>(n);
            EXPECT_GE(frac, t - 1.0 / n);
            EXPECT_LE(frac, t + 1.0 / n);
            EXPECT_GE(frac, 1.0 / n);  // the smallest entry is always selected
        }
    }
    EXPECT_THROW(build_var_mask(Tensor::zeros({1, 4}), 0.0), std::invalid_argument);
}

TEST(VarMask, SelectsTheSmallestEntriesBySorting) {
    Tensor v({2, 3}, {0.5, 0.1, 0.9, 0.3, 0.7, 0.2});
    // sorted: 0.1 0.2 0.3 | 0.5 0.7 0.9; t = 0.5 keeps the three smallest
    EXPECT_EQ(build_var_mask(v, 0.5).values(), (std::vector<double>{0, 1, 0, 1, 0, 1}));
}

TEST(ProbMask, IsStrict) {
    Tensor p({4}, {0.6, 0.61, 0.2, 0.9});
    EXPECT_EQ(build_prob_mask(p, 0.6).values(), (std::vector<double>{0, 1, 0, 1}));
}

TEST(Losses, ZeroAtZeroPerturbation) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(1, 32), z = Tensor::zeros(x.shape());
    EXPECT_EQ(loss_proj(b, x, z).item(), 0.0);
    EXPECT_EQ(loss_id(b, x, z).item(), 0.0);
    AttentionAttackState s = prepare_attention_attack(b, x, 0.5);
    s.var_mask = Tensor::zeros(s.var_mask.shape());
    EXPECT_EQ(loss_attn(s, b, x, seeded_tensor(3, x.shape(), -0.05, 0.05)).item(), 0.0);
}

TEST(Losses, ProjIsNegatedL1OfTokenShift) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(2, 32), d = seeded_tensor(4, x.shape(), -0.03, 0.03);
    Tensor t0 = b.projector.forward(x), t1 = b.projector.forward(add(x, d));
    double l1 = 0;
    for (std::size_t i = 0; i < t0.numel(); ++i) l1 += std::fabs(t1[i] - t0[i]);
    EXPECT_NEAR(loss_proj(b, x, d).item(), -l1, 1e-12);
}

TEST(Losses, IdentityIsCosineMinusOne) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(3, 32), d = seeded_tensor(5, x.shape(), -0.05, 0.05);
    Tensor e0 = b.identity.forward(x), e1 = b.identity.forward(add(x, d));
    double dot = 0, n0 = 0, n1 = 0;
    for (std::size_t i = 0; i < e0.numel(); ++i) {
        dot += e0[i] * e1[i];
        n0 += e0[i] * e0[i];
        n1 += e1[i] * e1[i];
    }
    EXPECT_NEAR(loss_id(b, x, d).item(), dot / std::sqrt(n0 * n1) - 1.0, 1e-12);
    EXPECT_LE(loss_id(b, x, d).item(), 0.0);
}

TEST(Losses, AttentionMatchesMaskedGapOracle) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(4, 32), d = seeded_tensor(6, x.shape(), -0.05, 0.05);
    AttentionAttackState s = prepare_attention_attack(b, x, 0.5);
    // Query from the clean image, keys from the perturbed tokens.
    Tensor ref_var = attention_variance(
        CrossAttentionBlock::attention_map(b.attention.query(x), b.attention.keys(b.projector.forward(add(x, d)))));
    double smax = sigma_max(FaceProjector::seq), expect = 0;
    for (std::size_t i = 0; i < ref_var.numel(); ++i) {
        double g = (smax - ref_var[i]) * s.var_mask[i];
        expect += g * g;
    }
    EXPECT_NEAR(loss_attn(s, b, x, d).item(), expect, 1e-12);
}

TEST(Losses, AttentionNeedsPreparedState) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(4, 32);
    EXPECT_THROW(loss_attn(AttentionAttackState{}, b, x, Tensor::zeros(x.shape())), std::logic_error);
}

TEST(Scales, EnumeratedSetMatchesConstraints) {
    // first = 12/12 = 1; keep s with s*d_land <= 12 and s*64 >= 12.
    auto s = select_scales(16, 12, 12, 64, 0.709);
    std::vector<double> expect;
    for (int i = 0; i < 100; ++i) {
        double v = std::pow(0.709, i);
        if (v * 64 < 12) break;
        if (v * 16 <= 12) expect.push_back(v);
    }
    ASSERT_EQ(s.size(), expect.size());
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(s[i], expect[i]);
    EXPECT_TRUE(select_scales(200, 12, 12, 20, 0.709).empty());
    EXPECT_THROW(select_scales(16, 12, 12, 64, 1.0), std::invalid_argument);
}

TEST(RobustResize, IntegerFactorIsPoolAvg) {
    Tensor x = seeded_tensor(7, {3, 12, 12}, 0, 1);
    EXPECT_EQ(robust_resize(x, 0.5).values(), pool_avg(x, {2, 2}, {2, 2}).values());
    EXPECT_EQ(robust_resize(x, 1.0 / 3).values(), pool_avg(x, {3, 3}, {3, 3}).values());
}

TEST(Detector, NoScalesGivesZeroAndFlag) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(5, 32);
    auto st = make_detector_state({}, 0.6, 0.3);
    DetectorLoss l = loss_mtcnn(st, b, x, Tensor::zeros(x.shape()));
    EXPECT_TRUE(l.no_scales);
    EXPECT_EQ(l.value.item(), 0.0);
}

TEST(Detector, FixedMasksMatchLiveMasksAtTheSamePoint) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(6);
    auto st = make_detector_state(select_scales(16, 12, 12, 64, 0.709), 0.6, 0.3);
    Tensor d = seeded_tensor(8, x.shape(), -0.02, 0.02);
    DetectorLoss live = loss_mtcnn(st, b, x, d);
    DetectorLoss fixed = loss_mtcnn(st, b, x, d, &live.masks);
    EXPECT_EQ(live.value.item(), fixed.value.item());
    EXPECT_EQ(live.masks.size(), 2 * st.scales.size());
    std::vector<Tensor> wrong(1, live.masks[0]);
    EXPECT_THROW(loss_mtcnn(st, b, x, d, &wrong), std::invalid_argument);
}

TEST(Detector, LossIsMaskedSquaredDistanceToTargets) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(7);
    auto st = make_detector_state({0.5}, 0.6, 0.3);
    DetectorLoss l = loss_mtcnn(st, b, x, Tensor::zeros(x.shape()));
    double expect = 0;
    std::size_t k = 0;
    for (ResizePath p : kResizePaths) {
        Tensor out = b.pnet.forward(resize_path(x, 0.5, p));
        const Tensor& m = l.masks[k++];
        for (std::size_t i = 0; i < m.numel(); ++i) {
            double pf = out[i], pt = out[m.numel() + i];
            EXPECT_EQ(m[i], pt > 0.6 ? 1.0 : 0.0);
            expect += m[i] * ((pf - 0.9) * (pf - 0.9) + (pt - 0.3) * (pt - 0.3));
        }
    }
    EXPECT_NEAR(l.value.item(), expect, 1e-12);
}

TEST(Weights, SignConstraints) {
    EXPECT_NO_THROW(LossWeights{}.validate());
    EXPECT_THROW((LossWeights{1, 1, 1, -1}.validate()), std::invalid_argument);
    EXPECT_THROW((LossWeights{-1, -1, 1, -1}.validate()), std::invalid_argument);
    EXPECT_THROW((LossWeights{-1, 1, -1, -1}.validate()), std::invalid_argument);
    EXPECT_THROW((LossWeights{-1, 1, 1, 1}.validate()), std::invalid_argument);
}

TEST(Total, ReportedSumIsSignedAndDescentUsesMagnitudes) {
    LossTerms t{Tensor::scalar(-2), Tensor::scalar(3), Tensor::scalar(5), Tensor::scalar(-0.5)};
    LossWeights w{-0.5, 2, 0.1, -4};
    EXPECT_DOUBLE_EQ(loss_total(w, t).item(), -0.5 * -2 + 2 * 3 + 0.1 * 5 + -4 * -0.5);
    EXPECT_DOUBLE_EQ(descent_objective(w, t).item(), 0.5 * -2 + 2 * 3 + 0.1 * 5 + 4 * -0.5);
    EXPECT_DOUBLE_EQ(loss_total(w, -2, 3, 5, -0.5), loss_total(w, t).item());
}

TEST(Objective, DisabledLossesDropOutOfTotal) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(8, 32), d = seeded_tensor(9, x.shape(), -0.03, 0.03);
    LossConfig cfg;
    cfg.enabled = {false, true, false, false};
    AttackObjective obj(b, x, cfg);
    auto e = obj.evaluate(d);
    EXPECT_DOUBLE_EQ(e.values.total, cfg.weights.attn * e.values.attn);
    EXPECT_NE(e.values.proj, 0.0);  // still reported
}

TEST(Objective, DescentGradientImprovesEveryTerm) {
    // A small step against the descent gradient lowers the objective.
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(9, 32);
    AttackObjective obj(b, x, LossConfig());
    Tensor d = seeded_tensor(10, x.shape(), -0.02, 0.02);
    Tensor leaf = d.detach();
    leaf.set_requires_grad(true);
    auto e = obj.evaluate(leaf);
    backward(e.descent);
    auto g = leaf.grad();
    auto moved = d.values();
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] -= 1e-4 * g[i];
    auto masks = e.detector.masks;
    EXPECT_LT(obj.evaluate(Tensor(d.shape(), moved), &masks).descent.item(), e.descent.item());
}

TEST(Losses, GradientsAtToyScale) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(10, 16), d = seeded_tensor(11, x.shape(), -0.02, 0.02);
    EXPECT_LT(grad_check([&](const Tensor& t) { return loss_proj(b, x, t); }, d).max_rel_err, 1e-4);
    EXPECT_LT(grad_check([&](const Tensor& t) { return loss_id(b, x, t); }, d).max_rel_err, 1e-4);
    AttentionAttackState s = prepare_attention_attack(b, x, 0.5);
    EXPECT_LT(grad_check([&](const Tensor& t) { return loss_attn(s, b, x, t); }, d).max_rel_err, 1e-4);
}
