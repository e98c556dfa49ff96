#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "advshield/purification.hpp"
#include "advshield/synthetic.hpp"
#include "commands.hpp"

using namespace advshield;
using advshield::cli::seeded_tensor;

namespace {

// Textbook per-block JPEG with direct cosine sums, for a single channel whose
// sides are multiples of 8.
std::vector<double> naive_jpeg(const Tensor& x, const std::array<double, 64>& q) {
    std::size_t h = x.dim(1), w = x.dim(2);
    std::vector<double> out(h * w);
    auto a = [](int u) { return u == 0 ? std::sqrt(1.0 / 8) : std::sqrt(2.0 / 8); };
    auto cs = [](int p, int u) { return std::cos((2 * p + 1) * u * std::numbers::pi / 16); };
    for (std::size_t by = 0; by < h; by += 8)
        for (std::size_t bx = 0; bx < w; bx += 8) {
            double f[8][8];
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                    double s = 0;
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j)
                            s += (x.at(0, by + i, bx + j) * 255 - 128) * cs(i, u) * cs(j, v);
                    double qq = q[static_cast<std::size_t>(u * 8 + v)];
                    f[u][v] = std::floor(a(u) * a(v) * s / qq + 0.5) * qq;
                }
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j) {
                    double s = 0;
                    for (int u = 0; u < 8; ++u)
                        for (int v = 0; v < 8; ++v) s += a(u) * a(v) * f[u][v] * cs(i, u) * cs(j, v);
                    out[(by + i) * w + bx + j] = std::clamp((s + 128) / 255, 0.0, 1.0);
                }
        }
    return out;
}

}  // namespace

TEST(Jpeg, QualityScalingEndpoints) {
    auto q50 = jpeg_quant_table(50), q100 = jpeg_quant_table(100);
    for (std::size_t i = 0; i < 64; ++i) {
        EXPECT_EQ(q50[i], kLuminanceTable[i]);
        EXPECT_EQ(q100[i], 1.0);
    }
    // Quality 25: scale 200, so each entry doubles.
    auto q25 = jpeg_quant_table(25);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(q25[i], 2.0 * kLuminanceTable[i]);
    EXPECT_THROW(jpeg_quant_table(0), std::invalid_argument);
    EXPECT_THROW(jpeg_quant_table(101), std::invalid_argument);
}

TEST(Jpeg, MidGrayIsAFixedPoint) {
    Tensor x = Tensor::full({3, 16, 16}, 128.0 / 255.0);
    for (int q : {10, 50, 90}) {
        Tensor y = jpeg_compress(x, q);
        for (double v : y.data()) EXPECT_NEAR(v, 128.0 / 255.0, 1e-12);
    }
}

TEST(Jpeg, MatchesTextbookBlockCodec) {
    Tensor x = seeded_tensor(1, {1, 16, 24}, 0, 1);
    for (int q : {30, 75}) {
        auto ref = naive_jpeg(x, jpeg_quant_table(q));
        Tensor y = jpeg_compress(x, q);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-9);
    }
}

TEST(Jpeg, OutputInRangeForRaggedSizes) {
    Tensor y = jpeg_compress(seeded_tensor(2, {3, 13, 11}, 0, 1), 50);
    EXPECT_EQ(y.shape(), (Shape{3, 13, 11}));
    for (double v : y.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Bits, RoundsHalfUpToTheGrid) {
    Tensor x({4}, {0.5, 0.0, 1.0, 0.2});
    Tensor y = bit_reduce(x, 3);
    EXPECT_DOUBLE_EQ(y[0], 4.0 / 7.0);  // 3.5 rounds up
    EXPECT_DOUBLE_EQ(y[1], 0.0);
    EXPECT_DOUBLE_EQ(y[2], 1.0);
    EXPECT_DOUBLE_EQ(y[3], 1.0 / 7.0);
    EXPECT_THROW(bit_reduce(x, 0), std::invalid_argument);
    EXPECT_THROW(bit_reduce(x, 9), std::invalid_argument);
}

TEST(Resize, FactorOneIsIdentity) {
    Tensor x = seeded_tensor(3, {3, 10, 12}, 0, 1);
    for (auto m : {ResizeMode::bilinear, ResizeMode::area}) {
        Tensor y = purify_resize(x, 1.0, m);
        for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], x[i], 1e-15);
    }
    EXPECT_THROW(purify_resize(x, 0.0, ResizeMode::area), std::invalid_argument);
    EXPECT_THROW(purify_resize(x, 0.5, ResizeMode::nearest), std::invalid_argument);
}

TEST(Resize, ConstantImageSurvives) {
    Tensor x = Tensor::full({3, 16, 16}, 0.3);
    Tensor y = purify_resize(x, 0.5, ResizeMode::area);
    for (double v : y.data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Parse, LabelsRoundTripAndErrorsAreReported) {
    for (const char* s : {"identity", "jpeg:75", "bits:3", "resize:0.5:area", "resize:0.75:bilinear"})
        EXPECT_EQ(parse_purifier(s).label(), s);
    EXPECT_EQ(parse_purifier("resize:0.5").label(), "resize:0.5:bilinear");
    for (const char* s : {"", "jpeg", "jpeg:", "jpeg:0", "jpeg:7x", "bits:9", "resize:2", "resize:0.5:nearest",
                          "blur:3", "identity:1"})
        EXPECT_THROW(parse_purifier(s), std::invalid_argument) << s;
    EXPECT_THROW(parse_purifier_list(","), std::invalid_argument);
    EXPECT_EQ(parse_purifier_list("jpeg:90,bits:8").size(), 2u);
}

TEST(Grid, DefaultHasNineDistinctLabels) {
    auto g = default_purifier_grid();
    std::vector<std::string> labels;
    for (auto& p : g) labels.push_back(p.label());
    EXPECT_EQ(labels, (std::vector<std::string>{"jpeg:90", "jpeg:75", "jpeg:50", "bits:8", "bits:3",
                                                 "resize:0.75:bilinear", "resize:0.75:area", "resize:0.5:bilinear",
                                                 "resize:0.5:area"}));
}

TEST(Retained, IdentityKeepsEverythingAndErasureKeepsNothing) {
    Tensor x = seeded_tensor(4, {3, 16, 16}, 0.1, 0.9);
    Tensor xp = add(x, seeded_tensor(5, x.shape(), -0.03, 0.03));
    EXPECT_NEAR(residual_energy_fraction(Purifier{}, x, xp), 1.0, 1e-12);
    EXPECT_EQ(retained_fraction(Tensor::zeros(x.shape()), x, xp), 0.0);
    EXPECT_THROW(retained_fraction(x, x, x), std::invalid_argument);
}

TEST(Retained, HalvedResidualGivesOneHalf) {
    Tensor x = seeded_tensor(6, {1, 8, 8}, 0.1, 0.9);
    Tensor d = seeded_tensor(7, x.shape(), -0.03, 0.03);
    EXPECT_NEAR(retained_fraction(mul(d, 0.5), x, add(x, d)), 0.5, 1e-12);
}

TEST(Report, RecordsFollowTheirDefinitions) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(1);
    Tensor xp = add(x, seeded_tensor(8, x.shape(), -0.02, 0.02));
    xp = clamp(xp, 0, 1);
    auto purifiers = parse_purifier_list("identity,jpeg:50");
    RobustnessReport rep = evaluate_robustness(x, xp, b, purifiers);
    ASSERT_EQ(rep.records.size(), 2u);
    for (std::size_t k = 0; k < 2; ++k) {
        const auto& r = rep.records[k];
        Tensor pp = purifiers[k].apply(xp), px = purifiers[k].apply(x);
        double e = 0;
        for (std::size_t i = 0; i < pp.numel(); ++i) e += (pp[i] - px[i]) * (pp[i] - px[i]);
        EXPECT_NEAR(r.residual_energy, std::sqrt(e), 1e-12);
        EXPECT_NEAR(r.residual_fraction, retained_fraction(sub(pp, px), x, xp), 1e-12);
        EXPECT_NEAR(r.ism_toy, ism_toy(b, x, pp), 1e-12);
        EXPECT_LE(r.failed_cells, r.detected_cells);
        double rate = r.detected_cells ? static_cast<double>(r.failed_cells) / r.detected_cells : 0.0;
        EXPECT_DOUBLE_EQ(r.detector_failure_rate, rate);
    }
    EXPECT_EQ(rep.records[0].label, "identity");
    std::string text = format_robustness_report(rep);
    EXPECT_EQ(text.substr(0, text.find('\n')), kRobustnessHeader);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
}

TEST(Report, UnperturbedImageReportsZeroFraction) {
    ToyModelBundle b = init_models(7);
    Tensor x = synthetic_face(2, 32);
    RobustnessReport rep = evaluate_robustness(x, x, b, {Purifier{}});
    EXPECT_EQ(rep.records[0].residual_fraction, 0.0);
    EXPECT_EQ(rep.records[0].failed_cells, 0u);
}
