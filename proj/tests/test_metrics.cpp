#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "advshield/metrics.hpp"
#include "advshield/synthetic.hpp"
#include "commands.hpp"

using namespace advshield;
using advshield::cli::seeded_tensor;

namespace {

Tensor permute_channels(const Tensor& x) {
    std::size_t hw = x.dim(1) * x.dim(2);
    std::vector<double> v(x.numel());
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < hw; ++p) v[c * hw + p] = x[order[c] * hw + p];
    return Tensor(x.shape(), std::move(v));
}

}  // namespace

TEST(Metrics, IdenticalImages) {
    Tensor x = synthetic_face(1);
    EXPECT_EQ(l2_dist(x, x), 0.0);
    EXPECT_EQ(psnr(x, x), kPsnrCap);
    EXPECT_NEAR(ssim(x, x), 1.0, 1e-12);
    MetricReport r = compute_metrics(init_models(7), x, x);
    EXPECT_EQ(r.fr, 0.0);
    EXPECT_NEAR(r.ism_toy, 1.0, 1e-12);
}

TEST(Metrics, KnownOffsets) {
    Tensor x = Tensor::full({3, 16, 16}, 0.4), y = Tensor::full({3, 16, 16}, 0.5);
    EXPECT_NEAR(l2_dist(x, y), 0.1, 1e-12);
    EXPECT_NEAR(psnr(x, y), 20.0, 1e-9);  // mse 0.01
    EXPECT_NEAR(mse(x, y), 0.01, 1e-15);
}

TEST(Metrics, LoopOracles) {
    Tensor a = seeded_tensor(1, {3, 9, 10}, 0, 1), b = seeded_tensor(2, {3, 9, 10}, 0, 1);
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    double m = s / static_cast<double>(a.numel());
    EXPECT_NEAR(mse(a, b), m, 1e-15);
    EXPECT_NEAR(l2_dist(a, b), std::sqrt(m), 1e-15);
    EXPECT_NEAR(psnr(a, b), -10 * std::log10(m), 1e-12);
}

TEST(Ssim, SingleWindowMatchesTheFormula) {
    Tensor a = seeded_tensor(3, {1, 8, 8}, 0, 1), b = seeded_tensor(4, {1, 8, 8}, 0, 1);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        ma += a[i] / 64;
        mb += b[i] / 64;
    }
    double va = 0, vb = 0, cov = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        va += (a[i] - ma) * (a[i] - ma) / 64;
        vb += (b[i] - mb) * (b[i] - mb) / 64;
        cov += (a[i] - ma) * (b[i] - mb) / 64;
    }
    const double c1 = 1e-4, c2 = 9e-4;
    double expect = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    EXPECT_NEAR(ssim(a, b), expect, 1e-12);
    EXPECT_THROW(ssim(Tensor::zeros({1, 7, 8}), Tensor::zeros({1, 7, 8})), ShapeError);
}

TEST(Metrics, SymmetricAndChannelPermutationInvariant) {
    Tensor a = synthetic_face(2, 32), b = clamp(add(a, seeded_tensor(5, a.shape(), -0.05, 0.05)), 0, 1);
    EXPECT_DOUBLE_EQ(l2_dist(a, b), l2_dist(b, a));
    EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
    Tensor pa = permute_channels(a), pb = permute_channels(b);
    EXPECT_NEAR(l2_dist(pa, pb), l2_dist(a, b), 1e-15);
    EXPECT_NEAR(psnr(pa, pb), psnr(a, b), 1e-12);
    EXPECT_NEAR(ssim(pa, pb), ssim(a, b), 1e-14);
    EXPECT_NEAR(frequency_rate(sub(pb, pa)), frequency_rate(sub(b, a)), 1e-9);
}

TEST(Metrics, ShapeMismatchIsRejected) {
    EXPECT_THROW(mse(Tensor::zeros({3, 8, 8}), Tensor::zeros({3, 8, 9})), ShapeError);
}

TEST(FrequencyRate, LowOnlyIsInfiniteHighOnlyIsZero) {
    // A constant block is pure DC.
    EXPECT_TRUE(std::isinf(frequency_rate(Tensor::full({1, 8, 8}, 0.01))));
    // The (7,7) basis function; its table entry is 99, so all energy is discarded.
    std::vector<double> v(64);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            v[i * 8 + j] = 0.01 * std::cos((2.0 * i + 1) * 7 * std::numbers::pi / 16) *
                           std::cos((2.0 * j + 1) * 7 * std::numbers::pi / 16);
    EXPECT_NEAR(frequency_rate(Tensor({1, 8, 8}, v)), 0.0, 1e-12);
    EXPECT_THROW(frequency_rate(Tensor::zeros({1, 8, 8})), std::invalid_argument);
}

TEST(FrequencyRate, WhiteNoiseSplitsByCoefficientCount) {
    // Orthonormal DCT of iid noise spreads energy evenly over the 64 coefficients.
    EXPECT_EQ(LowPassCodec().kept(), 23u);
    double expected = 23.0 / 41.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        double fr = frequency_rate(seeded_tensor(100 + s, {3, 32, 32}, -1, 1));
        EXPECT_GT(fr, 0.7 * expected) << s;
        EXPECT_LT(fr, 1.3 * expected) << s;
    }
}

TEST(IsmToy, SelfSimilarityAndRange) {
    ToyModelBundle b = init_models(7);
    Tensor a = synthetic_face(3), c = random_image(9, 64, 64);
    EXPECT_NEAR(ism_toy(b, a, a), 1.0, 1e-12);
    double v = ism_toy(b, a, c);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
    EXPECT_DOUBLE_EQ(v, ism_toy(b, c, a));
}
