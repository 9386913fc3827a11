// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include <dgtr/loss.hpp>

#include <gtest/gtest.h>

#include <random>

namespace dgtr {
namespace {

using testing::randomPlane;

// Central-difference check of a buffer loss against its analytic gradient.
template <int C, class F>
void
expectBufferGradient(Plane<C> x, const Plane<C> &grad, F loss, double h = 1e-5, double tol = 1e-3,
                     double minGrad = 1e-7) {
    int checked = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double saved = x.data[i];
        x.data[i]          = saved + h;
        const double fp    = loss(x);
        x.data[i]          = saved - h;
        const double fm    = loss(x);
        x.data[i]          = saved;
        const double num   = (fp - fm) / (2 * h);
        if (std::abs(grad.data[i]) <= minGrad) continue;
        ++checked;
        const double rel = std::abs(num - grad.data[i]) / std::max(std::abs(num), std::abs(grad.data[i]));
        EXPECT_LT(rel, tol) << "index " << i << " analytic " << grad.data[i] << " numeric " << num;
    }
    EXPECT_GT(checked, 0);
}

TEST(L1, Examples) {
    ImageBuffer a(4, 3, 0.0), b(4, 3, 0.5);
    EXPECT_EQ(l1Loss(a, a).value, 0.0);
    EXPECT_DOUBLE_EQ(l1Loss(a, b).value, 0.5);
    EXPECT_THROW(l1Loss(a, ImageBuffer(3, 4)), ContractError);
}

TEST(L1, MatchesScalarLoop) {
    std::mt19937_64 rng(1);
    const auto a = randomPlane<3>(13, 7, rng), b = randomPlane<3>(13, 7, rng);
    double s     = 0;
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 13; ++c)
            for (int ch = 0; ch < 3; ++ch) s += std::abs(a.at(r, c, ch) - b.at(r, c, ch));
    EXPECT_NEAR(l1Loss(a, b).value, s / (13 * 7 * 3), 1e-9);
}

TEST(Ssim, IdenticalAndInverted) {
    std::mt19937_64 rng(2);
    const auto a = randomPlane<3>(16, 16, rng);
    EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
    EXPECT_NEAR(ssimLoss(a, a).value, 0.0, 1e-12);
    ImageBuffer inv = a;
    for (double &v : inv.data) v = 1.0 - v;
    EXPECT_LT(ssim(a, inv), 1.0);
    EXPECT_THROW(ssim(ImageBuffer(10, 16), ImageBuffer(10, 16)), ContractError);
}

TEST(Ssim, Symmetric) {
    std::mt19937_64 rng(3);
    const auto a = randomPlane<3>(20, 14, rng), b = randomPlane<3>(20, 14, rng);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    const auto a = randomPlane<3>(16, 16, rng), b = randomPlane<3>(16, 16, rng);
    const auto l = ssimLoss(a, b);
    expectBufferGradient(b, l.grad, [&](const ImageBuffer &x) { return ssimLoss(a, x).value; });
}

TEST(Pearson, PerfectAndAffine) {
    std::mt19937_64 rng(5);
    const auto d = randomPlane<1>(9, 7, rng, 1, 5);
    EXPECT_NEAR(pearsonDepthLoss(d, d).value, 0.0, 1e-12);
    std::uniform_real_distribution<double> u(0.01, 10.0), v(-5, 5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x = randomPlane<1>(8, 8, rng, 0.5, 8);
        DepthMap y   = x;
        const double a = u(rng), b = v(rng);
        for (double &e : y.data) e = a * e + b;
        EXPECT_NEAR(pearsonDepthLoss(x, y).value, 0.0, 1e-9);
    }
}

TEST(Pearson, MatchesTwoPassScalarOracleAndFiniteDifferences) {
    std::mt19937_64 rng(6);
    const auto x = randomPlane<1>(12, 10, rng, 1, 5), y = randomPlane<1>(12, 10, rng, 1, 5);
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        mx += x.data[i];
        my += y.data[i];
    }
    mx /= x.data.size();
    my /= y.data.size();
    double cxy = 0, vx = 0, vy = 0;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        cxy += (x.data[i] - mx) * (y.data[i] - my);
        vx += (x.data[i] - mx) * (x.data[i] - mx);
        vy += (y.data[i] - my) * (y.data[i] - my);
    }
    const auto l = pearsonDepthLoss(x, y);
    EXPECT_NEAR(l.value, 1.0 - cxy / std::sqrt(vx * vy), 1e-9);
    EXPECT_GE(l.value, 0.0);
    EXPECT_LE(l.value, 2.0);
    expectBufferGradient(x, l.grad, [&](const DepthMap &d) { return pearsonDepthLoss(d, y).value; });
}

TEST(Pearson, ConstantDepthGivesZero) {
    std::mt19937_64 rng(7);
    const DepthMap c(6, 6, 3.0);
    const auto l = pearsonDepthLoss(c, randomPlane<1>(6, 6, rng));
    EXPECT_EQ(l.value, 0.0);
    for (double g : l.grad.data) EXPECT_EQ(g, 0.0);
}

TEST(Pearson, AlphaMaskExcludesPixels) {
    std::mt19937_64 rng(8);
    auto x       = randomPlane<1>(6, 6, rng, 1, 5);
    auto y       = x;
    AlphaMap a(6, 6, 1.0);
    // Corrupt masked pixels only; the masked loss must still be zero.
    for (int i = 0; i < 6; ++i) {
        a.data[i] = 0.2;
        y.data[i] = 100.0 * (i % 2);
    }
    EXPECT_GT(pearsonDepthLoss(x, y).value, 1e-3);
    const auto l = pearsonDepthLoss(x, y, &a);
    EXPECT_NEAR(l.value, 0.0, 1e-12);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(l.grad.data[i], 0.0);
    const auto z = randomPlane<1>(6, 6, rng);
    const auto lz = pearsonDepthLoss(x, z, &a);
    expectBufferGradient(x, lz.grad, [&](const DepthMap &d) { return pearsonDepthLoss(d, z, &a).value; });
}

TEST(TotalLoss, ZeroOnPerfectInputs) {
    std::mt19937_64 rng(9);
    const auto img = randomPlane<3>(16, 16, rng);
    const auto d   = randomPlane<1>(16, 16, rng, 1, 4);
    DepthMap est   = d;
    for (double &e : est.data) e = 2.0 * e + 0.3;
    EXPECT_NEAR(totalLoss(img, img, d, est, {}).value, 0.0, 1e-9);
}

TEST(TotalLoss, EqualsWeightedSumOfTerms) {
    std::mt19937_64 rng(10);
    const auto i0 = randomPlane<3>(16, 16, rng), i1 = randomPlane<3>(16, 16, rng);
    const auto d0 = randomPlane<1>(16, 16, rng, 1, 4), d1 = randomPlane<1>(16, 16, rng, 1, 4);
    const LossWeights w{0.7, 0.3, 0.11};
    const auto t = totalLoss(i0, i1, d0, d1, w);
    const double expected = w.lambda1 * l1Loss(i0, i1).value + w.lambda2 * (1.0 - ssim(i0, i1)) +
                            w.lambda3 * pearsonDepthLoss(d0, d1).value;
    EXPECT_NEAR(t.value, expected, 1e-9);

    LossWeights photo = w;
    photo.lambda3     = 0;
    const auto p      = totalLoss(i0, i1, d0, d1, photo);
    EXPECT_NEAR(p.value, w.lambda1 * l1Loss(i0, i1).value + w.lambda2 * (1.0 - ssim(i0, i1)), 1e-12);
    for (double g : p.grad_depth.data) EXPECT_EQ(g, 0.0);

    expectBufferGradient(i1, t.grad_color,
                         [&](const ImageBuffer &x) { return totalLoss(i0, x, d0, d1, w).value; }, 1e-6,
                         1e-3, 1e-6);
    expectBufferGradient(d0, t.grad_depth,
                         [&](const DepthMap &x) { return totalLoss(i0, i1, x, d1, w).value; });
}

TEST(DistillLoss, MatchesTotalWithoutDepth) {
    std::mt19937_64 rng(11);
    const auto a = randomPlane<3>(12, 12, rng), b = randomPlane<3>(12, 12, rng);
    const DepthMap d(12, 12);
    const LossWeights w;
    EXPECT_EQ(distillLoss(a, a, w).value, 0.0);
    const auto dl = distillLoss(a, b, w);
    const auto tl = totalLoss(a, b, d, d, LossWeights{w.lambda1, w.lambda2, 0.0});
    EXPECT_EQ(dl.value, tl.value);
    EXPECT_EQ(dl.grad.data, tl.grad_color.data);
    EXPECT_NEAR(dl.value, w.lambda1 * l1Loss(a, b).value + w.lambda2 * (1 - ssim(a, b)), 1e-9);
}

TEST(Psnr, Examples) {
    std::mt19937_64 rng(12);
    const auto a = randomPlane<3>(8, 8, rng);
    EXPECT_EQ(psnr(a, a), kPsnrInfinity);
    ImageBuffer z(10, 10, 0.0), t(10, 10, 0.1);
    EXPECT_NEAR(psnr(z, t), 20.0, 1e-9);
    const auto b = randomPlane<3>(8, 8, rng);
    double mse   = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    mse /= a.data.size();
    EXPECT_NEAR(psnr(a, b), -10 * std::log10(mse), 1e-9);
}

} // namespace
} // namespace dgtr
