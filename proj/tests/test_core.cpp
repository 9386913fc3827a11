// Copyright Contributors to the DGTR Project
// SPDX-License-Identifier: Apache-2.0

#include "test_util.hpp"

#include <dgtr/core.hpp>

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

#include <random>

namespace dgtr {
namespace {

// Plain triple-loop product, independent of Eigen expression templates.
using Raw3 = std::array<std::array<double, 3>, 3>;

Raw3
matmul(const Raw3 &a, const Raw3 &b) {
    Raw3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                c[i][j] += a[i][k] * b[k][j];
    return c;
}

Raw3
transpose(const Raw3 &a) {
    Raw3 t{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            t[i][j] = a[j][i];
    return t;
}

Raw3
rotationRaw(const Vec4 &qIn) {
    const double n = std::sqrt(qIn.dot(qIn));
    const double w = qIn[0] / n, x = qIn[1] / n, y = qIn[2] / n, z = qIn[3] / n;
    return {{{w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)},
             {2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)},
             {2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z}}};
}

TEST(Covariance, IdentityQuaternionZeroLogScale) {
    const Mat3 c = covarianceFrom(Vec4(1, 0, 0, 0), Vec3::Zero());
    EXPECT_TRUE(c.isApprox(Mat3::Identity(), 1e-15));
}

TEST(Covariance, AxisAlignedScaling) {
    const Mat3 c = covarianceFrom(Vec4(1, 0, 0, 0), Vec3(std::log(2.0), 0, 0));
    Mat3 expected = Vec3(4, 1, 1).asDiagonal();
    EXPECT_LT((c - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, MatchesExplicitMatrixProduct) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-2.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const Vec4 q = testing::randomQuaternion(rng);
        const Vec3 ls(u(rng), u(rng), u(rng));
        const Raw3 r = rotationRaw(q);
        Raw3 s{};
        for (int a = 0; a < 3; ++a) s[a][a] = std::exp(ls[a]);
        const Raw3 expected = matmul(matmul(matmul(r, s), transpose(s)), transpose(r));
        const Mat3 c        = covarianceFrom(q, ls);
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                EXPECT_NEAR(c(i, j), expected[i][j], 1e-9);
            }
        }
        EXPECT_EQ(c(0, 1), c(1, 0));
        EXPECT_EQ(c(0, 2), c(2, 0));
        EXPECT_EQ(c(1, 2), c(2, 1));
        Eigen::SelfAdjointEigenSolver<Mat3> eig(c);
        EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-12);
    }
}

TEST(Covariance, RotationEquivariance) {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(-1.5, 0.5);
    for (int trial = 0; trial < 200; ++trial) {
        const Vec4 q1 = testing::randomQuaternion(rng);
        const Vec4 q2 = testing::randomQuaternion(rng);
        const Vec3 ls(u(rng), u(rng), u(rng));
        const Mat3 lhs = covarianceFrom(quaternionProduct(q1, q2), ls);
        const Mat3 r1  = rotationFromQuaternion(q1);
        const Mat3 rhs = r1 * covarianceFrom(q2, ls) * r1.transpose();
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(Region, InsideAndHalfOpenBoundary) {
    const Region r{-1, 1, -1, 1, 0};
    EXPECT_TRUE(pointInRegion(Vec3(0, 0, 5), r));
    EXPECT_FALSE(pointInRegion(Vec3(1, 0, 0), r));
    EXPECT_TRUE(pointInRegion(Vec3(-1, -1, 0), r));
    EXPECT_FALSE(pointInRegion(Vec3(0, 1, 0), r));
}

TEST(Region, BatchMatchesScalarLoop) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::vector<Vec3> pts(5000);
    for (auto &p : pts) p = Vec3(u(rng), u(rng), u(rng));
    const Region r{-1.2, 0.7, -0.4, 2.1, 3};
    const auto mask = pointsInRegion(pts, r);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const bool expected =
            pts[i].x() >= r.min_x && pts[i].x() < r.max_x && pts[i].y() >= r.min_y && pts[i].y() < r.max_y;
        EXPECT_EQ(mask[i], expected);
    }
}

TEST(Region, InvalidRectangleRejected) {
    EXPECT_THROW((Region{1, 1, 0, 1, 0}.validate()), ContractError);
    EXPECT_NO_THROW((Region{0, 1, 0, 1, 0}.validate()));
}

TEST(Camera, ValidateRejectsBadPoseAndClip) {
    Camera cam;
    cam.width = cam.height = 8;
    EXPECT_NO_THROW(cam.validate());
    Camera bad = cam;
    bad.near   = 2.0;
    bad.far    = 1.0;
    EXPECT_THROW(bad.validate(), ContractError);
    bad          = cam;
    bad.rotation = Vec3(1, 1, -1).asDiagonal();
    EXPECT_THROW(bad.validate(), ContractError);
}

TEST(GaussianModel, RetainAndSanitize) {
    GaussianModel m(1);
    for (int i = 0; i < 4; ++i) {
        GaussianPrimitive g;
        g.position = Vec3(i, 0, 0);
        g.rotation = Vec4(2, 0, 0, 0);
        m.add(g);
    }
    m.sanitize();
    for (const auto &g : m.primitives()) {
        EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-12);
    }
    m.retain({true, false, true, false});
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[1].position.x(), 2.0);
    EXPECT_EQ(m.gradAccum().size(), 2u);
    m[0].log_scale[0] = std::nan("");
    EXPECT_THROW(m.sanitize(), NumericError);
    EXPECT_THROW(GaussianModel(4), ContractError);
}

} // namespace
} // namespace dgtr
