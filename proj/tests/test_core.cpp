// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include <Eigen/Eigenvalues>

#include "fgs/core.hpp"
#include "test_util.hpp"

namespace fgs {
namespace {

bool near_identity(const Pose& p, double tol) {
    return p.rotation.angularDistance(Quat::Identity()) <= tol && p.translation.norm() <= tol;
}

TEST(Covariance, Examples) {
    EXPECT_TRUE(covariance_from_scale_rotation(Vec3(1, 1, 1), Quat::Identity()).isApprox(Mat3::Identity()));
    const Mat3 d = covariance_from_scale_rotation(Vec3(2, 1, 1), Quat::Identity());
    EXPECT_TRUE(d.isApprox(Vec3(4, 1, 1).asDiagonal().toDenseMatrix()));

    const Quat rz(Eigen::AngleAxisd(std::numbers::pi / 2, Vec3::UnitZ()));
    const Mat3 rotated = covariance_from_scale_rotation(Vec3(2, 1, 1), rz);
    const Mat3 expected = Vec3(1, 4, 1).asDiagonal();
    EXPECT_LT((rotated - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Covariance, RejectsNonPositiveScale) {
    EXPECT_THROW(covariance_from_scale_rotation(Vec3(1, 0, 1), Quat::Identity()), InvalidArgument);
    EXPECT_THROW(covariance_from_scale_rotation(Vec3(1, 1, -2), Quat::Identity()), InvalidArgument);
}

TEST(Covariance, EigenvaluesAreSquaredScales) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.01, 3.0);
    for (int t = 0; t < 200; ++t) {
        const Vec3 s(u(rng), u(rng), u(rng));
        const Mat3 c = covariance_from_scale_rotation(s, testing::random_rotation(rng));
        EXPECT_LE((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        Eigen::SelfAdjointEigenSolver<Mat3> es(c);
        Vec3 sq = s.cwiseProduct(s);
        std::sort(sq.data(), sq.data() + 3);
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(es.eigenvalues()[k], sq[k], 1e-9 * sq[k] + 1e-15);
    }
}

TEST(Pose, Examples) {
    EXPECT_TRUE(near_identity(invert_pose(Pose::identity()), 0.0));
    Pose t = Pose::identity();
    t.translation = Vec3(1, 0, 0);
    EXPECT_TRUE(transform_point(t, Vec3::Zero()).isApprox(Vec3(1, 0, 0)));
}

TEST(Pose, GroupLaws) {
    std::mt19937_64 rng(22);
    for (int t = 0; t < 100; ++t) {
        const Pose a = testing::random_pose(rng, 2.0);
        const Pose b = testing::random_pose(rng, 2.0);
        const Pose c = testing::random_pose(rng, 2.0);
        EXPECT_TRUE(near_identity(compose_poses(a, invert_pose(a)), 1e-9));
        EXPECT_TRUE(near_identity(compose_poses(invert_pose(a), a), 1e-9));
        const Pose l = compose_poses(compose_poses(a, b), c);
        const Pose r = compose_poses(a, compose_poses(b, c));
        EXPECT_LT(l.rotation.angularDistance(r.rotation), 1e-9);
        EXPECT_LT((l.translation - r.translation).norm(), 1e-9);
        const Vec3 p(0.3, -1.0, 2.0);
        EXPECT_LT((transform_point(compose_poses(a, b), p) - transform_point(a, transform_point(b, p))).norm(),
                  1e-12);
    }
}

TEST(Intrinsics, ProjectInvertsBackProject) {
    const CameraIntrinsics intr{500, 480, 160, 120, 320, 240};
    const Vec3 p = intr.back_project(37.5, 200.25, 2.5);
    const Vec2 uv = intr.project(p);
    EXPECT_NEAR(uv.x(), 37.5, 1e-12);
    EXPECT_NEAR(uv.y(), 200.25, 1e-12);
    EXPECT_DOUBLE_EQ(p.z(), 2.5);
}

TEST(GaussianMap, CompactBumpsGeneration) {
    GaussianMap map;
    for (int i = 0; i < 4; ++i) {
        Gaussian g;
        g.opacity = 0.1 * i;
        map.add(g);
    }
    const auto gen = map.generation();
    map.compact({true, false, true, false});
    ASSERT_EQ(map.size(), 2u);
    EXPECT_DOUBLE_EQ(map[1].opacity, 0.2);
    EXPECT_NE(map.generation(), gen);
}

TEST(RgbdFrame, ValidateRejectsShapeMismatch) {
    RgbdFrame f;
    f.color = ImageF(4, 4, 3);
    f.depth = ImageF(4, 3);
    f.intrinsics = {1, 1, 0, 0, 4, 4};
    EXPECT_THROW(f.validate(), InvalidArgument);
}

}  // namespace
}  // namespace fgs
