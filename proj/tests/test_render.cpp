// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "fgs/render.hpp"
#include "gradient_check.hpp"
#include "test_util.hpp"

namespace fgs {
namespace {

using testing::brute_force_render;
using testing::max_abs_diff;
using testing::random_scene;
using testing::small_camera;

Gaussian centered_gaussian(const CameraIntrinsics& intr, double depth, double scale, double opacity,
                           const Vec3& color) {
    Gaussian g;
    g.mu = intr.back_project(intr.cx, intr.cy, depth);
    g.scale = Vec3::Constant(scale);
    g.opacity = opacity;
    g.color = color;
    return g;
}

TEST(ProjectGaussian, OpticalAxisSmallAngle) {
    const auto intr = small_camera(64, 64, 100.0);
    const double d = 4.0;
    const double s = 0.01;
    const auto g = centered_gaussian(intr, d, s, 0.5, Vec3(0.2, 0.4, 0.6));
    RenderConfig cfg;
    cfg.cov2d_dilation = 0.0;
    const auto pg = project_gaussian(g, Pose::identity(), intr, cfg);
    ASSERT_TRUE(pg.has_value());
    EXPECT_NEAR(pg->mean2d.x(), intr.cx, 1e-12);
    EXPECT_NEAR(pg->mean2d.y(), intr.cy, 1e-12);
    const double expected = std::pow(intr.fx * s / d, 2);
    EXPECT_NEAR(pg->cov2d(0, 0), expected, 0.01 * expected);
    EXPECT_NEAR(pg->cov2d(1, 1), expected, 0.01 * expected);
    EXPECT_NEAR(pg->cov2d(0, 1), 0.0, 1e-12);
}

TEST(ProjectGaussian, BehindCameraIsCulled) {
    const auto intr = small_camera();
    Gaussian g;
    g.mu = Vec3(0, 0, -1);
    g.scale = Vec3::Constant(0.1);
    EXPECT_FALSE(project_gaussian(g, Pose::identity(), intr).has_value());
}

TEST(ProjectGaussian, MeanMatchesPinholeForRandomPoses) {
    std::mt19937_64 rng(7);
    const auto intr = small_camera();
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        Pose pose = testing::random_pose(rng, 0.3);
        Gaussian g;
        g.mu = transform_point(pose, intr.back_project(10 + trial % 40, 20, 2.0 + 0.01 * trial));
        g.scale = Vec3(0.01, 0.02, 0.03);
        g.rotation = testing::random_rotation(rng);
        const auto pg = project_gaussian(g, pose, intr);
        ASSERT_TRUE(pg.has_value());
        const Vec3 pc = pose.rotation.inverse() * (g.mu - pose.translation);
        EXPECT_NEAR(pg->mean2d.x(), intr.fx * pc.x() / pc.z() + intr.cx, 1e-9);
        EXPECT_NEAR(pg->mean2d.y(), intr.fy * pc.y() / pc.z() + intr.cy, 1e-9);
        ++checked;
    }
    EXPECT_EQ(checked, 200);
}

TEST(Render, SingleGaussianAtPixelCenter) {
    const auto intr = small_camera(33, 33, 50.0);
    const Vec3 c(0.3, 0.6, 0.9);
    const double alpha = 0.7;
    GaussianMap map;
    map.add(centered_gaussian(intr, 2.0, 0.05, alpha, c));
    const auto out = render(map, Pose::identity(), intr);
    const int px = 16;
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(out.color(px, px, ch), c[ch] * alpha, 1e-12);
    EXPECT_NEAR(out.opacity(px, px), alpha, 1e-12);
    EXPECT_NEAR(out.depth(px, px), 2.0 * alpha, 1e-12);
}

TEST(Render, TwoStackedGaussians) {
    const auto intr = small_camera(33, 33, 50.0);
    const Vec3 c1(0.9, 0.1, 0.2);
    const Vec3 c2(0.1, 0.8, 0.3);
    const double a1 = 0.6;
    const double a2 = 0.5;
    GaussianMap map;
    map.add(centered_gaussian(intr, 3.0, 0.05, a2, c2));  // storage order must not matter
    map.add(centered_gaussian(intr, 2.0, 0.05, a1, c1));
    const auto out = render(map, Pose::identity(), intr);
    for (int ch = 0; ch < 3; ++ch) {
        EXPECT_NEAR(out.color(16, 16, ch), c1[ch] * a1 + c2[ch] * a2 * (1 - a1), 1e-12);
    }
    EXPECT_NEAR(out.opacity(16, 16), a1 + a2 * (1 - a1), 1e-12);
}

TEST(Render, EmptyMapGivesZeroImages) {
    const auto intr = small_camera(20, 10);
    const auto out = render(GaussianMap{}, Pose::identity(), intr);
    for (double v : out.color.data) EXPECT_EQ(v, 0.0);
    for (double v : out.opacity.data) EXPECT_EQ(v, 0.0);
    for (double v : out.depth.data) EXPECT_EQ(v, 0.0);
}

TEST(Render, MatchesBruteForceOracle) {
    std::mt19937_64 rng(11);
    const auto intr = small_camera();
    for (int scene = 0; scene < 5; ++scene) {
        const auto gs = random_scene(rng, 200, intr);
        GaussianMap map;
        map.add(gs);
        const Pose pose = scene == 0 ? Pose::identity() : testing::random_pose(rng, 0.05);
        const auto fast = render(map, pose, intr);
        const auto ref = brute_force_render(gs, pose, intr);
        EXPECT_LE(max_abs_diff(fast.color, ref.color), 1e-6);
        EXPECT_LE(max_abs_diff(fast.depth, ref.depth), 1e-6);
        EXPECT_LE(max_abs_diff(fast.opacity, ref.opacity), 1e-6);
    }
}

TEST(Render, OpacityBoundedAndMonotoneUnderInsertion) {
    std::mt19937_64 rng(5);
    const auto intr = small_camera(48, 48);
    auto gs = random_scene(rng, 60, intr);
    GaussianMap map;
    map.add(gs);
    auto before = render(map, Pose::identity(), intr);
    for (int k = 0; k < 20; ++k) {
        map.add(random_scene(rng, 1, intr));
        const auto after = render(map, Pose::identity(), intr);
        for (std::size_t i = 0; i < after.opacity.data.size(); ++i) {
            EXPECT_GE(after.opacity.data[i], before.opacity.data[i] - 1e-12);
            EXPECT_LE(after.opacity.data[i], 1.0 + 1e-12);
            EXPECT_GE(after.opacity.data[i], 0.0);
        }
        before = after;
    }
}

TEST(Render, StorageOrderInvariant) {
    std::mt19937_64 rng(9);
    const auto intr = small_camera();
    auto gs = random_scene(rng, 150, intr);
    GaussianMap a;
    a.add(gs);
    std::shuffle(gs.begin(), gs.end(), rng);
    GaussianMap b;
    b.add(gs);
    const auto ra = render(a, Pose::identity(), intr);
    const auto rb = render(b, Pose::identity(), intr);
    EXPECT_LE(max_abs_diff(ra.color, rb.color), 1e-12);
    EXPECT_LE(max_abs_diff(ra.depth, rb.depth), 1e-12);
}

TEST(Render, ThreadCountDoesNotChangeOutput) {
    std::mt19937_64 rng(13);
    const auto intr = small_camera(80, 50);
    GaussianMap map;
    map.add(random_scene(rng, 300, intr));
    RenderConfig one;
    RenderConfig four;
    four.threads = 4;
    const auto r1 = rasterize({map.gaussians()}, Pose::identity(), intr, one);
    const auto r4 = rasterize({map.gaussians()}, Pose::identity(), intr, four);
    EXPECT_EQ(r1.output.color.data, r4.output.color.data);
    RenderAdjoint adj;
    adj.color = testing::random_image(rng, intr.width, intr.height, 3);
    const auto g1 = backward(r1, adj);
    const auto g4 = backward(r4, adj);
    for (std::size_t i = 0; i < g1.size(); ++i) {
        EXPECT_EQ(g1.mu[i], g4.mu[i]);
        EXPECT_EQ(g1.opacity[i], g4.opacity[i]);
    }
}

TEST(RenderGradients, ZeroAdjointGivesZeroGradients) {
    std::mt19937_64 rng(3);
    const auto intr = small_camera(32, 32);
    GaussianMap map;
    map.add(random_scene(rng, 5, intr));
    RenderAdjoint adj;
    adj.color = ImageD(32, 32, 3, 0.0);
    adj.depth = ImageD(32, 32, 1, 0.0);
    const auto g = render_with_gradients(map, Pose::identity(), intr, adj);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_TRUE(g.mu[i].isZero(0.0));
        EXPECT_TRUE(g.scale[i].isZero(0.0));
        EXPECT_TRUE(g.rotation[i].isZero(0.0));
        EXPECT_EQ(g.opacity[i], 0.0);
        EXPECT_TRUE(g.color[i].isZero(0.0));
    }
}

TEST(RenderGradients, SingleGaussianColorGradientIsAlpha) {
    const auto intr = small_camera(33, 33, 50.0);
    GaussianMap map;
    map.add(centered_gaussian(intr, 2.0, 0.05, 0.4, Vec3(0.5, 0.5, 0.5)));
    RenderAdjoint adj;
    adj.color = ImageD(33, 33, 3, 0.0);
    adj.color(16, 16, 1) = 1.0;  // L = green channel of the center pixel
    const auto g = render_with_gradients(map, Pose::identity(), intr, adj);
    EXPECT_NEAR(g.color[0].y(), 0.4, 1e-12);
    EXPECT_NEAR(g.color[0].x(), 0.0, 1e-15);
}

TEST(RenderGradients, CulledGaussiansHaveZeroGradient) {
    const auto intr = small_camera(32, 32);
    GaussianMap map;
    Gaussian behind;
    behind.mu = Vec3(0, 0, -2);
    behind.scale = Vec3::Constant(0.1);
    map.add(behind);
    map.add(centered_gaussian(intr, 2.0, 0.05, 0.5, Vec3(0.5, 0.2, 0.1)));
    RenderAdjoint adj;
    adj.color = ImageD(32, 32, 3, 1.0);
    const auto g = render_with_gradients(map, Pose::identity(), intr, adj);
    EXPECT_TRUE(g.mu[0].isZero(0.0));
    EXPECT_EQ(g.opacity[0], 0.0);
    EXPECT_GT(g.opacity[1], 0.0);
}

TEST(RenderGradients, MatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto res = testing::check_scene_gradients(1000 + seed);
        EXPECT_EQ(res.failed, 0) << "seed " << seed << ": " << res.first_failure;
        EXPECT_GT(res.checked, 0);
    }
}

}  // namespace
}  // namespace fgs
