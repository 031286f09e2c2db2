// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <set>

#include <Eigen/Eigenvalues>

#include "fgs/gicp.hpp"
#include "fgs/metrics.hpp"
#include "gicp_scene.hpp"

namespace fgs {
namespace {

using testing::corner_cloud;
using testing::map_from_cloud;

RgbdFrame plane_frame(int w, int h, double depth) {
    RgbdFrame f;
    f.intrinsics = testing::small_camera(w, h, 0.8 * w);
    f.color = ImageF(w, h, 3, 0.5f);
    f.depth = ImageF(w, h, 1, static_cast<float>(depth));
    return f;
}

TEST(BuildCloud, PlaneCovarianceNormal) {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const Vec3 normal = Vec3(0.3, -0.2, 1.0).normalized();
    const Vec3 t1 = normal.unitOrthogonal();
    const Vec3 t2 = normal.cross(t1);
    std::vector<Vec3> pts;
    for (int i = 0; i < 400; ++i) pts.push_back(u(rng) * t1 + u(rng) * t2);
    const auto covs = estimate_covariances(pts, 10, 0.3);
    for (const auto& c : covs) {
        Eigen::SelfAdjointEigenSolver<Mat3> es(c);
        const double cosine = std::abs(es.eigenvectors().col(0).dot(normal));
        EXPECT_GT(cosine, std::cos(std::numbers::pi / 180.0));
        EXPECT_NEAR(es.eigenvalues()[0] / es.eigenvalues()[2], 1e-3, 1e-9);
        EXPECT_NEAR(es.eigenvalues()[1], es.eigenvalues()[2], 1e-12 + 1e-9 * es.eigenvalues()[2]);
    }
}

TEST(BuildCloud, TooFewValidPixels) {
    auto f = plane_frame(8, 8, 0.0);
    for (int i = 0; i < 5; ++i) f.depth(i, 0) = 1.0f;
    EXPECT_THROW(build_cloud(f, 0.05, 10), InsufficientData);
}

TEST(BuildCloud, BackProjectsFramePoints) {
    const auto f = plane_frame(40, 30, 2.0);
    const auto cloud = build_cloud(f, 0.05, 10);
    EXPECT_GT(cloud.size(), 10u);
    for (const auto& p : cloud.points) EXPECT_NEAR(p.z(), 2.0, 1e-9);
}

TEST(VoxelDownsample, OnePointPerVoxel) {
    std::mt19937_64 rng(32);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> pts;
    for (int i = 0; i < 50000; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
    const double voxel = 0.05;
    const auto down = voxel_downsample(pts, voxel);
    EXPECT_LE(down.size(), static_cast<std::size_t>(std::pow(1.0 / voxel + 1.0, 3)));
    std::set<std::tuple<long, long, long>> cells;
    for (const auto& p : down) {
        cells.insert({std::lround(std::floor(p.x() / voxel)), std::lround(std::floor(p.y() / voxel)),
                      std::lround(std::floor(p.z() / voxel))});
    }
    EXPECT_EQ(cells.size(), down.size());
}

TEST(PointGrid, KnnMatchesBruteForce) {
    std::mt19937_64 rng(33);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    PointGrid grid(0.1);
    std::vector<Vec3> pts;
    for (int i = 0; i < 500; ++i) {
        pts.emplace_back(u(rng), u(rng), 0.2 * u(rng));
        grid.insert(pts.back());
    }
    for (int q = 0; q < 50; ++q) {
        const Vec3 query(u(rng), u(rng), u(rng));
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t i = 0; i < pts.size(); ++i) all.emplace_back((pts[i] - query).squaredNorm(), i);
        std::sort(all.begin(), all.end());
        const auto got = grid.knn(query, 10);
        ASSERT_EQ(got.size(), 10u);
        for (int k = 0; k < 10; ++k) EXPECT_EQ(got[k], all[k].second);
        const auto nn = grid.nearest(query, 0.1);
        if (all[0].first <= 0.01) {
            ASSERT_TRUE(nn.has_value());
            EXPECT_EQ(*nn, all[0].second);
        } else {
            EXPECT_FALSE(nn.has_value());
        }
    }
}

TEST(GicpAlign, IdentityIsFixedPoint) {
    std::mt19937_64 rng(34);
    const auto cloud = cloud_from_points(corner_cloud(rng, 1000), 10, 0.3);
    const auto index = SparseMapIndex::build(map_from_cloud(cloud), 0.3);
    const auto res = gicp_align(cloud, index, Pose::identity());
    EXPECT_LT(res.pose.rotation.angularDistance(Quat::Identity()), 1e-9);
    EXPECT_LT(res.pose.translation.norm(), 1e-9);
    EXPECT_LE(res.iterations, 2);
    EXPECT_TRUE(res.converged);
    EXPECT_DOUBLE_EQ(res.inlier_fraction, 1.0);
}

TEST(GicpAlign, RecoversKnownMotionWithoutNoise) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto t = testing::corner_registration_trial(seed, 0.0);
        EXPECT_LE(t.rotation_error, 1e-5) << "seed " << seed;
        EXPECT_LE(t.translation_error, 1e-6) << "seed " << seed;
    }
}

TEST(GicpAlign, CostNeverIncreasesAcrossAcceptedSteps) {
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        const auto t = testing::corner_registration_trial(seed, 0.001);
        const auto& r = t.result;
        ASSERT_EQ(r.accepted_costs.size(), r.pre_step_costs.size());
        for (std::size_t i = 0; i < r.accepted_costs.size(); ++i) {
            EXPECT_LE(r.accepted_costs[i], r.pre_step_costs[i]);
        }
        EXPECT_GE(r.final_cost, 0.0);
    }
}

TEST(GicpAlign, IsotropicCovariancesReduceToPointToPoint) {
    std::mt19937_64 rng(35);
    const auto pts = corner_cloud(rng, 600);
    const Pose truth = testing::small_motion(rng, 0.05, 0.03);
    std::normal_distribution<double> noise(0.0, 0.002);
    TrackedCloud src{pts, std::vector<Mat3>(pts.size(), 1e-4 * Mat3::Identity())};
    GaussianMap tgt(MapKind::Sparse);
    for (const auto& p : pts) {
        Gaussian g;
        g.mu = transform_point(truth, p) + Vec3(noise(rng), noise(rng), noise(rng));
        g.scale = Vec3::Constant(0.01);
        tgt.add(g);
    }
    const auto index = SparseMapIndex::build(tgt, 0.3);
    TrackConfig cfg;
    cfg.convergence_step = 1e-12;
    const auto res = gicp_align(src, index, Pose::identity(), cfg);

    // Kabsch on the correspondences GICP settled on.
    std::vector<Vec3> from, to;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (auto j = index.nearest(transform_point(res.pose, pts[i]), cfg.max_corr_dist)) {
            from.push_back(pts[i]);
            to.push_back(index.mean(*j));
        }
    }
    const Pose kabsch = umeyama_rigid(from, to);
    EXPECT_LT(res.pose.rotation.angularDistance(kabsch.rotation), 1e-7);
    EXPECT_LT((res.pose.translation - kabsch.translation).norm(), 1e-7);
}

TEST(GicpAlign, TooFewCorrespondencesDiverges) {
    std::mt19937_64 rng(36);
    const auto cloud = cloud_from_points(corner_cloud(rng, 300), 10, 0.3);
    const auto index = SparseMapIndex::build(map_from_cloud(cloud), 0.3);
    Pose far = Pose::identity();
    far.translation = Vec3(5, 0, 0);
    try {
        gicp_align(cloud, index, far);
        FAIL() << "expected divergence";
    } catch (const TrackingDivergence& e) {
        EXPECT_TRUE(e.last_pose.translation.isApprox(far.translation));
    }
}

TEST(GicpAlign, RejectsTinyTarget) {
    std::mt19937_64 rng(37);
    const auto cloud = cloud_from_points(corner_cloud(rng, 30), 10, 0.3);
    GaussianMap small(MapKind::Sparse);
    for (int i = 0; i < 5; ++i) small.add(Gaussian{});
    EXPECT_THROW(gicp_align(cloud, SparseMapIndex::build(small, 0.3), Pose::identity()), InsufficientData);
}

TEST(GaussianFromCovariance, ReproducesCovariance) {
    std::mt19937_64 rng(38);
    for (int t = 0; t < 50; ++t) {
        const Mat3 m = Mat3::Random();
        const Mat3 cov = m * m.transpose() + 1e-3 * Mat3::Identity();
        const auto g = gaussian_from_covariance(Vec3::Zero(), cov, 0.5, Vec3(0.2, 0.3, 0.4));
        EXPECT_TRUE(g.is_valid());
        EXPECT_GE(g.scale[0], g.scale[1]);
        EXPECT_GE(g.scale[1], g.scale[2]);
        EXPECT_LT((covariance_from_scale_rotation(g.scale, g.rotation) - cov).cwiseAbs().maxCoeff(), 1e-9);
    }
}

struct SparseUpdateScene {
    RgbdFrame frame = plane_frame(40, 30, 2.0);
    TrackedCloud cloud = build_cloud(frame, 0.05, 10);
    Pose pose{Quat(Eigen::AngleAxisd(0.1, Vec3::UnitY())), Vec3(0.1, 0.0, -0.2)};
};

TEST(UpdateSparseMap, EmptyAndFullMasks) {
    SparseUpdateScene s;
    const int w = s.frame.width(), h = s.frame.height();
    GaussianMap map(MapKind::Sparse);
    MissingMasks none{Mask(w, h), Mask(w, h), Mask(w, h), Mask(w, h)};
    EXPECT_EQ(update_sparse_map(map, nullptr, s.cloud, s.pose, none, s.frame), 0u);
    EXPECT_TRUE(map.empty());
    SparseMapIndex index(0.3);
    EXPECT_EQ(update_sparse_map(map, &index, s.cloud, s.pose, all_missing(w, h), s.frame), s.cloud.size());
    EXPECT_EQ(map.size(), s.cloud.size());
    EXPECT_EQ(index.size(), s.cloud.size());
    for (std::size_t i = 0; i < map.size(); ++i) {
        EXPECT_LT((map[i].mu - transform_point(s.pose, s.cloud.points[i])).norm(), 1e-12);
        EXPECT_DOUBLE_EQ(map[i].opacity, 0.5);
    }
}

TEST(UpdateSparseMap, HalfMaskMatchesProjectionFilter) {
    SparseUpdateScene s;
    const int w = s.frame.width(), h = s.frame.height();
    MissingMasks half{Mask(w, h), Mask(w, h), Mask(w, h), Mask(w, h)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w / 2; ++x) half.combined(x, y) = 1;
    }
    GaussianMap map(MapKind::Sparse);
    update_sparse_map(map, nullptr, s.cloud, s.pose, half, s.frame);
    std::vector<Vec3> expected;
    for (const auto& p : s.cloud.points) {
        const double u = s.frame.intrinsics.fx * p.x() / p.z() + s.frame.intrinsics.cx;
        const double v = s.frame.intrinsics.fy * p.y() / p.z() + s.frame.intrinsics.cy;
        const long x = std::lround(u), y = std::lround(v);
        if (x >= 0 && y >= 0 && x < w / 2 && y < h) expected.push_back(transform_point(s.pose, p));
    }
    ASSERT_EQ(map.size(), expected.size());
    EXPECT_GT(map.size(), 0u);
    EXPECT_LT(map.size(), s.cloud.size());
    for (std::size_t i = 0; i < map.size(); ++i) EXPECT_LT((map[i].mu - expected[i]).norm(), 1e-12);
}

TEST(OverlapRatio, Examples) {
    std::mt19937_64 rng(39);
    const auto cloud = cloud_from_points(corner_cloud(rng, 800), 10, 0.3);
    const auto map = map_from_cloud(cloud);
    EXPECT_DOUBLE_EQ(overlap_ratio(cloud, Pose::identity(), map, 0.1), 1.0);
    EXPECT_DOUBLE_EQ(overlap_ratio(cloud, Pose::identity(), GaussianMap{}, 0.1), 0.0);
}

TEST(OverlapRatio, HalfOverlapMatchesBruteForce) {
    std::mt19937_64 rng(40);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> pts;
    for (int i = 0; i < 1000; ++i) pts.emplace_back(2.0 * u(rng), u(rng), 2.0);
    TrackedCloud cloud{pts, std::vector<Mat3>(pts.size(), Mat3::Identity() * 1e-4)};
    GaussianMap map(MapKind::Sparse);
    for (const auto& p : pts) {
        if (p.x() < 1.0) {
            Gaussian g;
            g.mu = p;
            g.scale = Vec3::Constant(0.01);
            map.add(g);
        }
    }
    const double dist = 0.05;
    std::size_t hits = 0;
    for (const auto& p : pts) {
        for (const auto& g : map) {
            if ((g.mu - p).norm() <= dist) {
                ++hits;
                break;
            }
        }
    }
    const double oracle = static_cast<double>(hits) / pts.size();
    const double got = overlap_ratio(cloud, Pose::identity(), map, dist);
    EXPECT_DOUBLE_EQ(got, oracle);
    EXPECT_NEAR(got, 0.5, 0.05);
}

TEST(OverlapRatio, MonotoneInDistance) {
    std::mt19937_64 rng(41);
    const auto a = cloud_from_points(corner_cloud(rng, 500), 10, 0.3);
    const auto b = cloud_from_points(corner_cloud(rng, 500), 10, 0.3);
    const auto index = SparseMapIndex::build(map_from_cloud(b), 0.3);
    double prev = 0.0;
    for (int k = 0; k < 30; ++k) {
        const double r = overlap_ratio(a, Pose::identity(), index, 0.01 * k);
        EXPECT_GE(r, prev);
        prev = r;
    }
}

}  // namespace
}  // namespace fgs
