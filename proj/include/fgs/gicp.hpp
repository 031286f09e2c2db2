// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Plane-to-plane GICP tracking against the sparse gaussian map, plus the
// point-cloud front end (back-projection, voxel downsampling, local
// covariances) and sparse-map maintenance.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <unordered_map>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "fgs/core.hpp"
#include "fgs/densify.hpp"

namespace fgs {

struct TrackConfig {
    double voxel_size = 0.05;
    int knn = 10;
    double max_corr_dist = 0.3;
    int max_iterations = 30;
    int min_correspondences = 10;
    double convergence_step = 1e-6;
    int max_halvings = 8;
    double overlap_dist = 0.1;
    double sparse_opacity = 0.05;
};

/// Frame-local points with plane-like local covariances.
struct TrackedCloud {
    std::vector<Vec3> points;
    std::vector<Mat3> covariances;

    [[nodiscard]] std::size_t size() const { return points.size(); }
    [[nodiscard]] bool empty() const { return points.empty(); }
};

struct TrackResult {
    Pose pose;
    int iterations = 0;
    double final_cost = 0.0;
    bool converged = false;
    double inlier_fraction = 0.0;
    std::vector<double> accepted_costs;  // objective after every accepted step, same correspondences
    std::vector<double> pre_step_costs;  // objective before that step
};

namespace detail {

struct CellKey {
    std::int64_t x, y, z;
    friend bool operator==(const CellKey&, const CellKey&) = default;
};

struct CellKeyHash {
    std::size_t operator()(const CellKey& k) const {
        std::uint64_t h = static_cast<std::uint64_t>(k.x) * 73856093ULL;
        h ^= static_cast<std::uint64_t>(k.y) * 19349663ULL;
        h ^= static_cast<std::uint64_t>(k.z) * 83492791ULL;
        return static_cast<std::size_t>(h);
    }
};

inline CellKey cell_of(const Vec3& p, double cell) {
    return {static_cast<std::int64_t>(std::floor(p.x() / cell)),
            static_cast<std::int64_t>(std::floor(p.y() / cell)),
            static_cast<std::int64_t>(std::floor(p.z() / cell))};
}

inline Mat3 skew(const Vec3& v) {
    Mat3 m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

}  // namespace detail

/// Uniform hash grid over 3D points supporting incremental insertion.
class PointGrid {
public:
    explicit PointGrid(double cell = 0.3) : cell_(cell) {}

    [[nodiscard]] double cell() const { return cell_; }
    [[nodiscard]] std::size_t size() const { return points_.size(); }
    [[nodiscard]] const Vec3& point(std::size_t i) const { return points_[i]; }

    void insert(const Vec3& p) {
        cells_[detail::cell_of(p, cell_)].push_back(static_cast<std::uint32_t>(points_.size()));
        points_.push_back(p);
    }

    /// Nearest stored point within radius (radius ≤ cell). Ties go to the lower index.
    [[nodiscard]] std::optional<std::size_t> nearest(const Vec3& q, double radius) const {
        const auto c = detail::cell_of(q, cell_);
        const double r2 = radius * radius;
        double best = std::numeric_limits<double>::infinity();
        std::optional<std::size_t> out;
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
            for (std::int64_t dy = -1; dy <= 1; ++dy) {
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    const auto it = cells_.find({c.x + dx, c.y + dy, c.z + dz});
                    if (it == cells_.end()) continue;
                    for (auto idx : it->second) {
                        const double d2 = (points_[idx] - q).squaredNorm();
                        if (d2 > r2) continue;
                        if (d2 < best || (out && d2 == best && idx < *out)) {
                            best = d2;
                            out = idx;
                        }
                    }
                }
            }
        }
        return out;
    }

    /// k nearest stored points (q itself included when stored), searched ring by ring.
    [[nodiscard]] std::vector<std::size_t> knn(const Vec3& q, int k) const {
        const int want = std::min<int>(k, static_cast<int>(points_.size()));
        std::vector<std::pair<double, std::size_t>> found;
        if (want <= 0) return {};
        const auto c = detail::cell_of(q, cell_);
        constexpr std::int64_t kMaxRing = 4;
        bool done = false;
        for (std::int64_t ring = 0; ring <= kMaxRing && !done; ++ring) {
            for (std::int64_t dz = -ring; dz <= ring; ++dz) {
                for (std::int64_t dy = -ring; dy <= ring; ++dy) {
                    for (std::int64_t dx = -ring; dx <= ring; ++dx) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                        const auto it = cells_.find({c.x + dx, c.y + dy, c.z + dz});
                        if (it == cells_.end()) continue;
                        for (auto idx : it->second) found.emplace_back((points_[idx] - q).squaredNorm(), idx);
                    }
                }
            }
            // Every point within ring·cell of q has been visited by now.
            if (static_cast<int>(found.size()) >= want) {
                std::nth_element(found.begin(), found.begin() + (want - 1), found.end());
                const double safe = static_cast<double>(ring) * cell_;
                done = found[want - 1].first <= safe * safe;
            }
        }
        if (!done) {
            found.clear();
            for (std::size_t i = 0; i < points_.size(); ++i) found.emplace_back((points_[i] - q).squaredNorm(), i);
        }
        std::sort(found.begin(), found.end());
        std::vector<std::size_t> out;
        out.reserve(want);
        for (int i = 0; i < want; ++i) out.push_back(found[i].second);
        return out;
    }

private:
    double cell_;
    std::vector<Vec3> points_;
    std::unordered_map<detail::CellKey, std::vector<std::uint32_t>, detail::CellKeyHash> cells_;
};

/// Regularizes a sample covariance to the GICP surface model: eigenvalues
/// (λ̄, λ̄, 1e-3·λ̄) where λ̄ is the mean of the two largest.
inline Mat3 plane_regularized(const Mat3& cov, double fallback_variance) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();  // ascending
    double lambda = 0.5 * (ev[1] + ev[2]);
    if (!(lambda > 0.0)) lambda = fallback_variance;
    const Vec3 reg(1e-3 * lambda, lambda, lambda);
    const Mat3 v = es.eigenvectors();
    Mat3 out = v * reg.asDiagonal() * v.transpose();
    return 0.5 * (out + out.transpose());
}

/// Local covariances from the k nearest neighbours of every point.
inline std::vector<Mat3> estimate_covariances(const std::vector<Vec3>& points, int knn, double cell) {
    PointGrid grid(cell);
    for (const auto& p : points) grid.insert(p);
    std::vector<Mat3> out;
    out.reserve(points.size());
    for (const auto& p : points) {
        const auto nn = grid.knn(p, knn);
        Vec3 mean = Vec3::Zero();
        for (auto i : nn) mean += grid.point(i);
        mean /= static_cast<double>(nn.size());
        Mat3 c = Mat3::Zero();
        for (auto i : nn) {
            const Vec3 d = grid.point(i) - mean;
            c += d * d.transpose();
        }
        c /= static_cast<double>(nn.size());
        out.push_back(plane_regularized(c, 0.25 * cell * cell));
    }
    return out;
}

/// Voxel-grid centroids, in order of first occupancy.
inline std::vector<Vec3> voxel_downsample(const std::vector<Vec3>& points, double voxel) {
    std::unordered_map<detail::CellKey, std::size_t, detail::CellKeyHash> slot;
    std::vector<Vec3> sums;
    std::vector<int> counts;
    for (const auto& p : points) {
        const auto key = detail::cell_of(p, voxel);
        auto [it, inserted] = slot.try_emplace(key, sums.size());
        if (inserted) {
            sums.push_back(Vec3::Zero());
            counts.push_back(0);
        }
        sums[it->second] += p;
        ++counts[it->second];
    }
    for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= counts[i];
    return sums;
}

inline TrackedCloud cloud_from_points(const std::vector<Vec3>& points, int knn, double cell) {
    if (static_cast<int>(points.size()) < knn) {
        throw InsufficientData("cloud_from_points: fewer points than knn");
    }
    return {points, estimate_covariances(points, knn, cell)};
}

inline TrackedCloud build_cloud(const RgbdFrame& frame, double voxel_size, int knn) {
    std::vector<Vec3> pts;
    pts.reserve(frame.depth.pixel_count());
    for (int y = 0; y < frame.height(); ++y) {
        for (int x = 0; x < frame.width(); ++x) {
            const double d = frame.depth(x, y);
            if (d > 0.0 && std::isfinite(d)) pts.push_back(frame.intrinsics.back_project(x, y, d));
        }
    }
    if (static_cast<int>(pts.size()) < knn) {
        throw InsufficientData("build_cloud: fewer valid depth pixels than knn");
    }
    auto down = voxel_downsample(pts, voxel_size);
    if (static_cast<int>(down.size()) < knn) {
        throw InsufficientData("build_cloud: fewer downsampled points than knn");
    }
    return cloud_from_points(down, knn, voxel_size);
}

/// Spatial index over sparse-map means with cached world covariances.
class SparseMapIndex {
public:
    explicit SparseMapIndex(double cell = 0.3) : grid_(cell) {}

    static SparseMapIndex build(const GaussianMap& map, double cell) {
        SparseMapIndex idx(cell);
        for (const auto& g : map) idx.append(g);
        return idx;
    }

    void append(const Gaussian& g) {
        grid_.insert(g.mu);
        covariances_.push_back(covariance_from_scale_rotation(g.scale, g.rotation));
    }

    [[nodiscard]] std::size_t size() const { return grid_.size(); }
    [[nodiscard]] double cell() const { return grid_.cell(); }
    [[nodiscard]] const Vec3& mean(std::size_t i) const { return grid_.point(i); }
    [[nodiscard]] const Mat3& covariance(std::size_t i) const { return covariances_[i]; }
    [[nodiscard]] std::optional<std::size_t> nearest(const Vec3& q, double radius) const {
        return grid_.nearest(q, radius);
    }

private:
    PointGrid grid_;
    std::vector<Mat3> covariances_;
};

namespace detail {

struct Correspondence {
    std::size_t source;
    std::size_t target;
    Mat3 info;
};

inline Pose apply_increment(const Pose& pose, const Eigen::Matrix<double, 6, 1>& delta) {
    const Vec3 w = delta.head<3>();
    const double angle = w.norm();
    const Quat dq = angle > 0.0 ? Quat(Eigen::AngleAxisd(angle, w / angle)) : Quat::Identity();
    Pose out;
    out.rotation = (dq * pose.rotation).normalized();
    out.translation = dq * pose.translation + delta.tail<3>();
    return out;
}

inline double pair_cost(const TrackedCloud& src, const SparseMapIndex& tgt,
                        const std::vector<Correspondence>& pairs, const Pose& pose) {
    double cost = 0.0;
    for (const auto& c : pairs) {
        const Vec3 d = tgt.mean(c.target) - transform_point(pose, src.points[c.source]);
        cost += d.dot(c.info * d);
    }
    return cost;
}

}  // namespace detail

/// Minimizes Σ dᵢᵀ (C_q + R C_p Rᵀ)⁻¹ dᵢ with dᵢ = qᵢ − T pᵢ by Gauss-Newton on
/// a left-multiplied SE(3) increment, with step halving on cost increase.
inline TrackResult gicp_align(const TrackedCloud& source, const SparseMapIndex& target, const Pose& initial,
                              const TrackConfig& cfg = {}) {
    if (source.empty()) throw InsufficientData("gicp_align: empty source cloud");
    if (target.size() < 10) throw InsufficientData("gicp_align: target needs at least 10 gaussians");
    if (target.cell() < cfg.max_corr_dist) throw InvalidArgument("gicp_align: index cell smaller than search radius");

    TrackResult res;
    res.pose = initial;
    std::vector<detail::Correspondence> pairs;
    auto associate = [&](const Pose& pose) {
        pairs.clear();
        const Mat3 r = pose.rotation_matrix();
        for (std::size_t i = 0; i < source.size(); ++i) {
            const Vec3 pw = transform_point(pose, source.points[i]);
            if (auto j = target.nearest(pw, cfg.max_corr_dist)) {
                const Mat3 c = target.covariance(*j) + r * source.covariances[i] * r.transpose();
                pairs.push_back({i, *j, c.inverse()});
            }
        }
    };

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        associate(res.pose);
        if (static_cast<int>(pairs.size()) < cfg.min_correspondences) {
            throw TrackingDivergence("gicp_align: too few correspondences", res.pose);
        }
        Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
        Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
        double cost = 0.0;
        for (const auto& c : pairs) {
            const Vec3 pw = transform_point(res.pose, source.points[c.source]);
            const Vec3 d = target.mean(c.target) - pw;
            Eigen::Matrix<double, 3, 6> j;
            j.leftCols<3>() = -detail::skew(pw);
            j.rightCols<3>() = Mat3::Identity();
            const Eigen::Matrix<double, 6, 3> jt_info = j.transpose() * c.info;
            h.noalias() += jt_info * j;
            b.noalias() += jt_info * d;
            cost += d.dot(c.info * d);
        }
        if (!std::isfinite(cost)) throw NumericalError("gicp_align: non-finite cost");
        Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(b);
        if (!delta.allFinite()) throw NumericalError("gicp_align: singular normal equations");

        bool accepted = false;
        for (int half = 0; half <= cfg.max_halvings; ++half) {
            const Pose trial = detail::apply_increment(res.pose, delta);
            const double trial_cost = detail::pair_cost(source, target, pairs, trial);
            if (trial_cost <= cost) {
                res.pre_step_costs.push_back(cost);
                res.accepted_costs.push_back(trial_cost);
                res.pose = trial;
                accepted = true;
                break;
            }
            delta *= 0.5;
        }
        res.iterations = iter + 1;
        if (!accepted || delta.norm() < cfg.convergence_step) {
            res.converged = true;
            break;
        }
    }

    associate(res.pose);
    res.inlier_fraction = static_cast<double>(pairs.size()) / static_cast<double>(source.size());
    res.final_cost = detail::pair_cost(source, target, pairs, res.pose);
    if (!std::isfinite(res.final_cost)) throw NumericalError("gicp_align: non-finite final cost");
    return res;
}

/// Gaussian whose covariance equals a world-frame GICP covariance.
inline Gaussian gaussian_from_covariance(const Vec3& mean, const Mat3& cov, double opacity, const Vec3& color) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();
    Mat3 v = es.eigenvectors();
    Mat3 r;
    r.col(0) = v.col(2);
    r.col(1) = v.col(1);
    r.col(2) = v.col(0);
    if (r.determinant() < 0) r.col(2) = -r.col(2);
    Gaussian g;
    g.mu = mean;
    g.scale = Vec3(std::sqrt(std::max(ev[2], 1e-12)), std::sqrt(std::max(ev[1], 1e-12)),
                   std::sqrt(std::max(ev[0], 1e-12)));
    g.rotation = Quat(r).normalized();
    g.opacity = opacity;
    g.color = color.cwiseMax(0.0).cwiseMin(1.0);
    g.frequency_class = FrequencyClass::Low;
    return g;
}

/// Pixel a frame-local point projects to, if inside the image.
inline std::optional<Pixel> project_to_pixel(const CameraIntrinsics& intr, const Vec3& p) {
    if (!(p.z() > 0.0)) return std::nullopt;
    const Vec2 uv = intr.project(p);
    const int x = static_cast<int>(std::lround(uv.x()));
    const int y = static_cast<int>(std::lround(uv.y()));
    if (x < 0 || y < 0 || x >= intr.width || y >= intr.height) return std::nullopt;
    return Pixel{x, y};
}

/// Converts cloud points inside the missing region to sparse-map gaussians.
/// The batch is appended in one step so readers never see a partial insertion.
inline std::size_t update_sparse_map(GaussianMap& map, SparseMapIndex* index, const TrackedCloud& cloud,
                                     const Pose& pose, const MissingMasks& missing, const RgbdFrame& frame,
                                     double opacity = 0.5) {
    std::vector<Gaussian> batch;
    const Mat3 r = pose.rotation_matrix();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto px = project_to_pixel(frame.intrinsics, cloud.points[i]);
        if (!px || !missing.combined(px->x, px->y)) continue;
        const Vec3 color(frame.color(px->x, px->y, 0), frame.color(px->x, px->y, 1),
                         frame.color(px->x, px->y, 2));
        batch.push_back(gaussian_from_covariance(transform_point(pose, cloud.points[i]),
                                                 r * cloud.covariances[i] * r.transpose(), opacity, color));
    }
    map.add(batch);
    if (index) {
        for (const auto& g : batch) index->append(g);
    }
    return batch.size();
}

/// Fraction of cloud points with a sparse-map mean within dist after transforming by pose.
inline double overlap_ratio(const TrackedCloud& cloud, const Pose& pose, const SparseMapIndex& index, double dist) {
    if (cloud.empty()) throw InsufficientData("overlap_ratio: empty cloud");
    if (index.size() == 0) return 0.0;
    if (dist > index.cell()) throw InvalidArgument("overlap_ratio: distance exceeds index cell");
    std::size_t hits = 0;
    for (const auto& p : cloud.points) {
        if (index.nearest(transform_point(pose, p), dist)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(cloud.size());
}

inline double overlap_ratio(const TrackedCloud& cloud, const Pose& pose, const GaussianMap& map, double dist) {
    return overlap_ratio(cloud, pose, SparseMapIndex::build(map, dist), dist);
}

}  // namespace fgs
