// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Tile-based CPU splatting: EWA projection of 3D gaussians, front-to-back
// alpha blending of color / depth / opacity, and the exact reverse-mode
// adjoint of that forward pass.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Eigenvalues>

#include "fgs/core.hpp"

namespace fgs {

struct RenderConfig {
    double alpha_max = 0.99;
    double min_transmittance = 1e-4;
    double near_plane = 0.01;
    double cov2d_dilation = 0.3;  // pixels², added to every projected covariance
    // Support radius in standard deviations. A gaussian contributes nothing to
    // pixels beyond this Mahalanobis distance; tiles are binned with the same bound.
    double extent_sigma = 3.0;
    int tile_size = 16;
    int threads = 1;
};

struct ProjectedGaussian {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Identity();
    Mat2 conic = Mat2::Identity();  // cov2d⁻¹
    double depth = 0.0;
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    std::size_t source_index = 0;
    Vec3 p_cam = Vec3::Zero();
    double radius = 0.0;  // pixels, extent_sigma · sqrt(λmax)
};

/// Ordered collection of gaussian arrays rendered together; source indices are
/// positions in the concatenation.
using GaussianSet = std::vector<std::span<const Gaussian>>;

inline std::optional<ProjectedGaussian> project_gaussian(const Gaussian& g, const Pose& camera_pose,
                                                         const CameraIntrinsics& intr,
                                                         const RenderConfig& cfg = {}) {
    const Mat3 w = camera_pose.rotation.conjugate().toRotationMatrix();
    const Vec3 p = w * (g.mu - camera_pose.translation);
    if (!(p.z() > cfg.near_plane)) return std::nullopt;

    ProjectedGaussian out;
    out.p_cam = p;
    out.depth = p.z();
    out.mean2d = intr.project(p);
    const double diag = std::hypot(intr.width, intr.height);
    const double margin = 1.5 * diag;
    if (out.mean2d.x() < -margin || out.mean2d.x() > intr.width + margin ||
        out.mean2d.y() < -margin || out.mean2d.y() > intr.height + margin) {
        return std::nullopt;
    }

    const double iz = 1.0 / p.z();
    Eigen::Matrix<double, 2, 3> j;
    j << intr.fx * iz, 0.0, -intr.fx * p.x() * iz * iz,
         0.0, intr.fy * iz, -intr.fy * p.y() * iz * iz;
    const Eigen::Matrix<double, 2, 3> t = j * w;
    const Mat3 cov3 = covariance_from_scale_rotation(g.scale, g.rotation);
    out.cov2d = t * cov3 * t.transpose();
    out.cov2d(0, 1) = out.cov2d(1, 0) = 0.5 * (out.cov2d(0, 1) + out.cov2d(1, 0));
    out.cov2d += cfg.cov2d_dilation * Mat2::Identity();

    const double det = out.cov2d.determinant();
    // Cannot trigger with a positive dilation floor.
    if (!(det > 0.0)) return std::nullopt;
    out.conic << out.cov2d(1, 1) / det, -out.cov2d(0, 1) / det,
                 -out.cov2d(0, 1) / det, out.cov2d(0, 0) / det;
    const double mid = 0.5 * (out.cov2d(0, 0) + out.cov2d(1, 1));
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    out.radius = cfg.extent_sigma * std::sqrt(lambda_max);
    out.opacity = g.opacity;
    out.color = g.color;
    return out;
}

struct RenderOutput {
    ImageD color;    // H×W×3
    ImageD depth;    // H×W, alpha-weighted (not normalized)
    ImageD opacity;  // H×W accumulated alpha
    Image<int> per_pixel_count;
};

/// Forward state kept for the adjoint pass.
struct Rasterization {
    RenderOutput output;
    std::vector<ProjectedGaussian> projected;  // sorted by (depth, source_index)
    std::vector<const Gaussian*> sources;       // parallel to projected
    std::vector<std::vector<std::uint32_t>> tile_lists;
    ImageD final_transmittance;
    Image<int> processed;  // number of tile-list entries walked per pixel
    int tiles_x = 0;
    int tiles_y = 0;
    std::size_t source_count = 0;
    CameraIntrinsics intrinsics;
    Pose pose;
    RenderConfig config;
};

namespace detail {

inline double splat_power(const ProjectedGaussian& g, double px, double py) {
    const double dx = px - g.mean2d.x();
    const double dy = py - g.mean2d.y();
    return 0.5 * (g.conic(0, 0) * dx * dx + g.conic(1, 1) * dy * dy) + g.conic(0, 1) * dx * dy;
}

template <typename Fn>
void for_each_tile(int tile_count, int threads, Fn&& fn) {
    threads = std::max(1, std::min(threads, tile_count));
    if (threads == 1) {
        for (int t = 0; t < tile_count; ++t) fn(t);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int k = 0; k < threads; ++k) {
        pool.emplace_back([&, k] {
            for (int t = k; t < tile_count; t += threads) fn(t);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace detail

inline Rasterization rasterize(const GaussianSet& set, const Pose& camera_pose,
                               const CameraIntrinsics& intr, const RenderConfig& cfg = {}) {
    if (!intr.is_valid()) throw InvalidArgument("rasterize: invalid intrinsics");
    Rasterization r;
    r.intrinsics = intr;
    r.pose = camera_pose;
    r.config = cfg;
    const int w = intr.width;
    const int h = intr.height;
    const int ts = cfg.tile_size;
    r.tiles_x = (w + ts - 1) / ts;
    r.tiles_y = (h + ts - 1) / ts;

    std::size_t base = 0;
    for (const auto& part : set) {
        for (std::size_t i = 0; i < part.size(); ++i) {
            if (auto pg = project_gaussian(part[i], camera_pose, intr, cfg)) {
                pg->source_index = base + i;
                r.projected.push_back(*pg);
                r.sources.push_back(&part[i]);
            }
        }
        base += part.size();
    }
    r.source_count = base;

    std::vector<std::uint32_t> order(r.projected.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const auto& ga = r.projected[a];
        const auto& gb = r.projected[b];
        if (ga.depth != gb.depth) return ga.depth < gb.depth;
        return ga.source_index < gb.source_index;
    });
    {
        std::vector<ProjectedGaussian> sorted;
        std::vector<const Gaussian*> sorted_src;
        sorted.reserve(order.size());
        sorted_src.reserve(order.size());
        for (auto i : order) {
            sorted.push_back(r.projected[i]);
            sorted_src.push_back(r.sources[i]);
        }
        r.projected = std::move(sorted);
        r.sources = std::move(sorted_src);
    }

    r.tile_lists.assign(static_cast<std::size_t>(r.tiles_x) * r.tiles_y, {});
    for (std::size_t i = 0; i < r.projected.size(); ++i) {
        const auto& g = r.projected[i];
        const int x0 = static_cast<int>(std::ceil(g.mean2d.x() - g.radius));
        const int x1 = static_cast<int>(std::floor(g.mean2d.x() + g.radius));
        const int y0 = static_cast<int>(std::ceil(g.mean2d.y() - g.radius));
        const int y1 = static_cast<int>(std::floor(g.mean2d.y() + g.radius));
        if (x1 < 0 || y1 < 0 || x0 >= w || y0 >= h) continue;
        const int tx0 = std::max(0, x0) / ts;
        const int tx1 = std::min(w - 1, x1) / ts;
        const int ty0 = std::max(0, y0) / ts;
        const int ty1 = std::min(h - 1, y1) / ts;
        for (int ty = ty0; ty <= ty1; ++ty) {
            for (int tx = tx0; tx <= tx1; ++tx) {
                r.tile_lists[static_cast<std::size_t>(ty) * r.tiles_x + tx].push_back(
                    static_cast<std::uint32_t>(i));
            }
        }
    }

    r.output.color = ImageD(w, h, 3, 0.0);
    r.output.depth = ImageD(w, h, 1, 0.0);
    r.output.opacity = ImageD(w, h, 1, 0.0);
    r.output.per_pixel_count = Image<int>(w, h, 1, 0);
    r.final_transmittance = ImageD(w, h, 1, 1.0);
    r.processed = Image<int>(w, h, 1, 0);

    const double cutoff = 0.5 * cfg.extent_sigma * cfg.extent_sigma;
    detail::for_each_tile(r.tiles_x * r.tiles_y, cfg.threads, [&](int tile) {
        const int tx = tile % r.tiles_x;
        const int ty = tile / r.tiles_x;
        const auto& list = r.tile_lists[tile];
        for (int y = ty * ts; y < std::min(h, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(w, (tx + 1) * ts); ++x) {
                double t = 1.0;
                Vec3 c = Vec3::Zero();
                double d = 0.0;
                double a_acc = 0.0;
                int count = 0;
                int walked = 0;
                for (std::size_t k = 0; k < list.size(); ++k) {
                    const auto& g = r.projected[list[k]];
                    walked = static_cast<int>(k) + 1;
                    const double power = detail::splat_power(g, x, y);
                    if (power > cutoff) continue;
                    const double alpha = std::min(cfg.alpha_max, g.opacity * std::exp(-power));
                    const double wgt = alpha * t;
                    c += wgt * g.color;
                    d += wgt * g.depth;
                    a_acc += wgt;
                    ++count;
                    t *= 1.0 - alpha;
                    if (t < cfg.min_transmittance) break;
                }
                for (int ch = 0; ch < 3; ++ch) r.output.color(x, y, ch) = c[ch];
                r.output.depth(x, y) = d;
                r.output.opacity(x, y) = a_acc;
                r.output.per_pixel_count(x, y) = count;
                r.final_transmittance(x, y) = t;
                r.processed(x, y) = walked;
            }
        }
    });
    return r;
}

inline RenderOutput render(const GaussianSet& set, const Pose& camera_pose,
                           const CameraIntrinsics& intr, const RenderConfig& cfg = {}) {
    return rasterize(set, camera_pose, intr, cfg).output;
}

inline RenderOutput render(const GaussianMap& map, const Pose& camera_pose,
                           const CameraIntrinsics& intr, const RenderConfig& cfg = {}) {
    return render(GaussianSet{map.gaussians()}, camera_pose, intr, cfg);
}

/// Adjoint images ∂L/∂(rendered value). Empty images count as zero.
struct RenderAdjoint {
    ImageD color;
    ImageD depth;
    ImageD opacity;
};

/// Per-source gradients, indexed like the concatenated GaussianSet.
struct GaussianGradients {
    std::vector<Vec3> mu;
    std::vector<Vec3> scale;
    std::vector<Eigen::Vector4d> rotation;  // w, x, y, z
    std::vector<double> opacity;
    std::vector<Vec3> color;

    void resize(std::size_t n) {
        mu.assign(n, Vec3::Zero());
        scale.assign(n, Vec3::Zero());
        rotation.assign(n, Eigen::Vector4d::Zero());
        opacity.assign(n, 0.0);
        color.assign(n, Vec3::Zero());
    }
    [[nodiscard]] std::size_t size() const { return mu.size(); }
};

namespace detail {

struct ScreenGrad {
    Vec2 mean = Vec2::Zero();
    double conic_a = 0.0;  // ∂L/∂K00
    double conic_b = 0.0;  // ∂L/∂K01 counted once for both off-diagonal entries
    double conic_c = 0.0;  // ∂L/∂K11
    double opacity = 0.0;
    Vec3 color = Vec3::Zero();
    double depth = 0.0;

    ScreenGrad& operator+=(const ScreenGrad& o) {
        mean += o.mean;
        conic_a += o.conic_a;
        conic_b += o.conic_b;
        conic_c += o.conic_c;
        opacity += o.opacity;
        color += o.color;
        depth += o.depth;
        return *this;
    }
};

// ∂R/∂q for R(q) of a unit quaternion q = (w, x, y, z).
inline std::array<Mat3, 4> rotation_jacobian(const Quat& q) {
    const double w = q.w(), x = q.x(), y = q.y(), z = q.z();
    std::array<Mat3, 4> d;
    d[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    return d;
}

}  // namespace detail

/// Reverse-mode pass over a finished rasterization.
inline GaussianGradients backward(const Rasterization& r, const RenderAdjoint& adj) {
    const int w = r.intrinsics.width;
    const int h = r.intrinsics.height;
    const int ts = r.config.tile_size;
    const bool has_c = !adj.color.empty();
    const bool has_d = !adj.depth.empty();
    const bool has_a = !adj.opacity.empty();
    if ((has_c && !(adj.color.same_shape(w, h) && adj.color.channels == 3)) ||
        (has_d && !adj.depth.same_shape(w, h)) || (has_a && !adj.opacity.same_shape(w, h))) {
        throw InvalidArgument("backward: adjoint dimensions do not match the render");
    }
    const double cutoff = 0.5 * r.config.extent_sigma * r.config.extent_sigma;

    std::vector<std::vector<detail::ScreenGrad>> tile_grads(r.tile_lists.size());
    detail::for_each_tile(static_cast<int>(r.tile_lists.size()), r.config.threads, [&](int tile) {
        const auto& list = r.tile_lists[tile];
        auto& grads = tile_grads[tile];
        grads.assign(list.size(), {});
        const int tx = tile % r.tiles_x;
        const int ty = tile / r.tiles_x;
        for (int y = ty * ts; y < std::min(h, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(w, (tx + 1) * ts); ++x) {
                const Vec3 gc = has_c ? Vec3(adj.color(x, y, 0), adj.color(x, y, 1), adj.color(x, y, 2))
                                      : Vec3::Zero();
                const double gd = has_d ? adj.depth(x, y) : 0.0;
                const double ga = has_a ? adj.opacity(x, y) : 0.0;
                if (gc.isZero(0.0) && gd == 0.0 && ga == 0.0) continue;

                double t_after = r.final_transmittance(x, y);
                Vec3 behind_c = Vec3::Zero();
                double behind_d = 0.0;
                double behind_a = 0.0;
                for (int k = r.processed(x, y) - 1; k >= 0; --k) {
                    const auto& g = r.projected[list[k]];
                    const double power = detail::splat_power(g, x, y);
                    if (power > cutoff) continue;
                    const double gauss = std::exp(-power);
                    const double raw = g.opacity * gauss;
                    const bool clamped = raw > r.config.alpha_max;
                    const double alpha = clamped ? r.config.alpha_max : raw;
                    const double one_minus = 1.0 - alpha;
                    const double t = t_after / one_minus;
                    const double wgt = alpha * t;

                    auto& sg = grads[k];
                    sg.color += wgt * gc;
                    sg.depth += wgt * gd;

                    const double dl_dalpha = gc.dot(t * g.color - behind_c / one_minus) +
                                             gd * (t * g.depth - behind_d / one_minus) +
                                             ga * (t - behind_a / one_minus);
                    behind_c += wgt * g.color;
                    behind_d += wgt * g.depth;
                    behind_a += wgt;
                    t_after = t;

                    if (clamped) continue;
                    sg.opacity += dl_dalpha * gauss;
                    const double dl_dpower = -dl_dalpha * alpha;
                    const double dx = x - g.mean2d.x();
                    const double dy = y - g.mean2d.y();
                    sg.mean.x() -= dl_dpower * (g.conic(0, 0) * dx + g.conic(0, 1) * dy);
                    sg.mean.y() -= dl_dpower * (g.conic(0, 1) * dx + g.conic(1, 1) * dy);
                    sg.conic_a += dl_dpower * 0.5 * dx * dx;
                    sg.conic_b += dl_dpower * dx * dy;
                    sg.conic_c += dl_dpower * 0.5 * dy * dy;
                }
            }
        }
    });

    // Fixed-order reduction keeps the result independent of the thread count.
    std::vector<detail::ScreenGrad> screen(r.projected.size());
    for (std::size_t tile = 0; tile < r.tile_lists.size(); ++tile) {
        const auto& list = r.tile_lists[tile];
        for (std::size_t k = 0; k < list.size(); ++k) screen[list[k]] += tile_grads[tile][k];
    }

    GaussianGradients out;
    out.resize(r.source_count);
    const Mat3 w_rot = r.pose.rotation.conjugate().toRotationMatrix();
    const auto& intr = r.intrinsics;
    for (std::size_t i = 0; i < r.projected.size(); ++i) {
        const auto& pg = r.projected[i];
        const auto& sg = screen[i];
        const Gaussian& src = *r.sources[i];
        const std::size_t s = pg.source_index;
        out.color[s] = sg.color;
        out.opacity[s] = sg.opacity;

        const Vec3& p = pg.p_cam;
        const double iz = 1.0 / p.z();
        const double iz2 = iz * iz;
        Vec3 dl_dp = Vec3::Zero();
        dl_dp.x() += sg.mean.x() * intr.fx * iz;
        dl_dp.y() += sg.mean.y() * intr.fy * iz;
        dl_dp.z() += -sg.mean.x() * intr.fx * p.x() * iz2 - sg.mean.y() * intr.fy * p.y() * iz2;
        dl_dp.z() += sg.depth;

        Mat2 g_conic;
        g_conic << sg.conic_a, 0.5 * sg.conic_b, 0.5 * sg.conic_b, sg.conic_c;
        const Mat2 g_cov2d = -pg.conic * g_conic * pg.conic;

        Eigen::Matrix<double, 2, 3> j;
        j << intr.fx * iz, 0.0, -intr.fx * p.x() * iz2, 0.0, intr.fy * iz, -intr.fy * p.y() * iz2;
        const Eigen::Matrix<double, 2, 3> t = j * w_rot;
        const Quat qn = src.rotation.normalized();
        const Mat3 rot = qn.toRotationMatrix();
        const Mat3 m = rot * src.scale.asDiagonal();
        const Mat3 cov3 = m * m.transpose();

        const Mat3 g_cov3 = t.transpose() * g_cov2d * t;
        const Eigen::Matrix<double, 2, 3> g_t = 2.0 * g_cov2d * t * cov3;
        const Eigen::Matrix<double, 2, 3> g_j = g_t * w_rot.transpose();
        dl_dp.x() += g_j(0, 2) * (-intr.fx * iz2);
        dl_dp.y() += g_j(1, 2) * (-intr.fy * iz2);
        dl_dp.z() += g_j(0, 0) * (-intr.fx * iz2) + g_j(0, 2) * (2.0 * intr.fx * p.x() * iz2 * iz) +
                     g_j(1, 1) * (-intr.fy * iz2) + g_j(1, 2) * (2.0 * intr.fy * p.y() * iz2 * iz);
        out.mu[s] = w_rot.transpose() * dl_dp;

        const Mat3 g_m = 2.0 * g_cov3 * m;
        Mat3 g_rot;
        for (int c = 0; c < 3; ++c) {
            out.scale[s][c] = g_m.col(c).dot(rot.col(c));
            g_rot.col(c) = g_m.col(c) * src.scale[c];
        }
        const auto d_rot = detail::rotation_jacobian(qn);
        Eigen::Vector4d g_qn;
        for (int k = 0; k < 4; ++k) g_qn[k] = (g_rot.array() * d_rot[k].array()).sum();
        const Eigen::Vector4d qv(qn.w(), qn.x(), qn.y(), qn.z());
        const double qnorm = src.rotation.norm();
        out.rotation[s] = (g_qn - qv * qv.dot(g_qn)) / qnorm;
    }
    return out;
}

inline GaussianGradients render_with_gradients(const GaussianSet& set, const Pose& camera_pose,
                                               const CameraIntrinsics& intr, const RenderAdjoint& adj,
                                               const RenderConfig& cfg = {}) {
    return backward(rasterize(set, camera_pose, intr, cfg), adj);
}

inline GaussianGradients render_with_gradients(const GaussianMap& map, const Pose& camera_pose,
                                               const CameraIntrinsics& intr, const RenderAdjoint& adj,
                                               const RenderConfig& cfg = {}) {
    return render_with_gradients(GaussianSet{map.gaussians()}, camera_pose, intr, adj, cfg);
}

}  // namespace fgs
