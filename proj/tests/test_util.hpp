// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Shared generators and independent reference implementations for the tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "fgs/core.hpp"
#include "fgs/render.hpp"

namespace fgs::testing {

inline Quat random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Quat q(n(rng), n(rng), n(rng), n(rng));
    return q.normalized();
}

inline Pose random_pose(std::mt19937_64& rng, double translation = 1.0) {
    std::uniform_real_distribution<double> u(-translation, translation);
    return {random_rotation(rng), Vec3(u(rng), u(rng), u(rng))};
}

inline CameraIntrinsics small_camera(int w = 64, int h = 64, double f = 60.0) {
    return {f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
}

/// Gaussians scattered in front of an identity camera, inside its frustum.
inline std::vector<Gaussian> random_scene(std::mt19937_64& rng, int count, const CameraIntrinsics& intr,
                                          double max_opacity = 0.95) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Gaussian> out;
    for (int i = 0; i < count; ++i) {
        Gaussian g;
        const double z = 1.5 + 2.0 * u(rng);
        const double px = -4.0 + (intr.width + 8.0) * u(rng);
        const double py = -4.0 + (intr.height + 8.0) * u(rng);
        g.mu = intr.back_project(px, py, z);
        const double s = z / intr.fx * (0.8 + 4.0 * u(rng));
        g.scale = Vec3(s * (0.4 + u(rng)), s * (0.4 + u(rng)), s * (0.05 + u(rng)));
        g.rotation = random_rotation(rng);
        g.opacity = 0.05 + (max_opacity - 0.05) * u(rng);
        g.color = Vec3(u(rng), u(rng), u(rng));
        out.push_back(g);
    }
    return out;
}

/// Untiled evaluator: projects every gaussian with its own math and blends all
/// of them at every pixel in (depth, index) order. Applies the same alpha clamp,
/// support cutoff and transmittance stop as the renderer's forward model.
inline RenderOutput brute_force_render(const std::vector<Gaussian>& gs, const Pose& pose,
                                       const CameraIntrinsics& intr, const RenderConfig& cfg = {}) {
    struct Splat {
        double depth;
        std::size_t index;
        double mx, my, ia, ib, ic, opacity;
        Vec3 color;
    };
    const Mat3 rcw = pose.rotation.conjugate().toRotationMatrix();
    std::vector<Splat> splats;
    const double diag = std::hypot(intr.width, intr.height);
    for (std::size_t i = 0; i < gs.size(); ++i) {
        const Gaussian& g = gs[i];
        const Vec3 p = rcw * (g.mu - pose.translation);
        if (p.z() <= cfg.near_plane) continue;
        const double mx = intr.fx * p.x() / p.z() + intr.cx;
        const double my = intr.fy * p.y() / p.z() + intr.cy;
        if (mx < -1.5 * diag || mx > intr.width + 1.5 * diag || my < -1.5 * diag ||
            my > intr.height + 1.5 * diag) {
            continue;
        }
        const Mat3 r = g.rotation.toRotationMatrix();
        Mat3 cov = Mat3::Zero();
        for (int k = 0; k < 3; ++k) cov += g.scale[k] * g.scale[k] * r.col(k) * r.col(k).transpose();
        const Mat3 cc = rcw * cov * rcw.transpose();
        const double z = p.z();
        Eigen::Matrix<double, 2, 3> j;
        j << intr.fx / z, 0, -intr.fx * p.x() / (z * z), 0, intr.fy / z, -intr.fy * p.y() / (z * z);
        Mat2 c2 = j * cc * j.transpose();
        c2(0, 0) += cfg.cov2d_dilation;
        c2(1, 1) += cfg.cov2d_dilation;
        const double b = 0.5 * (c2(0, 1) + c2(1, 0));
        const double det = c2(0, 0) * c2(1, 1) - b * b;
        splats.push_back({z, i, mx, my, c2(1, 1) / det, -b / det, c2(0, 0) / det, g.opacity, g.color});
    }
    std::sort(splats.begin(), splats.end(), [](const Splat& a, const Splat& b) {
        return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
    });
    RenderOutput out;
    out.color = ImageD(intr.width, intr.height, 3, 0.0);
    out.depth = ImageD(intr.width, intr.height, 1, 0.0);
    out.opacity = ImageD(intr.width, intr.height, 1, 0.0);
    out.per_pixel_count = Image<int>(intr.width, intr.height, 1, 0);
    const double cutoff = 0.5 * cfg.extent_sigma * cfg.extent_sigma;
    for (int y = 0; y < intr.height; ++y) {
        for (int x = 0; x < intr.width; ++x) {
            double t = 1.0;
            for (const auto& s : splats) {
                const double dx = x - s.mx;
                const double dy = y - s.my;
                const double power = 0.5 * (s.ia * dx * dx + 2.0 * s.ib * dx * dy + s.ic * dy * dy);
                if (power > cutoff) continue;
                const double a = std::min(cfg.alpha_max, s.opacity * std::exp(-power));
                for (int c = 0; c < 3; ++c) out.color(x, y, c) += s.color[c] * a * t;
                out.depth(x, y) += s.depth * a * t;
                out.opacity(x, y) += a * t;
                out.per_pixel_count(x, y) += 1;
                t *= 1.0 - a;
                if (t < cfg.min_transmittance) break;
            }
        }
    }
    return out;
}

inline double max_abs_diff(const ImageD& a, const ImageD& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline ImageD random_image(std::mt19937_64& rng, int w, int h, int c = 1) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageD img(w, h, c);
    for (auto& v : img.data) v = u(rng);
    return img;
}

}  // namespace fgs::testing
