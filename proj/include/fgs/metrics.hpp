// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Image and trajectory quality metrics: SSIM (with its gradient), PSNR and
// ATE RMSE after rigid alignment.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <vector>

#include <Eigen/SVD>

#include "fgs/core.hpp"

namespace fgs {

namespace detail {

inline constexpr int kSsimRadius = 5;  // 11×11 window
inline constexpr double kSsimSigma = 1.5;

inline std::array<double, 2 * kSsimRadius + 1> ssim_kernel() {
    std::array<double, 2 * kSsimRadius + 1> k{};
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
        k[i + kSsimRadius] = std::exp(-(i * i) / (2.0 * kSsimSigma * kSsimSigma));
        sum += k[i + kSsimRadius];
    }
    for (auto& v : k) v /= sum;
    return k;
}

// Windowed weighted mean at every position whose full window lies inside the
// image. Output is (w - 2R) × (h - 2R).
inline std::vector<double> valid_filter(const std::vector<double>& img, int w, int h) {
    const auto k = ssim_kernel();
    const int r = kSsimRadius;
    const int vw = w - 2 * r;
    const int vh = h - 2 * r;
    std::vector<double> rows(static_cast<std::size_t>(vw) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < vw; ++x) {
            double s = 0.0;
            for (int i = 0; i <= 2 * r; ++i) s += k[i] * img[static_cast<std::size_t>(y) * w + x + i];
            rows[static_cast<std::size_t>(y) * vw + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(vw) * vh);
    for (int y = 0; y < vh; ++y) {
        for (int x = 0; x < vw; ++x) {
            double s = 0.0;
            for (int i = 0; i <= 2 * r; ++i) s += k[i] * rows[static_cast<std::size_t>(y + i) * vw + x];
            out[static_cast<std::size_t>(y) * vw + x] = s;
        }
    }
    return out;
}

// Transpose of valid_filter: scatters a (w-2R)×(h-2R) map back onto w×h.
inline std::vector<double> valid_filter_adjoint(const std::vector<double>& m, int w, int h) {
    const auto k = ssim_kernel();
    const int r = kSsimRadius;
    const int vw = w - 2 * r;
    const int vh = h - 2 * r;
    std::vector<double> rows(static_cast<std::size_t>(vw) * h, 0.0);
    for (int y = 0; y < vh; ++y) {
        for (int x = 0; x < vw; ++x) {
            const double v = m[static_cast<std::size_t>(y) * vw + x];
            for (int i = 0; i <= 2 * r; ++i) rows[static_cast<std::size_t>(y + i) * vw + x] += k[i] * v;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < vw; ++x) {
            const double v = rows[static_cast<std::size_t>(y) * vw + x];
            for (int i = 0; i <= 2 * r; ++i) out[static_cast<std::size_t>(y) * w + x + i] += k[i] * v;
        }
    }
    return out;
}

template <typename A, typename B>
double ssim_impl(const Image<A>& a, const Image<B>& b, ImageD* grad_a) {
    if (!a.same_shape(b) || a.channels != b.channels) throw InvalidArgument("ssim: dimension mismatch");
    const int w = a.width;
    const int h = a.height;
    if (w <= 2 * kSsimRadius || h <= 2 * kSsimRadius) {
        throw InvalidArgument("ssim: image smaller than the 11x11 window");
    }
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    const int vw = w - 2 * kSsimRadius;
    const int vh = h - 2 * kSsimRadius;
    const auto n = static_cast<double>(vw) * vh * a.channels;
    if (grad_a) *grad_a = ImageD(w, h, a.channels, 0.0);

    double total = 0.0;
    const std::size_t np = a.pixel_count();
    std::vector<double> x(np), y(np), xx(np), yy(np), xy(np);
    for (int c = 0; c < a.channels; ++c) {
        for (std::size_t i = 0; i < np; ++i) {
            x[i] = a.data[i * a.channels + c];
            y[i] = b.data[i * b.channels + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = valid_filter(x, w, h);
        const auto my = valid_filter(y, w, h);
        const auto exx = valid_filter(xx, w, h);
        const auto eyy = valid_filter(yy, w, h);
        const auto exy = valid_filter(xy, w, h);
        std::vector<double> d_mx, d_exx, d_exy;
        if (grad_a) {
            d_mx.resize(mx.size());
            d_exx.resize(mx.size());
            d_exy.resize(mx.size());
        }
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double sxy = exy[i] - mx[i] * my[i];
            const double num_a = 2.0 * mx[i] * my[i] + c1;
            const double num_b = 2.0 * sxy + c2;
            const double den_c = mx[i] * mx[i] + my[i] * my[i] + c1;
            const double den_d = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + c2;
            const double cd = den_c * den_d;
            const double s = num_a * num_b / cd;
            total += s;
            if (grad_a) {
                d_mx[i] = (2.0 * my[i] * num_b - 2.0 * my[i] * num_a) / cd - s * 2.0 * mx[i] / den_c +
                          s * 2.0 * mx[i] / den_d;
                d_exx[i] = -s / den_d;
                d_exy[i] = 2.0 * num_a / cd;
                d_mx[i] /= n;
                d_exx[i] /= n;
                d_exy[i] /= n;
            }
        }
        if (grad_a) {
            const auto g_mx = valid_filter_adjoint(d_mx, w, h);
            const auto g_exx = valid_filter_adjoint(d_exx, w, h);
            const auto g_exy = valid_filter_adjoint(d_exy, w, h);
            for (std::size_t i = 0; i < np; ++i) {
                grad_a->data[i * a.channels + c] = g_mx[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i];
            }
        }
    }
    (void)vh;
    return total / n;
}

}  // namespace detail

/// Single-scale SSIM: 11×11 gaussian window (σ = 1.5), k1 = 0.01, k2 = 0.03,
/// dynamic range 1, averaged over channels and all fully interior windows.
template <typename A, typename B>
double ssim(const Image<A>& a, const Image<B>& b) {
    return detail::ssim_impl(a, b, nullptr);
}

/// SSIM and its gradient with respect to the first image.
template <typename A, typename B>
double ssim_with_gradient(const Image<A>& a, const Image<B>& b, ImageD& grad_a) {
    return detail::ssim_impl(a, b, &grad_a);
}

inline constexpr double kPsnrCap = 100.0;

template <typename A, typename B>
double psnr(const Image<A>& a, const Image<B>& b) {
    if (!a.same_shape(b) || a.channels != b.channels) throw InvalidArgument("psnr: dimension mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

struct StampedPose {
    double timestamp = 0.0;
    Pose pose;
};
using Trajectory = std::vector<StampedPose>;

/// Rigid (no scale) least-squares alignment mapping `from` onto `to`.
inline Pose umeyama_rigid(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    const auto n = static_cast<double>(from.size());
    Vec3 mf = Vec3::Zero();
    Vec3 mt = Vec3::Zero();
    for (std::size_t i = 0; i < from.size(); ++i) {
        mf += from[i];
        mt += to[i];
    }
    mf /= n;
    mt /= n;
    Mat3 cov = Mat3::Zero();
    for (std::size_t i = 0; i < from.size(); ++i) cov += (to[i] - mt) * (from[i] - mf).transpose();
    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 s = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) s(2, 2) = -1.0;
    const Mat3 r = svd.matrixU() * s * svd.matrixV().transpose();
    return Pose::from_matrix(r, mt - r * mf);
}

/// Pairs poses whose timestamps agree within max_dt (nearest neighbour in time).
inline std::vector<std::pair<Pose, Pose>> associate_trajectories(const Trajectory& est, const Trajectory& gt,
                                                                 double max_dt = 0.02) {
    std::vector<std::pair<Pose, Pose>> out;
    if (gt.empty()) return out;
    std::vector<StampedPose> sorted = gt;
    std::sort(sorted.begin(), sorted.end(),
              [](const StampedPose& a, const StampedPose& b) { return a.timestamp < b.timestamp; });
    for (const auto& e : est) {
        auto it = std::lower_bound(sorted.begin(), sorted.end(), e.timestamp,
                                   [](const StampedPose& s, double t) { return s.timestamp < t; });
        const StampedPose* best = nullptr;
        double best_dt = max_dt;
        for (auto cand : {it, it == sorted.begin() ? it : it - 1}) {
            if (cand == sorted.end()) continue;
            const double dt = std::abs(cand->timestamp - e.timestamp);
            if (dt <= best_dt) {
                best_dt = dt;
                best = &*cand;
            }
        }
        if (best) out.emplace_back(e.pose, best->pose);
    }
    return out;
}

inline double ate_rmse(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
    if (est.size() != gt.size() || est.size() < 2) {
        throw InsufficientData("ate_rmse: need at least two associated pose pairs");
    }
    const Pose align = umeyama_rigid(est, gt);
    double sum = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i) sum += (transform_point(align, est[i]) - gt[i]).squaredNorm();
    return std::sqrt(sum / static_cast<double>(est.size()));
}

inline double ate_rmse(const Trajectory& est, const Trajectory& gt, double max_dt = 0.02) {
    const auto pairs = associate_trajectories(est, gt, max_dt);
    std::vector<Vec3> e, g;
    for (const auto& [pe, pg] : pairs) {
        e.push_back(pe.translation);
        g.push_back(pg.translation);
    }
    return ate_rmse(e, g);
}

}  // namespace fgs
