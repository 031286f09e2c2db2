// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Domain types shared by the mapping, tracking and optimization stages.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "fgs/errors.hpp"

namespace fgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

/// Dense row-major image with interleaved channels.
template <typename T>
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, int c = 1, T fill = T{})
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    T& operator()(int x, int y, int c = 0) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    const T& operator()(int x, int y, int c = 0) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    [[nodiscard]] std::size_t pixel_count() const {
        return static_cast<std::size_t>(width) * height;
    }
    [[nodiscard]] bool empty() const { return data.empty(); }
    [[nodiscard]] bool same_shape(int w, int h) const { return width == w && height == h; }
    template <typename U>
    [[nodiscard]] bool same_shape(const Image<U>& o) const {
        return width == o.width && height == o.height;
    }
};

using ImageF = Image<float>;
using ImageD = Image<double>;
using Mask = Image<std::uint8_t>;

inline std::size_t count_set(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.data.begin(), m.data.end(),
                                                  [](std::uint8_t v) { return v != 0; }));
}

enum class FrequencyClass : std::uint8_t { Low = 0, High = 1 };

struct Gaussian {
    Vec3 mu = Vec3::Zero();
    Vec3 scale = Vec3::Ones();
    Quat rotation = Quat::Identity();
    double opacity = 0.5;
    Vec3 color = Vec3::Zero();
    FrequencyClass frequency_class = FrequencyClass::Low;

    [[nodiscard]] bool is_valid() const {
        if (!(scale.array() > 0.0).all()) return false;
        if (std::abs(rotation.norm() - 1.0) > 1e-9) return false;
        if (!(opacity >= 0.0 && opacity <= 1.0)) return false;
        return (color.array() >= 0.0).all() && (color.array() <= 1.0).all() &&
               mu.allFinite();
    }
};

/// C = R S Sᵀ Rᵀ with S = diag(scale).
inline Mat3 covariance_from_scale_rotation(const Vec3& scale, const Quat& rotation) {
    if (!(scale.array() > 0.0).all()) {
        throw InvalidArgument("covariance_from_scale_rotation: scale entries must be positive");
    }
    const Mat3 m = rotation.normalized().toRotationMatrix() * scale.asDiagonal();
    Mat3 c = m * m.transpose();
    return 0.5 * (c + c.transpose());
}

enum class MapKind : std::uint8_t { Dense, Sparse };

/// Growable gaussian set. Indices are stable until the next compaction; every
/// compaction bumps generation() so stale handles can be detected.
class GaussianMap {
public:
    explicit GaussianMap(MapKind kind = MapKind::Dense) : kind_(kind) {}

    [[nodiscard]] MapKind kind() const { return kind_; }
    [[nodiscard]] std::size_t size() const { return gaussians_.size(); }
    [[nodiscard]] bool empty() const { return gaussians_.empty(); }
    [[nodiscard]] std::uint64_t generation() const { return generation_; }

    Gaussian& operator[](std::size_t i) { return gaussians_[i]; }
    const Gaussian& operator[](std::size_t i) const { return gaussians_[i]; }

    [[nodiscard]] std::span<const Gaussian> gaussians() const { return gaussians_; }
    [[nodiscard]] std::span<Gaussian> gaussians() { return gaussians_; }

    void add(const Gaussian& g) { gaussians_.push_back(g); }
    void add(std::span<const Gaussian> gs) {
        gaussians_.insert(gaussians_.end(), gs.begin(), gs.end());
    }
    void reserve(std::size_t n) { gaussians_.reserve(n); }

    /// Drops every gaussian whose keep flag is false, preserving relative order.
    void compact(const std::vector<bool>& keep) {
        std::size_t out = 0;
        for (std::size_t i = 0; i < gaussians_.size(); ++i) {
            if (keep[i]) gaussians_[out++] = gaussians_[i];
        }
        gaussians_.resize(out);
        ++generation_;
    }

    auto begin() const { return gaussians_.begin(); }
    auto end() const { return gaussians_.end(); }

private:
    MapKind kind_;
    std::vector<Gaussian> gaussians_;
    std::uint64_t generation_ = 0;
};

struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    [[nodiscard]] bool is_valid() const { return fx > 0 && fy > 0 && width >= 1 && height >= 1; }

    /// Pixel (u, v) at depth d to a camera-frame point. Pixel centers sit on integer coordinates.
    [[nodiscard]] Vec3 back_project(double u, double v, double depth) const {
        return {(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
    }
    [[nodiscard]] Vec2 project(const Vec3& p) const {
        return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
    }
};

/// Rigid camera-to-world transform.
struct Pose {
    Quat rotation = Quat::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return {}; }
    static Pose from_matrix(const Mat3& r, const Vec3& t) {
        return {Quat(r).normalized(), t};
    }

    [[nodiscard]] Mat3 rotation_matrix() const { return rotation.toRotationMatrix(); }
    [[nodiscard]] bool is_valid() const {
        return std::abs(rotation.norm() - 1.0) <= 1e-9 && translation.allFinite();
    }
};

inline Pose compose_poses(const Pose& a, const Pose& b) {
    Pose out;
    out.rotation = (a.rotation * b.rotation).normalized();
    out.translation = a.rotation * b.translation + a.translation;
    return out;
}

inline Pose invert_pose(const Pose& a) {
    Pose out;
    out.rotation = a.rotation.conjugate();
    out.translation = -(out.rotation * a.translation);
    return out;
}

inline Vec3 transform_point(const Pose& a, const Vec3& p) {
    return a.rotation * p + a.translation;
}

/// Raised when registration loses its correspondences; carries the last pose reached.
class TrackingDivergence : public Error {
public:
    TrackingDivergence(const std::string& what, const Pose& last) : Error(what), last_pose(last) {}
    Pose last_pose;
};

struct RgbdFrame {
    ImageF color;  // H×W×3 in [0,1]
    ImageF depth;  // H×W meters, 0 = invalid
    double timestamp = 0.0;
    CameraIntrinsics intrinsics;

    [[nodiscard]] int width() const { return depth.width; }
    [[nodiscard]] int height() const { return depth.height; }

    void validate() const {
        if (color.channels != 3 || depth.channels != 1 || !color.same_shape(depth)) {
            throw InvalidArgument("RgbdFrame: color and depth must share W×H (3 and 1 channels)");
        }
        if (!depth.same_shape(intrinsics.width, intrinsics.height)) {
            throw InvalidArgument("RgbdFrame: intrinsics size does not match images");
        }
        for (float d : depth.data) {
            if (!(d >= 0.0f)) throw InvalidArgument("RgbdFrame: negative or NaN depth");
        }
    }
};

enum class KeyframeRole : std::uint8_t { Tracking, MappingOnly };

struct Keyframe {
    RgbdFrame frame;
    Pose pose;
    KeyframeRole role = KeyframeRole::Tracking;
    int index = 0;
};

/// Camera-frame luminance used by frequency analysis and densification.
inline ImageD luminance(const ImageF& color) {
    ImageD out(color.width, color.height, 1);
    for (int y = 0; y < color.height; ++y) {
        for (int x = 0; x < color.width; ++x) {
            out(x, y) = 0.299 * color(x, y, 0) + 0.587 * color(x, y, 1) + 0.114 * color(x, y, 2);
        }
    }
    return out;
}

}  // namespace fgs
