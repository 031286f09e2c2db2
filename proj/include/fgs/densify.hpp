// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Missing-region detection, frequency-aware gaussian spawning and pruning.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fgs/core.hpp"
#include "fgs/frequency.hpp"
#include "fgs/render.hpp"

namespace fgs {

struct DensifyConfig {
    double opacity_threshold = 0.7;
    double depth_diff_threshold = 0.1;  // meters
    double color_diff_threshold = 0.1;  // mean per-channel L1
    double alpha_h = 1.0;
    double alpha_l = 5.0;
    double prune_scale_max = 0.5;  // meters
    double prune_opacity_min = 0.05;
    double initial_opacity = 0.8;
    double normal_scale_ratio = 0.1;  // third scale = ratio · r

    void validate() const {
        if (!(alpha_h < alpha_l)) throw InvalidArgument("DensifyConfig: alpha_h must be < alpha_l");
        if (!(opacity_threshold > 0 && depth_diff_threshold > 0 && color_diff_threshold > 0)) {
            throw InvalidArgument("DensifyConfig: thresholds must be positive");
        }
    }
};

struct MissingMasks {
    Mask insufficient;    // opacity too low
    Mask depth_mismatch;  // observed surface in front of the map
    Mask color_mismatch;
    Mask combined;
};

inline MissingMasks missing_masks(const RenderOutput& render, const RgbdFrame& frame,
                                  const DensifyConfig& cfg) {
    const int w = frame.width();
    const int h = frame.height();
    if (!render.opacity.same_shape(w, h) || !render.color.same_shape(w, h) ||
        !render.depth.same_shape(w, h) || !frame.color.same_shape(w, h)) {
        throw InvalidArgument("missing_masks: render and frame dimensions differ");
    }
    MissingMasks m{Mask(w, h, 1, 0), Mask(w, h, 1, 0), Mask(w, h, 1, 0), Mask(w, h, 1, 0)};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double op = render.opacity(x, y);
            const bool mi = op < cfg.opacity_threshold;
            const double observed = frame.depth(x, y);
            const double rendered = render.depth(x, y) / std::max(op, 1e-6);
            const bool md = observed > 0.0 && observed + cfg.depth_diff_threshold < rendered;
            double diff = 0.0;
            for (int c = 0; c < 3; ++c) diff += std::abs(render.color(x, y, c) - frame.color(x, y, c));
            const bool mc = diff / 3.0 > cfg.color_diff_threshold && !mi;
            m.insufficient(x, y) = mi;
            m.depth_mismatch(x, y) = md;
            m.color_mismatch(x, y) = mc;
            m.combined(x, y) = mi || md || mc;
        }
    }
    return m;
}

/// Mask of every pixel set; used to seed the first frame.
inline MissingMasks all_missing(int w, int h) {
    return {Mask(w, h, 1, 1), Mask(w, h, 1, 0), Mask(w, h, 1, 0), Mask(w, h, 1, 1)};
}

/// Screen-space radius in meters of a splat spawned at depth d: alpha · d / f.
inline double spawn_radius(double alpha, double depth, double focal) { return alpha * depth / focal; }

inline Gaussian make_gaussian(const RgbdFrame& frame, const Pose& pose, const Pixel& px, double radius,
                              FrequencyClass cls, const DensifyConfig& cfg) {
    const double d = frame.depth(px.x, px.y);
    Gaussian g;
    g.mu = transform_point(pose, frame.intrinsics.back_project(px.x, px.y, d));
    g.scale = Vec3(radius, radius, radius * cfg.normal_scale_ratio);
    // Disc lies in the image plane of the spawning camera.
    g.rotation = pose.rotation;
    g.opacity = cfg.initial_opacity;
    g.color = Vec3(frame.color(px.x, px.y, 0), frame.color(px.x, px.y, 1), frame.color(px.x, px.y, 2))
                  .cwiseMax(0.0)
                  .cwiseMin(1.0);
    g.frequency_class = cls;
    return g;
}

/// New gaussians on the high / low lattices restricted to the missing region.
inline std::vector<Gaussian> spawn_gaussians(const RgbdFrame& frame, const Pose& pose,
                                             const FrequencyMasks& masks, const MissingMasks& missing,
                                             const DensifyConfig& cfg) {
    const int w = frame.width();
    const int h = frame.height();
    if (!masks.high.same_shape(w, h) || !missing.combined.same_shape(w, h)) {
        throw InvalidArgument("spawn_gaussians: mask dimensions differ from the frame");
    }
    FrequencyMasks effective = masks;
    for (std::size_t i = 0; i < effective.high.data.size(); ++i) {
        effective.high.data[i] = masks.high.data[i] && missing.combined.data[i];
        effective.low.data[i] = masks.low.data[i] && missing.combined.data[i];
    }
    const auto samples = sample_grid(effective);
    const double f = 0.5 * (frame.intrinsics.fx + frame.intrinsics.fy);
    std::vector<Gaussian> out;
    out.reserve(samples.high.size() + samples.low.size());
    auto emit = [&](const std::vector<Pixel>& pts, double alpha, FrequencyClass cls) {
        for (const auto& px : pts) {
            const double d = frame.depth(px.x, px.y);
            if (!(d > 0.0)) continue;
            out.push_back(make_gaussian(frame, pose, px, spawn_radius(alpha, d, f), cls, cfg));
        }
    };
    emit(samples.high, cfg.alpha_h, FrequencyClass::High);
    emit(samples.low, cfg.alpha_l, FrequencyClass::Low);
    return out;
}

/// Uniform-lattice spawning used by the densification ablations: one spacing
/// and one radius factor everywhere the missing mask is set.
inline std::vector<Gaussian> spawn_equidistant(const RgbdFrame& frame, const Pose& pose,
                                               const MissingMasks& missing, int spacing, double alpha,
                                               FrequencyClass cls, const DensifyConfig& cfg) {
    const double f = 0.5 * (frame.intrinsics.fx + frame.intrinsics.fy);
    std::vector<Gaussian> out;
    for (const auto& px : lattice_in_mask(missing.combined, spacing)) {
        const double d = frame.depth(px.x, px.y);
        if (!(d > 0.0)) continue;
        out.push_back(make_gaussian(frame, pose, px, spawn_radius(alpha, d, f), cls, cfg));
    }
    return out;
}

struct PruneReport {
    std::size_t removed_scale = 0;
    std::size_t removed_opacity = 0;
    std::vector<bool> keep;  // per pre-prune index

    [[nodiscard]] std::size_t removed() const { return removed_scale + removed_opacity; }
};

inline bool keep_gaussian(const Gaussian& g, const DensifyConfig& cfg) {
    return g.scale.maxCoeff() <= cfg.prune_scale_max && g.opacity >= cfg.prune_opacity_min;
}

/// Removes oversized and near-transparent gaussians; a gaussian failing both
/// rules is counted under the scale rule.
inline PruneReport prune(GaussianMap& map, const DensifyConfig& cfg) {
    PruneReport report;
    report.keep.assign(map.size(), true);
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto& g = map[i];
        if (g.scale.maxCoeff() > cfg.prune_scale_max) {
            report.keep[i] = false;
            ++report.removed_scale;
        } else if (g.opacity < cfg.prune_opacity_min) {
            report.keep[i] = false;
            ++report.removed_opacity;
        }
    }
    if (report.removed() > 0) map.compact(report.keep);
    return report;
}

}  // namespace fgs
