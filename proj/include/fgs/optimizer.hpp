// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Keyframe bookkeeping (co-visibility, co-visible + random selection) and joint
// optimization of the dense and sparse maps against selected keyframes.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fgs/core.hpp"
#include "fgs/gicp.hpp"
#include "fgs/metrics.hpp"
#include "fgs/render.hpp"

namespace fgs {

// ---------------------------------------------------------------- keyframes

/// Keyframes with world-frame downsampled clouds and a symmetric co-visibility cache.
class KeyframeStore {
public:
    explicit KeyframeStore(double overlap_dist = 0.1) : overlap_dist_(overlap_dist) {}

    /// Adds a keyframe; `cloud` is its frame-local tracked cloud.
    std::size_t add(Keyframe kf, const TrackedCloud& cloud) {
        if (!entries_.empty() && kf.index <= entries_.back().keyframe.index) {
            throw InvalidArgument("KeyframeStore: keyframe indices must increase");
        }
        Entry e{std::move(kf), PointGrid(overlap_dist_)};
        for (const auto& p : cloud.points) {
            const Vec3 w = transform_point(e.keyframe.pose, p);
            e.world_points.push_back(w);
            e.grid.insert(w);
        }
        const std::size_t id = entries_.size();
        std::vector<double> row(id + 1, 1.0);
        for (std::size_t j = 0; j < id; ++j) {
            const double ab = directed_overlap(e, entries_[j]);
            const double ba = directed_overlap(entries_[j], e);
            row[j] = 0.5 * (ab + ba);
            covisibility_[j].push_back(row[j]);
        }
        covisibility_.push_back(std::move(row));
        entries_.push_back(std::move(e));
        return id;
    }

    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] bool empty() const { return entries_.empty(); }
    [[nodiscard]] const Keyframe& operator[](std::size_t i) const { return entries_[i].keyframe; }
    [[nodiscard]] double covisibility(std::size_t a, std::size_t b) const { return covisibility_[a][b]; }
    [[nodiscard]] double overlap_dist() const { return overlap_dist_; }

    /// Overrides a cached co-visibility value (both directions).
    void set_covisibility(std::size_t a, std::size_t b, double value) {
        covisibility_[a][b] = value;
        covisibility_[b][a] = value;
    }

private:
    struct Entry {
        Keyframe keyframe;
        PointGrid grid;
        std::vector<Vec3> world_points;
    };

    [[nodiscard]] double directed_overlap(const Entry& from, const Entry& to) const {
        if (from.world_points.empty()) return 0.0;
        std::size_t hits = 0;
        for (const auto& p : from.world_points) {
            if (to.grid.nearest(p, overlap_dist_)) ++hits;
        }
        return static_cast<double>(hits) / static_cast<double>(from.world_points.size());
    }

    double overlap_dist_;
    std::vector<Entry> entries_;
    std::vector<std::vector<double>> covisibility_;
};

enum class KeyframeStrategy { Combined, CovisibleOnly, RandomOnly };

struct KeyframeSelection {
    std::vector<std::size_t> covisible;  // store positions, current first
    std::vector<std::size_t> random;
};

inline constexpr double kCovisibleThreshold = 0.70;
inline constexpr double kRandomFraction = 0.30;

namespace detail {

// Partial Fisher-Yates; raw engine output keeps the draw sequence identical
// across standard library implementations.
inline std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool, std::size_t count,
                                                           std::mt19937_64& rng) {
    count = std::min(count, pool.size());
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

}  // namespace detail

inline KeyframeSelection select_keyframes(const KeyframeStore& store, std::size_t current, std::uint64_t seed,
                                          KeyframeStrategy strategy = KeyframeStrategy::Combined) {
    if (current >= store.size()) throw InvalidArgument("select_keyframes: current keyframe not in store");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(store[current].index)};
    std::mt19937_64 rng(seq);

    KeyframeSelection sel;
    if (strategy == KeyframeStrategy::RandomOnly) {
        std::vector<std::size_t> all(store.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        const auto n = static_cast<std::size_t>(std::ceil(kRandomFraction * static_cast<double>(all.size())));
        sel.random = detail::sample_without_replacement(std::move(all), n, rng);
        return sel;
    }

    std::vector<std::size_t> remaining;
    sel.covisible.push_back(current);
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < store.size(); ++i) {
        if (i == current) continue;
        if (store.covisibility(i, current) > kCovisibleThreshold) {
            others.push_back(i);
        } else {
            remaining.push_back(i);
        }
    }
    std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
        return store.covisibility(a, current) > store.covisibility(b, current);
    });
    sel.covisible.insert(sel.covisible.end(), others.begin(), others.end());
    if (strategy == KeyframeStrategy::Combined) {
        const auto n =
            static_cast<std::size_t>(std::ceil(kRandomFraction * static_cast<double>(remaining.size())));
        sel.random = detail::sample_without_replacement(std::move(remaining), n, rng);
    }
    return sel;
}

/// Visit order for one cycle: each co-visible keyframe twice, each random one
/// once, interleaved as two co-visible visits then one random visit so short
/// budgets still reach the random set.
inline std::vector<std::size_t> visit_schedule(const KeyframeSelection& sel) {
    std::vector<std::size_t> local = sel.covisible;
    local.insert(local.end(), sel.covisible.begin(), sel.covisible.end());
    std::vector<std::size_t> order;
    order.reserve(local.size() + sel.random.size());
    std::size_t l = 0;
    std::size_t g = 0;
    while (l < local.size() || g < sel.random.size()) {
        for (int k = 0; k < 2 && l < local.size(); ++k) order.push_back(local[l++]);
        if (g < sel.random.size()) order.push_back(sel.random[g++]);
    }
    return order;
}

// ---------------------------------------------------------------- losses

struct LossWeights {
    double color = 0.8;  // λ_i
    double depth = 0.5;  // λ_d
    double reg = 0.01;   // λ_r
    double epsilon = 1e-4;
};

/// Weighted contributions; total is their sum.
struct LossTerms {
    double total = 0.0;
    double color = 0.0;
    double depth = 0.0;
    double ssim = 0.0;
    double reg = 0.0;
};

/// Mean absolute deviation of the tangential scales from their batch mean plus
/// mean distance of the normal scale from ε.
inline double regularization_loss(std::span<const Vec3> scales, double epsilon) {
    if (scales.empty()) throw InvalidArgument("regularization_loss: empty batch");
    const auto n = static_cast<double>(scales.size());
    double mean = 0.0;
    for (const auto& s : scales) mean += s[0] + s[1];
    mean /= 2.0 * n;
    double tangential = 0.0;
    double normal = 0.0;
    for (const auto& s : scales) {
        tangential += std::abs(s[0] - mean) + std::abs(s[1] - mean);
        normal += std::abs(s[2] - epsilon);
    }
    return (tangential + normal) / n;
}

inline std::vector<Vec3> regularization_gradient(std::span<const Vec3> scales, double epsilon) {
    if (scales.empty()) throw InvalidArgument("regularization_gradient: empty batch");
    const auto n = static_cast<double>(scales.size());
    double mean = 0.0;
    for (const auto& s : scales) mean += s[0] + s[1];
    mean /= 2.0 * n;
    auto sign = [](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); };
    double sign_sum = 0.0;
    for (const auto& s : scales) sign_sum += sign(s[0] - mean) + sign(s[1] - mean);
    std::vector<Vec3> out(scales.size());
    for (std::size_t i = 0; i < scales.size(); ++i) {
        const auto& s = scales[i];
        out[i] = Vec3(sign(s[0] - mean) - sign_sum / (2.0 * n), sign(s[1] - mean) - sign_sum / (2.0 * n),
                      sign(s[2] - epsilon)) /
                 n;
    }
    return out;
}

struct MappingLoss {
    LossTerms terms;
    RenderAdjoint adjoint;  // ∂L/∂color image and ∂L/∂depth image
};

/// Color L1 + depth L1 over valid depth + (1 − SSIM) + scale regularizer, with
/// adjoints for the image-space terms.
inline MappingLoss mapping_loss(const RenderOutput& render, const RgbdFrame& frame, std::span<const Vec3> scales,
                                const LossWeights& w) {
    const int width = frame.width();
    const int height = frame.height();
    if (!render.color.same_shape(width, height) || !render.depth.same_shape(width, height)) {
        throw InvalidArgument("mapping_loss: render and frame dimensions differ");
    }
    MappingLoss out;
    out.adjoint.color = ImageD(width, height, 3, 0.0);
    out.adjoint.depth = ImageD(width, height, 1, 0.0);
    auto sign = [](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); };

    const auto nc = static_cast<double>(render.color.data.size());
    double color_l1 = 0.0;
    for (std::size_t i = 0; i < render.color.data.size(); ++i) {
        const double d = render.color.data[i] - static_cast<double>(frame.color.data[i]);
        color_l1 += std::abs(d);
        out.adjoint.color.data[i] = w.color * sign(d) / nc;
    }
    out.terms.color = w.color * color_l1 / nc;

    std::size_t valid = 0;
    for (float d : frame.depth.data) valid += d > 0.0f;
    if (valid > 0 && w.depth != 0.0) {
        double depth_l1 = 0.0;
        for (std::size_t i = 0; i < render.depth.data.size(); ++i) {
            const double gt = frame.depth.data[i];
            if (!(gt > 0.0)) continue;
            const double d = render.depth.data[i] - gt;
            depth_l1 += std::abs(d);
            out.adjoint.depth.data[i] = w.depth * sign(d) / static_cast<double>(valid);
        }
        out.terms.depth = w.depth * depth_l1 / static_cast<double>(valid);
    }

    const double ssim_weight = 1.0 - w.color;
    if (ssim_weight != 0.0) {
        ImageD grad;
        const double s = ssim_with_gradient(render.color, frame.color, grad);
        out.terms.ssim = ssim_weight * (1.0 - s);
        for (std::size_t i = 0; i < grad.data.size(); ++i) out.adjoint.color.data[i] -= ssim_weight * grad.data[i];
    }

    if (w.reg != 0.0 && !scales.empty()) out.terms.reg = w.reg * regularization_loss(scales, w.epsilon);
    out.terms.total = out.terms.color + out.terms.depth + out.terms.ssim + out.terms.reg;
    return out;
}

// ---------------------------------------------------------------- optimizer

struct OptimizerConfig {
    LossWeights weights;
    double lr_position = 1e-4;  // multiplied by scene_scale
    double scene_scale = 1.0;
    double lr_scale = 5e-3;     // log-space
    double lr_rotation = 1e-3;
    double lr_opacity = 5e-2;   // logit-space
    double lr_color = 2.5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-15;
    bool freeze_sparse_geometry = true;
    RenderConfig render;
};

inline constexpr int kParamsPerGaussian = 14;  // mu 3, log-scale 3, quaternion 4, logit 1, color 3

/// Adaptive-moment accumulators for one map, indexed like the map.
struct AdamMoments {
    std::vector<std::array<double, kParamsPerGaussian>> m;
    std::vector<std::array<double, kParamsPerGaussian>> v;
    std::vector<std::uint32_t> steps;

    void grow(std::size_t n) {
        if (m.size() >= n) return;
        m.resize(n, std::array<double, kParamsPerGaussian>{});
        v.resize(n, std::array<double, kParamsPerGaussian>{});
        steps.resize(n, 0);
    }

    /// Mirrors GaussianMap::compact.
    void compact(const std::vector<bool>& keep) {
        std::size_t out = 0;
        for (std::size_t i = 0; i < keep.size() && i < m.size(); ++i) {
            if (!keep[i]) continue;
            m[out] = m[i];
            v[out] = v[i];
            steps[out] = steps[i];
            ++out;
        }
        m.resize(out);
        v.resize(out);
        steps.resize(out);
    }

    [[nodiscard]] bool finite() const {
        for (std::size_t i = 0; i < m.size(); ++i) {
            for (int k = 0; k < kParamsPerGaussian; ++k) {
                if (!std::isfinite(m[i][k]) || !std::isfinite(v[i][k])) return false;
            }
        }
        return true;
    }
};

struct OptimizerState {
    AdamMoments dense;
    AdamMoments sparse;
    std::uint64_t iteration = 0;  // global iteration counter across calls
};

struct LossRecord {
    std::uint64_t iteration = 0;
    int keyframe_index = 0;
    LossTerms terms;
};

/// Thrown when the loss stops being finite; carries the trace so far.
class OptimizationError : public NumericalError {
public:
    OptimizationError(const std::string& what, std::vector<LossRecord> t)
        : NumericalError(what), trace(std::move(t)) {}
    std::vector<LossRecord> trace;
};

namespace detail {

inline constexpr double kOpacityClamp = 1e-6;

inline double logit(double p) {
    p = std::clamp(p, kOpacityClamp, 1.0 - kOpacityClamp);
    return std::log(p / (1.0 - p));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double adam_delta(double& m, double& v, double g, double lr, std::uint32_t step, const OptimizerConfig& c) {
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double mh = m / (1.0 - std::pow(c.beta1, step));
    const double vh = v / (1.0 - std::pow(c.beta2, step));
    return -lr * mh / (std::sqrt(vh) + c.adam_eps);
}

struct ParamGrad {
    Vec3 mu;
    Vec3 scale;
    Eigen::Vector4d rotation;
    double opacity;
    Vec3 color;
};

inline void adam_update(Gaussian& g, const ParamGrad& grad, std::array<double, kParamsPerGaussian>& m,
                        std::array<double, kParamsPerGaussian>& v, std::uint32_t& steps,
                        const OptimizerConfig& c, bool geometry) {
    ++steps;
    if (geometry) {
        const double lr_mu = c.lr_position * c.scene_scale;
        for (int k = 0; k < 3; ++k) g.mu[k] += adam_delta(m[k], v[k], grad.mu[k], lr_mu, steps, c);
        for (int k = 0; k < 3; ++k) {
            const double gl = grad.scale[k] * g.scale[k];  // ∂L/∂log s
            g.scale[k] *= std::exp(adam_delta(m[3 + k], v[3 + k], gl, c.lr_scale, steps, c));
        }
        Eigen::Vector4d q(g.rotation.w(), g.rotation.x(), g.rotation.y(), g.rotation.z());
        for (int k = 0; k < 4; ++k) q[k] += adam_delta(m[6 + k], v[6 + k], grad.rotation[k], c.lr_rotation, steps, c);
        if (q.norm() > 0.0) {
            q.normalize();
            g.rotation = Quat(q[0], q[1], q[2], q[3]);
        }
    }
    const double o = std::clamp(g.opacity, kOpacityClamp, 1.0 - kOpacityClamp);
    const double glogit = grad.opacity * o * (1.0 - o);
    g.opacity = sigmoid(logit(o) + adam_delta(m[10], v[10], glogit, c.lr_opacity, steps, c));
    for (int k = 0; k < 3; ++k) {
        g.color[k] = std::clamp(g.color[k] + adam_delta(m[11 + k], v[11 + k], grad.color[k], c.lr_color, steps, c),
                                0.0, 1.0);
    }
}

}  // namespace detail

/// Runs `iterations` optimization steps over the scheduled keyframes, rendering
/// dense ∪ sparse from each keyframe pose. Returns one loss record per step.
inline std::vector<LossRecord> optimize_maps(GaussianMap& dense, GaussianMap& sparse, const KeyframeStore& store,
                                             const KeyframeSelection& selection, int iterations,
                                             const OptimizerConfig& cfg, OptimizerState& state) {
    std::vector<LossRecord> trace;
    const auto schedule = visit_schedule(selection);
    if (iterations <= 0 || schedule.empty()) return trace;
    state.dense.grow(dense.size());
    state.sparse.grow(sparse.size());

    for (int it = 0; it < iterations; ++it) {
        const Keyframe& kf = store[schedule[static_cast<std::size_t>(it) % schedule.size()]];
        const auto rast = rasterize({dense.gaussians(), sparse.gaussians()}, kf.pose, kf.frame.intrinsics, cfg.render);

        // Regularizer batch: dense gaussians that reach at least one tile of this view.
        std::vector<char> visible(rast.source_count, 0);
        for (const auto& list : rast.tile_lists) {
            for (auto e : list) visible[rast.projected[e].source_index] = 1;
        }
        std::vector<std::size_t> batch;
        std::vector<Vec3> batch_scales;
        for (std::size_t i = 0; i < dense.size(); ++i) {
            if (visible[i]) {
                batch.push_back(i);
                batch_scales.push_back(dense[i].scale);
            }
        }

        const auto loss = mapping_loss(rast.output, kf.frame, batch_scales, cfg.weights);
        trace.push_back({state.iteration, kf.index, loss.terms});
        ++state.iteration;
        if (!std::isfinite(loss.terms.total)) {
            throw OptimizationError("optimize_maps: non-finite loss", trace);
        }

        auto grads = backward(rast, loss.adjoint);
        if (cfg.weights.reg != 0.0 && !batch.empty()) {
            const auto rg = regularization_gradient(batch_scales, cfg.weights.epsilon);
            for (std::size_t b = 0; b < batch.size(); ++b) grads.scale[batch[b]] += cfg.weights.reg * rg[b];
        }

        for (std::size_t i = 0; i < rast.source_count; ++i) {
            if (!visible[i]) continue;
            const detail::ParamGrad g{grads.mu[i], grads.scale[i], grads.rotation[i], grads.opacity[i], grads.color[i]};
            if (i < dense.size()) {
                detail::adam_update(dense[i], g, state.dense.m[i], state.dense.v[i], state.dense.steps[i], cfg, true);
            } else {
                const std::size_t j = i - dense.size();
                detail::adam_update(sparse[j], g, state.sparse.m[j], state.sparse.v[j], state.sparse.steps[j], cfg,
                                    !cfg.freeze_sparse_geometry);
            }
        }
    }
    return trace;
}

}  // namespace fgs
