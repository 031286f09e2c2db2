// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// The full SLAM loop: per-frame tracking against the sparse map, keyframe
// decisions, frequency-guided densification and joint map optimization.

#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fgs/core.hpp"
#include "fgs/dataset.hpp"
#include "fgs/densify.hpp"
#include "fgs/frequency.hpp"
#include "fgs/gicp.hpp"
#include "fgs/io.hpp"
#include "fgs/keyvalue.hpp"
#include "fgs/metrics.hpp"
#include "fgs/optimizer.hpp"
#include "fgs/render.hpp"

namespace fgs {

enum class ThreadMode { Single, Parallel };
enum class DensifyMode { Adaptive, DenseSmall, SparseLarge };

struct ConfigKey {
    const char* name;
    const char* help;
};

/// Every recognised config key; the CLI exposes each one as `--<name>`.
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"dataset", "dataset directory (tum) or scene spec / directory holding scene.txt (synthetic)"},
        {"format", "tum | synthetic"},
        {"out", "output directory"},
        {"threads", "single | parallel"},
        {"seed", "random seed for keyframe sampling"},
        {"debug-masks", "write per-keyframe mask PNGs and sample CSVs"},
        {"frames", "process at most this many frames (0 = all; synthetic default 50)"},
        {"camera.fx", "focal length x for tum datasets without camera.txt"},
        {"camera.fy", "focal length y"},
        {"camera.cx", "principal point x"},
        {"camera.cy", "principal point y"},
        {"tracking.voxel_size", "downsampling voxel, meters"},
        {"tracking.knn", "neighbors for point covariances"},
        {"tracking.max_corr_dist", "correspondence radius, meters"},
        {"tracking.max_iterations", "Gauss-Newton iteration cap"},
        {"tracking.sparse_opacity", "opacity of new sparse-map gaussians"},
        {"keyframe.overlap_threshold", "tracking keyframe when overlap falls below this"},
        {"keyframe.overlap_dist", "overlap distance, meters"},
        {"keyframe.mapping_stride", "frames between keyframes before a mapping-only keyframe is forced"},
        {"keyframe.strategy", "combined | covisible | random"},
        {"frequency.cutoff", "high-pass cutoff in frequency bins (0 = min(W,H)/16)"},
        {"frequency.high_spacing", "sample spacing in high-frequency regions, pixels"},
        {"frequency.low_spacing", "sample spacing in low-frequency regions, pixels"},
        {"densify.mode", "adaptive | dense-small | sparse-large"},
        {"densify.alpha_h", "radius factor for high-frequency gaussians"},
        {"densify.alpha_l", "radius factor for low-frequency gaussians"},
        {"densify.initial_opacity", "opacity of new dense gaussians"},
        {"densify.opacity_threshold", "accumulated opacity below which a pixel is missing"},
        {"densify.depth_threshold", "depth mismatch threshold, meters"},
        {"densify.color_threshold", "color mismatch threshold"},
        {"densify.prune_interval", "prune the dense map every this many tracking keyframes"},
        {"densify.prune_scale_max", "prune gaussians larger than this, meters"},
        {"densify.prune_opacity_min", "prune gaussians below this opacity"},
        {"optimizer.iterations", "optimization iterations per tracking keyframe"},
        {"loss.lambda_color", "color weight"},
        {"loss.lambda_depth", "depth weight"},
        {"loss.lambda_reg", "scale regularization weight"},
        {"loss.epsilon", "target third scale, meters"},
        {"lr.position", "position learning rate (times lr.scene_scale)"},
        {"lr.scene_scale", "scene scale multiplier for the position rate"},
        {"lr.scale", "log-scale learning rate"},
        {"lr.rotation", "rotation learning rate"},
        {"lr.opacity", "logit-opacity learning rate"},
        {"lr.color", "color learning rate"},
        {"render.threads", "rasterizer tile threads"},
        {"eval.heldout_stride", "evaluate every n-th non-keyframe frame as a held-out view"},
    };
    return keys;
}

struct PipelineConfig {
    std::string dataset;
    std::string format = "synthetic";
    std::string out = "out";
    ThreadMode threads = ThreadMode::Single;
    std::uint64_t seed = 0;
    bool debug_masks = false;
    std::size_t max_frames = 0;
    CameraIntrinsics tum_intrinsics{525.0, 525.0, 319.5, 239.5, 640, 480};

    TrackConfig tracking;
    double overlap_threshold = 0.9;
    int mapping_stride = 10;
    KeyframeStrategy strategy = KeyframeStrategy::Combined;

    FrequencyConfig frequency;
    DensifyConfig densify;
    DensifyMode densify_mode = DensifyMode::Adaptive;
    int prune_interval = 10;

    int iterations = 3;
    OptimizerConfig optimizer;
    int heldout_stride = 5;

    static PipelineConfig from_key_values(const KeyValues& kv) {
        for (const auto& [key, value] : kv.entries()) {
            const auto& keys = config_keys();
            if (std::none_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return key == k.name; })) {
                throw InvalidArgument("unknown config key '" + key + "'");
            }
        }
        PipelineConfig c;
        c.dataset = kv.get("dataset", c.dataset);
        c.format = kv.get("format", c.format);
        c.out = kv.get("out", c.out);
        const std::string threads = kv.get("threads", std::string("single"));
        if (threads == "single") {
            c.threads = ThreadMode::Single;
        } else if (threads == "parallel") {
            c.threads = ThreadMode::Parallel;
        } else {
            throw InvalidArgument("threads must be single or parallel");
        }
        c.seed = kv.get("seed", c.seed);
        c.debug_masks = kv.get("debug-masks", c.debug_masks);
        c.max_frames = static_cast<std::size_t>(kv.get("frames", 0));
        c.tum_intrinsics.fx = kv.get("camera.fx", c.tum_intrinsics.fx);
        c.tum_intrinsics.fy = kv.get("camera.fy", c.tum_intrinsics.fy);
        c.tum_intrinsics.cx = kv.get("camera.cx", c.tum_intrinsics.cx);
        c.tum_intrinsics.cy = kv.get("camera.cy", c.tum_intrinsics.cy);

        c.tracking.voxel_size = kv.get("tracking.voxel_size", c.tracking.voxel_size);
        c.tracking.knn = kv.get("tracking.knn", c.tracking.knn);
        c.tracking.max_corr_dist = kv.get("tracking.max_corr_dist", c.tracking.max_corr_dist);
        c.tracking.max_iterations = kv.get("tracking.max_iterations", c.tracking.max_iterations);
        c.tracking.sparse_opacity = kv.get("tracking.sparse_opacity", c.tracking.sparse_opacity);
        c.overlap_threshold = kv.get("keyframe.overlap_threshold", c.overlap_threshold);
        c.tracking.overlap_dist = kv.get("keyframe.overlap_dist", c.tracking.overlap_dist);
        c.mapping_stride = kv.get("keyframe.mapping_stride", c.mapping_stride);
        const std::string strategy = kv.get("keyframe.strategy", std::string("combined"));
        if (strategy == "combined") {
            c.strategy = KeyframeStrategy::Combined;
        } else if (strategy == "covisible") {
            c.strategy = KeyframeStrategy::CovisibleOnly;
        } else if (strategy == "random") {
            c.strategy = KeyframeStrategy::RandomOnly;
        } else {
            throw InvalidArgument("keyframe.strategy must be combined, covisible or random");
        }

        c.frequency.cutoff_d0 = kv.get("frequency.cutoff", c.frequency.cutoff_d0);
        c.frequency.high_spacing_m = kv.get("frequency.high_spacing", c.frequency.high_spacing_m);
        c.frequency.low_spacing_n = kv.get("frequency.low_spacing", c.frequency.low_spacing_n);
        const std::string mode = kv.get("densify.mode", std::string("adaptive"));
        if (mode == "adaptive") {
            c.densify_mode = DensifyMode::Adaptive;
        } else if (mode == "dense-small") {
            c.densify_mode = DensifyMode::DenseSmall;
        } else if (mode == "sparse-large") {
            c.densify_mode = DensifyMode::SparseLarge;
        } else {
            throw InvalidArgument("densify.mode must be adaptive, dense-small or sparse-large");
        }
        c.densify.alpha_h = kv.get("densify.alpha_h", c.densify.alpha_h);
        c.densify.alpha_l = kv.get("densify.alpha_l", c.densify.alpha_l);
        c.densify.initial_opacity = kv.get("densify.initial_opacity", c.densify.initial_opacity);
        c.densify.opacity_threshold = kv.get("densify.opacity_threshold", c.densify.opacity_threshold);
        c.densify.depth_diff_threshold = kv.get("densify.depth_threshold", c.densify.depth_diff_threshold);
        c.densify.color_diff_threshold = kv.get("densify.color_threshold", c.densify.color_diff_threshold);
        c.prune_interval = kv.get("densify.prune_interval", c.prune_interval);
        c.densify.prune_scale_max = kv.get("densify.prune_scale_max", c.densify.prune_scale_max);
        c.densify.prune_opacity_min = kv.get("densify.prune_opacity_min", c.densify.prune_opacity_min);

        c.iterations = kv.get("optimizer.iterations", c.iterations);
        auto& w = c.optimizer.weights;
        w.color = kv.get("loss.lambda_color", w.color);
        w.depth = kv.get("loss.lambda_depth", w.depth);
        w.reg = kv.get("loss.lambda_reg", w.reg);
        w.epsilon = kv.get("loss.epsilon", w.epsilon);
        auto& o = c.optimizer;
        o.lr_position = kv.get("lr.position", o.lr_position);
        o.scene_scale = kv.get("lr.scene_scale", o.scene_scale);
        o.lr_scale = kv.get("lr.scale", o.lr_scale);
        o.lr_rotation = kv.get("lr.rotation", o.lr_rotation);
        o.lr_opacity = kv.get("lr.opacity", o.lr_opacity);
        o.lr_color = kv.get("lr.color", o.lr_color);
        o.render.threads = kv.get("render.threads", o.render.threads);
        c.heldout_stride = kv.get("eval.heldout_stride", c.heldout_stride);
        c.validate();
        return c;
    }

    void validate() const {
        if (mapping_stride < 1) throw InvalidArgument("keyframe.mapping_stride must be >= 1");
        if (iterations < 0) throw InvalidArgument("optimizer.iterations must be >= 0");
        if (prune_interval < 1) throw InvalidArgument("densify.prune_interval must be >= 1");
        if (heldout_stride < 1) throw InvalidArgument("eval.heldout_stride must be >= 1");
        if (format != "tum" && format != "synthetic") throw InvalidArgument("format must be tum or synthetic");
        densify.validate();
    }
};

/// Opens the configured dataset. Synthetic datasets are a scene spec file (or a
/// directory holding scene.txt); its `frames` key sets the length (default 50).
inline Sequence open_dataset(const PipelineConfig& cfg) {
    const std::filesystem::path path = cfg.dataset;
    if (cfg.format == "synthetic") {
        const auto spec_path = std::filesystem::is_directory(path) ? path / "scene.txt" : path;
        if (!std::filesystem::exists(spec_path)) throw DatasetError("missing scene spec " + spec_path.string());
        KeyValues kv;
        try {
            kv = KeyValues::load(spec_path);
        } catch (const InvalidArgument& e) {
            throw DatasetError(e.what());
        }
        std::size_t frames = static_cast<std::size_t>(kv.get("frames", 50));
        if (cfg.max_frames > 0) frames = std::min(frames, cfg.max_frames);
        return generate_synthetic_sequence(SceneSpec::from_key_values(kv), frames);
    }
    if (!std::filesystem::is_directory(path)) throw DatasetError("dataset directory not found: " + path.string());
    CameraIntrinsics intr = cfg.tum_intrinsics;
    if (std::filesystem::exists(path / "camera.txt")) {
        const auto kv = KeyValues::load(path / "camera.txt");
        intr.fx = kv.get("fx", intr.fx);
        intr.fy = kv.get("fy", intr.fy);
        intr.cx = kv.get("cx", intr.cx);
        intr.cy = kv.get("cy", intr.cy);
    }
    Sequence seq = load_tum_rgbd(path, intr);
    if (cfg.max_frames > 0 && seq.size() > cfg.max_frames) seq.timestamps.resize(cfg.max_frames);
    return seq;
}

// ---------------------------------------------------------------- report

enum class RunStatus { Success, TrackingDivergence, NumericalError };

struct EvalReport {
    std::size_t frames = 0;
    std::size_t dropped_frames = 0;
    std::size_t tracking_keyframes = 0;
    std::size_t mapping_keyframes = 0;
    std::optional<double> ate_rmse;  // meters; absent without ground truth
    std::vector<double> psnr_per_keyframe;
    double psnr_mean = 0.0;
    double ssim_mean = 0.0;
    std::optional<double> heldout_psnr_mean;
    double fps = 0.0;
    double wall_seconds = 0.0;
    std::size_t dense_count = 0;
    std::size_t sparse_count = 0;
    std::size_t peak_map_bytes = 0;
    std::string status = "success";
    std::string error;
};

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["status"] = r.status;
    if (!r.error.empty()) j["error"] = r.error;
    j["frames"] = r.frames;
    j["dropped_frames"] = r.dropped_frames;
    j["tracking_keyframes"] = r.tracking_keyframes;
    j["mapping_keyframes"] = r.mapping_keyframes;
    j["ate_rmse"] = r.ate_rmse ? nlohmann::json(*r.ate_rmse) : nlohmann::json(nullptr);
    j["psnr_per_keyframe"] = r.psnr_per_keyframe;
    j["psnr_mean"] = r.psnr_mean;
    j["ssim_mean"] = r.ssim_mean;
    j["heldout_psnr_mean"] = r.heldout_psnr_mean ? nlohmann::json(*r.heldout_psnr_mean) : nlohmann::json(nullptr);
    j["fps"] = r.fps;
    j["wall_seconds"] = r.wall_seconds;
    j["dense_gaussians"] = r.dense_count;
    j["sparse_gaussians"] = r.sparse_count;
    j["peak_map_bytes"] = r.peak_map_bytes;
    return j;
}

// ---------------------------------------------------------------- mapping

/// Per-keyframe densification products, handed to debug hooks.
struct DensifyTrace {
    int frame_index = 0;
    FrequencyMasks masks;
    MissingMasks missing;
    SamplePoints samples;
};

struct RunHooks {
    std::function<void(const std::string&)> on_tracking_line;
    std::function<void(const DensifyTrace&)> on_densify;
};

/// Owns both maps, the keyframe store and the optimizer state. Used from a
/// single thread at a time.
class Mapper {
public:
    Mapper(const PipelineConfig& cfg, const RunHooks& hooks)
        : cfg_(cfg), hooks_(hooks), store_(cfg.tracking.overlap_dist) {}

    /// Densifies from a tracking keyframe, extends the sparse map and stores the
    /// keyframe. Returns the sparse gaussians added.
    std::vector<Gaussian> integrate_tracking_keyframe(RgbdFrame frame, const Pose& pose, const TrackedCloud& cloud,
                                                      int index) {
        const int w = frame.width();
        const int h = frame.height();
        MissingMasks missing = all_missing(w, h);
        if (!dense_.empty() || !sparse_.empty()) {
            const auto rendered = render({dense_.gaussians(), sparse_.gaussians()}, pose, frame.intrinsics,
                                         cfg_.optimizer.render);
            missing = missing_masks(rendered, frame, cfg_.densify);
        }
        DensifyTrace trace{index, frequency_masks(frame, cfg_.frequency), missing, {}};
        std::vector<Gaussian> spawned;
        switch (cfg_.densify_mode) {
        case DensifyMode::Adaptive:
            spawned = spawn_gaussians(frame, pose, trace.masks, missing, cfg_.densify);
            if (hooks_.on_densify) {
                FrequencyMasks effective = trace.masks;
                for (std::size_t i = 0; i < effective.high.data.size(); ++i) {
                    effective.high.data[i] = effective.high.data[i] && missing.combined.data[i];
                    effective.low.data[i] = effective.low.data[i] && missing.combined.data[i];
                }
                trace.samples = sample_grid(effective);
            }
            break;
        case DensifyMode::DenseSmall:
            spawned = spawn_equidistant(frame, pose, missing, cfg_.frequency.high_spacing_m, cfg_.densify.alpha_h,
                                        FrequencyClass::High, cfg_.densify);
            trace.samples.high = lattice_in_mask(missing.combined, cfg_.frequency.high_spacing_m);
            break;
        case DensifyMode::SparseLarge:
            spawned = spawn_equidistant(frame, pose, missing, cfg_.frequency.low_spacing_n, cfg_.densify.alpha_l,
                                        FrequencyClass::Low, cfg_.densify);
            trace.samples.low = lattice_in_mask(missing.combined, cfg_.frequency.low_spacing_n);
            break;
        }
        dense_.add(spawned);
        if (hooks_.on_densify) hooks_.on_densify(trace);

        const std::size_t before = sparse_.size();
        update_sparse_map(sparse_, nullptr, cloud, pose, missing, frame, cfg_.tracking.sparse_opacity);
        std::vector<Gaussian> added(sparse_.gaussians().begin() + static_cast<std::ptrdiff_t>(before),
                                    sparse_.gaussians().end());

        current_ = store_.add(Keyframe{std::move(frame), pose, KeyframeRole::Tracking, index}, cloud);
        ++tracking_keyframes_;
        note_memory();
        return added;
    }

    void add_mapping_keyframe(RgbdFrame frame, const Pose& pose, const TrackedCloud& cloud, int index) {
        store_.add(Keyframe{std::move(frame), pose, KeyframeRole::MappingOnly, index}, cloud);
        ++mapping_keyframes_;
    }

    /// Selects keyframes around the latest tracking keyframe, optimizes, and
    /// prunes on the configured interval.
    void optimize() {
        const auto selection = select_keyframes(store_, current_, cfg_.seed, cfg_.strategy);
        const auto records =
            optimize_maps(dense_, sparse_, store_, selection, cfg_.iterations, cfg_.optimizer, state_);
        trace_.insert(trace_.end(), records.begin(), records.end());
        if (tracking_keyframes_ % static_cast<std::size_t>(cfg_.prune_interval) == 0) {
            state_.dense.grow(dense_.size());
            const auto report = prune(dense_, cfg_.densify);
            if (report.removed() > 0) state_.dense.compact(report.keep);
        }
        note_memory();
    }

    [[nodiscard]] const GaussianMap& dense() const { return dense_; }
    [[nodiscard]] const GaussianMap& sparse() const { return sparse_; }
    [[nodiscard]] const KeyframeStore& store() const { return store_; }
    [[nodiscard]] const std::vector<LossRecord>& loss_trace() const { return trace_; }
    [[nodiscard]] std::size_t tracking_keyframes() const { return tracking_keyframes_; }
    [[nodiscard]] std::size_t mapping_keyframes() const { return mapping_keyframes_; }
    [[nodiscard]] std::size_t peak_map_bytes() const { return peak_bytes_; }

    GaussianMap take_dense() { return std::move(dense_); }
    GaussianMap take_sparse() { return std::move(sparse_); }

private:
    void note_memory() {
        const std::size_t per = sizeof(Gaussian) + 2 * sizeof(std::array<double, kParamsPerGaussian>) +
                                sizeof(std::uint32_t);
        peak_bytes_ = std::max(peak_bytes_, (dense_.size() + sparse_.size()) * per);
    }

    const PipelineConfig& cfg_;
    const RunHooks& hooks_;
    GaussianMap dense_{MapKind::Dense};
    GaussianMap sparse_{MapKind::Sparse};
    KeyframeStore store_;
    OptimizerState state_;
    std::vector<LossRecord> trace_;
    std::size_t current_ = 0;
    std::size_t tracking_keyframes_ = 0;
    std::size_t mapping_keyframes_ = 0;
    std::size_t peak_bytes_ = 0;
};

// ---------------------------------------------------------------- tracking

namespace detail {

template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    /// Blocks while full. Returns false once the queue is closed.
    bool push(T item) {
        std::unique_lock lock(mutex_);
        not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
        if (closed_) return false;
        items_.push_back(std::move(item));
        not_empty_.notify_one();
        return true;
    }

    /// Blocks while empty; nullopt once closed and drained.
    std::optional<T> pop() {
        std::unique_lock lock(mutex_);
        not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T item = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return item;
    }

    void close() {
        std::lock_guard lock(mutex_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

private:
    std::size_t capacity_;
    std::deque<T> items_;
    bool closed_ = false;
    std::mutex mutex_;
    std::condition_variable not_full_;
    std::condition_variable not_empty_;
};

struct MappingJob {
    RgbdFrame frame;
    Pose pose;
    TrackedCloud cloud;
    int index = 0;
    KeyframeRole role = KeyframeRole::Tracking;
    std::promise<std::vector<Gaussian>> sparse_batch;
};

}  // namespace detail

inline constexpr std::size_t kMappingQueueCapacity = 4;

/// Frame-by-frame tracker owning its copy of the sparse-map index. Keyframes
/// are forwarded to `integrate` (tracking) and `join` (mapping-only).
class Tracker {
public:
    explicit Tracker(const PipelineConfig& cfg) : cfg_(cfg), index_(cfg.tracking.max_corr_dist) {}

    enum class Decision { None, Tracking, MappingOnly };

    struct Step {
        Pose pose;
        TrackResult result;
        TrackedCloud cloud;
        Decision decision = Decision::None;
    };

    Step track(const RgbdFrame& frame, int index) {
        Step s;
        s.cloud = build_cloud(frame, cfg_.tracking.voxel_size, cfg_.tracking.knn);
        if (index == 0) {
            s.pose = Pose::identity();
            s.result.pose = s.pose;
            s.result.converged = true;
            s.result.inlier_fraction = 1.0;
            s.decision = Decision::Tracking;
        } else {
            s.result = gicp_align(s.cloud, index_, last_pose_, cfg_.tracking);
            s.pose = s.result.pose;
            const double overlap = overlap_ratio(s.cloud, s.pose, index_, cfg_.tracking.overlap_dist);
            if (overlap < cfg_.overlap_threshold) {
                s.decision = Decision::Tracking;
            } else if (index - last_keyframe_ >= cfg_.mapping_stride) {
                s.decision = Decision::MappingOnly;
            }
        }
        last_pose_ = s.pose;
        if (s.decision != Decision::None) last_keyframe_ = index;
        return s;
    }

    void absorb(const std::vector<Gaussian>& batch) {
        for (const auto& g : batch) index_.append(g);
    }

    [[nodiscard]] const Pose& last_pose() const { return last_pose_; }

private:
    const PipelineConfig& cfg_;
    SparseMapIndex index_;
    Pose last_pose_ = Pose::identity();
    int last_keyframe_ = 0;
};

inline std::string tracking_line(int index, const TrackResult& r) {
    std::ostringstream os;
    os << index << ' ' << r.iterations << ' ' << std::setprecision(9) << r.final_cost << ' ' << r.inlier_fraction << ' '
       << tum_pose_string(r.pose);
    return os.str();
}

// ---------------------------------------------------------------- run

struct RunResult {
    RunStatus status = RunStatus::Success;
    EvalReport report;
    Trajectory trajectory;
    GaussianMap dense{MapKind::Dense};
    GaussianMap sparse{MapKind::Sparse};
    std::vector<LossRecord> loss_trace;
    std::vector<std::string> tracking_log;
};

/// Renders every keyframe and every `heldout_stride`-th remaining frame from
/// the final maps at the estimated poses.
inline void evaluate_views(const PipelineConfig& cfg, const Sequence& seq, const Mapper& mapper,
                           const Trajectory& traj, EvalReport& report) {
    const auto& store = mapper.store();
    const GaussianSet set{mapper.dense().gaussians(), mapper.sparse().gaussians()};
    std::vector<char> is_keyframe(traj.size(), 0);
    double ssim_sum = 0.0;
    for (std::size_t k = 0; k < store.size(); ++k) {
        const Keyframe& kf = store[k];
        is_keyframe[static_cast<std::size_t>(kf.index)] = 1;
        const auto out = render(set, kf.pose, kf.frame.intrinsics, cfg.optimizer.render);
        report.psnr_per_keyframe.push_back(psnr(out.color, kf.frame.color));
        ssim_sum += ssim(out.color, kf.frame.color);
    }
    if (!store.empty()) {
        double sum = 0.0;
        for (double p : report.psnr_per_keyframe) sum += p;
        report.psnr_mean = sum / static_cast<double>(store.size());
        report.ssim_mean = ssim_sum / static_cast<double>(store.size());
    }
    double held_sum = 0.0;
    std::size_t held = 0;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < traj.size(); ++i) {
        if (is_keyframe[i]) continue;
        if (skipped++ % static_cast<std::size_t>(cfg.heldout_stride) != 0) continue;
        const RgbdFrame f = seq.frame(i);
        const auto out = render(set, traj[i].pose, f.intrinsics, cfg.optimizer.render);
        held_sum += psnr(out.color, f.color);
        ++held;
    }
    if (held > 0) report.heldout_psnr_mean = held_sum / static_cast<double>(held);
}

namespace detail {

inline void run_single(const PipelineConfig& cfg, const Sequence& seq, Mapper& mapper, RunResult& res,
                       const RunHooks& hooks) {
    Tracker tracker(cfg);
    for (std::size_t i = 0; i < seq.size(); ++i) {
        RgbdFrame frame = seq.frame(i);
        const auto step = tracker.track(frame, static_cast<int>(i));
        res.trajectory.push_back({frame.timestamp, step.pose});
        res.tracking_log.push_back(tracking_line(static_cast<int>(i), step.result));
        if (hooks.on_tracking_line) hooks.on_tracking_line(res.tracking_log.back());
        if (step.decision == Tracker::Decision::Tracking) {
            tracker.absorb(mapper.integrate_tracking_keyframe(std::move(frame), step.pose, step.cloud,
                                                              static_cast<int>(i)));
            mapper.optimize();
        } else if (step.decision == Tracker::Decision::MappingOnly) {
            mapper.add_mapping_keyframe(std::move(frame), step.pose, step.cloud, static_cast<int>(i));
        }
    }
}

/// Tracking on the calling thread, mapping on a worker. Tracking blocks on a
/// full queue and, at tracking keyframes, until the keyframe's sparse batch is
/// published, so its index only ever grows by whole batches.
inline void run_parallel(const PipelineConfig& cfg, const Sequence& seq, Mapper& mapper, RunResult& res,
                         const RunHooks& hooks) {
    BoundedQueue<MappingJob> queue(kMappingQueueCapacity);
    std::exception_ptr mapping_error;
    std::thread worker([&] {
        try {
            while (auto job = queue.pop()) {
                if (job->role == KeyframeRole::Tracking) {
                    auto batch = mapper.integrate_tracking_keyframe(std::move(job->frame), job->pose, job->cloud,
                                                                    job->index);
                    job->sparse_batch.set_value(std::move(batch));
                    mapper.optimize();
                } else {
                    mapper.add_mapping_keyframe(std::move(job->frame), job->pose, job->cloud, job->index);
                }
            }
        } catch (...) {
            mapping_error = std::current_exception();
            queue.close();
        }
    });

    try {
        Tracker tracker(cfg);
        for (std::size_t i = 0; i < seq.size(); ++i) {
            RgbdFrame frame = seq.frame(i);
            const auto step = tracker.track(frame, static_cast<int>(i));
            res.trajectory.push_back({frame.timestamp, step.pose});
            res.tracking_log.push_back(tracking_line(static_cast<int>(i), step.result));
            if (hooks.on_tracking_line) hooks.on_tracking_line(res.tracking_log.back());
            if (step.decision == Tracker::Decision::None) continue;
            MappingJob job{std::move(frame), step.pose, step.cloud, static_cast<int>(i),
                           step.decision == Tracker::Decision::Tracking ? KeyframeRole::Tracking
                                                                        : KeyframeRole::MappingOnly,
                           {}};
            auto published = job.sparse_batch.get_future();
            const bool tracking_kf = job.role == KeyframeRole::Tracking;
            if (!queue.push(std::move(job))) break;
            if (tracking_kf) {
                try {
                    tracker.absorb(published.get());
                } catch (const std::future_error&) {
                    break;  // the worker failed before publishing
                }
            }
        }
    } catch (...) {
        queue.close();
        worker.join();
        throw;
    }
    queue.close();
    worker.join();
    if (mapping_error) std::rethrow_exception(mapping_error);
}

}  // namespace detail

inline RunResult run_slam(const PipelineConfig& cfg, const Sequence& seq, const RunHooks& hooks = {}) {
    cfg.validate();
    if (seq.size() == 0) throw EmptyDataset("run_slam: dataset has no frames");
    RunResult res;
    Mapper mapper(cfg, hooks);
    const auto start = std::chrono::steady_clock::now();
    try {
        if (cfg.threads == ThreadMode::Single) {
            detail::run_single(cfg, seq, mapper, res, hooks);
        } else {
            detail::run_parallel(cfg, seq, mapper, res, hooks);
        }
    } catch (const TrackingDivergence& e) {
        res.status = RunStatus::TrackingDivergence;
        res.report.status = "tracking_divergence";
        res.report.error = e.what();
    } catch (const NumericalError& e) {
        res.status = RunStatus::NumericalError;
        res.report.status = "numerical_error";
        res.report.error = e.what();
    } catch (const InsufficientData& e) {
        res.status = RunStatus::TrackingDivergence;
        res.report.status = "tracking_divergence";
        res.report.error = e.what();
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    EvalReport& r = res.report;
    r.frames = res.trajectory.size();
    r.dropped_frames = seq.dropped;
    r.wall_seconds = seconds;
    r.fps = seconds > 0.0 ? static_cast<double>(r.frames) / seconds : 0.0;
    r.tracking_keyframes = mapper.tracking_keyframes();
    r.mapping_keyframes = mapper.mapping_keyframes();
    r.dense_count = mapper.dense().size();
    r.sparse_count = mapper.sparse().size();
    r.peak_map_bytes = mapper.peak_map_bytes();
    if (res.status == RunStatus::Success) {
        evaluate_views(cfg, seq, mapper, res.trajectory, r);
        if (!seq.ground_truth.empty()) {
            try {
                r.ate_rmse = ate_rmse(res.trajectory, seq.ground_truth);
            } catch (const InsufficientData&) {
                // Single-frame runs have nothing to align.
                if (res.trajectory.size() < 2) r.ate_rmse = 0.0;
            }
        }
    }
    res.loss_trace = mapper.loss_trace();
    res.dense = mapper.take_dense();
    res.sparse = mapper.take_sparse();
    return res;
}

// ---------------------------------------------------------------- outputs

inline void write_loss_trace(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
    std::ofstream os(path);
    os << "iteration,keyframe_index,total,color,depth,ssim,reg\n";
    os << std::setprecision(9);
    for (const auto& r : trace) {
        os << r.iteration << ',' << r.keyframe_index << ',' << r.terms.total << ',' << r.terms.color << ','
           << r.terms.depth << ',' << r.terms.ssim << ',' << r.terms.reg << '\n';
    }
}

inline void write_run_outputs(const std::filesystem::path& dir, const RunResult& res) {
    std::filesystem::create_directories(dir);
    write_trajectory(dir / "trajectory.txt", res.trajectory);
    write_ply(dir / "dense.ply", res.dense);
    write_ply(dir / "sparse.ply", res.sparse);
    write_loss_trace(dir / "loss_trace.csv", res.loss_trace);
    std::ofstream log(dir / "tracking.log");
    for (const auto& line : res.tracking_log) log << line << '\n';
    std::ofstream report(dir / "report.json");
    report << to_json(res.report).dump(2) << '\n';
}

/// PNGs of the insufficient-opacity, depth, color and combined missing masks
/// plus the spawned sample lattice as x,y,class CSV.
inline void write_debug_masks(const std::filesystem::path& dir, const DensifyTrace& t) {
    std::filesystem::create_directories(dir);
    std::ostringstream stem;
    stem << "kf_" << std::setw(6) << std::setfill('0') << t.frame_index;
    write_mask_png(dir / (stem.str() + "_insufficient.png"), t.missing.insufficient);
    write_mask_png(dir / (stem.str() + "_depth.png"), t.missing.depth_mismatch);
    write_mask_png(dir / (stem.str() + "_color.png"), t.missing.color_mismatch);
    write_mask_png(dir / (stem.str() + "_missing.png"), t.missing.combined);
    write_mask_png(dir / (stem.str() + "_high.png"), t.masks.high);
    std::ofstream csv(dir / (stem.str() + "_samples.csv"));
    csv << "x,y,class\n";
    for (const auto& p : t.samples.high) csv << p.x << ',' << p.y << ",high\n";
    for (const auto& p : t.samples.low) csv << p.x << ',' << p.y << ",low\n";
}

}  // namespace fgs
