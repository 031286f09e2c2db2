// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// RGB-D sequences: the TUM directory layout and a procedural textured box room.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "fgs/core.hpp"
#include "fgs/io.hpp"
#include "fgs/keyvalue.hpp"
#include "fgs/metrics.hpp"

namespace fgs {

/// Frames are produced on demand so long sequences never sit in memory at once.
struct Sequence {
    std::vector<double> timestamps;
    std::function<RgbdFrame(std::size_t)> load;
    Trajectory ground_truth;
    std::size_t dropped = 0;  // color images without a depth partner

    [[nodiscard]] std::size_t size() const { return timestamps.size(); }
    [[nodiscard]] RgbdFrame frame(std::size_t i) const { return load(i); }
};

// ---------------------------------------------------------------- TUM

namespace detail {

struct StampedFile {
    double timestamp = 0.0;
    std::string file;
};

inline std::vector<StampedFile> read_file_list(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DatasetError("missing " + path.string());
    std::vector<StampedFile> out;
    std::string line;
    while (std::getline(is, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        StampedFile sf;
        if (!(ls >> sf.timestamp >> sf.file)) throw DatasetError("malformed line in " + path.string() + ": " + line);
        out.push_back(sf);
    }
    return out;
}

}  // namespace detail

inline constexpr double kTumMaxTimeDifference = 0.02;
inline constexpr double kTumDepthScale = 5000.0;

/// Pairs each color image with the nearest unused depth image within 0.02 s.
/// Image size is taken from the files; `intrinsics` supplies focal length and
/// principal point.
inline Sequence load_tum_rgbd(const std::filesystem::path& dir, CameraIntrinsics intrinsics) {
    const auto rgb = detail::read_file_list(dir / "rgb.txt");
    const auto depth = detail::read_file_list(dir / "depth.txt");

    std::vector<std::pair<detail::StampedFile, detail::StampedFile>> pairs;
    std::vector<char> used(depth.size(), 0);
    for (const auto& c : rgb) {
        std::size_t best = depth.size();
        double best_dt = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < depth.size(); ++j) {
            const double dt = std::abs(depth[j].timestamp - c.timestamp);
            if (!used[j] && dt < best_dt) {
                best = j;
                best_dt = dt;
            }
        }
        if (best_dt > kTumMaxTimeDifference) best = depth.size();
        if (best == depth.size()) continue;
        used[best] = 1;
        pairs.emplace_back(c, depth[best]);
    }

    Sequence seq;
    seq.dropped = rgb.size() - pairs.size();
    if (pairs.empty()) throw EmptyDataset("load_tum_rgbd: no color/depth associations in " + dir.string());
    for (const auto& p : pairs) seq.timestamps.push_back(p.first.timestamp);
    if (std::filesystem::exists(dir / "groundtruth.txt")) seq.ground_truth = read_trajectory(dir / "groundtruth.txt");

    seq.load = [dir, pairs, intrinsics](std::size_t i) {
        RgbdFrame f;
        try {
            f.color = read_color_png(dir / pairs[i].first.file);
            f.depth = read_depth_png(dir / pairs[i].second.file, kTumDepthScale);
        } catch (const IoError& e) {
            throw DatasetError(e.what());
        }
        f.timestamp = pairs[i].first.timestamp;
        f.intrinsics = intrinsics;
        f.intrinsics.width = f.depth.width;
        f.intrinsics.height = f.depth.height;
        if (!f.color.same_shape(f.depth)) throw DatasetError("color and depth sizes differ at " + pairs[i].first.file);
        return f;
    };
    return seq;
}

// ---------------------------------------------------------------- synthetic room

/// Closed box room centered on the origin (y points down, like the camera),
/// viewed from a camera that orbits a vertical axis while panning.
struct SceneSpec {
    int width = 320;
    int height = 240;
    double fx = 260.0;
    double fy = 260.0;
    double cx = 159.5;
    double cy = 119.5;
    double room_x = 2.0;  // full extents, meters
    double room_y = 2.0;
    double room_z = 4.0;
    double fps = 30.0;
    double orbit_radius = 0.25;
    double orbit_start = 0.0;  // radians
    double orbit_step = 0.02;  // radians per frame
    double yaw_start = 0.3;    // radians, positive turns toward +x
    double yaw_step = -0.012;
    double pitch = 0.2;  // radians, positive looks toward the floor
    double camera_y = 0.0;
    double checker_size = 0.25;
    double edge_width = 0.02;
    double noise_cell = 0.5;
    double depth_noise = 0.0;  // gaussian sigma in meters
    std::uint64_t seed = 0;

    static SceneSpec from_key_values(const KeyValues& kv) {
        SceneSpec s;
        s.width = kv.get("width", s.width);
        s.height = kv.get("height", s.height);
        s.fx = kv.get("fx", s.fx);
        s.fy = kv.get("fy", s.fy);
        s.cx = kv.get("cx", 0.5 * (s.width - 1));
        s.cy = kv.get("cy", 0.5 * (s.height - 1));
        s.room_x = kv.get("room_x", s.room_x);
        s.room_y = kv.get("room_y", s.room_y);
        s.room_z = kv.get("room_z", s.room_z);
        s.fps = kv.get("fps", s.fps);
        s.orbit_radius = kv.get("orbit_radius", s.orbit_radius);
        s.orbit_start = kv.get("orbit_start", s.orbit_start);
        s.orbit_step = kv.get("orbit_step", s.orbit_step);
        s.yaw_start = kv.get("yaw_start", s.yaw_start);
        s.yaw_step = kv.get("yaw_step", s.yaw_step);
        s.pitch = kv.get("pitch", s.pitch);
        s.camera_y = kv.get("camera_y", s.camera_y);
        s.checker_size = kv.get("checker_size", s.checker_size);
        s.edge_width = kv.get("edge_width", s.edge_width);
        s.noise_cell = kv.get("noise_cell", s.noise_cell);
        s.depth_noise = kv.get("depth_noise", s.depth_noise);
        s.seed = kv.get("seed", s.seed);
        return s;
    }

    [[nodiscard]] CameraIntrinsics intrinsics() const { return {fx, fy, cx, cy, width, height}; }

    [[nodiscard]] Vec3 half_extents() const { return 0.5 * Vec3(room_x, room_y, room_z); }

    [[nodiscard]] Pose pose(std::size_t frame) const {
        const double k = static_cast<double>(frame);
        const double theta = orbit_start + orbit_step * k;
        const double yaw = yaw_start + yaw_step * k;
        Pose p;
        p.rotation = (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(-pitch, Vec3::UnitX())).normalized();
        p.translation = Vec3(orbit_radius * std::sin(theta), camera_y, -orbit_radius * std::cos(theta));
        return p;
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Uniform [0,1) value attached to an integer lattice node.
inline double lattice_value(std::uint64_t seed, int face, std::int64_t i, std::int64_t j) {
    std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(face) << 56));
    h = splitmix64(h ^ static_cast<std::uint64_t>(i));
    h = splitmix64(h ^ static_cast<std::uint64_t>(j));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Smoothly interpolated lattice noise in [0,1].
inline double value_noise(std::uint64_t seed, int face, double a, double b) {
    const double fa = std::floor(a);
    const double fb = std::floor(b);
    const auto i = static_cast<std::int64_t>(fa);
    const auto j = static_cast<std::int64_t>(fb);
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double u = smooth(a - fa);
    const double v = smooth(b - fb);
    const double v00 = lattice_value(seed, face, i, j);
    const double v10 = lattice_value(seed, face, i + 1, j);
    const double v01 = lattice_value(seed, face, i, j + 1);
    const double v11 = lattice_value(seed, face, i + 1, j + 1);
    return (v00 * (1 - u) + v10 * u) * (1 - v) + (v01 * (1 - u) + v11 * u) * v;
}

inline Vec3 mix(const Vec3& a, const Vec3& b, double t) { return a + (b - a) * t; }

inline double soft_checker(double a, double b, double size, double edge) {
    const double s = std::sin(std::numbers::pi * a / size) * std::sin(std::numbers::pi * b / size);
    return 0.5 + 0.5 * std::tanh(s * size / (std::numbers::pi * edge));
}

inline double fractal_noise(std::uint64_t seed, int face, double a, double b, double cell) {
    return (2.0 * value_noise(seed, face, a / cell, b / cell) +
            value_noise(seed, face + 8, 2.0 * a / cell, 2.0 * b / cell)) /
           3.0;
}

}  // namespace detail

/// Faces are numbered 0..5 as +x, -x, +y (floor), -y (ceiling), +z, -z.
inline Vec3 room_texture(const SceneSpec& s, int face, const Vec3& p) {
    using detail::mix;
    const double edge = s.edge_width;
    switch (face) {
    case 0: {  // right wall: noise
        const double n = detail::fractal_noise(s.seed, face, p.z(), p.y(), s.noise_cell);
        return mix(Vec3(0.25, 0.45, 0.30), Vec3(0.85, 0.80, 0.55), n);
    }
    case 1: {  // left wall: smooth gradient
        const double t = 0.5 + 0.5 * std::sin(0.8 * p.z() + 0.5 * p.y());
        return mix(Vec3(0.70, 0.35, 0.30), Vec3(0.30, 0.50, 0.75), t);
    }
    case 2: {  // floor: noise tiles
        const double n = detail::fractal_noise(s.seed, face, p.x(), p.z(), s.noise_cell);
        const double c = detail::soft_checker(p.x(), p.z(), 2.0 * s.checker_size, edge);
        return mix(Vec3(0.45, 0.35, 0.25), Vec3(0.80, 0.70, 0.55), 0.6 * n + 0.4 * c);
    }
    case 3: {  // ceiling: gradient
        const double t = 0.5 + 0.5 * std::cos(0.6 * p.x() + 0.4 * p.z());
        return mix(Vec3(0.85, 0.85, 0.80), Vec3(0.60, 0.65, 0.70), t);
    }
    case 4: {  // front wall: checker poster on a gradient
        const Vec3 base = mix(Vec3(0.80, 0.70, 0.45), Vec3(0.40, 0.55, 0.60), 0.5 + 0.5 * std::sin(0.9 * p.x() - 0.3));
        const double inside_x = 0.5 * (std::tanh((p.x() + 0.9) / edge) - std::tanh((p.x() - 0.5) / edge));
        const double inside_y = 0.5 * (std::tanh((p.y() + 0.6) / edge) - std::tanh((p.y() - 0.3) / edge));
        const double c = detail::soft_checker(p.x() + 0.05, p.y() + 0.1, s.checker_size, edge);
        const Vec3 poster = mix(Vec3(0.15, 0.20, 0.30), Vec3(0.90, 0.88, 0.80), c);
        return mix(base, poster, inside_x * inside_y);
    }
    default: {  // back wall: checker
        const double c = detail::soft_checker(p.x(), p.y(), s.checker_size, edge);
        return mix(Vec3(0.60, 0.25, 0.20), Vec3(0.95, 0.90, 0.70), c);
    }
    }
}

/// Renders one exact color/depth frame at the spec's path position `index`.
inline RgbdFrame render_room_frame(const SceneSpec& s, std::size_t index) {
    const Pose pose = s.pose(index);
    const Mat3 r = pose.rotation_matrix();
    const Vec3 o = pose.translation;
    const Vec3 half = s.half_extents();
    RgbdFrame f;
    f.intrinsics = s.intrinsics();
    f.timestamp = static_cast<double>(index) / s.fps;
    f.color = ImageF(s.width, s.height, 3);
    f.depth = ImageF(s.width, s.height, 1);
    for (int y = 0; y < s.height; ++y) {
        for (int x = 0; x < s.width; ++x) {
            // Ray with unit camera z so the hit parameter equals the depth.
            const Vec3 dir = r * Vec3((x - s.cx) / s.fx, (y - s.cy) / s.fy, 1.0);
            double t = std::numeric_limits<double>::infinity();
            int face = 0;
            for (int a = 0; a < 3; ++a) {
                if (dir[a] == 0.0) continue;
                const double bound = dir[a] > 0.0 ? half[a] : -half[a];
                const double ta = (bound - o[a]) / dir[a];
                if (ta < t) {
                    t = ta;
                    face = 2 * a + (dir[a] > 0.0 ? 0 : 1);
                }
            }
            const Vec3 c = room_texture(s, face, o + t * dir);
            for (int ch = 0; ch < 3; ++ch) f.color(x, y, ch) = static_cast<float>(std::clamp(c[ch], 0.0, 1.0));
            f.depth(x, y) = static_cast<float>(t);
        }
    }
    if (s.depth_noise > 0.0) {
        std::uint64_t state = detail::splitmix64(s.seed ^ (0xd1b54a32d192ed03ULL * (index + 1)));
        auto uniform = [&state] {
            state = detail::splitmix64(state);
            return (static_cast<double>(state >> 11) + 0.5) * 0x1.0p-53;
        };
        for (auto& d : f.depth.data) {
            const double n = std::sqrt(-2.0 * std::log(uniform())) * std::cos(2.0 * std::numbers::pi * uniform());
            d = static_cast<float>(std::max(0.0, d + s.depth_noise * n));
        }
    }
    return f;
}

inline Sequence generate_synthetic_sequence(const SceneSpec& spec, std::size_t frames) {
    if (frames < 1) throw InvalidArgument("generate_synthetic_sequence: need at least one frame");
    Sequence seq;
    for (std::size_t i = 0; i < frames; ++i) {
        const double ts = static_cast<double>(i) / spec.fps;
        seq.timestamps.push_back(ts);
        seq.ground_truth.push_back({ts, spec.pose(i)});
    }
    seq.load = [spec](std::size_t i) { return render_room_frame(spec, i); };
    return seq;
}

/// Writes a sequence in the TUM layout (16-bit depth at 5000 counts/m) plus
/// camera.txt with the intrinsics.
inline void write_tum_sequence(const std::filesystem::path& dir, const Sequence& seq) {
    std::filesystem::create_directories(dir / "rgb");
    std::filesystem::create_directories(dir / "depth");
    std::ofstream rgb(dir / "rgb.txt");
    std::ofstream depth(dir / "depth.txt");
    rgb << "# timestamp filename\n";
    depth << "# timestamp filename\n";
    CameraIntrinsics intr;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const RgbdFrame f = seq.frame(i);
        intr = f.intrinsics;
        std::ostringstream name;
        name << std::fixed << std::setprecision(6) << f.timestamp << ".png";
        write_png(dir / "rgb" / name.str(), f.color);
        write_depth_png(dir / "depth" / name.str(), f.depth, kTumDepthScale);
        rgb << std::fixed << std::setprecision(6) << f.timestamp << " rgb/" << name.str() << "\n";
        depth << std::fixed << std::setprecision(6) << f.timestamp << " depth/" << name.str() << "\n";
    }
    write_trajectory(dir / "groundtruth.txt", seq.ground_truth);
    std::ofstream cam(dir / "camera.txt");
    cam << std::setprecision(17) << "fx = " << intr.fx << "\nfy = " << intr.fy << "\ncx = " << intr.cx
        << "\ncy = " << intr.cy << "\n";
}

}  // namespace fgs
