// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// File formats: gaussian maps as binary PLY, PNG images, raw float depth dumps
// and TUM trajectory text.

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "fgs/core.hpp"
#include "fgs/metrics.hpp"

namespace fgs {

static_assert(std::endian::native == std::endian::little, "binary writers assume a little-endian host");

class IoError : public DatasetError {
public:
    using DatasetError::DatasetError;
};

// ---------------------------------------------------------------- PLY

namespace detail {

inline constexpr const char* kPlyFloatProps[] = {"x",     "y",     "z",     "scale_0", "scale_1", "scale_2",
                                                 "rot_0", "rot_1", "rot_2", "rot_3",   "opacity", "red",
                                                 "green", "blue"};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace detail

inline void write_ply(const std::filesystem::path& path, const GaussianMap& map) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_ply: cannot open " + path.string());
    os << "ply\nformat binary_little_endian 1.0\nelement vertex " << map.size() << "\n";
    for (const char* p : detail::kPlyFloatProps) os << "property float " << p << "\n";
    os << "property uchar freq_class\nend_header\n";
    for (const auto& g : map) {
        const float v[] = {float(g.mu.x()),       float(g.mu.y()),       float(g.mu.z()),
                           float(g.scale.x()),    float(g.scale.y()),    float(g.scale.z()),
                           float(g.rotation.w()), float(g.rotation.x()), float(g.rotation.y()),
                           float(g.rotation.z()), float(g.opacity),      float(g.color.x()),
                           float(g.color.y()),    float(g.color.z())};
        for (float f : v) detail::put(os, f);
        detail::put(os, static_cast<std::uint8_t>(g.frequency_class));
    }
    if (!os) throw IoError("write_ply: write failed for " + path.string());
}

inline GaussianMap read_ply(const std::filesystem::path& path, MapKind kind = MapKind::Dense) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_ply: cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    if (line != "ply") throw IoError("read_ply: not a PLY file");
    std::size_t count = 0;
    std::vector<std::string> props;
    bool binary = false;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string word;
        ls >> word;
        if (word == "format") {
            std::string fmt;
            ls >> fmt;
            binary = fmt == "binary_little_endian";
        } else if (word == "element") {
            std::string name;
            ls >> name >> count;
            if (name != "vertex") throw IoError("read_ply: unexpected element " + name);
        } else if (word == "property") {
            std::string type, name;
            ls >> type >> name;
            props.push_back(type + " " + name);
        } else if (word == "end_header") {
            break;
        }
    }
    if (!binary) throw IoError("read_ply: only binary_little_endian is supported");
    std::vector<std::string> expected;
    for (const char* p : detail::kPlyFloatProps) expected.push_back(std::string("float ") + p);
    expected.emplace_back("uchar freq_class");
    if (props != expected) throw IoError("read_ply: unexpected vertex layout");

    GaussianMap map(kind);
    map.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        float v[14];
        for (float& f : v) f = detail::get<float>(is);
        const auto cls = detail::get<std::uint8_t>(is);
        if (!is) throw IoError("read_ply: truncated file");
        Gaussian g;
        g.mu = Vec3(v[0], v[1], v[2]);
        g.scale = Vec3(v[3], v[4], v[5]);
        g.rotation = Quat(v[6], v[7], v[8], v[9]).normalized();
        g.opacity = v[10];
        g.color = Vec3(v[11], v[12], v[13]);
        g.frequency_class = cls ? FrequencyClass::High : FrequencyClass::Low;
        map.add(g);
    }
    return map;
}

// ---------------------------------------------------------------- PNG

/// Raw decoded PNG samples: 8- or 16-bit, 1 or 3 channels (alpha stripped,
/// palettes expanded).
struct RawPng {
    int width = 0;
    int height = 0;
    int channels = 0;
    int bit_depth = 0;
    std::vector<std::uint16_t> samples;
};

inline RawPng read_png(const std::filesystem::path& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError("read_png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    RawPng out;
    std::vector<png_bytep> rows;
    std::vector<std::uint8_t> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("read_png: decode failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (png_get_bit_depth(png, info) == 16) png_set_swap(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    buffer.resize(stride * out.height);
    rows.resize(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = buffer.data() + stride * y;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
    out.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (out.bit_depth == 16) {
            std::uint16_t v;
            std::memcpy(&v, buffer.data() + 2 * i, 2);
            out.samples[i] = v;
        } else {
            out.samples[i] = buffer[i];
        }
    }
    return out;
}

namespace detail {

inline void write_png_raw(const std::filesystem::path& path, int w, int h, int channels, int bit_depth,
                          const std::vector<std::uint8_t>& bytes) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("write_png: cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("write_png: encode failed for " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, w, h, bit_depth, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);
    const std::size_t stride = static_cast<std::size_t>(w) * channels * (bit_depth / 8);
    for (int y = 0; y < h; ++y) png_write_row(png, const_cast<png_bytep>(bytes.data() + stride * y));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace detail

/// 8-bit RGB or gray from values in [0,1].
template <typename T>
void write_png(const std::filesystem::path& path, const Image<T>& img) {
    if (img.channels != 1 && img.channels != 3) throw InvalidArgument("write_png: need 1 or 3 channels");
    std::vector<std::uint8_t> bytes(img.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = detail::to_byte(static_cast<double>(img.data[i]));
    detail::write_png_raw(path, img.width, img.height, img.channels, 8, bytes);
}

inline void write_mask_png(const std::filesystem::path& path, const Mask& m) {
    std::vector<std::uint8_t> bytes(m.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = m.data[i] ? 255 : 0;
    detail::write_png_raw(path, m.width, m.height, 1, 8, bytes);
}

/// 16-bit gray depth, `scale` counts per meter (TUM uses 5000).
template <typename T>
void write_depth_png(const std::filesystem::path& path, const Image<T>& depth, double scale = 5000.0) {
    std::vector<std::uint8_t> bytes(depth.data.size() * 2);
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        const double c = std::clamp(std::round(static_cast<double>(depth.data[i]) * scale), 0.0, 65535.0);
        const auto v = static_cast<std::uint16_t>(c);
        std::memcpy(bytes.data() + 2 * i, &v, 2);
    }
    detail::write_png_raw(path, depth.width, depth.height, 1, 16, bytes);
}

inline ImageF read_color_png(const std::filesystem::path& path) {
    const auto raw = read_png(path);
    if (raw.channels != 3 && raw.channels != 1) throw IoError("read_color_png: unsupported channel count");
    const double norm = raw.bit_depth == 16 ? 65535.0 : 255.0;
    ImageF img(raw.width, raw.height, 3);
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
        for (int c = 0; c < 3; ++c) {
            const auto s = raw.samples[p * raw.channels + (raw.channels == 3 ? c : 0)];
            img.data[p * 3 + c] = static_cast<float>(s / norm);
        }
    }
    return img;
}

inline ImageF read_depth_png(const std::filesystem::path& path, double scale = 5000.0) {
    const auto raw = read_png(path);
    if (raw.channels != 1 || raw.bit_depth != 16) throw IoError("read_depth_png: expected 16-bit gray");
    ImageF img(raw.width, raw.height, 1);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(raw.samples[i] / scale);
    return img;
}

// ---------------------------------------------------------------- raw depth

/// Flat float32 depth: "FGSD", u32 height, u32 width, u32 reserved, then H·W floats row-major.
template <typename T>
void write_depth_dump(const std::filesystem::path& path, const Image<T>& depth) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_depth_dump: cannot open " + path.string());
    os.write("FGSD", 4);
    detail::put(os, static_cast<std::uint32_t>(depth.height));
    detail::put(os, static_cast<std::uint32_t>(depth.width));
    detail::put(os, static_cast<std::uint32_t>(0));
    for (const auto& v : depth.data) detail::put(os, static_cast<float>(v));
}

inline ImageF read_depth_dump(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FGSD", 4) != 0) throw IoError("read_depth_dump: bad magic");
    const auto h = detail::get<std::uint32_t>(is);
    const auto w = detail::get<std::uint32_t>(is);
    detail::get<std::uint32_t>(is);
    ImageF img(static_cast<int>(w), static_cast<int>(h));
    for (auto& v : img.data) v = detail::get<float>(is);
    if (!is) throw IoError("read_depth_dump: truncated file");
    return img;
}

// ---------------------------------------------------------------- TUM text

/// "tx ty tz qx qy qz qw"
inline std::string tum_pose_string(const Pose& p) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(9) << p.translation.x() << ' ' << p.translation.y() << ' '
       << p.translation.z() << ' ' << p.rotation.x() << ' ' << p.rotation.y() << ' ' << p.rotation.z() << ' '
       << p.rotation.w();
    return os.str();
}

inline std::string tum_line(double timestamp, const Pose& p) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << timestamp << ' ' << tum_pose_string(p);
    return os.str();
}

/// Parses "[timestamp] tx ty tz qx qy qz qw"; with_timestamp selects the 8-field form.
inline StampedPose parse_tum_line(const std::string& line, bool with_timestamp = true) {
    std::istringstream ls(line);
    StampedPose sp;
    double v[7];
    if (with_timestamp) ls >> sp.timestamp;
    for (double& x : v) ls >> x;
    if (!ls) throw IoError("parse_tum_line: malformed pose line '" + line + "'");
    sp.pose.translation = Vec3(v[0], v[1], v[2]);
    const Quat q(v[6], v[3], v[4], v[5]);
    if (q.norm() < 1e-12) throw IoError("parse_tum_line: zero quaternion");
    sp.pose.rotation = q.normalized();
    return sp;
}

inline Trajectory read_trajectory(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("read_trajectory: cannot open " + path.string());
    Trajectory t;
    std::string line;
    while (std::getline(is, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        t.push_back(parse_tum_line(line));
    }
    return t;
}

inline void write_trajectory(const std::filesystem::path& path, const Trajectory& traj) {
    std::ofstream os(path);
    if (!os) throw IoError("write_trajectory: cannot open " + path.string());
    for (const auto& sp : traj) os << tum_line(sp.timestamp, sp.pose) << '\n';
}

}  // namespace fgs
