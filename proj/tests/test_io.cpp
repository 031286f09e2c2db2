// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "fgs/io.hpp"
#include "test_util.hpp"

namespace fgs {
namespace {

std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("fgs_test_io_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

TEST(Ply, RoundTripAtFloatPrecision) {
    std::mt19937_64 rng(51);
    const auto dir = scratch_dir("ply");
    GaussianMap map;
    for (auto g : testing::random_scene(rng, 200, testing::small_camera())) {
        g.frequency_class = (map.size() % 3 == 0) ? FrequencyClass::High : FrequencyClass::Low;
        map.add(g);
    }
    write_ply(dir / "m.ply", map);
    const GaussianMap back = read_ply(dir / "m.ply");
    ASSERT_EQ(back.size(), map.size());
    for (std::size_t i = 0; i < map.size(); ++i) {
        EXPECT_LT((back[i].mu - map[i].mu).norm(), 1e-5);
        EXPECT_LT((back[i].scale - map[i].scale).norm(), 1e-6);
        EXPECT_LT(back[i].rotation.angularDistance(map[i].rotation), 1e-5);
        EXPECT_NEAR(back[i].opacity, map[i].opacity, 1e-6);
        EXPECT_LT((back[i].color - map[i].color).norm(), 1e-6);
        EXPECT_EQ(back[i].frequency_class, map[i].frequency_class);
    }
}

TEST(Ply, HeaderAndSize) {
    const auto dir = scratch_dir("ply_header");
    GaussianMap map;
    map.add(Gaussian{});
    map.add(Gaussian{});
    write_ply(dir / "m.ply", map);
    std::ifstream is(dir / "m.ply", std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const auto end = contents.find("end_header\n");
    ASSERT_NE(end, std::string::npos);
    EXPECT_EQ(contents.rfind("ply\nformat binary_little_endian 1.0\nelement vertex 2\n", 0), 0u);
    EXPECT_EQ(contents.size() - (end + 11), 2u * (14 * 4 + 1));
}

TEST(Ply, RejectsAsciiAndGarbage) {
    const auto dir = scratch_dir("ply_bad");
    std::ofstream(dir / "a.ply") << "ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
    EXPECT_THROW(read_ply(dir / "a.ply"), IoError);
    std::ofstream(dir / "b.ply") << "not a ply";
    EXPECT_THROW(read_ply(dir / "b.ply"), IoError);
    EXPECT_THROW(read_ply(dir / "missing.ply"), DatasetError);
}

TEST(DepthDump, RoundTripIsExact) {
    std::mt19937_64 rng(52);
    const auto dir = scratch_dir("fgsd");
    ImageF depth(13, 7);
    std::uniform_real_distribution<float> u(0.0f, 5.0f);
    for (auto& v : depth.data) v = u(rng);
    write_depth_dump(dir / "d.fgsd", depth);
    EXPECT_EQ(std::filesystem::file_size(dir / "d.fgsd"), 16u + 13 * 7 * 4);
    const ImageF back = read_depth_dump(dir / "d.fgsd");
    ASSERT_TRUE(back.same_shape(depth));
    EXPECT_EQ(back.data, depth.data);
}

TEST(DepthDump, RejectsBadMagic) {
    const auto dir = scratch_dir("fgsd_bad");
    std::ofstream(dir / "d.fgsd", std::ios::binary) << "FGSX0000000000000000";
    EXPECT_THROW(read_depth_dump(dir / "d.fgsd"), IoError);
}

TEST(Png, DepthRoundTripAtQuantization) {
    std::mt19937_64 rng(53);
    const auto dir = scratch_dir("png");
    ImageF depth(17, 9);
    std::uniform_real_distribution<float> u(0.1f, 6.0f);
    for (auto& v : depth.data) v = u(rng);
    depth(3, 4) = 0.0f;
    write_depth_png(dir / "d.png", depth);
    const ImageF back = read_depth_png(dir / "d.png");
    ASSERT_TRUE(back.same_shape(depth));
    for (std::size_t i = 0; i < depth.data.size(); ++i) EXPECT_NEAR(back.data[i], depth.data[i], 0.5 / 5000.0 + 1e-6);
    EXPECT_EQ(back(3, 4), 0.0f);
}

TEST(Png, ColorRoundTripAtQuantization) {
    std::mt19937_64 rng(54);
    const auto dir = scratch_dir("png_color");
    const ImageD img = testing::random_image(rng, 11, 6, 3);
    write_png(dir / "c.png", img);
    const ImageF back = read_color_png(dir / "c.png");
    ASSERT_TRUE(back.same_shape(img));
    ASSERT_EQ(back.channels, 3);
    for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-6);
}

TEST(Png, MissingFileIsDatasetError) {
    EXPECT_THROW(read_color_png("/nonexistent/x.png"), DatasetError);
}

TEST(Tum, ParseLine) {
    const auto sp = parse_tum_line("1305031102.175304 1.3405 0.6266 1.6575 0.6574 0.6126 -0.2949 -0.3248");
    EXPECT_DOUBLE_EQ(sp.timestamp, 1305031102.175304);
    EXPECT_TRUE(sp.pose.translation.isApprox(Vec3(1.3405, 0.6266, 1.6575)));
    const Quat q = Quat(-0.3248, 0.6574, 0.6126, -0.2949).normalized();
    EXPECT_LT(sp.pose.rotation.angularDistance(q), 1e-12);
    EXPECT_THROW(parse_tum_line("1.0 2.0 3.0"), IoError);
    EXPECT_THROW(parse_tum_line("0 0 0 0 0 0 0 0"), IoError);
    const auto bare = parse_tum_line("1 2 3 0 0 0 1", false);
    EXPECT_TRUE(bare.pose.translation.isApprox(Vec3(1, 2, 3)));
}

TEST(Tum, TrajectoryRoundTrip) {
    std::mt19937_64 rng(55);
    const auto dir = scratch_dir("traj");
    Trajectory t;
    for (int i = 0; i < 10; ++i) t.push_back({1.5 + i / 30.0, testing::random_pose(rng)});
    write_trajectory(dir / "t.txt", t);
    {
        std::ofstream os(dir / "t.txt", std::ios::app);
        os << "# trailing comment\n\n";
    }
    const Trajectory back = read_trajectory(dir / "t.txt");
    ASSERT_EQ(back.size(), t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_NEAR(back[i].timestamp, t[i].timestamp, 1e-6);
        EXPECT_LT((back[i].pose.translation - t[i].pose.translation).norm(), 1e-8);
        EXPECT_LT(back[i].pose.rotation.angularDistance(t[i].pose.rotation), 1e-8);
    }
}

}  // namespace
}  // namespace fgs
