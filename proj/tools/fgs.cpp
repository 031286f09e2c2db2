// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: run, synth, eval, render.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "fgs/dataset.hpp"
#include "fgs/io.hpp"
#include "fgs/keyvalue.hpp"
#include "fgs/metrics.hpp"
#include "fgs/pipeline.hpp"
#include "fgs/render.hpp"

namespace {

constexpr int kExitDataset = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitNumerical = 4;

int run_command(const std::string& config_path, const std::map<std::string, std::string>& overrides,
                bool debug_masks) {
    fgs::KeyValues kv;
    if (!config_path.empty()) kv = fgs::KeyValues::load(config_path);
    for (const auto& [k, v] : overrides) kv.set(k, v);
    if (debug_masks) kv.set("debug-masks", "true");
    const auto cfg = fgs::PipelineConfig::from_key_values(kv);
    if (cfg.dataset.empty()) throw fgs::InvalidArgument("--dataset is required");

    const std::filesystem::path out = cfg.out;
    std::filesystem::create_directories(out);
    const auto seq = fgs::open_dataset(cfg);
    if (seq.dropped > 0) std::cerr << "warning: " << seq.dropped << " color frames without depth were dropped\n";

    fgs::RunHooks hooks;
    hooks.on_tracking_line = [](const std::string& line) { std::cout << line << '\n'; };
    if (cfg.debug_masks) {
        hooks.on_densify = [&out](const fgs::DensifyTrace& t) { fgs::write_debug_masks(out / "debug", t); };
    }
    const auto result = fgs::run_slam(cfg, seq, hooks);
    fgs::write_run_outputs(out, result);

    const auto& r = result.report;
    std::cerr << "frames " << r.frames << ", keyframes " << r.tracking_keyframes << "+" << r.mapping_keyframes
              << ", dense " << r.dense_count << ", sparse " << r.sparse_count << ", psnr " << r.psnr_mean;
    if (r.ate_rmse) std::cerr << ", ate " << *r.ate_rmse;
    std::cerr << ", fps " << r.fps << '\n';
    switch (result.status) {
    case fgs::RunStatus::TrackingDivergence:
        std::cerr << "tracking diverged: " << r.error << '\n';
        return kExitDivergence;
    case fgs::RunStatus::NumericalError:
        std::cerr << "numerical error: " << r.error << '\n';
        return kExitNumerical;
    default:
        return 0;
    }
}

int synth_command(const std::string& spec_path, int frames, const std::string& out_dir) {
    const auto kv = fgs::KeyValues::load(spec_path);
    const auto spec = fgs::SceneSpec::from_key_values(kv);
    const auto seq = fgs::generate_synthetic_sequence(spec, static_cast<std::size_t>(frames));
    const std::filesystem::path out = out_dir;
    fgs::write_tum_sequence(out, seq);
    std::filesystem::copy_file(spec_path, out / "scene.txt", std::filesystem::copy_options::overwrite_existing);
    std::ofstream(out / "scene.txt", std::ios::app) << "\nframes = " << frames << "\n";
    return 0;
}

int eval_command(const std::string& traj, const std::string& gt) {
    const double rmse = fgs::ate_rmse(fgs::read_trajectory(traj), fgs::read_trajectory(gt));
    std::printf("ate_rmse %.9f\n", rmse);
    return 0;
}

int render_command(const std::vector<std::string>& maps, const std::string& pose_line, const std::string& out,
                   const fgs::CameraIntrinsics& intr) {
    std::vector<fgs::GaussianMap> loaded;
    for (const auto& m : maps) loaded.push_back(fgs::read_ply(m));
    fgs::GaussianSet set;
    for (const auto& m : loaded) set.push_back(m.gaussians());
    std::istringstream fields(pose_line);
    int count = 0;
    for (std::string tok; fields >> tok;) ++count;
    const auto pose = fgs::parse_tum_line(pose_line, count == 8).pose;
    const auto image = fgs::render(set, pose, intr, fgs::RenderConfig{});
    fgs::write_png(out, image.color);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frequency-guided gaussian splatting RGB-D SLAM"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run SLAM on a dataset");
    std::string config_path;
    bool debug_masks = false;
    std::map<std::string, std::string> overrides;
    run->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    run->add_flag("--debug-masks", debug_masks, "write mask PNGs and sample CSVs per keyframe");
    for (const auto& key : fgs::config_keys()) {
        const std::string name = key.name;
        if (name == "debug-masks") continue;
        run->add_option_function<std::string>(
            "--" + name, [&overrides, name](const std::string& v) { overrides[name] = v; }, key.help);
    }

    auto* synth = app.add_subcommand("synth", "write a synthetic box-room sequence in TUM layout");
    std::string spec_path;
    std::string synth_out;
    int frames = 50;
    synth->add_option("--spec", spec_path, "scene spec file")->required()->check(CLI::ExistingFile);
    synth->add_option("--frames", frames, "frame count")->check(CLI::PositiveNumber);
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* eval = app.add_subcommand("eval", "ATE RMSE of a TUM trajectory against ground truth");
    std::string traj_path;
    std::string gt_path;
    eval->add_option("--traj", traj_path)->required()->check(CLI::ExistingFile);
    eval->add_option("--gt", gt_path)->required()->check(CLI::ExistingFile);

    auto* rend = app.add_subcommand("render", "render PLY maps from a pose");
    std::vector<std::string> maps;
    std::string pose_line;
    std::string render_out;
    fgs::CameraIntrinsics intr{260.0, 260.0, 159.5, 119.5, 320, 240};
    rend->add_option("--map", maps, "PLY map (repeat to render several together)")->required();
    rend->add_option("--pose", pose_line, "\"[timestamp] tx ty tz qx qy qz qw\"")->required();
    rend->add_option("--out", render_out, "output PNG")->required();
    rend->add_option("--width", intr.width);
    rend->add_option("--height", intr.height);
    rend->add_option("--fx", intr.fx);
    rend->add_option("--fy", intr.fy);
    rend->add_option("--cx", intr.cx);
    rend->add_option("--cy", intr.cy);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return run_command(config_path, overrides, debug_masks);
        if (*synth) return synth_command(spec_path, frames, synth_out);
        if (*eval) return eval_command(traj_path, gt_path);
        if (*rend) return render_command(maps, pose_line, render_out, intr);
    } catch (const fgs::DatasetError& e) {
        std::cerr << "dataset error: " << e.what() << '\n';
        return kExitDataset;
    } catch (const fgs::TrackingDivergence& e) {
        std::cerr << "tracking diverged: " << e.what() << '\n';
        return kExitDivergence;
    } catch (const fgs::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
