// splatflow command line: synthesize scene bundles, train the velocity field
// and feature decoder, render looped animations, evaluate against exact
// ground truth, edit scenes, and verify gradients by finite differences.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splatflow/pipeline.hpp"

using namespace splatflow;

namespace {

double mean_of(const std::vector<double> &v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double seconds_since(const std::chrono::steady_clock::time_point &t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

// ------------------------------------------------------------------- synth

struct SynthArgs {
    std::string out;
    int width = 256, height = 256, frames = 30;
    double fps = 12.0;
    double u_inf = 1.0, half_width = 5.0, length = 40.0, focal = 170.0;
    bool rock = false, nadir = false;
    double rock_cx = 0.0, rock_cy = 0.0, rock_radius = 1.5;
    bool drift = false;
    double drift_base = 0.5, drift_ramp = 0.0;
    double sweep = 0.8, texture_period = 0.0;
};

int run_synth(const SynthArgs &a) {
    synth::RiverSceneConfig rc;
    rc.width = a.width;
    rc.height = a.height;
    rc.frames = a.frames;
    rc.fps = a.fps;
    rc.u_inf = a.u_inf;
    rc.half_width = a.half_width;
    rc.length = a.length;
    rc.focal = a.focal;
    rc.with_rock = a.rock;
    rc.rock = {a.rock_cx, a.rock_cy, a.rock_radius};
    rc.nadir = a.nadir;
    rc.novel_view_sweep = a.sweep;
    rc.texture_period_x = a.texture_period;
    const auto scn = a.drift ? synth::make_drift_scene(a.drift_base, a.drift_ramp, rc)
                             : synth::make_river_scene(rc);
    synth::save_synthetic_scene(scn, a.out);
    std::cout << "wrote " << scn.field.kind << " scene (" << a.width << "x"
              << a.height << ", " << a.frames << " frames"
              << (a.rock ? ", rock" : "") << ") to " << a.out << "\n";
    return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
    std::string scene, out, stage = "dynamics";
    train::TrainConfig cfg;
    int exact_flow = 0;
    bool no_physics = false, no_force = false, no_hints = false;
};

int run_train(TrainArgs &a) {
    const auto scn = synth::load_synthetic_scene(a.scene);
    a.cfg.physics_on = !a.no_physics;
    a.cfg.force_on = !a.no_force;
    a.cfg.hints_on = !a.no_hints;
    std::filesystem::create_directories(a.out);

    if (a.stage == "dynamics" || a.stage == "both") {
        auto data = pipe::dynamics_data(scn, a.exact_flow, a.cfg.seed);
        train::TrainConfig cfg = a.cfg;
        cfg.checkpoint_dir = a.out;
        const auto res = train::train_dynamics(data, cfg);
        train::save_log_csv(res.log, a.out + "/train_log.csv");
        std::cout << "dynamics: " << res.log.rows.size() << " iterations in "
                  << res.log.wall_seconds << " s";
        if (!res.log.rows.empty())
            std::cout << ", final total " << res.log.rows.back().total;
        if (res.log.aborted)
            std::cout << " (aborted, restored iteration "
                      << res.log.restored_iteration << ")";
        std::cout << "\n";
    }
    if (a.stage == "decoder" || a.stage == "both") {
        const auto g0 = scene::gaussians_from_image(scn.bundle.image,
                                                    scn.bundle.depth,
                                                    scn.bundle.mask,
                                                    scn.bundle.camera);
        train::DecoderData data;
        data.samples.push_back(
            {render::rasterize(g0, scn.bundle.camera), scn.bundle.image});
        const auto res = train::train_decoder(data, a.cfg);
        field::save_params(res.params, a.out + "/decoder.splat");
        train::save_log_csv(res.log, a.out + "/decoder_log.csv");
        if (res.params.count() == 0)
            std::cout << "decoder: identity (payloads are already RGB)\n";
        else
            std::cout << "decoder: " << res.log.rows.size() << " iterations in "
                      << res.log.wall_seconds << " s\n";
    }
    if (a.stage != "dynamics" && a.stage != "decoder" && a.stage != "both")
        throw ArgumentError("train: stage must be dynamics, decoder, or both");
    return 0;
}

// ----------------------------------------------------------------- animate

struct AnimateArgs {
    std::string scene, checkpoint, out, decoder;
    int frames = 0, loop = 0;
    double fps = 0.0;
    bool no_symmetric = false, pin_features = false, fixed_camera = false;
};

int run_animate(const AnimateArgs &a) {
    const auto scn = synth::load_synthetic_scene(a.scene);
    const auto model = field::load_checkpoint(a.checkpoint);

    scene::CameraPath traj = scn.bundle.trajectory;
    anim::AnimationConfig cfg;
    cfg.frames = a.frames > 0 ? a.frames : traj.frames();
    cfg.fps = a.fps > 0 ? a.fps : traj.fps;
    cfg.symmetric_splatting = !a.no_symmetric;
    cfg.loop_period = a.loop;
    cfg.features_at_advected = !a.pin_features;
    if (a.fixed_camera)
        traj.poses.assign(size_t(cfg.frames), traj.poses.at(0));
    else if (cfg.frames < traj.frames())
        traj.poses.resize(size_t(cfg.frames));
    else if (cfg.frames > traj.frames())
        throw ArgumentError("animate: more frames requested than the scene "
                            "trajectory provides (use --fixed-camera)");
    traj.fps = cfg.fps;

    ad::ParameterSet decoder;
    if (!a.decoder.empty()) field::load_params(decoder, a.decoder);
    scene::SceneBundle bundle = scn.bundle;
    bundle.trajectory = traj;
    const auto frames = pipe::animate_frames(
        bundle, model, cfg, {}, a.decoder.empty() ? nullptr : &decoder);
    anim::save_video(frames, traj, a.out);
    std::cout << "wrote " << frames.size() << " frames to " << a.out << "\n";
    return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
    std::string scene, checkpoint, out;
    bool oracle = false;
    pipe::EvalOptions opt;
};

int run_eval(const EvalArgs &a) {
    const auto scn = synth::load_synthetic_scene(a.scene);
    metrics::EvalReport report;
    if (a.oracle) {
        // Self-check: the exact field against itself and the ground-truth
        // frames against themselves.
        const auto gt = synth::render_ground_truth(scn, scn.bundle.trajectory);
        const physics::AnalyticSource oracle(scn.field.dual);
        report = pipe::evaluate_fields(scn, gt, oracle, a.opt);
    } else {
        if (a.checkpoint.empty())
            throw ArgumentError("eval: --checkpoint required unless --oracle");
        const auto model = field::load_checkpoint(a.checkpoint);
        anim::AnimationConfig cfg;
        cfg.frames = scn.bundle.trajectory.frames();
        cfg.fps = scn.bundle.trajectory.fps;
        const auto t0 = std::chrono::steady_clock::now();
        const auto frames = pipe::animate_frames(scn.bundle, model, cfg);
        const double render_s = seconds_since(t0);
        const physics::ModelSource src(model);
        report = pipe::evaluate_fields(scn, frames, src, a.opt);
        report.render_seconds = render_s;
    }
    if (!a.out.empty()) {
        const auto parent = std::filesystem::path(a.out).parent_path();
        if (!parent.empty()) std::filesystem::create_directories(parent);
        metrics::save_report_csv(report, a.out + ".csv");
        metrics::save_report_jsonl(report, a.out + ".jsonl");
    }
    std::printf("psnr %.4f  ssim %.6f  epe %.6g  l1 %.6g  div %.6g  "
                "violation %.6g\n",
                mean_of(report.frame_psnr), mean_of(report.frame_ssim),
                report.epe, report.l1_component, report.mean_abs_div,
                report.boundary_violation);
    if (!a.out.empty())
        std::cout << "wrote " << a.out << ".csv and " << a.out << ".jsonl\n";
    return 0;
}

// -------------------------------------------------------------------- edit

struct EditArgs {
    std::string scene, out;
    double cx = 0.0, cy = 0.0, radius = 1.0;
};

int run_edit(const EditArgs &a) {
    const auto scn = synth::load_synthetic_scene(a.scene);
    const auto edited =
        synth::edit_scene_add_obstacle(scn, {a.cx, a.cy, a.radius});
    synth::save_synthetic_scene(edited, a.out);
    std::cout << "added obstacle (cx " << a.cx << ", cy " << a.cy << ", r "
              << a.radius << "), wrote " << a.out << "\n";
    return 0;
}

// --------------------------------------------------------------- gradcheck

struct GradArgs {
    uint64_t seed = 1;
    double step = 1e-5, tolerance = 1e-4;
};

int run_gradcheck(const GradArgs &a) {
    const auto checks = pipe::gradcheck_all(a.seed, a.step);
    bool ok = true;
    for (const auto &c : checks) {
        std::printf("%-10s params %4d  max_rel_error %.3e\n", c.loss.c_str(),
                    c.params, c.max_rel_error);
        ok = ok && c.max_rel_error < a.tolerance;
    }
    if (!ok) {
        std::cerr << "gradcheck failed: max relative error exceeds "
                  << a.tolerance << "\n";
        return 1;
    }
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"physics-informed fluid animation from a single image"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read options from an INI file");
    int threads = 1;
    app.add_option("--threads", threads, "worker threads for per-frame metrics")
        ->envname("SPLATFLOW_THREADS")
        ->check(CLI::PositiveNumber);

    SynthArgs sa;
    auto *synth_cmd =
        app.add_subcommand("synth", "generate a synthetic scene bundle");
    synth_cmd->add_option("--out", sa.out, "output directory")->required();
    synth_cmd->add_option("--width", sa.width);
    synth_cmd->add_option("--height", sa.height);
    synth_cmd->add_option("--frames", sa.frames);
    synth_cmd->add_option("--fps", sa.fps);
    synth_cmd->add_option("--u-inf", sa.u_inf, "free-stream speed");
    synth_cmd->add_option("--half-width", sa.half_width, "channel half-width");
    synth_cmd->add_option("--length", sa.length, "channel length");
    synth_cmd->add_option("--focal", sa.focal, "focal length in pixels");
    synth_cmd->add_flag("--rock", sa.rock, "place a cylindrical obstacle");
    synth_cmd->add_option("--rock-cx", sa.rock_cx);
    synth_cmd->add_option("--rock-cy", sa.rock_cy);
    synth_cmd->add_option("--rock-radius", sa.rock_radius);
    synth_cmd->add_flag("--nadir", sa.nadir, "straight-down camera");
    synth_cmd->add_flag("--drift", sa.drift,
                        "uniform accelerating drift field instead of a river");
    synth_cmd->add_option("--drift-base", sa.drift_base, "drift base speed");
    synth_cmd->add_option("--drift-ramp", sa.drift_ramp, "drift acceleration");
    synth_cmd->add_option("--sweep", sa.sweep, "novel-view camera travel");
    synth_cmd->add_option("--texture-period", sa.texture_period,
                          "tile the water texture in x");

    TrainArgs ta;
    auto *train_cmd =
        app.add_subcommand("train", "fit the velocity field and decoder");
    train_cmd->add_option("--scene", ta.scene, "scene bundle directory")
        ->required();
    train_cmd->add_option("--out", ta.out, "checkpoint/log directory")
        ->required();
    train_cmd->add_option("--stage", ta.stage, "dynamics, decoder, or both")
        ->check(CLI::IsMember({"dynamics", "decoder", "both"}));
    train_cmd->add_option("--iterations", ta.cfg.iterations);
    train_cmd->add_option("--seed", ta.cfg.seed);
    train_cmd->add_option("--lr", ta.cfg.adam.lr, "Adam learning rate");
    train_cmd->add_option("--flow-batch", ta.cfg.flow_batch);
    train_cmd->add_option("--physics-batch", ta.cfg.physics_batch);
    train_cmd->add_option("--boundary-batch", ta.cfg.boundary_batch);
    train_cmd->add_option("--checkpoint-every", ta.cfg.checkpoint_every);
    train_cmd->add_option("--exact-flow", ta.exact_flow,
                          "sample N exact flow targets instead of hints");
    train_cmd->add_flag("--no-physics", ta.no_physics,
                        "ablate the physics losses");
    train_cmd->add_flag("--no-force", ta.no_force,
                        "ablate the external-force head");
    train_cmd->add_flag("--no-hints", ta.no_hints,
                        "ignore the bundle's motion hints");
    train_cmd->add_option("--embed", ta.cfg.model.embed_frequencies,
                          "positional embedding frequencies");
    train_cmd->add_option("--hidden", ta.cfg.model.mlp_hidden, "MLP widths");
    train_cmd->add_option("--features", ta.cfg.model.feature_channels,
                          "conditioning feature channels");
    train_cmd->add_option("--force-channels", ta.cfg.model.force_channels,
                          "external-force head width");
    train_cmd->add_option("--encoder", ta.cfg.model.encoder_channels,
                          "encoder stage widths");
    train_cmd->add_option("--decoder-hidden", ta.cfg.decoder_hidden);
    train_cmd->add_option("--decoder-layers", ta.cfg.decoder_layers);
    train_cmd->add_option("--crop", ta.cfg.crop, "decoder training crop");

    AnimateArgs aa;
    auto *anim_cmd =
        app.add_subcommand("animate", "render a looped animation to PNG");
    anim_cmd->add_option("--scene", aa.scene, "scene bundle directory")
        ->required();
    anim_cmd->add_option("--checkpoint", aa.checkpoint, "model checkpoint")
        ->required();
    anim_cmd->add_option("--out", aa.out, "output directory")->required();
    anim_cmd->add_option("--decoder", aa.decoder, "decoder parameter file");
    anim_cmd->add_option("--frames", aa.frames, "frame count (0 = trajectory)");
    anim_cmd->add_option("--fps", aa.fps, "frame rate (0 = trajectory)");
    anim_cmd->add_option("--loop", aa.loop, "loop period in frames");
    anim_cmd->add_flag("--no-symmetric", aa.no_symmetric,
                       "single forward advection instead of symmetric blending");
    anim_cmd->add_flag("--pin-features", aa.pin_features,
                       "sample conditioning at initial kernel positions");
    anim_cmd->add_flag("--fixed-camera", aa.fixed_camera,
                       "hold the first trajectory pose for every frame");

    EvalArgs ea;
    auto *eval_cmd =
        app.add_subcommand("eval", "evaluate a checkpoint against ground truth");
    eval_cmd->add_option("--scene", ea.scene, "scene bundle directory")
        ->required();
    eval_cmd->add_option("--checkpoint", ea.checkpoint, "model checkpoint");
    eval_cmd->add_option("--out", ea.out,
                         "report path prefix (writes .csv and .jsonl)");
    eval_cmd->add_flag("--oracle", ea.oracle,
                       "evaluate the exact field against itself");
    eval_cmd->add_option("--probes", ea.opt.probes, "velocity sample count");
    eval_cmd->add_option("--horizon", ea.opt.horizon,
                         "violation advection horizon, seconds");
    eval_cmd->add_option("--steps", ea.opt.steps, "violation Euler steps");
    eval_cmd->add_option("--seed", ea.opt.seed);

    EditArgs da;
    auto *edit_cmd =
        app.add_subcommand("edit", "carve a new obstacle into a scene");
    edit_cmd->add_option("--scene", da.scene, "scene bundle directory")
        ->required();
    edit_cmd->add_option("--out", da.out, "output directory")->required();
    edit_cmd->add_option("--cx", da.cx, "obstacle center x")->required();
    edit_cmd->add_option("--cy", da.cy, "obstacle center y")->required();
    edit_cmd->add_option("--radius", da.radius, "obstacle radius")->required();

    GradArgs ga;
    auto *grad_cmd = app.add_subcommand(
        "gradcheck", "compare loss gradients against finite differences");
    grad_cmd->add_option("--seed", ga.seed);
    grad_cmd->add_option("--step", ga.step, "central-difference half-step");
    grad_cmd->add_option("--tolerance", ga.tolerance, "max relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    ea.opt.threads = threads;
    try {
        if (synth_cmd->parsed()) return run_synth(sa);
        if (train_cmd->parsed()) return run_train(ta);
        if (anim_cmd->parsed()) return run_animate(aa);
        if (eval_cmd->parsed()) return run_eval(ea);
        if (edit_cmd->parsed()) return run_edit(da);
        if (grad_cmd->parsed()) return run_gradcheck(ga);
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
