#include "splatflow/animation.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace splatflow::anim {

using scene::GaussianKernel;
using scene::GaussianScene;

void AnimationConfig::validate() const {
    if (frames < 1) throw ArgumentError("animation: frame count must be >= 1");
    if (!(fps > 0)) throw ArgumentError("animation: fps must be positive");
    if (loop_period < 0) throw ArgumentError("animation: loop period must be >= 0");
}

GaussianScene advect_step(const GaussianScene &gs,
                          const physics::VelocitySource &field, double t,
                          double dt, std::span<const Vec3> feature_anchors) {
    if (!(dt > 0)) throw ArgumentError("advect_step: dt must be positive");
    if (!feature_anchors.empty() && feature_anchors.size() != gs.count())
        throw ArgumentError("advect_step: one feature anchor per kernel expected");
    GaussianScene out = gs;
    std::vector<size_t> idx;
    std::vector<Vec3> pts, anchors;
    for (size_t i = 0; i < gs.count(); ++i) {
        if (!gs.fluid[i]) continue;
        idx.push_back(i);
        pts.push_back(gs.centers[i]);
        if (!feature_anchors.empty()) anchors.push_back(feature_anchors[i]);
    }
    if (idx.empty()) return out;
    std::vector<double> times(idx.size(), t);
    std::vector<Vec3> u(idx.size());
    field.velocity_batch(pts, times, u, anchors);
    for (size_t j = 0; j < idx.size(); ++j) {
        for (int a = 0; a < 3; ++a) check_finite(u[j][a], "advect_step");
        out.centers[idx[j]] = pts[j] + dt * u[j];
    }
    return out;
}

std::vector<ad::JetResult> ReversedSource::jets(std::span<const Vec3> points,
                                                std::span<const double> times) const {
    std::vector<double> mirrored(times.begin(), times.end());
    for (double &s : mirrored) s = total_ - s;
    std::vector<ad::JetResult> out = inner_->jets(points, mirrored);
    // u_rev(x, s) = -u(x, T - s): spatial derivatives flip with the value,
    // the time derivative picks up a second sign from the mirroring.
    for (auto &jr : out) {
        jr.value = -jr.value;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) jr.jacobian(r, c) = -jr.jacobian(r, c);
    }
    return out;
}

Vec3 ReversedSource::velocity(const Vec3 &p, double t) const {
    return -inner_->velocity(p, total_ - t);
}

void ReversedSource::velocity_batch(std::span<const Vec3> points,
                                    std::span<const double> times,
                                    std::span<Vec3> out,
                                    std::span<const Vec3> feature_points) const {
    std::vector<double> mirrored(times.begin(), times.end());
    for (double &s : mirrored) s = total_ - s;
    inner_->velocity_batch(points, mirrored, out, feature_points);
    for (Vec3 &u : out) u = -u;
}

namespace {

std::vector<Vec3> fluid_centers(const GaussianScene &gs) {
    std::vector<Vec3> c;
    for (size_t i = 0; i < gs.count(); ++i)
        if (gs.fluid[i]) c.push_back(gs.centers[i]);
    return c;
}

// Assembles one blended frame scene: the forward scene's kernels (fluid
// opacity scaled by wf, dropped when wf is zero), then a backward fluid copy
// at the snapshot centers scaled by wb. Non-center attributes never change
// under advection, so the forward scene supplies them for both copies.
GaussianScene blend(const GaussianScene &fwd, std::span<const Vec3> bwd_centers,
                    double wf, double wb) {
    GaussianScene out;
    out.payload_dim = fwd.payload_dim;
    for (size_t i = 0; i < fwd.count(); ++i) {
        if (fwd.fluid[i] && wf <= 0) continue;
        GaussianKernel k{fwd.centers[i], fwd.rotations[i], fwd.scales[i],
                         fwd.opacities[i], bool(fwd.fluid[i])};
        if (k.fluid) k.opacity *= wf;
        out.push(k, fwd.payload(i));
    }
    if (wb > 0) {
        size_t j = 0;
        for (size_t i = 0; i < fwd.count(); ++i) {
            if (!fwd.fluid[i]) continue;
            GaussianKernel k{bwd_centers[j++], fwd.rotations[i], fwd.scales[i],
                             fwd.opacities[i] * wb, true};
            out.push(k, fwd.payload(i));
        }
    }
    return out;
}

}  // namespace

GaussianScene symmetric_splat(const GaussianScene &g0,
                              const physics::VelocitySource &field, int frame,
                              const AnimationConfig &cfg) {
    cfg.validate();
    const int L = cfg.loop_frames();
    if (frame < 0 || frame > L)
        throw ArgumentError("symmetric_splat: frame outside the loop");
    const double dt = cfg.dt();
    std::vector<Vec3> anchor_store;
    std::span<const Vec3> anchors;
    if (!cfg.features_at_advected) {
        anchor_store = g0.centers;
        anchors = anchor_store;
    }
    GaussianScene fwd = g0;
    for (int j = 0; j < frame; ++j) fwd = advect_step(fwd, field, j * dt, dt, anchors);
    const double wb = double(frame) / L;
    std::vector<Vec3> bwd_centers;
    if (wb > 0) {
        ReversedSource rev(field, L * dt);
        GaussianScene bwd = g0;
        for (int j = 0; j < L - frame; ++j)
            bwd = advect_step(bwd, rev, j * dt, dt, anchors);
        bwd_centers = fluid_centers(bwd);
    }
    return blend(fwd, bwd_centers, double(L - frame) / L, wb);
}

std::vector<img::Grid> render_video(const GaussianScene &g0,
                                    const physics::VelocitySource &field,
                                    const scene::CameraPath &trajectory,
                                    const AnimationConfig &cfg,
                                    const render::RasterConfig &raster,
                                    ad::ParameterSet *decoder) {
    cfg.validate();
    if (trajectory.frames() != cfg.frames)
        throw ArgumentError("render_video: trajectory length != frame count");
    const int L = cfg.loop_frames();
    if (cfg.symmetric_splatting && cfg.frames > L + 1)
        throw ArgumentError("render_video: frame count exceeds the loop period");
    const double dt = cfg.dt();
    std::vector<Vec3> anchor_store;
    std::span<const Vec3> anchors;
    if (!cfg.features_at_advected) {
        anchor_store = g0.centers;
        anchors = anchor_store;
    }

    // Backward snapshots: bwd_at[j] holds the fluid centers after j reversed
    // steps; frame k consumes snapshot L - k. Stepping is incremental here
    // and in the forward loop below, so a T-frame video costs O(T) velocity
    // batches, matching what symmetric_splat would produce frame by frame.
    std::vector<std::vector<Vec3>> bwd_at;
    if (cfg.symmetric_splatting) {
        bwd_at.resize(size_t(L) + 1);
        ReversedSource rev(field, L * dt);
        GaussianScene bwd = g0;
        bwd_at[0] = fluid_centers(bwd);
        for (int j = 1; j <= L; ++j) {
            bwd = advect_step(bwd, rev, (j - 1) * dt, dt, anchors);
            bwd_at[j] = fluid_centers(bwd);
        }
    }

    std::vector<img::Grid> frames;
    frames.reserve(size_t(cfg.frames));
    GaussianScene fwd = g0;
    for (int k = 0; k < cfg.frames; ++k) {
        try {
            if (k > 0) fwd = advect_step(fwd, field, (k - 1) * dt, dt, anchors);
            const render::Framebuffer fb =
                cfg.symmetric_splatting
                    ? render::rasterize(blend(fwd, bwd_at[size_t(L - k)],
                                                double(L - k) / L, double(k) / L),
                                          trajectory.at(k), raster)
                    : render::rasterize(fwd, trajectory.at(k), raster);
            frames.push_back(render::decode_features(fb, decoder));
        } catch (const Error &e) {
            throw StructureError("frame " + std::to_string(k) + ": " + e.what());
        }
    }
    return frames;
}

void save_video(const std::vector<img::Grid> &frames,
                const scene::CameraPath &trajectory, const std::string &dir) {
    if (int(frames.size()) != trajectory.frames())
        throw ArgumentError("save_video: frame/trajectory count mismatch");
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["frames"] = frames.size();
    manifest["fps"] = trajectory.fps;
    manifest["intrinsics"] = {{"fx", trajectory.base.fx},
                              {"fy", trajectory.base.fy},
                              {"cx", trajectory.base.cx},
                              {"cy", trajectory.base.cy},
                              {"width", trajectory.base.width},
                              {"height", trajectory.base.height}};
    auto files = nlohmann::json::array();
    auto cameras = nlohmann::json::array();
    char name[32];
    for (size_t k = 0; k < frames.size(); ++k) {
        std::snprintf(name, sizeof name, "frame_%05d.png", int(k));
        img::write_png(dir + "/" + name, frames[k]);
        files.push_back(name);
        const auto &[q, t] = trajectory.poses[k];
        cameras.push_back({{"q", {q.w, q.x, q.y, q.z}}, {"t", {t.x, t.y, t.z}}});
    }
    manifest["files"] = files;
    manifest["cameras"] = cameras;
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("save_video: cannot write manifest in '" + dir + "'");
}

}  // namespace splatflow::anim
