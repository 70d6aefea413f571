#pragma once

// Frame generation: explicit-Euler advection of fluid-tagged kernels under a
// velocity field, the symmetric-splatting blend that closes the loop, and
// per-frame rasterization along a camera trajectory.

#include <span>
#include <string>
#include <vector>

#include "splatflow/physics.hpp"
#include "splatflow/renderer.hpp"
#include "splatflow/scene.hpp"

namespace splatflow::anim {

struct AnimationConfig {
    int frames = 30;       // rendered frame count
    double fps = 12.0;     // timestep dt = 1/fps seconds
    bool symmetric_splatting = true;
    int loop_period = 0;   // loop length in frames; 0 = same as `frames`
    // Whether the conditioning features are sampled at each kernel's current
    // (advected) position or pinned to its initial one.
    bool features_at_advected = true;

    double dt() const { return 1.0 / fps; }
    int loop_frames() const { return loop_period > 0 ? loop_period : frames; }
    void validate() const;  // frames >= 1, fps > 0, loop_period >= 0
};

// One explicit Euler step: fluid kernel centers move by dt * u(x, t); static
// kernels and every non-center attribute are copied bit for bit. Non-finite
// velocities raise NumericError. `feature_anchors`, when non-empty (one per
// kernel), pins each moved kernel's conditioning lookup (see
// field::build_velocity); sources without conditioning ignore it.
scene::GaussianScene advect_step(const scene::GaussianScene &gs,
                                 const physics::VelocitySource &field, double t,
                                 double dt,
                                 std::span<const Vec3> feature_anchors = {});

// Wraps a field as its loop-reversed counterpart u_rev(x, s) = -u(x, T - s).
// Advecting under the reversal walks trajectories of the original field
// backwards from the loop end.
class ReversedSource final : public physics::VelocitySource {
  public:
    ReversedSource(const physics::VelocitySource &inner, double total_seconds)
        : inner_(&inner), total_(total_seconds) {}
    std::vector<ad::JetResult> jets(std::span<const Vec3> points,
                                    std::span<const double> times) const override;
    Vec3 velocity(const Vec3 &p, double t) const override;
    Vec3 force() const override { return inner_->force(); }
    void velocity_batch(std::span<const Vec3> points, std::span<const double> times,
                        std::span<Vec3> out,
                        std::span<const Vec3> feature_points = {}) const override;

  private:
    const physics::VelocitySource *inner_;
    double total_ = 0;
};

// The blend for frame k of the loop, with t = k*dt and T = loop_frames*dt:
// fluid kernels appear as a forward copy (advected k steps from the start,
// opacity scaled by (T-t)/T) plus a backward copy (advected loop_frames - k
// steps under the reversed field, opacity scaled by t/T); the two weights sum
// to one. Static kernels appear once, untouched. A zero-weight copy is
// dropped entirely, so frame 0 is exactly the initial scene and frame
// loop_frames exactly the backward copy. Requires 0 <= frame <= loop_frames.
scene::GaussianScene symmetric_splat(const scene::GaussianScene &g0,
                                     const physics::VelocitySource &field,
                                     int frame, const AnimationConfig &cfg);

// Renders the video: frame k rasterizes the symmetric splat (or the plain
// forward advection when symmetric_splatting is off) at trajectory pose k and
// decodes the payload to RGB. Advection state is built incrementally, one
// Euler step per frame, never re-advected from scratch. Any per-frame
// rendering failure is rethrown as StructureError naming the frame.
// Trajectory length must equal cfg.frames, and cfg.frames <= loop_frames + 1
// when symmetric splatting is on.
std::vector<img::Grid> render_video(const scene::GaussianScene &g0,
                                    const physics::VelocitySource &field,
                                    const scene::CameraPath &trajectory,
                                    const AnimationConfig &cfg,
                                    const render::RasterConfig &raster = {},
                                    ad::ParameterSet *decoder = nullptr);

// Writes frames as frame_%05d.png plus a manifest.json recording frame
// count, fps, image size, and the per-frame camera pose. Creates `dir` if
// needed; frame count must match the trajectory.
void save_video(const std::vector<img::Grid> &frames,
                const scene::CameraPath &trajectory, const std::string &dir);

}  // namespace splatflow::anim
