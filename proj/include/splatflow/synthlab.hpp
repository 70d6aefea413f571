#pragma once

// Synthetic river scenes with closed-form velocity fields. These provide
// exact ground truth — velocity, scene flow, masks, reference renders — for
// training runs and for every oracle-style evaluation: the analytic fields
// are divergence-free by construction and satisfy known boundary conditions,
// so numerical operators can be checked against them to tight tolerances.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "splatflow/physics.hpp"
#include "splatflow/renderer.hpp"
#include "splatflow/scene.hpp"

namespace splatflow::synth {

struct Disk {
    double cx = 0, cy = 0;
    double radius = 1;
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        return dx * dx + dy * dy < radius * radius;
    }
};

// A closed-form surface velocity field over the channel domain
// x in [-length/2, length/2], y in [-half_width, half_width], z = 0.
struct AnalyticField {
    std::function<Vec3(const Vec3 &, double)> velocity;  // world point, seconds
    physics::AnalyticFn dual;  // the same field on dual numbers
    Vec3 body_force{0, 0, 0};  // external acceleration, zero for steady fields
    double u_inf = 1.0;
    double half_width = 5.0;
    double length = 40.0;
    std::optional<Disk> obstacle;

    // Serialization descriptor, set by the factories.
    std::string kind = "channel";  // "channel" | "cylinder" | "drift"
    double drift_base = 0, drift_ramp = 0;

    // Fluid-domain test: inside the channel and outside the obstacle.
    bool contains(const Vec3 &p, double t = 0) const;
};

// 2D potential flow around a disk, z component zero. Interior queries are a
// domain error; on the surface the radial velocity vanishes.
Vec3 potential_flow_cylinder(double u_inf, const Disk &disk, const Vec3 &p);

// Parabolic bank profile: u = (u_inf * (1 - (y/h)^2), 0, 0), zero at the
// walls y = +-h, divergence-free since it does not depend on x.
Vec3 uniform_channel_flow(double u_inf, double half_width, const Vec3 &p);

// Field factories (plain + dual evaluation agree exactly).
AnalyticField make_channel_field(double u_inf, double half_width, double length);
AnalyticField make_cylinder_field(double u_inf, double half_width, double length,
                                  const Disk &disk);
// Spatially uniform accelerating drift u = (base + ramp*t, 0, 0); its
// Navier-Stokes residual vanishes only with body force (ramp, 0, 0), which
// is what the external-force ablation measures.
AnalyticField make_drift_field(double base, double ramp, double half_width,
                               double length);

// ---------------------------------------------------------------- scenes

struct RiverSceneConfig {
    int width = 256, height = 256;
    double u_inf = 1.0;
    double half_width = 5.0;
    double length = 40.0;
    bool with_rock = false;
    Disk rock{0.0, 0.0, 1.5};
    double focal = 170.0;
    double camera_back = 3.0;    // world -y offset of the camera
    double camera_height = 9.0;  // world +z
    bool nadir = false;          // straight-down view (constant depth)
    int frames = 30;
    double fps = 12.0;
    double novel_view_sweep = 0.8;  // lateral camera travel over the clip
    double texture_period_x = 0.0;  // >0 tiles the water texture in x
};

struct SyntheticScene {
    AnalyticField field;
    scene::SceneBundle bundle;  // image, depth, mask, camera, trajectory, hints
    img::Grid obstacle_mask;
    double total_seconds = 0;

    physics::FluidRegion region() const;  // camera + mask + exact containment
};

// Flat-water river seen from an oblique (or nadir) camera: procedural
// texture, plane depth, fluid mask between the banks, flow hints for frame
// zero, and a gently sweeping novel-view trajectory.
SyntheticScene make_river_scene(const RiverSceneConfig &cfg);

// Same geometry, uniform accelerating drift field (force-ablation target).
SyntheticScene make_drift_scene(double base, double ramp,
                                const RiverSceneConfig &cfg);

// Uniformly samples fluid-mask surface points at uniform random times in
// [0, total_seconds]; u_gt comes from the analytic field.
std::vector<physics::SceneFlowSample> sample_scene_flow(const SyntheticScene &scn,
                                                        int n, uint64_t seed);

// Reference video: advect fluid kernels through the analytic field (RK4
// substeps), rasterize each trajectory pose. Frame 0 renders the unadvected
// scene. Kernels leaving the channel wrap around in x to keep it filled.
struct RenderGtOptions {
    int substeps = 4;
    bool wrap_x = true;
    std::vector<double> background;
};
std::vector<img::Grid> render_ground_truth(const SyntheticScene &scn,
                                           const scene::CameraPath &trajectory,
                                           const RenderGtOptions &opts = {});

// Scene edit: carve a new rock out of the fluid mask, add it to the obstacle
// mask, repaint its pixels, and swap the analytic field for cylinder flow
// around the new disk. Motion hints are left untouched — edited scenes are
// re-trained against pre-edit supervision plus the new mask.
SyntheticScene edit_scene_add_obstacle(const SyntheticScene &scn, const Disk &disk);

// ------------------------------------------------------------ diagnostics

// Integrates n streamlines (RK4) released upstream and counts how many ever
// enter the disk. The velocity callback is never invoked inside the disk, so
// fields that reject interior queries can be traced safely.
struct StreamlineStats {
    int total = 0;
    int crossed = 0;
};
StreamlineStats streamline_containment(
    const std::function<Vec3(const Vec3 &, double)> &velocity, const Disk &disk,
    double half_width, int n, uint64_t seed, double dt = 0.02, int max_steps = 600);

// -------------------------------------------------------------- persistence

// The scene bundle plus a JSON descriptor that reconstructs the analytic
// field; load round-trips exactly.
void save_synthetic_scene(const SyntheticScene &scn, const std::string &dir);
SyntheticScene load_synthetic_scene(const std::string &dir);

// Field descriptor serialization (embedded in the bundle's scene_json).
std::string field_to_json(const AnalyticField &f);
AnalyticField field_from_json(const std::string &text);

}  // namespace splatflow::synth
