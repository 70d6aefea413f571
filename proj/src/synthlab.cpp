#include "splatflow/synthlab.hpp"

#include <cmath>

#include "json.hpp"

using nlohmann::json;

namespace splatflow::synth {

bool AnalyticField::contains(const Vec3 &p, double) const {
    if (std::abs(p.y) > half_width || std::abs(p.x) > length / 2) return false;
    return !(obstacle && obstacle->contains(p.x, p.y));
}

// --------------------------------------------------- closed-form velocities

// Each field is written once as a template over the scalar type, so the
// plain-double evaluator and the dual-number evaluator perform bit-identical
// arithmetic.
namespace {

template <typename S>
std::array<S, 3> cylinder_u(double u_inf, const Disk &disk, const S &px,
                            const S &py) {
    const S x = px - disk.cx, y = py - disk.cy;
    const double r2cap = disk.radius * disk.radius;
    const S r2 = x * x + y * y;
    const S r4 = r2 * r2;
    return {u_inf * (1.0 - r2cap * ((x * x - y * y) / r4)),
            (-2.0 * u_inf * r2cap) * (x * y / r4), S(0.0)};
}

template <typename S>
std::array<S, 3> channel_u(double u_inf, double half_width, const S &y) {
    const S yn = y / half_width;
    return {u_inf * (1.0 - yn * yn), S(0.0), S(0.0)};
}

template <typename S>
std::array<S, 3> drift_u(double base, double ramp, const S &t) {
    return {base + ramp * t, S(0.0), S(0.0)};
}

// Interior test with a one-part-in-1e12 slack so that points constructed to
// lie exactly on the surface (where the no-through condition is asserted)
// never trip the domain check through rounding.
bool strictly_inside(const Disk &disk, double x, double y) {
    const double dx = x - disk.cx, dy = y - disk.cy;
    return dx * dx + dy * dy < disk.radius * disk.radius * (1.0 - 1e-12);
}

}  // namespace

Vec3 potential_flow_cylinder(double u_inf, const Disk &disk, const Vec3 &p) {
    if (strictly_inside(disk, p.x, p.y))
        throw DomainError("potential flow queried inside the obstacle");
    const auto u = cylinder_u<double>(u_inf, disk, p.x, p.y);
    return {u[0], u[1], u[2]};
}

Vec3 uniform_channel_flow(double u_inf, double half_width, const Vec3 &p) {
    const auto u = channel_u<double>(u_inf, half_width, p.y);
    return {u[0], u[1], u[2]};
}

AnalyticField make_channel_field(double u_inf, double half_width, double length) {
    AnalyticField f;
    f.u_inf = u_inf;
    f.half_width = half_width;
    f.length = length;
    f.kind = "channel";
    f.velocity = [u_inf, half_width](const Vec3 &p, double) {
        return uniform_channel_flow(u_inf, half_width, p);
    };
    f.dual = [u_inf, half_width](const std::array<ad::Dual4, 4> &q) {
        return channel_u<ad::Dual4>(u_inf, half_width, q[1]);
    };
    return f;
}

AnalyticField make_cylinder_field(double u_inf, double half_width, double length,
                                  const Disk &disk) {
    AnalyticField f;
    f.u_inf = u_inf;
    f.half_width = half_width;
    f.length = length;
    f.obstacle = disk;
    f.kind = "cylinder";
    f.velocity = [u_inf, disk](const Vec3 &p, double) {
        return potential_flow_cylinder(u_inf, disk, p);
    };
    f.dual = [u_inf, disk](const std::array<ad::Dual4, 4> &q) {
        if (strictly_inside(disk, q[0].v, q[1].v))
            throw DomainError("potential flow queried inside the obstacle");
        return cylinder_u<ad::Dual4>(u_inf, disk, q[0], q[1]);
    };
    return f;
}

AnalyticField make_drift_field(double base, double ramp, double half_width,
                               double length) {
    AnalyticField f;
    f.u_inf = base;
    f.half_width = half_width;
    f.length = length;
    f.kind = "drift";
    f.drift_base = base;
    f.drift_ramp = ramp;
    f.body_force = {ramp, 0, 0};
    f.velocity = [base, ramp](const Vec3 &, double t) {
        const auto u = drift_u<double>(base, ramp, t);
        return Vec3{u[0], u[1], u[2]};
    };
    f.dual = [base, ramp](const std::array<ad::Dual4, 4> &q) {
        return drift_u<ad::Dual4>(base, ramp, q[3]);
    };
    return f;
}

// ----------------------------------------------------------- camera rig

namespace {

Vec3 cross(const Vec3 &a, const Vec3 &b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

Vec3 unit(Vec3 v) {
    const double n = v.norm();
    if (n < 1e-12) throw ArgumentError("cannot normalize a zero vector");
    return v * (1.0 / n);
}

Quat quat_from_matrix(const Mat3 &m) {
    Quat q;
    const double tr = m(0, 0) + m(1, 1) + m(2, 2);
    if (tr > 0) {
        const double s = std::sqrt(tr + 1.0) * 2;
        q.w = 0.25 * s;
        q.x = (m(2, 1) - m(1, 2)) / s;
        q.y = (m(0, 2) - m(2, 0)) / s;
        q.z = (m(1, 0) - m(0, 1)) / s;
    } else if (m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2)) {
        const double s = std::sqrt(1.0 + m(0, 0) - m(1, 1) - m(2, 2)) * 2;
        q.w = (m(2, 1) - m(1, 2)) / s;
        q.x = 0.25 * s;
        q.y = (m(0, 1) + m(1, 0)) / s;
        q.z = (m(0, 2) + m(2, 0)) / s;
    } else if (m(1, 1) > m(2, 2)) {
        const double s = std::sqrt(1.0 + m(1, 1) - m(0, 0) - m(2, 2)) * 2;
        q.w = (m(0, 2) - m(2, 0)) / s;
        q.x = (m(0, 1) + m(1, 0)) / s;
        q.y = 0.25 * s;
        q.z = (m(1, 2) + m(2, 1)) / s;
    } else {
        const double s = std::sqrt(1.0 + m(2, 2) - m(0, 0) - m(1, 1)) * 2;
        q.w = (m(1, 0) - m(0, 1)) / s;
        q.x = (m(0, 2) + m(2, 0)) / s;
        q.y = (m(1, 2) + m(2, 1)) / s;
        q.z = 0.25 * s;
    }
    return q.normalized();
}

// World-to-camera pose looking from `eye` toward `target`, image x along
// world +x where possible (falls back for a straight-down view).
scene::Camera look_at(const Vec3 &eye, const Vec3 &target, double focal, int w,
                      int h) {
    const Vec3 forward = unit(target - eye);
    Vec3 right = cross(forward, Vec3{0, 0, 1});
    right = right.norm() < 1e-9 ? Vec3{1, 0, 0} : unit(right);
    const Vec3 down = cross(forward, right);

    Mat3 rot;  // rows: right, down, forward
    for (int c = 0; c < 3; ++c) {
        rot(0, c) = right[c];
        rot(1, c) = down[c];
        rot(2, c) = forward[c];
    }
    scene::Camera cam;
    cam.fx = cam.fy = focal;
    cam.cx = (w - 1) / 2.0;
    cam.cy = (h - 1) / 2.0;
    cam.width = w;
    cam.height = h;
    cam.rot = quat_from_matrix(rot);
    cam.trans = -(cam.rotation() * eye);
    return cam;
}

// ------------------------------------------------------ procedural texture

double hash01(int64_t ix, int64_t iy, uint64_t salt) {
    uint64_t h = uint64_t(ix) * 0x9e3779b97f4a7c15ull;
    h ^= uint64_t(iy) * 0xbf58476d1ce4e5b9ull + salt;
    h ^= h >> 30;
    h *= 0x94d049bb133111ebull;
    h ^= h >> 27;
    h *= 0xbf58476d1ce4e5b9ull;
    h ^= h >> 31;
    return double(h >> 11) * 0x1.0p-53;
}

double value_noise(double x, double y, uint64_t salt) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = int64_t(fx), iy = int64_t(fy);
    const double tx = x - fx, ty = y - fy;
    auto fade = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double a = hash01(ix, iy, salt), b = hash01(ix + 1, iy, salt);
    const double c = hash01(ix, iy + 1, salt), d = hash01(ix + 1, iy + 1, salt);
    const double u = fade(tx), v = fade(ty);
    return a + (b - a) * u + (c - a) * v + (a - b - c + d) * u * v;
}

std::array<double, 3> rock_color(double x, double y) {
    const double n = value_noise(x * 3.1, y * 3.1, 7);
    return {0.40 + 0.12 * n, 0.40 + 0.12 * n, 0.43 + 0.12 * n};
}

std::array<double, 3> river_texture(double x, double y, bool fluid, bool rock,
                                    double period_x) {
    if (rock) return rock_color(x, y);
    if (fluid) {
        // Wrapping before the noise lookup makes the water pattern exactly
        // periodic in x, which the advection-period oracle relies on.
        if (period_x > 0) x -= period_x * std::floor(x / period_x);
        const double n1 = value_noise(x * 1.7, y * 1.7, 1);
        const double n2 = value_noise(x * 5.3 + 13.0, y * 5.3, 2);
        return {0.10 + 0.15 * n1, 0.25 + 0.20 * n2,
                0.45 + 0.25 * (0.5 * n1 + 0.5 * n2)};
    }
    const double n = value_noise(x * 2.3, y * 2.3, 3);
    const double g = value_noise(x * 9.1 + 5.0, y * 9.1, 4);
    return {0.30 + 0.20 * n, 0.26 + 0.18 * g, 0.15 + 0.10 * n};
}

// Shared body of the scene factories once the field is fixed.
SyntheticScene build_scene(const RiverSceneConfig &cfg, AnalyticField field) {
    if (cfg.width < 8 || cfg.height < 8)
        throw ArgumentError("river scene needs at least an 8x8 image");
    if (cfg.frames < 1 || cfg.fps <= 0)
        throw ArgumentError("river scene needs frames >= 1 and positive fps");

    SyntheticScene scn;
    scn.field = std::move(field);
    const Vec3 eye = cfg.nadir ? Vec3{0, 0, cfg.camera_height}
                               : Vec3{0, -cfg.camera_back, cfg.camera_height};
    scene::Camera cam = look_at(eye, {0, 0, 0}, cfg.focal, cfg.width, cfg.height);

    img::Grid image(cfg.width, cfg.height, 3);
    img::Grid depth(cfg.width, cfg.height, 1);
    img::Grid mask(cfg.width, cfg.height, 1);
    scn.obstacle_mask = img::Grid(cfg.width, cfg.height, 1);

    const Mat3 cam_to_world = cam.rotation().transposed();
    const auto &fld = scn.field;
    for (int py = 0; py < cfg.height; ++py)
        for (int px = 0; px < cfg.width; ++px) {
            const Vec3 dir_cam{(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0};
            const Vec3 dir = cam_to_world * dir_cam;
            if (dir.z >= -1e-9)
                throw StructureError("camera rig: a pixel ray misses the water");
            const double s = -eye.z / dir.z;  // ray-plane hit, z_cam == s
            if (s < 1.0 || s > 50.0)
                throw StructureError("camera rig: surface depth outside [1, 50]");
            const Vec3 p = eye + dir * s;

            const bool rock = fld.obstacle && fld.obstacle->contains(p.x, p.y);
            const bool fluid = !rock && std::abs(p.y) <= fld.half_width &&
                               std::abs(p.x) <= fld.length / 2;
            depth.at(0, py, px) = s;
            mask.at(0, py, px) = fluid ? 1.0 : 0.0;
            scn.obstacle_mask.at(0, py, px) = rock ? 1.0 : 0.0;
            const auto rgb =
                river_texture(p.x, p.y, fluid, rock, cfg.texture_period_x);
            for (int c = 0; c < 3; ++c) image.at(c, py, px) = rgb[c];
        }

    // Flow hints for frame zero: projected displacement over one frame.
    img::Grid hints(cfg.width, cfg.height, 3);
    const double dt = 1.0 / cfg.fps;
    for (int py = 0; py < cfg.height; ++py)
        for (int px = 0; px < cfg.width; ++px) {
            if (mask.at(0, py, px) < 0.5) continue;
            const Vec3 p = cam.lift_pixel(px, py, depth.at(0, py, px));
            const Vec3 moved = p + fld.velocity(p, 0.0) * dt;
            const auto reproj = cam.try_project(moved);
            if (!reproj) continue;
            hints.at(0, py, px) = reproj->u - px;
            hints.at(1, py, px) = reproj->v - py;
            hints.at(2, py, px) = 1.0;
        }

    // Novel-view sweep: pure lateral translation, frame 0 at the input pose.
    scene::CameraPath path;
    path.base = cam;
    path.fps = cfg.fps;
    for (int k = 0; k < cfg.frames; ++k) {
        const double swing =
            cfg.novel_view_sweep * std::sin(2.0 * M_PI * k / cfg.frames);
        const Vec3 eye_k = eye + Vec3{swing, 0, 0};
        path.poses.emplace_back(cam.rot, -(cam.rotation() * eye_k));
    }

    scn.bundle.image = std::move(image);
    scn.bundle.depth = std::move(depth);
    scn.bundle.mask = std::move(mask);
    scn.bundle.camera = cam;
    scn.bundle.trajectory = std::move(path);
    scn.bundle.hints = std::move(hints);
    scn.bundle.scene_json = field_to_json(scn.field);
    scn.total_seconds = scn.bundle.trajectory.duration();
    return scn;
}

}  // namespace

physics::FluidRegion SyntheticScene::region() const {
    physics::FluidRegion r;
    r.camera = bundle.camera;
    r.mask = bundle.mask;
    const AnalyticField fld = field;
    r.analytic = [fld](const Vec3 &p, double t) { return fld.contains(p, t); };
    return r;
}

SyntheticScene make_river_scene(const RiverSceneConfig &cfg) {
    AnalyticField f =
        cfg.with_rock
            ? make_cylinder_field(cfg.u_inf, cfg.half_width, cfg.length, cfg.rock)
            : make_channel_field(cfg.u_inf, cfg.half_width, cfg.length);
    return build_scene(cfg, std::move(f));
}

SyntheticScene make_drift_scene(double base, double ramp,
                                const RiverSceneConfig &cfg) {
    return build_scene(cfg,
                       make_drift_field(base, ramp, cfg.half_width, cfg.length));
}

// ------------------------------------------------------------- sampling

std::vector<physics::SceneFlowSample> sample_scene_flow(const SyntheticScene &scn,
                                                        int n, uint64_t seed) {
    if (n < 1) throw ArgumentError("need at least one scene-flow sample");
    const auto &mask = scn.bundle.mask;
    const auto &depth = scn.bundle.depth;
    std::vector<std::pair<int, int>> fluid;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(0, y, x) > 0.5 && depth.at(0, y, x) > 0)
                fluid.emplace_back(x, y);
    if (fluid.empty()) throw ArgumentError("scene has no fluid pixels to sample");

    Rng rng(seed);
    const auto &cam = scn.bundle.camera;
    std::vector<physics::SceneFlowSample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const auto [px, py] = fluid[rng.below(fluid.size())];
        const double ju = rng.uniform(-0.5, 0.5), jv = rng.uniform(-0.5, 0.5);
        Vec3 p = cam.lift_pixel(px + ju, py + jv, depth.nearest(0, px + ju, py + jv));
        if (!scn.field.contains(p)) p = cam.lift_pixel(px, py, depth.at(0, py, px));
        const double t = rng.uniform(0.0, scn.total_seconds);
        out.push_back({p, t, scn.field.velocity(p, t)});
    }
    return out;
}

// --------------------------------------------------- ground-truth frames

namespace {

double wrap_coordinate(double x, double length) {
    const double half = length / 2;
    if (x >= -half && x < half) return x;  // leave in-range values untouched
    double w = std::fmod(x + half, length);
    if (w < 0) w += length;
    return w - half;
}

// Field evaluation for advection. With wrap enabled the channel is treated
// as x-periodic, so a kernel crossing the downstream edge keeps flowing;
// genuinely out-of-domain points (inside the obstacle, past the banks) are
// stagnant instead of erroring, since render kernels may graze them.
Vec3 advect_velocity(const AnalyticField &f, Vec3 p, double t, bool wrap) {
    if (wrap) p.x = wrap_coordinate(p.x, f.length);
    if (!f.contains(p, t)) return {0, 0, 0};
    return f.velocity(p, t);
}

Vec3 rk4_step(const AnalyticField &f, const Vec3 &p, double t, double dt,
              bool wrap) {
    const Vec3 k1 = advect_velocity(f, p, t, wrap);
    const Vec3 k2 = advect_velocity(f, p + k1 * (dt / 2), t + dt / 2, wrap);
    const Vec3 k3 = advect_velocity(f, p + k2 * (dt / 2), t + dt / 2, wrap);
    const Vec3 k4 = advect_velocity(f, p + k3 * dt, t + dt, wrap);
    return p + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
}

}  // namespace

std::vector<img::Grid> render_ground_truth(const SyntheticScene &scn,
                                           const scene::CameraPath &trajectory,
                                           const RenderGtOptions &opts) {
    if (trajectory.frames() < 1)
        throw ArgumentError("ground-truth render needs at least one frame");
    if (opts.substeps < 1)
        throw ArgumentError("ground-truth render needs substeps >= 1");

    auto gs = scene::gaussians_from_image(scn.bundle.image, scn.bundle.depth,
                                          scn.bundle.mask, scn.bundle.camera);
    render::RasterConfig rcfg;
    rcfg.background = opts.background;

    std::vector<img::Grid> frames;
    frames.reserve(trajectory.frames());
    double t = 0;
    for (int k = 0; k < trajectory.frames(); ++k) {
        if (k > 0) {
            const double dt = 1.0 / trajectory.fps / opts.substeps;
            for (int sub = 0; sub < opts.substeps; ++sub) {
                for (size_t i = 0; i < gs.count(); ++i) {
                    if (!gs.fluid[i]) continue;
                    Vec3 p = rk4_step(scn.field, gs.centers[i], t, dt, opts.wrap_x);
                    if (opts.wrap_x) p.x = wrap_coordinate(p.x, scn.field.length);
                    gs.centers[i] = p;
                }
                t += dt;
            }
        }
        frames.push_back(render::rasterize(gs, trajectory.at(k), rcfg).to_grid());
    }
    return frames;
}

// ------------------------------------------------------------- scene edit

SyntheticScene edit_scene_add_obstacle(const SyntheticScene &scn,
                                       const Disk &disk) {
    const auto &f = scn.field;
    if (disk.radius <= 0) throw ArgumentError("obstacle radius must be positive");
    if (std::abs(disk.cy) + disk.radius > f.half_width ||
        std::abs(disk.cx) + disk.radius > f.length / 2)
        throw DomainError("new obstacle must sit inside the channel");

    SyntheticScene out = scn;
    out.field = make_cylinder_field(f.u_inf, f.half_width, f.length, disk);

    const auto &cam = scn.bundle.camera;
    const auto &depth = scn.bundle.depth;
    for (int y = 0; y < depth.height; ++y)
        for (int x = 0; x < depth.width; ++x) {
            const double d = depth.at(0, y, x);
            if (d <= 0) continue;
            const Vec3 p = cam.lift_pixel(x, y, d);
            if (!disk.contains(p.x, p.y)) continue;
            out.bundle.mask.at(0, y, x) = 0.0;
            out.obstacle_mask.at(0, y, x) = 1.0;
            const auto rgb = rock_color(p.x, p.y);
            for (int c = 0; c < 3; ++c) out.bundle.image.at(c, y, x) = rgb[c];
        }
    out.bundle.scene_json = field_to_json(out.field);
    return out;
}

// ------------------------------------------------------------ streamlines

StreamlineStats streamline_containment(
    const std::function<Vec3(const Vec3 &, double)> &velocity, const Disk &disk,
    double half_width, int n, uint64_t seed, double dt, int max_steps) {
    if (n < 1) throw ArgumentError("need at least one streamline");
    Rng rng(seed);
    StreamlineStats stats;
    stats.total = n;
    const double stop_x = disk.cx + 4.0 * disk.radius;

    for (int i = 0; i < n; ++i) {
        double y0 = disk.cy + rng.uniform(-3.0, 3.0) * disk.radius;
        y0 = std::max(-0.95 * half_width, std::min(0.95 * half_width, y0));
        Vec3 p{disk.cx - 4.0 * disk.radius, y0, 0.0};
        double t = 0;
        bool crossed = false;
        for (int step = 0; step < max_steps && p.x <= stop_x; ++step) {
            // RK4 with interior guards: never evaluates inside the disk.
            Vec3 stage = p;
            Vec3 ks[4];
            const double offs[4] = {0, dt / 2, dt / 2, dt};
            for (int s = 0; s < 4; ++s) {
                stage = s == 0 ? p : p + ks[s - 1] * offs[s];
                if (disk.contains(stage.x, stage.y)) {
                    crossed = true;
                    break;
                }
                ks[s] = velocity(stage, t + offs[s]);
            }
            if (crossed) break;
            p = p + (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3]) * (dt / 6.0);
            t += dt;
            if (disk.contains(p.x, p.y)) {
                crossed = true;
                break;
            }
        }
        if (crossed) ++stats.crossed;
    }
    return stats;
}

// ------------------------------------------------------------ persistence

std::string field_to_json(const AnalyticField &f) {
    json j;
    j["kind"] = f.kind;
    j["u_inf"] = f.u_inf;
    j["half_width"] = f.half_width;
    j["length"] = f.length;
    if (f.obstacle)
        j["rock"] = {{"cx", f.obstacle->cx},
                     {"cy", f.obstacle->cy},
                     {"radius", f.obstacle->radius}};
    if (f.kind == "drift")
        j["drift"] = {{"base", f.drift_base}, {"ramp", f.drift_ramp}};
    return j.dump(2);
}

AnalyticField field_from_json(const std::string &text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception &e) {
        throw IoError(std::string("bad field descriptor: ") + e.what());
    }
    try {
        const std::string kind = j.at("kind");
        const double u_inf = j.at("u_inf");
        const double hw = j.at("half_width");
        const double length = j.at("length");
        if (kind == "channel") return make_channel_field(u_inf, hw, length);
        if (kind == "cylinder") {
            const auto &r = j.at("rock");
            return make_cylinder_field(
                u_inf, hw, length,
                Disk{r.at("cx"), r.at("cy"), r.at("radius")});
        }
        if (kind == "drift") {
            const auto &d = j.at("drift");
            return make_drift_field(d.at("base"), d.at("ramp"), hw, length);
        }
        throw IoError("unknown field kind '" + kind + "'");
    } catch (const json::exception &e) {
        throw IoError(std::string("bad field descriptor: ") + e.what());
    }
}

void save_synthetic_scene(const SyntheticScene &scn, const std::string &dir) {
    SyntheticScene copy = scn;
    copy.bundle.scene_json = field_to_json(scn.field);
    scene::save_bundle(dir, copy.bundle);
}

SyntheticScene load_synthetic_scene(const std::string &dir) {
    SyntheticScene scn;
    scn.bundle = scene::load_bundle(dir);
    if (scn.bundle.scene_json.empty())
        throw IoError("bundle at '" + dir + "' has no synthetic field descriptor");
    scn.field = field_from_json(scn.bundle.scene_json);
    scn.total_seconds = scn.bundle.trajectory.duration();

    // The obstacle raster is derived state: rebuild it from depth + field.
    const auto &depth = scn.bundle.depth;
    scn.obstacle_mask = img::Grid(depth.width, depth.height, 1);
    if (scn.field.obstacle) {
        const auto &cam = scn.bundle.camera;
        for (int y = 0; y < depth.height; ++y)
            for (int x = 0; x < depth.width; ++x) {
                const double d = depth.at(0, y, x);
                if (d <= 0) continue;
                const Vec3 p = cam.lift_pixel(x, y, d);
                if (scn.field.obstacle->contains(p.x, p.y))
                    scn.obstacle_mask.at(0, y, x) = 1.0;
            }
    }
    return scn;
}

}  // namespace splatflow::synth
