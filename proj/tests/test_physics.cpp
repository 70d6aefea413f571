#include "doctest.h"
#include "fd_oracle.hpp"
#include "splatflow/physics.hpp"

using namespace splatflow;
using ad::Dual4;
using Q4 = std::array<Dual4, 4>;
using U3 = std::array<Dual4, 3>;

namespace {

// --- analytic fields used as oracles ---------------------------------------

physics::AnalyticSource constant_field(Vec3 c, Vec3 force = {0, 0, 0}) {
    return physics::AnalyticSource(
        [c](const Q4 &) -> U3 { return {Dual4(c.x), Dual4(c.y), Dual4(c.z)}; },
        force);
}

// u = f * t: exactly satisfies du/dt + (u.grad)u = f.
physics::AnalyticSource accelerating_field(Vec3 f) {
    return physics::AnalyticSource(
        [f](const Q4 &q) -> U3 { return {f.x * q[3], f.y * q[3], f.z * q[3]}; },
        f);
}

// Rigid rotation about z: u = (-y, x, 0).
physics::AnalyticSource rotation_field() {
    return physics::AnalyticSource(
        [](const Q4 &q) -> U3 { return {-q[1], q[0], Dual4(0.0)}; });
}

// Standard 2D potential flow around a cylinder of radius R at the origin.
U3 cylinder_flow(double U, double R, const Q4 &q) {
    Dual4 x = q[0], y = q[1];
    Dual4 r2 = x * x + y * y;
    Dual4 r4 = r2 * r2;
    Dual4 ux = U * (1.0 - R * R * (x * x - y * y) / r4);
    Dual4 uy = -2.0 * U * R * R * x * y / r4;
    return {ux, uy, Dual4(0.0)};
}

// Hand-derived du_x/dx of the cylinder flow (the symbolic oracle).
double cylinder_dux_dx(double U, double R, double x, double y) {
    const double r2 = x * x + y * y;
    const double r6 = r2 * r2 * r2;
    return U * R * R * (2 * x * x * x - 6 * x * y * y) / r6;
}

// --- scene fixtures ---------------------------------------------------------

scene::SceneBundle small_bundle(uint64_t seed = 21) {
    const int W = 32, H = 32;
    scene::SceneBundle b;
    b.image = img::Grid(W, H, 3);
    b.depth = img::Grid(W, H, 1);
    b.mask = img::Grid(W, H, 1);
    Rng rng(seed);
    for (auto &v : b.image.data) v = rng.uniform();
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            b.depth.at(0, y, x) = 6.0 + 0.05 * x;
            // Fluid occupies the lower-right block, leaving a real boundary.
            b.mask.at(0, y, x) = (x >= 8 && y >= 12) ? 1.0 : 0.0;
        }
    b.camera.fx = 40;
    b.camera.fy = 40;
    b.camera.cx = (W - 1) / 2.0;
    b.camera.cy = (H - 1) / 2.0;
    b.camera.width = W;
    b.camera.height = H;
    b.trajectory.base = b.camera;
    b.trajectory.poses.push_back({b.camera.rot, b.camera.trans});
    return b;
}

field::ModelConfig tiny_config() {
    field::ModelConfig cfg;
    cfg.embed_frequencies = 2;
    cfg.mlp_hidden = {10, 8};
    cfg.feature_channels = 6;
    cfg.encoder_channels = {4, 6};
    return cfg;
}

field::VelocityFieldModel tiny_model(const scene::SceneBundle &b, uint64_t seed) {
    auto m = field::init_model(tiny_config(), b, 2.0, seed);
    Rng rng(seed + 1000);
    const std::string last = "mlp/w" + std::to_string(m.cfg.mlp_hidden.size());
    for (double &v : m.params.entry(last).value) v = rng.normal() * 0.3;
    for (double &v : m.params.entry("force/fc1").value) v = rng.normal() * 0.3;
    m.invalidate();
    return m;
}

physics::FluidRegion region_of(const scene::SceneBundle &b) {
    physics::FluidRegion r;
    r.camera = b.camera;
    r.mask = b.mask;
    return r;
}

}  // namespace

TEST_CASE("transport residual vanishes on fields that satisfy the equation") {
    auto constant = constant_field({0.3, -0.2, 0.1});
    Vec3 r = physics::ns_residual(constant, {1, 2, 3}, 0.7);
    CHECK(r.norm() < 1e-14);

    auto accel = accelerating_field({0.5, -1.0, 0.25});
    r = physics::ns_residual(accel, {4, -2, 1}, 1.3);
    CHECK(r.norm() < 1e-14);
}

TEST_CASE("transport residual of a rigid rotation is the centripetal term") {
    auto rot = rotation_field();
    Vec3 r = physics::ns_residual(rot, {1, 2, 0}, 0.0);
    CHECK(r.x == doctest::Approx(-1.0));
    CHECK(r.y == doctest::Approx(-2.0));
    CHECK(r.z == doctest::Approx(0.0));
    // General closed form: (u.grad)u = (-x, -y, 0).
    r = physics::ns_residual(rot, {-3, 0.5, 2}, 1.0);
    CHECK(r.x == doctest::Approx(3.0));
    CHECK(r.y == doctest::Approx(-0.5));
}

TEST_CASE("divergence matches closed forms") {
    physics::AnalyticSource shear(
        [](const Q4 &q) -> U3 { return {q[0], -q[1], Dual4(0.0)}; });
    CHECK(physics::divergence(shear, {2, 3, 4}, 0) == doctest::Approx(0.0));

    physics::AnalyticSource expand(
        [](const Q4 &q) -> U3 { return {q[0], q[1], q[2]}; });
    CHECK(physics::divergence(expand, {2, 3, 4}, 0) == doctest::Approx(3.0));
}

TEST_CASE("cylinder potential flow is divergence-free and matches the "
          "symbolic derivative") {
    const double U = 2.0, R = 1.5;
    physics::AnalyticSource cyl(
        [=](const Q4 &q) -> U3 { return cylinder_flow(U, R, q); });

    Rng rng(99);
    double max_div = 0;
    for (int i = 0; i < 10000; ++i) {
        // Random exterior point, radius in [1.1R, 20R].
        const double ang = rng.uniform() * 2 * M_PI;
        const double rad = R * (1.1 + rng.uniform() * 18.9);
        const Vec3 p{rad * std::cos(ang), rad * std::sin(ang), 0.0};
        max_div = std::max(max_div, std::abs(physics::divergence(cyl, p, 0)));
    }
    CHECK(max_div < 1e-10);

    for (int i = 0; i < 20; ++i) {
        const double ang = rng.uniform() * 2 * M_PI;
        const double rad = R * (1.2 + rng.uniform() * 5);
        const double x = rad * std::cos(ang), y = rad * std::sin(ang);
        const Vec3 pt{x, y, 0};
        const double t0 = 0.0;
        auto jets = cyl.jets(std::span<const Vec3>(&pt, 1),
                             std::span<const double>(&t0, 1));
        CHECK(fd::rel_err(jets[0].jacobian(0, 0), cylinder_dux_dx(U, R, x, y)) <
              1e-10);
    }

    // Free stream far away; zero radial velocity on the surface.
    Vec3 far = cyl.velocity({1000, 0, 0}, 0);
    CHECK(far.x == doctest::Approx(U).epsilon(1e-4));
    CHECK(std::abs(far.y) < 1e-6);
    for (int i = 0; i < 16; ++i) {
        const double ang = i * 2 * M_PI / 16;
        const Vec3 n{std::cos(ang), std::sin(ang), 0};
        Vec3 us = cyl.velocity({R * n.x, R * n.y, 0}, 0);
        CHECK(std::abs(us.dot(n)) < 1e-12);
    }
}

TEST_CASE("mean losses reduce exactly as their formulas say") {
    // u = (t*x, 0, 0): residual at t=0 is (x, 0, 0).
    physics::AnalyticSource stretch(
        [](const Q4 &q) -> U3 { return {q[3] * q[0], Dual4(0.0), Dual4(0.0)}; });

    physics::ProbeSet one;
    one.points = {{1, 0, 0}};
    one.times = {0};
    CHECK(physics::loss_ns(stretch, one) == doctest::Approx(1.0));

    physics::ProbeSet two;
    two.points = {{1, 0, 0}, {std::sqrt(3.0), 0, 0}};
    two.times = {0, 0};
    CHECK(physics::loss_ns(stretch, two) == doctest::Approx(2.0));

    auto accel = accelerating_field({0.5, 0, 0});
    CHECK(physics::loss_ns(accel, two) == doctest::Approx(0.0));

    physics::AnalyticSource expand(
        [](const Q4 &q) -> U3 { return {q[0], q[1], q[2]}; });
    CHECK(physics::loss_div(expand, one) == doctest::Approx(9.0));
    CHECK(physics::loss_div(constant_field({1, 2, 3}), two) == doctest::Approx(0.0));

    physics::ProbeSet empty;
    CHECK_THROWS_AS(physics::loss_ns(stretch, empty), ArgumentError);
    CHECK_THROWS_AS(physics::loss_div(stretch, empty), ArgumentError);
}

TEST_CASE("motion loss is the mean end-point error, not squared") {
    auto unit = constant_field({1, 0, 0});
    std::vector<physics::SceneFlowSample> samples;
    samples.push_back({{0, 0, 5}, 0.0, {1, 0, 0}});
    CHECK(physics::loss_motion(unit, samples) == doctest::Approx(0.0));

    samples[0].u_gt = {-2, -4, 0};  // diff (3, 4, 0) -> EPE 5
    CHECK(physics::loss_motion(unit, samples) == doctest::Approx(5.0));

    samples[0].u_gt = {0, 0, 0};                 // EPE 1
    samples.push_back({{1, 1, 5}, 0.0, {4, 0, 0}});  // EPE 3
    CHECK(physics::loss_motion(unit, samples) == doctest::Approx(2.0));

    CHECK_THROWS_AS(
        physics::loss_motion(unit, std::span<const physics::SceneFlowSample>{}),
        ArgumentError);
}

TEST_CASE("boundary loss gates on the displaced point leaving the region") {
    physics::FluidRegion region;
    region.analytic = [](const Vec3 &p, double) { return p.y < 5.0; };

    auto up = constant_field({0, 4, 0});
    std::vector<physics::BoundaryProbe> probes;
    probes.push_back({{0, 4.9, 1}, 0.0, true});  // 4.9 + 0.5*4 -> outside
    probes.push_back({{0, 0.0, 1}, 0.0, true});  // 0.0 + 2 = 2 -> inside
    CHECK(physics::loss_boundary(up, region, probes, 0.5) ==
          doctest::Approx(16.0 / 2));

    // dt scales the lookahead: small dt keeps both probes inside.
    CHECK(physics::loss_boundary(up, region, probes, 0.001) == doctest::Approx(0.0));

    CHECK(physics::loss_boundary(up, region, {}, 0.5) == 0.0);

    probes[0].stays_inside_gt = false;
    CHECK_THROWS_AS(physics::loss_boundary(up, region, probes, 0.5), ArgumentError);
}

TEST_CASE("region indicator agrees with the mask raster at every pixel center") {
    scene::SceneBundle b = small_bundle();
    physics::FluidRegion region = region_of(b);

    for (int y = 0; y < b.mask.height; ++y)
        for (int x = 0; x < b.mask.width; ++x) {
            Vec3 p = b.camera.lift_pixel(x, y, b.depth.at(0, y, x));
            const int expect = b.mask.at(0, y, x) > 0.5 ? 0 : 1;
            CHECK(physics::w_indicator(region, p) == expect);
        }

    // Outside the image bounds and behind the camera count as outside fluid.
    Vec3 off = b.camera.lift_pixel(0, 0, 5.0) + Vec3{-50, 0, 0};
    CHECK(physics::w_indicator(region, off) == 1);
    CHECK(physics::w_indicator(region, {0, 0, -3}) == 1);

    // An analytic test overrides the raster.
    region.analytic = [](const Vec3 &, double) { return true; };
    CHECK(physics::w_indicator(region, {0, 0, -3}) == 0);
}

TEST_CASE("combined physics loss is the documented weighted sum") {
    auto rot = rotation_field();
    physics::FluidRegion everywhere;
    everywhere.analytic = [](const Vec3 &, double) { return true; };

    Rng rng(17);
    physics::ProbeSet probes;
    std::vector<physics::BoundaryProbe> boundary;
    for (int i = 0; i < 8; ++i) {
        probes.points.push_back({rng.normal(), rng.normal(), rng.normal()});
        probes.times.push_back(rng.uniform());
        boundary.push_back({probes.points.back(), probes.times.back(), true});
    }

    physics::LossWeights w;
    w.lambda_ns = 0.7;
    w.lambda_div = 0.3;
    const double dt = 0.25;
    const double want = w.lambda_ns * physics::loss_ns(rot, probes) +
                        w.lambda_div * physics::loss_div(rot, probes) +
                        physics::loss_boundary(rot, everywhere, boundary, dt);
    const double got =
        physics::loss_physics(rot, everywhere, probes, boundary, dt, w);
    CHECK(got == doctest::Approx(want).epsilon(1e-12));

    physics::LossWeights bad;
    bad.lambda_ns = -1;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("graph losses equal the numeric evaluators on a neural model") {
    scene::SceneBundle b = small_bundle();
    auto m = tiny_model(b, 51);
    physics::ModelSource src(m);
    physics::FluidRegion region = region_of(b);

    Rng rng(7);
    physics::ProbeSet probes = physics::sample_fluid_probes(b, 24, 2.0, rng);
    auto boundary = physics::sample_boundary_probes(b, 12, 2.0, 2.0, rng);
    REQUIRE(!boundary.empty());
    std::vector<physics::SceneFlowSample> flow;
    for (int i = 0; i < 10; ++i)
        flow.push_back({probes.points[i], probes.times[i],
                        {rng.normal() * 0.1, rng.normal() * 0.1, 0}});

    const double dt = 1.0 / 30.0;
    physics::LossWeights w;

    ad::Graph g;
    ad::Tensor feats = field::build_feature_grid(g, m);
    ad::Tensor force = field::build_force(g, m, feats);
    auto terms =
        physics::build_loss_physics(g, m, probes, boundary, region, dt, w, feats, force);
    ad::Tensor motion = physics::build_loss_motion(g, m, flow, feats);

    CHECK(fd::rel_err(terms.ns.item(), physics::loss_ns(src, probes)) < 1e-10);
    CHECK(fd::rel_err(terms.div.item(), physics::loss_div(src, probes)) < 1e-10);
    CHECK(fd::rel_err(terms.boundary.item(),
                      physics::loss_boundary(src, region, boundary, dt)) < 1e-10);
    CHECK(fd::rel_err(terms.combined.item(),
                      physics::loss_physics(src, region, probes, boundary, dt, w)) <
          1e-10);
    CHECK(fd::rel_err(motion.item(), physics::loss_motion(src, flow)) < 1e-10);

    // Individual builders agree with the shared-dual combined builder.
    ad::Graph g2;
    ad::Tensor f2 = field::build_feature_grid(g2, m);
    ad::Tensor force2 = field::build_force(g2, m, f2);
    CHECK(physics::build_loss_ns(g2, m, probes, f2, force2).item() ==
          doctest::Approx(terms.ns.item()).epsilon(1e-14));
    CHECK(physics::build_loss_div(g2, m, probes, f2).item() ==
          doctest::Approx(terms.div.item()).epsilon(1e-14));
}

TEST_CASE("loss gradients match finite differences through every term") {
    scene::SceneBundle b = small_bundle();
    auto m = tiny_model(b, 52);
    physics::FluidRegion always_out;  // stable gate: every probe contributes
    always_out.analytic = [](const Vec3 &, double) { return false; };

    Rng rng(15);
    physics::ProbeSet probes = physics::sample_fluid_probes(b, 6, 2.0, rng);
    std::vector<physics::BoundaryProbe> boundary;
    std::vector<physics::SceneFlowSample> flow;
    for (size_t i = 0; i < 4; ++i) {
        boundary.push_back({probes.points[i], probes.times[i], true});
        flow.push_back({probes.points[i], probes.times[i],
                        {0.05 * double(i), -0.02, 0.01}});
    }
    const double dt = 1.0 / 30.0;
    physics::LossWeights w;

    auto eval_total = [&]() -> double {
        ad::Graph g;
        ad::Tensor feats = field::build_feature_grid(g, m);
        ad::Tensor force = field::build_force(g, m, feats);
        auto terms = physics::build_loss_physics(g, m, probes, boundary, always_out,
                                                 dt, w, feats, force);
        ad::Tensor motion = physics::build_loss_motion(g, m, flow, feats);
        return g.add(motion, g.affine(terms.combined, w.lambda_physics, 0.0)).item();
    };

    ad::Graph g;
    ad::Tensor feats = field::build_feature_grid(g, m);
    ad::Tensor force = field::build_force(g, m, feats);
    auto terms = physics::build_loss_physics(g, m, probes, boundary, always_out, dt,
                                             w, feats, force);
    ad::Tensor motion = physics::build_loss_motion(g, m, flow, feats);
    ad::Tensor total =
        g.add(motion, g.affine(terms.combined, w.lambda_physics, 0.0));
    ad::nested_grad(total, m.params);
    CHECK(total.item() > 0.0);

    struct Pick {
        const char *name;
        size_t idx;
    };
    const Pick picks[] = {{"enc/conv0", 5},    {"enc/proj", 3},
                          {"mlp/w0", 12},      {"mlp/w2", 2},
                          {"mlp/b1", 1},       {"force/conv0", 8},
                          {"force/fc1", 4},    {"force/fbias1", 0}};
    for (const auto &pick : picks) {
        auto &entry = m.params.entry(pick.name);
        const double saved = entry.value[pick.idx];
        const double h = 1e-5;
        entry.value[pick.idx] = saved + h;
        const double hi = eval_total();
        entry.value[pick.idx] = saved - h;
        const double lo = eval_total();
        entry.value[pick.idx] = saved;
        INFO(pick.name << "[" << pick.idx << "]");
        CHECK(fd::rel_err(entry.grad[pick.idx], (hi - lo) / (2 * h)) < 1e-4);
    }
}

TEST_CASE("probe samplers are deterministic and respect the scene geometry") {
    scene::SceneBundle b = small_bundle();
    physics::FluidRegion region = region_of(b);

    Rng r1(33), r2(33);
    auto p1 = physics::sample_fluid_probes(b, 100, 2.0, r1);
    auto p2 = physics::sample_fluid_probes(b, 100, 2.0, r2);
    REQUIRE(p1.size() == 100);
    for (size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1.points[i].x == p2.points[i].x);
        CHECK(p1.times[i] == p2.times[i]);
        CHECK(region.contains(p1.points[i], p1.times[i]));
        CHECK(p1.times[i] >= 0.0);
        CHECK(p1.times[i] <= 2.0);
    }

    Rng r3(34);
    auto edge = physics::sample_boundary_probes(b, 50, 2.0, 2.0, r3);
    REQUIRE(edge.size() == 50);
    for (const auto &probe : edge) {
        CHECK(probe.stays_inside_gt);
        CHECK(region.contains(probe.position, probe.t));
        // Projects within the band of some non-fluid pixel.
        auto px = b.camera.try_project(probe.position);
        REQUIRE(px.has_value());
        bool near_edge = false;
        const int cx = int(std::lround(px->u)), cy = int(std::lround(px->v));
        for (int dy = -3; dy <= 3 && !near_edge; ++dy)
            for (int dx = -3; dx <= 3 && !near_edge; ++dx) {
                const int nx = cx + dx, ny = cy + dy;
                if (!b.mask.inside(nx, ny) || b.mask.at(0, ny, nx) <= 0.5)
                    near_edge = true;
            }
        CHECK(near_edge);
    }

    img::Grid nofluid(32, 32, 1);
    scene::SceneBundle empty = b;
    empty.mask = nofluid;
    Rng r4(35);
    CHECK_THROWS_AS(physics::sample_fluid_probes(empty, 10, 2.0, r4), ArgumentError);
    CHECK(physics::sample_boundary_probes(empty, 10, 2.0, 2.0, r4).empty());
}
