#include "splatflow/physics.hpp"

#include <algorithm>
#include <cmath>

namespace splatflow::physics {

using ad::DualTensor;
using ad::Graph;
using ad::JetResult;
using ad::Tensor;

void LossWeights::validate() const {
    if (lambda_ns < 0 || lambda_div < 0 || lambda_physics < 0 ||
        lambda_novel_view < 0)
        throw ArgumentError("loss weights must be nonnegative");
}

// ------------------------------------------------------------ field sources

Vec3 VelocitySource::velocity(const Vec3 &p, double t) const {
    return jets(std::span<const Vec3>(&p, 1), std::span<const double>(&t, 1))[0]
        .value;
}

void VelocitySource::velocity_batch(std::span<const Vec3> points,
                                    std::span<const double> times,
                                    std::span<Vec3> out,
                                    std::span<const Vec3>) const {
    if (points.size() != times.size() || points.size() != out.size())
        throw ShapeError("velocity_batch: span lengths disagree");
    for (size_t i = 0; i < points.size(); ++i)
        out[i] = velocity(points[i], times[i]);
}

std::vector<JetResult> ModelSource::jets(std::span<const Vec3> points,
                                         std::span<const double> times) const {
    return field::velocity_jets(*model_, points, times);
}

Vec3 ModelSource::velocity(const Vec3 &p, double t) const {
    return field::velocity(*model_, p, t);
}

Vec3 ModelSource::force() const { return field::external_force(*model_); }

void ModelSource::velocity_batch(std::span<const Vec3> points,
                                 std::span<const double> times, std::span<Vec3> out,
                                 std::span<const Vec3> feature_points) const {
    field::velocity_batch(*model_, points, times, out, feature_points);
}

std::vector<JetResult> AnalyticSource::jets(std::span<const Vec3> points,
                                            std::span<const double> times) const {
    if (points.size() != times.size())
        throw ShapeError("jets: point/time counts disagree");
    std::vector<JetResult> out(points.size());
    for (size_t i = 0; i < points.size(); ++i) {
        auto wrapped = [&](const std::array<ad::Dual4, 4> &x) { return fn_(x); };
        out[i] = ad::forward_jacobian(
            wrapped, Vec4{points[i].x, points[i].y, points[i].z, times[i]});
    }
    return out;
}

// --------------------------------------------------------------- geometry

bool FluidRegion::contains(const Vec3 &p, double t) const {
    if (analytic) return analytic(p, t);
    auto px = camera.try_project(p);
    if (!px || !camera.pixel_inside(px->u, px->v)) return false;
    return mask.nearest(0, px->u, px->v) > 0.5;
}

int w_indicator(const FluidRegion &region, const Vec3 &p_displaced, double t) {
    return region.contains(p_displaced, t) ? 0 : 1;
}

// ----------------------------------------------------- numeric evaluation

Vec3 ns_residual(const VelocitySource &src, const Vec3 &p, double t) {
    JetResult jet = src.jets(std::span<const Vec3>(&p, 1),
                             std::span<const double>(&t, 1))[0];
    const Vec3 u = jet.value;
    const Vec3 dudt = jet.jacobian.col(3);
    const Vec3 advect = jet.jacobian.spatial() * u;
    return dudt + advect - src.force();
}

double divergence(const VelocitySource &src, const Vec3 &p, double t) {
    JetResult jet = src.jets(std::span<const Vec3>(&p, 1),
                             std::span<const double>(&t, 1))[0];
    return jet.jacobian(0, 0) + jet.jacobian(1, 1) + jet.jacobian(2, 2);
}

namespace {

void require_probes(size_t n, const char *what) {
    if (n == 0) throw ArgumentError(std::string(what) + ": empty probe set");
}

}  // namespace

double loss_ns(const VelocitySource &src, const ProbeSet &probes) {
    require_probes(probes.size(), "loss_ns");
    auto all = src.jets(probes.points, probes.times);
    const Vec3 f = src.force();
    double acc = 0;
    for (const auto &jet : all) {
        const Vec3 r = jet.jacobian.col(3) + jet.jacobian.spatial() * jet.value - f;
        acc += r.norm2();
    }
    return acc / double(all.size());
}

double loss_div(const VelocitySource &src, const ProbeSet &probes) {
    require_probes(probes.size(), "loss_div");
    auto all = src.jets(probes.points, probes.times);
    double acc = 0;
    for (const auto &jet : all) {
        const double d = jet.jacobian(0, 0) + jet.jacobian(1, 1) + jet.jacobian(2, 2);
        acc += d * d;
    }
    return acc / double(all.size());
}

double loss_boundary(const VelocitySource &src, const FluidRegion &region,
                     std::span<const BoundaryProbe> probes, double dt) {
    if (probes.empty()) return 0.0;
    double acc = 0;
    for (const auto &probe : probes) {
        if (!probe.stays_inside_gt)
            throw ArgumentError(
                "loss_boundary: probes must stay inside the fluid in ground truth");
        const Vec3 u = src.velocity(probe.position, probe.t);
        const Vec3 displaced = probe.position + dt * u;
        acc += w_indicator(region, displaced, probe.t) * u.norm2();
    }
    return acc / double(probes.size());
}

double loss_motion(const VelocitySource &src,
                   std::span<const SceneFlowSample> samples) {
    require_probes(samples.size(), "loss_motion");
    double acc = 0;
    for (const auto &s : samples)
        acc += (src.velocity(s.position, s.t) - s.u_gt).norm();
    return acc / double(samples.size());
}

double loss_physics(const VelocitySource &src, const FluidRegion &region,
                    const ProbeSet &probes,
                    std::span<const BoundaryProbe> boundary, double dt,
                    const LossWeights &weights) {
    weights.validate();
    return weights.lambda_ns * loss_ns(src, probes) +
           weights.lambda_div * loss_div(src, probes) +
           loss_boundary(src, region, boundary, dt);
}

// ------------------------------------------------------- graph evaluation

namespace {

// Transport residual from a dual velocity batch: row tangents d[0..2] are
// the spatial Jacobian columns, d[3] the time derivative.
Tensor ns_from_dual(Graph &g, const DualTensor &u, Tensor force) {
    Tensor advect = g.mul_rowvec(u.d[0], g.slice_rows(u.v, 0, 1));
    advect = g.add(advect, g.mul_rowvec(u.d[1], g.slice_rows(u.v, 1, 1)));
    advect = g.add(advect, g.mul_rowvec(u.d[2], g.slice_rows(u.v, 2, 1)));
    Tensor residual = g.add_colvec(g.add(u.d[3], advect), g.neg(force));
    return g.mean(g.colsumsq(residual));
}

Tensor div_from_dual(Graph &g, const DualTensor &u) {
    Tensor div = g.add(g.add(g.slice_rows(u.d[0], 0, 1), g.slice_rows(u.d[1], 1, 1)),
                       g.slice_rows(u.d[2], 2, 1));
    return g.mean(g.emul(div, div));
}

}  // namespace

Tensor build_loss_ns(Graph &g, const field::VelocityFieldModel &m,
                     const ProbeSet &probes, Tensor feature_grid, Tensor force) {
    require_probes(probes.size(), "loss_ns");
    DualTensor u =
        field::build_velocity_dual(g, m, probes.points, probes.times, feature_grid);
    return ns_from_dual(g, u, force);
}

Tensor build_loss_div(Graph &g, const field::VelocityFieldModel &m,
                      const ProbeSet &probes, Tensor feature_grid) {
    require_probes(probes.size(), "loss_div");
    DualTensor u =
        field::build_velocity_dual(g, m, probes.points, probes.times, feature_grid);
    return div_from_dual(g, u);
}

Tensor build_loss_boundary(Graph &g, const field::VelocityFieldModel &m,
                           std::span<const BoundaryProbe> probes,
                           const FluidRegion &region, double dt,
                           Tensor feature_grid) {
    if (probes.empty()) return g.scalar(0.0);
    std::vector<Vec3> pts(probes.size());
    std::vector<double> times(probes.size());
    for (size_t i = 0; i < probes.size(); ++i) {
        if (!probes[i].stays_inside_gt)
            throw ArgumentError(
                "loss_boundary: probes must stay inside the fluid in ground truth");
        pts[i] = probes[i].position;
        times[i] = probes[i].t;
    }
    Tensor u = field::build_velocity(g, m, pts, times, feature_grid);
    // The indicator is a hard gate evaluated at the current field; gradients
    // flow through |u|^2 only.
    auto vals = u.value();
    const size_t n = probes.size();
    std::vector<double> w(n);
    for (size_t i = 0; i < n; ++i) {
        const Vec3 ui{vals[i], vals[n + i], vals[2 * n + i]};
        w[i] = double(w_indicator(region, pts[i] + dt * ui, times[i]));
    }
    Tensor wrow = g.constant(1, int(n), w);
    return g.mean(g.emul(wrow, g.colsumsq(u)));
}

Tensor build_loss_motion(Graph &g, const field::VelocityFieldModel &m,
                         std::span<const SceneFlowSample> samples,
                         Tensor feature_grid) {
    require_probes(samples.size(), "loss_motion");
    const size_t n = samples.size();
    std::vector<Vec3> pts(n);
    std::vector<double> times(n);
    std::vector<double> gt(3 * n);
    for (size_t i = 0; i < n; ++i) {
        pts[i] = samples[i].position;
        times[i] = samples[i].t;
        gt[i] = samples[i].u_gt.x;
        gt[n + i] = samples[i].u_gt.y;
        gt[2 * n + i] = samples[i].u_gt.z;
    }
    Tensor u = field::build_velocity(g, m, pts, times, feature_grid);
    Tensor diff = g.sub(u, g.constant(3, int(n), gt));
    return g.mean(g.sqrt(g.colsumsq(diff)));
}

PhysicsTerms build_loss_physics(Graph &g, const field::VelocityFieldModel &m,
                                const ProbeSet &probes,
                                std::span<const BoundaryProbe> boundary,
                                const FluidRegion &region, double dt,
                                const LossWeights &weights, Tensor feature_grid,
                                Tensor force) {
    weights.validate();
    require_probes(probes.size(), "loss_physics");
    DualTensor u =
        field::build_velocity_dual(g, m, probes.points, probes.times, feature_grid);
    PhysicsTerms terms;
    terms.ns = ns_from_dual(g, u, force);
    terms.div = div_from_dual(g, u);
    terms.boundary = build_loss_boundary(g, m, boundary, region, dt, feature_grid);
    terms.combined = g.add(g.add(g.affine(terms.ns, weights.lambda_ns, 0.0),
                                 g.affine(terms.div, weights.lambda_div, 0.0)),
                           terms.boundary);
    return terms;
}

// ---------------------------------------------------------- probe sampling

namespace {

struct FluidPixels {
    std::vector<std::pair<int, int>> xy;
};

FluidPixels collect_fluid_pixels(const scene::SceneBundle &bundle) {
    FluidPixels fp;
    for (int y = 0; y < bundle.mask.height; ++y)
        for (int x = 0; x < bundle.mask.width; ++x)
            if (bundle.mask.at(0, y, x) > 0.5 && bundle.depth.at(0, y, x) > 0)
                fp.xy.emplace_back(x, y);
    return fp;
}

// Lifts a fluid pixel with sub-pixel jitter; falls back to the pixel center
// when the jittered location leaves the fluid or the valid-depth raster.
Vec3 lift_jittered(const scene::SceneBundle &bundle, int x, int y, Rng &rng) {
    const double ju = x + (rng.uniform() - 0.5);
    const double jv = y + (rng.uniform() - 0.5);
    double u = std::clamp(ju, 0.0, double(bundle.mask.width - 1));
    double v = std::clamp(jv, 0.0, double(bundle.mask.height - 1));
    if (bundle.mask.nearest(0, u, v) <= 0.5 || bundle.depth.nearest(0, u, v) <= 0) {
        u = x;
        v = y;
    }
    return bundle.camera.lift_pixel(u, v, bundle.depth.nearest(0, u, v));
}

}  // namespace

ProbeSet sample_fluid_probes(const scene::SceneBundle &bundle, int count,
                             double total_seconds, Rng &rng) {
    if (count <= 0) throw ArgumentError("probe count must be positive");
    FluidPixels fp = collect_fluid_pixels(bundle);
    if (fp.xy.empty())
        throw ArgumentError("scene has no fluid pixels with valid depth");
    ProbeSet out;
    out.points.reserve(count);
    out.times.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto [x, y] = fp.xy[rng.below(fp.xy.size())];
        out.points.push_back(lift_jittered(bundle, x, y, rng));
        out.times.push_back(rng.uniform() * total_seconds);
    }
    return out;
}

std::vector<BoundaryProbe> sample_boundary_probes(const scene::SceneBundle &bundle,
                                                  int count, double total_seconds,
                                                  double band_px, Rng &rng) {
    if (count <= 0) throw ArgumentError("probe count must be positive");
    if (band_px <= 0) throw ArgumentError("boundary band must be positive");
    const img::Grid &mask = bundle.mask;
    const int band = int(std::ceil(band_px));
    std::vector<std::pair<int, int>> edge;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(0, y, x) <= 0.5 || bundle.depth.at(0, y, x) <= 0) continue;
            bool near_edge = false;
            for (int dy = -band; dy <= band && !near_edge; ++dy)
                for (int dx = -band; dx <= band && !near_edge; ++dx) {
                    const int nx = x + dx, ny = y + dy;
                    if (!mask.inside(nx, ny) || mask.at(0, ny, nx) <= 0.5)
                        near_edge = true;
                }
            if (near_edge) edge.emplace_back(x, y);
        }
    std::vector<BoundaryProbe> out;
    if (edge.empty()) return out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto [x, y] = edge[rng.below(edge.size())];
        BoundaryProbe probe;
        probe.position = lift_jittered(bundle, x, y, rng);
        probe.t = rng.uniform() * total_seconds;
        out.push_back(probe);
    }
    return out;
}

}  // namespace splatflow::physics
