#pragma once

// Physics-informed and supervision losses over a velocity field.
//
// Two layers share one set of formulas. The numeric layer evaluates losses
// in plain doubles against a VelocitySource (the neural model or an analytic
// field) and feeds reports, metrics and oracle tests. The graph layer builds
// the same losses as autodiff tensors for training; a test pins the two
// layers to each other so they cannot drift.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "splatflow/dual.hpp"
#include "splatflow/field.hpp"

namespace splatflow::physics {

struct LossWeights {
    double lambda_ns = 1e-2;
    double lambda_div = 1e-2;
    double lambda_physics = 1e-1;    // scales the whole physics block
    double lambda_novel_view = 1.0;  // decoder-stage reconstruction weight
    void validate() const;           // all weights nonnegative
};

// Ground-truth motion supervision at one surface point.
struct SceneFlowSample {
    Vec3 position;
    double t = 0;
    Vec3 u_gt;
};

// A probe near the fluid-mask boundary. Only probes whose ground-truth
// trajectory stays inside the fluid participate in the boundary penalty.
struct BoundaryProbe {
    Vec3 position;
    double t = 0;
    bool stays_inside_gt = true;
};

struct ProbeSet {
    std::vector<Vec3> points;
    std::vector<double> times;
    size_t size() const { return points.size(); }
};

// ------------------------------------------------------------ field sources

// Anything that can report velocities with exact input-Jacobians.
class VelocitySource {
  public:
    virtual ~VelocitySource() = default;
    virtual std::vector<ad::JetResult> jets(std::span<const Vec3> points,
                                            std::span<const double> times) const = 0;
    virtual Vec3 velocity(const Vec3 &p, double t) const;
    virtual Vec3 force() const { return {0, 0, 0}; }
    // Bulk values. `feature_points` pins per-probe conditioning anchors for
    // sources that carry image features; sources without conditioning have
    // nothing to pin and ignore it (both anchor modes coincide). The default
    // loops velocity().
    virtual void velocity_batch(std::span<const Vec3> points,
                                std::span<const double> times, std::span<Vec3> out,
                                std::span<const Vec3> feature_points = {}) const;
};

class ModelSource final : public VelocitySource {
  public:
    explicit ModelSource(const field::VelocityFieldModel &m) : model_(&m) {}
    std::vector<ad::JetResult> jets(std::span<const Vec3>,
                                    std::span<const double>) const override;
    Vec3 velocity(const Vec3 &p, double t) const override;
    Vec3 force() const override;
    void velocity_batch(std::span<const Vec3> points, std::span<const double> times,
                        std::span<Vec3> out,
                        std::span<const Vec3> feature_points = {}) const override;

  private:
    const field::VelocityFieldModel *model_;
};

// Closed-form field u(x, y, z, t) written on dual numbers, so Jacobians are
// exact. Used by synthetic scenes and as the oracle wrapper in tests.
using AnalyticFn =
    std::function<std::array<ad::Dual4, 3>(const std::array<ad::Dual4, 4> &)>;

class AnalyticSource final : public VelocitySource {
  public:
    AnalyticSource(AnalyticFn fn, Vec3 force = {0, 0, 0})
        : fn_(std::move(fn)), force_(force) {}
    std::vector<ad::JetResult> jets(std::span<const Vec3>,
                                    std::span<const double>) const override;
    Vec3 force() const override { return force_; }

  private:
    AnalyticFn fn_;
    Vec3 force_;
};

// --------------------------------------------------------------- geometry

// Where the fluid is. Synthetic scenes install an exact containment test;
// real scenes fall back to a nearest-pixel lookup of the projected mask.
// Points that do not project into the image count as outside the fluid.
struct FluidRegion {
    scene::Camera camera;
    img::Grid mask;  // full resolution, nonzero = fluid
    std::function<bool(const Vec3 &, double)> analytic;  // optional exact test

    bool contains(const Vec3 &p, double t) const;
};

// 1 iff the displaced point lies outside the fluid region (Dirichlet
// boundary indicator).
int w_indicator(const FluidRegion &region, const Vec3 &p_displaced, double t = 0);

// ----------------------------------------------------- numeric evaluation

// Transport residual du/dt + (u . grad)u - f_g from exact Jacobians.
Vec3 ns_residual(const VelocitySource &src, const Vec3 &p, double t);
// Trace of the spatial Jacobian.
double divergence(const VelocitySource &src, const Vec3 &p, double t);

double loss_ns(const VelocitySource &src, const ProbeSet &probes);
double loss_div(const VelocitySource &src, const ProbeSet &probes);
// Mean over probes of w(p + dt*u) * |u|^2. Probes with stays_inside_gt
// false violate the contract and raise ArgumentError. Empty set -> 0.
double loss_boundary(const VelocitySource &src, const FluidRegion &region,
                     std::span<const BoundaryProbe> probes, double dt);
// Mean end-point error |u - u_gt| (norm, not squared).
double loss_motion(const VelocitySource &src,
                   std::span<const SceneFlowSample> samples);
// lambda_ns * L_NS + lambda_div * L_div + L_b.
double loss_physics(const VelocitySource &src, const FluidRegion &region,
                    const ProbeSet &probes,
                    std::span<const BoundaryProbe> boundary, double dt,
                    const LossWeights &weights);

// ------------------------------------------------------- graph evaluation

// Training-time builders. Each returns a 1x1 tensor; gradients reach the
// parameters through backward(). `feature_grid` comes from
// field::build_feature_grid (or a constant when the encoder is frozen);
// `force` from field::build_force or a zero constant under the force
// ablation.
ad::Tensor build_loss_ns(ad::Graph &g, const field::VelocityFieldModel &m,
                         const ProbeSet &probes, ad::Tensor feature_grid,
                         ad::Tensor force);
ad::Tensor build_loss_div(ad::Graph &g, const field::VelocityFieldModel &m,
                          const ProbeSet &probes, ad::Tensor feature_grid);
ad::Tensor build_loss_boundary(ad::Graph &g, const field::VelocityFieldModel &m,
                               std::span<const BoundaryProbe> probes,
                               const FluidRegion &region, double dt,
                               ad::Tensor feature_grid);
ad::Tensor build_loss_motion(ad::Graph &g, const field::VelocityFieldModel &m,
                             std::span<const SceneFlowSample> samples,
                             ad::Tensor feature_grid);

struct PhysicsTerms {
    ad::Tensor ns, div, boundary;
    ad::Tensor combined;  // lambda_ns*ns + lambda_div*div + boundary
};
// Shares one dual velocity evaluation between the NS and divergence terms.
PhysicsTerms build_loss_physics(ad::Graph &g, const field::VelocityFieldModel &m,
                                const ProbeSet &probes,
                                std::span<const BoundaryProbe> boundary,
                                const FluidRegion &region, double dt,
                                const LossWeights &weights,
                                ad::Tensor feature_grid, ad::Tensor force);

// ---------------------------------------------------------- probe sampling

// Uniform over fluid-mask pixels (sub-pixel jittered) x uniform t in [0, T].
ProbeSet sample_fluid_probes(const scene::SceneBundle &bundle, int count,
                             double total_seconds, Rng &rng);

// Fluid pixels within `band_px` of a non-fluid pixel or the image border.
// Returns fewer (possibly zero) probes when the mask has no boundary band.
std::vector<BoundaryProbe> sample_boundary_probes(const scene::SceneBundle &bundle,
                                                  int count, double total_seconds,
                                                  double band_px, Rng &rng);

}  // namespace splatflow::physics
