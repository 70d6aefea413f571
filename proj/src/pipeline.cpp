#include "splatflow/pipeline.hpp"

#include <chrono>
#include <cmath>

namespace splatflow::pipe {

namespace {

double seconds_since(const std::chrono::steady_clock::time_point &t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

struct LossValues {
    double motion = 0, ns = 0, div = 0, boundary = 0;
};

struct GradProblem {
    field::VelocityFieldModel model;
    train::DynamicsData data;
    std::vector<physics::SceneFlowSample> batch;
    physics::ProbeSet probes;
    std::vector<physics::BoundaryProbe> boundary;
    physics::LossWeights weights;
    double boundary_dt = 1.0 / 12.0;
};

LossValues forward_losses(GradProblem &p) {
    ad::Graph g;
    ad::Tensor fg = field::build_feature_grid(g, p.model);
    ad::Tensor force = field::build_force(g, p.model, fg);
    ad::Tensor motion = physics::build_loss_motion(g, p.model, p.batch, fg);
    const auto terms =
        physics::build_loss_physics(g, p.model, p.probes, p.boundary,
                                    p.data.region, p.boundary_dt, p.weights, fg,
                                    force);
    return {motion.value()[0], terms.ns.value()[0], terms.div.value()[0],
            terms.boundary.value()[0]};
}

// Reverse-mode gradient of one of the four losses, flattened in entry order.
std::vector<double> backward_loss(GradProblem &p, int which) {
    p.model.params.zero_grads();
    ad::Graph g;
    ad::Tensor fg = field::build_feature_grid(g, p.model);
    ad::Tensor force = field::build_force(g, p.model, fg);
    ad::Tensor motion = physics::build_loss_motion(g, p.model, p.batch, fg);
    const auto terms =
        physics::build_loss_physics(g, p.model, p.probes, p.boundary,
                                    p.data.region, p.boundary_dt, p.weights, fg,
                                    force);
    const ad::Tensor losses[4] = {motion, terms.ns, terms.div, terms.boundary};
    g.backward(losses[which]);
    std::vector<double> flat;
    for (const auto &e : p.model.params.entries())
        flat.insert(flat.end(), e.grad.begin(), e.grad.end());
    return flat;
}

}  // namespace

std::vector<GradCheck> gradcheck_all(uint64_t seed, double step) {
    if (step <= 0) throw ArgumentError("gradcheck: step must be positive");

    // Small oblique channel scene; the visible banks give the boundary loss
    // probes to penalize.
    synth::RiverSceneConfig rc;
    rc.width = 16;
    rc.height = 16;
    rc.focal = 10.0;
    rc.nadir = true;
    rc.frames = 3;
    rc.fps = 8.0;
    const auto scn = synth::make_river_scene(rc);

    GradProblem p;
    p.data = dynamics_data(scn, 48, seed);

    field::ModelConfig mc;
    mc.embed_frequencies = 1;
    mc.mlp_hidden = {6, 5};
    mc.feature_channels = 2;
    mc.encoder_channels = {2};
    mc.force_channels = 4;
    mc.use_hints = false;
    p.model = field::init_model(mc, scn.bundle, scn.total_seconds, seed);

    // The zero-initialized heads block gradient flow into the trunk, so
    // perturb every parameter to make the check cover all of them.
    Rng rng(seed);
    for (auto &e : p.model.params.entries())
        for (double &v : e.value) v += 0.05 * rng.normal();
    p.model.invalidate();

    Rng sampler(seed + 1);
    p.batch.resize(16);
    for (auto &s : p.batch) s = p.data.flow[sampler.below(p.data.flow.size())];
    p.probes = physics::sample_fluid_probes(p.data.bundle, 12,
                                            p.data.total_seconds, sampler);
    p.boundary = physics::sample_boundary_probes(p.data.bundle, 8,
                                                 p.data.total_seconds, 3.0,
                                                 sampler);

    const int params = int(p.model.params.total_values());
    const char *names[4] = {"motion", "ns", "div", "boundary"};
    std::vector<std::vector<double>> grads;
    for (int k = 0; k < 4; ++k) grads.push_back(backward_loss(p, k));

    std::vector<GradCheck> out;
    for (int k = 0; k < 4; ++k) out.push_back({names[k], 0.0, params});

    size_t flat = 0;
    for (auto &e : p.model.params.entries()) {
        for (double &v : e.value) {
            const double saved = v;
            v = saved + step;
            p.model.invalidate();
            const LossValues plus = forward_losses(p);
            v = saved - step;
            p.model.invalidate();
            const LossValues minus = forward_losses(p);
            v = saved;
            p.model.invalidate();

            const double fd[4] = {
                (plus.motion - minus.motion) / (2 * step),
                (plus.ns - minus.ns) / (2 * step),
                (plus.div - minus.div) / (2 * step),
                (plus.boundary - minus.boundary) / (2 * step)};
            for (int k = 0; k < 4; ++k) {
                const double g = grads[k][flat];
                const double rel = std::abs(g - fd[k]) /
                                   std::max({std::abs(g), std::abs(fd[k]), 1e-6});
                out[k].max_rel_error = std::max(out[k].max_rel_error, rel);
            }
            ++flat;
        }
    }
    return out;
}

train::DynamicsData dynamics_data(const synth::SyntheticScene &scn,
                                  int flow_samples, uint64_t seed) {
    train::DynamicsData d;
    d.bundle = scn.bundle;
    d.region = scn.region();
    if (flow_samples > 0) d.flow = synth::sample_scene_flow(scn, flow_samples, seed);
    d.total_seconds = scn.total_seconds;
    return d;
}

std::vector<img::Grid> animate_frames(const scene::SceneBundle &bundle,
                                      const field::VelocityFieldModel &model,
                                      const anim::AnimationConfig &cfg,
                                      const render::RasterConfig &raster,
                                      ad::ParameterSet *decoder) {
    const auto g0 = scene::gaussians_from_image(bundle.image, bundle.depth,
                                                bundle.mask, bundle.camera);
    const physics::ModelSource src(model);
    return anim::render_video(g0, src, bundle.trajectory, cfg, raster, decoder);
}

metrics::EvalReport evaluate_fields(const synth::SyntheticScene &scn,
                                    std::span<const img::Grid> rendered,
                                    const physics::VelocitySource &field,
                                    const EvalOptions &opt) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto gt = synth::render_ground_truth(scn, scn.bundle.trajectory);
    if (rendered.size() != gt.size())
        throw ShapeError("evaluate_fields: rendered frame count disagrees with "
                         "the scene trajectory");
    metrics::EvalReport report = metrics::evaluate_frames(
        rendered, gt, &scn.bundle.mask, opt.threads);

    Rng rng(opt.seed);
    const auto probes = physics::sample_fluid_probes(scn.bundle, opt.probes,
                                                     scn.total_seconds, rng);
    const physics::AnalyticSource oracle(scn.field.dual);
    const auto ve =
        metrics::velocity_error(field, oracle, probes.points, probes.times);
    report.epe = ve.epe;
    report.l1_component = ve.l1_component;
    report.l1_sum = ve.l1_sum;
    report.mean_abs_div = metrics::mean_abs_divergence(field, probes);

    const auto g0 = scene::gaussians_from_image(scn.bundle.image, scn.bundle.depth,
                                                scn.bundle.mask, scn.bundle.camera);
    report.boundary_violation = metrics::boundary_violation_rate(
        g0, field, scn.region(), opt.horizon, opt.steps);
    report.eval_seconds = seconds_since(t0);
    return report;
}

}  // namespace splatflow::pipe
