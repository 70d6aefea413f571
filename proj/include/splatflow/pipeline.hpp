// Orchestration glue shared by the command-line tool and the acceptance
// harness: finite-difference gradient sweeps over every loss term, training
// data assembly for synthetic scenes, in-memory animation rendering, and
// full-report evaluation against exact ground truth.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "splatflow/animation.hpp"
#include "splatflow/metrics.hpp"
#include "splatflow/synthlab.hpp"
#include "splatflow/training.hpp"

namespace splatflow::pipe {

// Reverse-mode vs central-difference agreement for one loss term, measured
// as max over parameters of |g - fd| / max(|g|, |fd|, 1e-6).
struct GradCheck {
    std::string loss;
    double max_rel_error = 0;
    int params = 0;  // parameter count of the model that was differentiated
};

// Checks the motion, Navier-Stokes, divergence, and boundary losses on a
// small randomly perturbed model (a few hundred parameters); `step` is the
// central-difference half-step.
std::vector<GradCheck> gradcheck_all(uint64_t seed, double step = 1e-5);

// Training data for a synthetic scene: `flow_samples` > 0 draws that many
// exact scene-flow samples, 0 leaves the pool empty so train_dynamics falls
// back to the bundle's hint maps.
train::DynamicsData dynamics_data(const synth::SyntheticScene &scn,
                                  int flow_samples, uint64_t seed);

// Kernels from the bundle rendered through the model's animation (no disk
// I/O); the decoder pointer follows render::decode_features semantics.
std::vector<img::Grid> animate_frames(const scene::SceneBundle &bundle,
                                      const field::VelocityFieldModel &model,
                                      const anim::AnimationConfig &cfg,
                                      const render::RasterConfig &raster = {},
                                      ad::ParameterSet *decoder = nullptr);

struct EvalOptions {
    int probes = 2000;     // velocity / divergence sample count
    double horizon = 1.5;  // violation-rate advection horizon, seconds
    int steps = 48;        // violation-rate Euler steps
    uint64_t seed = 1;
    int threads = 1;       // per-frame metric workers
};

// Frame metrics of `rendered` against the scene's exact reference video plus
// velocity error, Monte-Carlo divergence, and boundary-violation rate of
// `field` against the analytic oracle.
metrics::EvalReport evaluate_fields(const synth::SyntheticScene &scn,
                                    std::span<const img::Grid> rendered,
                                    const physics::VelocitySource &field,
                                    const EvalOptions &opt = {});

}  // namespace splatflow::pipe
