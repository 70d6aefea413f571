#pragma once

// Two-stage optimization: the dynamics stage fits the velocity field to
// scene-flow supervision plus the physics penalties, the decoder stage fits
// the convolutional feature decoder to ground-truth frames with an L1 loss.
// Both stages share the adaptive-moment optimizer, the step-decay learning
// rate schedule, CSV logging, and divergence-abort checkpointing.

#include <cstdint>
#include <string>
#include <vector>

#include "splatflow/field.hpp"
#include "splatflow/physics.hpp"
#include "splatflow/renderer.hpp"

namespace splatflow::train {

// ------------------------------------------------------------- optimizer

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.0, beta2 = 0.9;
    double eps = 1e-8;
};

// First/second moment buffers, laid out to mirror a ParameterSet's entries.
struct AdamState {
    int64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

// One adaptive-moment update with bias correction, consuming the gradients
// accumulated in `params`. The state is created on first use and must keep
// matching the parameter shapes afterwards (ShapeError otherwise).
void adam_step(ad::ParameterSet &params, AdamState &state, const AdamConfig &hyper);

// Step decay: x0.5 once 40% of the run is done, x0.25 once 80% is done.
double decayed_lr(double base, int iteration, int total_iterations);

// --------------------------------------------------------------- config

struct TrainConfig {
    int iterations = 5000;
    AdamConfig adam;
    int flow_batch = 256;      // scene-flow samples per iteration
    int physics_batch = 256;   // interior residual probes per iteration
    int boundary_batch = 64;   // near-boundary probes per iteration
    double boundary_band_px = 3.0;
    double boundary_dt = 1.0 / 12.0;  // displacement horizon of the penalty
    int checkpoint_every = 1000;      // in-memory restore cadence; 0 = end only
    uint64_t seed = 1;
    bool physics_on = true;  // L_physics ablation
    bool force_on = true;    // external-force-head ablation
    bool hints_on = true;    // hint conditioning + hint-derived supervision
    physics::LossWeights weights;
    field::ModelConfig model;
    std::string checkpoint_dir;  // "" = keep checkpoints in memory only

    // Decoder-stage knobs.
    int decoder_hidden = 24;
    int decoder_layers = 2;
    int crop = 32;  // square training crop, clamped to the frame size

    void validate() const;
};

uint64_t config_hash(const TrainConfig &cfg);

// ------------------------------------------------------------------ logs

struct LossRow {
    int iteration = 0;
    double motion = 0, ns = 0, div = 0, boundary = 0, total = 0;
};

struct TrainLog {
    uint64_t seed = 0;
    uint64_t config_hash = 0;
    double wall_seconds = 0;
    bool aborted = false;        // an iteration diverged numerically
    int restored_iteration = -1; // checkpoint the abort fell back to
    std::vector<LossRow> rows;
};

// CSV with an `iteration,motion,ns,div,boundary,total` header row.
void save_log_csv(const TrainLog &log, const std::string &path);

// ------------------------------------------------------- dynamics stage

struct DynamicsData {
    scene::SceneBundle bundle;    // conditioning image, mask, camera
    physics::FluidRegion region;  // boundary geometry for L_b
    std::vector<physics::SceneFlowSample> flow;  // supervision pool; may be
                                                 // empty when hints exist
    double total_seconds = 2.0;
};

struct DynamicsResult {
    field::VelocityFieldModel model;
    TrainLog log;
};

// Densifies the bundle's hint map (du, dv, validity) into scene-flow samples
// at t = 0: displacement is re-lifted at the pixel's depth and scaled by the
// trajectory frame rate. ArgumentError when the bundle has no hints or no
// valid hint pixels.
std::vector<physics::SceneFlowSample> flow_from_hints(const scene::SceneBundle &b,
                                                      int count, Rng &rng);

// Fits the velocity field to L_motion + lambda_physics * L_physics by
// adaptive-moment descent. Supervision comes from data.flow, or from the
// hint map when the pool is empty and hints are enabled. A non-finite loss
// aborts the run and restores the last checkpoint; checkpoints also land in
// checkpoint_dir when set (ckpt_<iter>.splat plus final model.splat).
DynamicsResult train_dynamics(const DynamicsData &data, const TrainConfig &cfg);

// -------------------------------------------------------- decoder stage

struct DecoderSample {
    render::Framebuffer features;  // rasterized feature-payload frame
    img::Grid target;              // RGB ground truth, same pixel dims
};

struct DecoderData {
    std::vector<DecoderSample> samples;
};

struct DecoderResult {
    ad::ParameterSet params;
    TrainLog log;
};

// Fits the convolutional decoder with a mean-L1 loss on random square crops
// of random samples. Three-channel features are already RGB: training is a
// no-op and the returned parameter set is empty (identity decode).
DecoderResult train_decoder(const DecoderData &data, const TrainConfig &cfg);

}  // namespace splatflow::train
