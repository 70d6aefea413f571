// Evaluation metrics: image fidelity (PSNR, mean SSIM), velocity-field error
// against an oracle, Monte-Carlo divergence, boundary-violation rate for
// advected kernels, and the EvalReport container with CSV / JSON-lines
// serialization.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "splatflow/image.hpp"
#include "splatflow/physics.hpp"
#include "splatflow/scene.hpp"

namespace splatflow::metrics {

// ------------------------------------------------------------ image metrics

// Peak signal-to-noise ratio in dB, 10*log10(peak^2 / MSE) over every channel,
// clamped to [0, 99]: identical images report the 99 dB cap. Throws ShapeError
// when dimensions disagree.
double psnr(const img::Grid &a, const img::Grid &b, double peak = 1.0);

// Mask-conditional variant: the MSE runs over pixels whose mask value exceeds
// 0.5 only (all channels of those pixels). An empty selection compares
// nothing and reports the cap.
double psnr(const img::Grid &a, const img::Grid &b, const img::Grid &mask,
            double peak = 1.0);

struct SsimOptions {
    int window = 11;    // odd Gaussian window width
    double sigma = 1.5; // Gaussian scale in pixels
    double k1 = 0.01, k2 = 0.03;
    double peak = 1.0;
};

// Mean structural similarity with a Gaussian-weighted window, averaged over
// channels and valid window positions (no padding). Identical images score
// exactly 1. Throws ShapeError on dimension mismatch, ArgumentError when the
// window is even, non-positive, or larger than the image.
double ssim(const img::Grid &a, const img::Grid &b, const SsimOptions &opt = {});

// Mask-conditional variant: windows count when their center pixel's mask value
// exceeds 0.5. An empty selection reports 1.
double ssim(const img::Grid &a, const img::Grid &b, const img::Grid &mask,
            const SsimOptions &opt = {});

// --------------------------------------------------------- velocity metrics

// Velocity error in several conventions: `l1_component` is the mean absolute
// error per component (sum |du_c| / 3 per probe, averaged), `l1_sum` keeps the
// per-probe component sum un-divided (3x the former), `epe` is the mean
// Euclidean endpoint error.
struct VelocityError {
    double l1_component = 0;
    double l1_sum = 0;
    double epe = 0;
};

// Compare two fields at the given probes. Throws ShapeError when the spans
// disagree in length, ArgumentError when empty.
VelocityError velocity_error(const physics::VelocitySource &model,
                             const physics::VelocitySource &oracle,
                             std::span<const Vec3> points,
                             std::span<const double> times);

// Monte-Carlo mean |div u| over the probe set, evaluated with exact jets.
// Throws ArgumentError on an empty probe set.
double mean_abs_divergence(const physics::VelocitySource &field,
                           const physics::ProbeSet &probes);

// Fraction of fluid kernels whose Euler trajectory (dt = horizon / steps,
// conditioning sampled at the advected positions) leaves the fluid region at
// any sampled step. No fluid kernels -> 0 by convention. Throws ArgumentError
// when horizon or steps is non-positive.
double boundary_violation_rate(const scene::GaussianScene &g0,
                               const physics::VelocitySource &field,
                               const physics::FluidRegion &region,
                               double horizon, int steps);

// ------------------------------------------------------------------ reports

// One evaluation run. Frame metrics are indexed by frame; the fluid variants
// are filled only when a mask is supplied and stay empty otherwise. Scalar
// velocity/divergence/violation entries are set by whichever stage measured
// them.
struct EvalReport {
    std::vector<double> frame_psnr, frame_ssim;
    std::vector<double> frame_psnr_fluid, frame_ssim_fluid;
    double epe = 0;
    double l1_component = 0;
    double l1_sum = 0;
    double mean_abs_div = 0;
    double boundary_violation = 0;
    double train_seconds = 0;
    double render_seconds = 0;
    double eval_seconds = 0;
};

// Per-frame PSNR/SSIM of rendered vs reference (plus fluid-masked variants
// when a mask is given). Frames are independent, so `threads` > 1 computes
// them in parallel; assembly stays frame-ordered and the result does not
// depend on the thread count. Throws ShapeError when the sequences disagree
// in length.
EvalReport evaluate_frames(std::span<const img::Grid> rendered,
                           std::span<const img::Grid> reference,
                           const img::Grid *fluid_mask = nullptr,
                           int threads = 1);

// Long-format CSV: "metric,frame,value" rows, frame left empty for scalars.
void save_report_csv(const EvalReport &report, const std::string &path);

// The same rows as JSON-lines; scalar rows omit the "frame" key.
void save_report_jsonl(const EvalReport &report, const std::string &path);

}  // namespace splatflow::metrics
