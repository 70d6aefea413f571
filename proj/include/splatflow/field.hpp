#pragma once

// The conditional neural velocity field: a coordinate MLP over
// positionally-embedded normalized coordinates concatenated with features
// sampled from a convolutional encoding of the conditioning image, plus a
// per-scene external-force head.
//
// Everything evaluates through the autodiff graph. Training builds dual
// batches (value + four input tangents) so physics residuals stay
// differentiable in the parameters; inference runs the same graph forward
// and reads values out.

#include <optional>
#include <string>
#include <vector>

#include "splatflow/camera.hpp"
#include "splatflow/dual.hpp"
#include "splatflow/graph.hpp"
#include "splatflow/image.hpp"
#include "splatflow/scene.hpp"

namespace splatflow::field {

struct ModelConfig {
    int embed_frequencies = 6;                 // L; embedding length 4 + 8L
    std::vector<int> mlp_hidden{256, 128, 64, 32};
    int feature_channels = 16;
    std::vector<int> encoder_channels{8, 12, 16};  // one stride-2 stage each
    int encoder_input_scale = 2;               // conditioning downsample divisor
    int force_channels = 16;                   // external-force head width
    bool use_hints = false;
};

struct NormalizedCoord {
    double x = 0, y = 0, z = 0, t = 0;
};

// Projects p through the camera and maps pixel/depth/time into [-1,1]-style
// ranges: x' = 2u/(W-1)-1, y' = 2v/(H-1)-1, z' = 2/max(d,1)-1, t' = t/T.
NormalizedCoord normalize_coords(const Vec3 &p, double t,
                                 const scene::Camera &camera,
                                 double total_seconds);

// Raw coords followed by interleaved sin/cos bands: for each frequency
// level l in [0,L): sin(2^l pi c) over the 4 components, then cos likewise.
// Output length 4 + 8L.
std::vector<double> positional_embedding(const NormalizedCoord &c, int levels);
inline int embedding_length(int levels) { return 4 + 8 * levels; }

struct FeatureGrid {
    int channels = 0, gh = 0, gw = 0;
    int source_width = 0, source_height = 0;  // full-resolution pixel dims
    std::vector<double> data;                  // [c][gy][gx]

    double at(int c, int gy, int gx) const {
        return data[size_t(c) * gh * gw + size_t(gy) * gw + gx];
    }
};

// Bilinear sample at a full-resolution pixel position, border-clamped.
std::vector<double> sample_feature(const FeatureGrid &grid, double u, double v);

struct VelocityFieldModel {
    ModelConfig cfg;
    ad::ParameterSet params;
    scene::Camera camera;        // input view the conditioning was made from
    double total_seconds = 2.0;  // animation horizon T (loop period)
    img::Grid conditioning;      // stacked encoder input planes (downscaled)

    // Primal caches; anything that changes params must call invalidate().
    mutable std::optional<FeatureGrid> feature_cache;
    mutable std::optional<Vec3> force_cache;
    void invalidate() const {
        feature_cache.reset();
        force_cache.reset();
    }
};

// Builds the stacked encoder input from bundle planes: RGB, a depth channel
// mapped through 2/max(d,1)-1, the fluid mask, and optionally the hint map.
img::Grid stack_conditioning(const img::Grid &image, const img::Grid &depth,
                             const img::Grid &mask, const img::Grid *hints,
                             int scale);

// Fresh model with seeded He-style init; the final MLP layer and the force
// output layer start at zero so the initial field is exactly v = 0.
VelocityFieldModel init_model(const ModelConfig &cfg, const scene::SceneBundle &bundle,
                              double total_seconds, uint64_t seed);

// ------------------------------------------------------------ graph builders

// Encoder forward; [feature_channels x gh*gw].
ad::Tensor build_feature_grid(ad::Graph &g, const VelocityFieldModel &m);

// External-force head on top of the feature grid; [3 x 1].
ad::Tensor build_force(ad::Graph &g, const VelocityFieldModel &m,
                       ad::Tensor feature_grid);

// Velocity for a batch of (point, time) probes; [3 x B]. The dual variant
// carries tangents in the x, y, z, t input directions. Points behind the
// camera are rejected with DomainError.
//
// `feature_points`, when non-empty (one per probe), overrides where the
// conditioning features are sampled: the MLP still sees the probe's own
// coordinates, but the feature lookup projects the anchor instead. Advection
// uses this to pin each kernel's conditioning to its initial position.
ad::Tensor build_velocity(ad::Graph &g, const VelocityFieldModel &m,
                          std::span<const Vec3> points,
                          std::span<const double> times,
                          ad::Tensor feature_grid,
                          std::span<const Vec3> feature_points = {});
ad::DualTensor build_velocity_dual(ad::Graph &g, const VelocityFieldModel &m,
                                   std::span<const Vec3> points,
                                   std::span<const double> times,
                                   ad::Tensor feature_grid);

// ---------------------------------------------------------- inference paths

FeatureGrid encode_features(const VelocityFieldModel &m);
Vec3 external_force(const VelocityFieldModel &m);

Vec3 velocity(const VelocityFieldModel &m, const Vec3 &p, double t);
// Batched forward; points behind the camera produce zero velocity instead
// of failing (an advected kernel may drift out of the frustum). Optional
// per-probe feature anchors as in build_velocity; a probe whose anchor sits
// behind the camera is zeroed like a behind-camera probe.
void velocity_batch(const VelocityFieldModel &m, std::span<const Vec3> points,
                    std::span<const double> times, std::span<Vec3> out,
                    std::span<const Vec3> feature_points = {});
// Value + full 3x4 Jacobian per probe.
std::vector<ad::JetResult> velocity_jets(const VelocityFieldModel &m,
                                         std::span<const Vec3> points,
                                         std::span<const double> times);

// ------------------------------------------------------------- checkpoints

// Binary container: magic/version header, a shape table naming every array,
// then little-endian f64 payloads in declared order. Stores parameters,
// model hyper-parameters and the primal feature/force caches.
void save_checkpoint(const VelocityFieldModel &m, const std::string &path);
VelocityFieldModel load_checkpoint(const std::string &path);

// Same container reused for standalone parameter sets (the frame decoder).
void save_params(const ad::ParameterSet &ps, const std::string &path);
void load_params(ad::ParameterSet &ps, const std::string &path);

}  // namespace splatflow::field
