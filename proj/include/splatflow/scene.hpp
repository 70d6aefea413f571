#pragma once

// Scene construction: lifting an RGB+depth+mask bundle into a set of 3D
// Gaussian kernels, layered-depth-image clustering, and the on-disk bundle
// format shared by the CLI tools.

#include <optional>
#include <string>
#include <vector>

#include "splatflow/camera.hpp"
#include "splatflow/image.hpp"

namespace splatflow::scene {

struct GaussianKernel {
    Vec3 center;
    Quat rotation;
    Vec3 scale{1, 1, 1};  // per-axis standard deviations, world units
    double opacity = 1.0;
    bool fluid = false;
};

// Kernels are stored struct-of-arrays; payloads (color or feature vectors)
// sit in one flat block of `payload_dim` values per kernel.
struct GaussianScene {
    int payload_dim = 3;
    std::vector<Vec3> centers;
    std::vector<Quat> rotations;
    std::vector<Vec3> scales;
    std::vector<double> opacities;
    std::vector<uint8_t> fluid;
    std::vector<double> payloads;

    size_t count() const { return centers.size(); }
    std::span<const double> payload(size_t i) const {
        return {payloads.data() + i * payload_dim, size_t(payload_dim)};
    }
    std::span<double> payload(size_t i) {
        return {payloads.data() + i * payload_dim, size_t(payload_dim)};
    }

    void push(const GaussianKernel &k, std::span<const double> payload_values);
    void validate() const;  // shape agreement, positive scales, opacity in [0,1]
};

struct LdiLayer {
    img::Grid color;     // empty when clustering ran without a color source
    img::Grid depth;
    img::Grid validity;  // 1 where the pixel belongs to this layer
    double depth_min = 0, depth_max = 0;
};

// Single-linkage agglomerative clustering of the depth map, nearest layer
// first: two depth values join the same layer when they can be chained
// through gaps no larger than `threshold`. Pixels with depth <= 0 are
// treated as invalid and belong to no layer.
std::vector<LdiLayer> cluster_ldi(const img::Grid &depth, double threshold,
                                  const img::Grid *color = nullptr);

struct KernelBuildOptions {
    double pixel_footprint = 0.7;  // projected kernel sigma in pixels
    int payload_dim = 3;
};

// One kernel per valid (depth > 0) pixel: center lifted through the camera,
// isotropic scale chosen so the projected footprint is ~pixel_footprint px,
// full opacity, fluid tag taken from the mask.
GaussianScene gaussians_from_image(const img::Grid &image, const img::Grid &depth,
                                   const img::Grid &mask, const Camera &camera,
                                   const KernelBuildOptions &opts = {});

// Fixed payload encoding used when payload_dim > 3: RGB, then componentwise
// squares, then a constant-1 channel, zero padded. decode training learns to
// invert it; with payload_dim == 3 the payload is the RGB itself.
void feature_lift(std::span<const double> rgb, std::span<double> out);

// --------------------------------------------------------------- bundles

struct SceneBundle {
    img::Grid image;             // 3-channel RGB
    img::Grid depth;             // 1-channel, camera-space z
    img::Grid mask;              // 1-channel, nonzero = fluid
    Camera camera;               // input view
    CameraPath trajectory;       // per-frame render poses (frame 0 = input)
    std::optional<img::Grid> hints;  // 3-channel: du, dv, validity
    std::string scene_json;     // synthetic scene descriptor, "" for none
};

// Directory layout: image.png, depth.f32, mask.png, camera.json and the
// optional hints.f32 / scene.json.
SceneBundle load_bundle(const std::string &dir);
void save_bundle(const std::string &dir, const SceneBundle &bundle);

}  // namespace splatflow::scene
