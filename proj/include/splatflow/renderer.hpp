#pragma once

// Software rasterizer for 3D Gaussian scenes: perspective EWA projection,
// tile-binned front-to-back alpha compositing, plus a brute-force reference
// renderer that shares the exact same per-kernel contribution rule, so the
// two agree to the last bit on any scene.
//
// Payloads are N-channel (RGB for direct viewing, feature vectors when a
// convolutional decoder turns the framebuffer into an image).

#include <optional>
#include <vector>

#include "splatflow/camera.hpp"
#include "splatflow/graph.hpp"
#include "splatflow/image.hpp"
#include "splatflow/scene.hpp"

namespace splatflow::render {

struct Projected2DGaussian {
    double mx = 0, my = 0;           // pixel-space mean
    double cxx = 0, cxy = 0, cyy = 0;  // 2x2 covariance (dilated)
    double ixx = 0, ixy = 0, iyy = 0;  // its inverse
    double depth = 0;                // camera-space z
    double opacity = 0;
    int radius = 0;                  // bbox half-extent in pixels (3 sigma)
    size_t index = 0;                // source kernel, stable sort tie-break
};

struct RasterConfig {
    int tile = 16;
    double dilation = 0.3;            // px^2 added to both covariance axes
    double sigma_cutoff = 3.0;        // bbox half-extent in standard deviations
    double alpha_clamp = 0.99;        // per-kernel ceiling
    double alpha_floor = 1e-4;        // contributions below this are skipped
    double min_transmittance = 1e-4;  // early-out threshold
    std::vector<double> background;   // per channel; empty = zeros
    uint64_t tile_shuffle_seed = 0;   // nonzero: permute tile order (testing)
};

struct Framebuffer {
    int width = 0, height = 0, channels = 0;
    std::vector<double> payload;  // [c][y][x]
    std::vector<double> alpha;    // [y][x], 1 - final transmittance

    double at(int c, int y, int x) const {
        return payload[size_t(c) * width * height + size_t(y) * width + x];
    }
    double alpha_at(int y, int x) const { return alpha[size_t(y) * width + x]; }
    img::Grid to_grid() const;
};

// Perspective projection of one kernel: 2D covariance J W Sigma W^T J^T plus
// isotropic dilation. Kernels at or behind the camera plane return nullopt
// (culled, not an error).
std::optional<Projected2DGaussian> project_gaussian(const scene::GaussianKernel &k,
                                                    const scene::Camera &camera,
                                                    const RasterConfig &cfg = {});

// Front-to-back compositing of pre-sorted projected kernels at one pixel.
// Exposed as the reference formula; both renderers reduce to repeated calls
// of the same accumulation step.
struct PixelResult {
    std::vector<double> payload;
    double alpha = 0;
};
PixelResult composite_pixel(std::span<const Projected2DGaussian> sorted,
                            const scene::GaussianScene &gs, double px, double py,
                            const RasterConfig &cfg = {});

// Tile-binned rasterizer.
Framebuffer rasterize(const scene::GaussianScene &gs, const scene::Camera &camera,
                      const RasterConfig &cfg = {});
// Per-pixel full-scan reference. Same contribution rule, no binning.
Framebuffer rasterize_reference(const scene::GaussianScene &gs,
                                const scene::Camera &camera,
                                const RasterConfig &cfg = {});

// ------------------------------------------------------------- decoding

// Convolutional decoder parameters: layers "dec/conv<i>" [out x in*9] with
// biases "dec/cbias<i>", ReLU between layers, linear output. He-initialized.
ad::ParameterSet init_decoder(int in_channels, int hidden, int layers,
                              uint64_t seed);

// Graph forward pass of the decoder on a [C x h*w] feature plane.
ad::Tensor build_decode(ad::Graph &g, ad::ParameterSet &decoder,
                        ad::Tensor features, int height, int width);

// Framebuffer -> RGB. A 3-channel framebuffer with a null or empty decoder
// (no "dec/conv0" entry) passes payloads through unchanged; otherwise the
// decoder's first layer must match the payload channel count.
img::Grid decode_features(const Framebuffer &fb, ad::ParameterSet *decoder);

}  // namespace splatflow::render
