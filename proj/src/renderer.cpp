#include "splatflow/renderer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace splatflow::render {

img::Grid Framebuffer::to_grid() const {
    img::Grid g(width, height, channels);
    g.data = payload;
    return g;
}

// ------------------------------------------------------------ projection

std::optional<Projected2DGaussian> project_gaussian(const scene::GaussianKernel &k,
                                                    const scene::Camera &camera,
                                                    const RasterConfig &cfg) {
    const Vec3 pc = camera.to_camera(k.center);
    if (pc.z <= 1e-9) return std::nullopt;

    // 3D covariance R diag(s^2) R^T in world space.
    const Mat3 R = k.rotation.to_matrix();
    Mat3 S2;
    S2(0, 0) = k.scale.x * k.scale.x;
    S2(1, 1) = k.scale.y * k.scale.y;
    S2(2, 2) = k.scale.z * k.scale.z;
    const Mat3 sigma = R * S2 * R.transposed();

    // Rows of d(pixel)/d(world) = J * W: the perspective Jacobian at the
    // kernel center composed with the world-to-camera rotation.
    const Mat3 W = camera.rotation();
    const double iz = 1.0 / pc.z, iz2 = iz * iz;
    const double j0[3] = {camera.fx * iz, 0.0, -camera.fx * pc.x * iz2};
    const double j1[3] = {0.0, camera.fy * iz, -camera.fy * pc.y * iz2};
    double m0[3], m1[3];
    for (int c = 0; c < 3; ++c) {
        m0[c] = j0[0] * W(0, c) + j0[1] * W(1, c) + j0[2] * W(2, c);
        m1[c] = j1[0] * W(0, c) + j1[1] * W(1, c) + j1[2] * W(2, c);
    }
    auto quad = [&sigma](const double *a, const double *b) {
        double s = 0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) s += a[i] * sigma(i, j) * b[j];
        return s;
    };

    Projected2DGaussian pg;
    pg.cxx = quad(m0, m0) + cfg.dilation;
    pg.cxy = quad(m0, m1);
    pg.cyy = quad(m1, m1) + cfg.dilation;
    const double det = pg.cxx * pg.cyy - pg.cxy * pg.cxy;
    if (det <= 0) return std::nullopt;  // degenerate; cannot be inverted
    pg.ixx = pg.cyy / det;
    pg.ixy = -pg.cxy / det;
    pg.iyy = pg.cxx / det;

    pg.mx = camera.fx * pc.x * iz + camera.cx;
    pg.my = camera.fy * pc.y * iz + camera.cy;
    pg.depth = pc.z;
    pg.opacity = k.opacity;

    // Conservative square bbox from the larger covariance eigenvalue.
    const double mid = 0.5 * (pg.cxx + pg.cyy);
    const double disc = std::sqrt(std::max(0.0, mid * mid - det));
    pg.radius = int(std::ceil(cfg.sigma_cutoff * std::sqrt(mid + disc)));
    return pg;
}

// ------------------------------------------------------- contribution rule

namespace {

// The single contribution rule both renderers share. Pixels interact with a
// kernel only inside its square bbox, so tile binning by the same bbox can
// never change which kernels a pixel sees.
inline bool in_bbox(const Projected2DGaussian &pg, int x, int y) {
    // Centered on the nearest pixel: kernels lifted from pixel centers
    // project to integer means, and rounding keeps their bbox stable under
    // last-ulp position jitter where floor() would sit on a knife edge.
    const int bx = int(std::lround(pg.mx)), by = int(std::lround(pg.my));
    return std::abs(x - bx) <= pg.radius && std::abs(y - by) <= pg.radius;
}

// Adds one kernel's contribution at a pixel center, front-to-back. Returns
// false once the transmittance drops below the early-out floor.
inline bool accumulate_kernel(const Projected2DGaussian &pg,
                              std::span<const double> payload,
                              const RasterConfig &cfg, double px, double py,
                              double *acc, int channels, double &transmittance) {
    const double dx = px - pg.mx, dy = py - pg.my;
    const double power =
        -0.5 * (pg.ixx * dx * dx + 2.0 * pg.ixy * dx * dy + pg.iyy * dy * dy);
    double alpha = pg.opacity * std::exp(std::min(power, 0.0));
    if (alpha > cfg.alpha_clamp) alpha = cfg.alpha_clamp;
    if (alpha < cfg.alpha_floor) return true;
    const double w = transmittance * alpha;
    for (int c = 0; c < channels; ++c) acc[c] += w * payload[c];
    transmittance *= 1.0 - alpha;
    return transmittance >= cfg.min_transmittance;
}

scene::GaussianKernel kernel_at(const scene::GaussianScene &gs, size_t i) {
    return {gs.centers[i], gs.rotations[i], gs.scales[i], gs.opacities[i],
            gs.fluid[i] != 0};
}

// Projects every kernel and sorts front to back, index as tie-break.
std::vector<Projected2DGaussian> project_sorted(const scene::GaussianScene &gs,
                                                const scene::Camera &camera,
                                                const RasterConfig &cfg) {
    std::vector<Projected2DGaussian> out;
    out.reserve(gs.count());
    for (size_t i = 0; i < gs.count(); ++i) {
        auto pg = project_gaussian(kernel_at(gs, i), camera, cfg);
        if (!pg) continue;
        pg->index = i;
        out.push_back(*pg);
    }
    std::sort(out.begin(), out.end(),
              [](const Projected2DGaussian &a, const Projected2DGaussian &b) {
                  return a.depth != b.depth ? a.depth < b.depth : a.index < b.index;
              });
    return out;
}

void check_background(const RasterConfig &cfg, int channels) {
    if (!cfg.background.empty() && int(cfg.background.size()) != channels)
        throw ArgumentError("raster background must match payload channels");
}

void finish_pixel(const RasterConfig &cfg, double transmittance, double *acc,
                  int channels) {
    if (!cfg.background.empty())
        for (int c = 0; c < channels; ++c)
            acc[c] += transmittance * cfg.background[c];
}

}  // namespace

PixelResult composite_pixel(std::span<const Projected2DGaussian> sorted,
                            const scene::GaussianScene &gs, double px, double py,
                            const RasterConfig &cfg) {
    check_background(cfg, gs.payload_dim);
    PixelResult r;
    r.payload.assign(gs.payload_dim, 0.0);
    double transmittance = 1.0;
    const int xi = int(std::floor(px)), yi = int(std::floor(py));
    for (const auto &pg : sorted) {
        if (!in_bbox(pg, xi, yi)) continue;
        if (!accumulate_kernel(pg, gs.payload(pg.index), cfg, px, py,
                               r.payload.data(), gs.payload_dim, transmittance))
            break;
    }
    finish_pixel(cfg, transmittance, r.payload.data(), gs.payload_dim);
    r.alpha = 1.0 - transmittance;
    return r;
}

Framebuffer rasterize_reference(const scene::GaussianScene &gs,
                                const scene::Camera &camera,
                                const RasterConfig &cfg) {
    gs.validate();
    check_background(cfg, gs.payload_dim);
    const auto sorted = project_sorted(gs, camera, cfg);

    Framebuffer fb;
    fb.width = camera.width;
    fb.height = camera.height;
    fb.channels = gs.payload_dim;
    const size_t plane = size_t(fb.width) * fb.height;
    fb.payload.assign(plane * fb.channels, 0.0);
    fb.alpha.assign(plane, 0.0);

    for (int y = 0; y < fb.height; ++y)
        for (int x = 0; x < fb.width; ++x) {
            PixelResult r = composite_pixel(sorted, gs, double(x), double(y), cfg);
            for (int c = 0; c < fb.channels; ++c)
                fb.payload[c * plane + size_t(y) * fb.width + x] = r.payload[c];
            fb.alpha[size_t(y) * fb.width + x] = r.alpha;
        }
    return fb;
}

Framebuffer rasterize(const scene::GaussianScene &gs, const scene::Camera &camera,
                      const RasterConfig &cfg) {
    gs.validate();
    check_background(cfg, gs.payload_dim);
    if (cfg.tile <= 0) throw ArgumentError("tile size must be positive");
    const auto sorted = project_sorted(gs, camera, cfg);

    Framebuffer fb;
    fb.width = camera.width;
    fb.height = camera.height;
    fb.channels = gs.payload_dim;
    const size_t plane = size_t(fb.width) * fb.height;
    fb.payload.assign(plane * fb.channels, 0.0);
    fb.alpha.assign(plane, 0.0);

    // Bin kernel indices into tiles their bbox overlaps; pushing in sorted
    // order keeps every bin front-to-back.
    const int tiles_x = (fb.width + cfg.tile - 1) / cfg.tile;
    const int tiles_y = (fb.height + cfg.tile - 1) / cfg.tile;
    std::vector<std::vector<uint32_t>> bins(size_t(tiles_x) * tiles_y);
    for (uint32_t s = 0; s < sorted.size(); ++s) {
        const auto &pg = sorted[s];
        const int bx = int(std::lround(pg.mx)), by = int(std::lround(pg.my));
        const int x0 = std::max(0, bx - pg.radius);
        const int x1 = std::min(fb.width - 1, bx + pg.radius);
        const int y0 = std::max(0, by - pg.radius);
        const int y1 = std::min(fb.height - 1, by + pg.radius);
        if (x0 > x1 || y0 > y1) continue;
        for (int ty = y0 / cfg.tile; ty <= y1 / cfg.tile; ++ty)
            for (int tx = x0 / cfg.tile; tx <= x1 / cfg.tile; ++tx)
                bins[size_t(ty) * tiles_x + tx].push_back(s);
    }

    // Tiles write disjoint pixels, so processing order is irrelevant; the
    // shuffle hook lets a test assert exactly that.
    std::vector<int> tile_order(bins.size());
    std::iota(tile_order.begin(), tile_order.end(), 0);
    if (cfg.tile_shuffle_seed != 0) {
        Rng rng(cfg.tile_shuffle_seed);
        for (size_t i = tile_order.size(); i > 1; --i)
            std::swap(tile_order[i - 1], tile_order[rng.below(i)]);
    }

    // Tiles touch disjoint pixels, so they can run on any thread in any
    // order without changing a single bit of the result.
    auto render_tile = [&](int tile) {
        std::vector<double> acc(fb.channels);
        const int tx = tile % tiles_x, ty = tile / tiles_x;
        const auto &bin = bins[tile];
        const int x0 = tx * cfg.tile, x1 = std::min(fb.width, x0 + cfg.tile);
        const int y0 = ty * cfg.tile, y1 = std::min(fb.height, y0 + cfg.tile);
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                std::fill(acc.begin(), acc.end(), 0.0);
                double transmittance = 1.0;
                for (uint32_t s : bin) {
                    const auto &pg = sorted[s];
                    if (!in_bbox(pg, x, y)) continue;
                    if (!accumulate_kernel(pg, gs.payload(pg.index), cfg,
                                           double(x), double(y), acc.data(),
                                           fb.channels, transmittance))
                        break;
                }
                finish_pixel(cfg, transmittance, acc.data(), fb.channels);
                for (int c = 0; c < fb.channels; ++c)
                    fb.payload[c * plane + size_t(y) * fb.width + x] = acc[c];
                fb.alpha[size_t(y) * fb.width + x] = 1.0 - transmittance;
            }
    };

    const int workers = std::min<int>(thread_count(), int(tile_order.size()));
    if (workers <= 1) {
        for (int tile : tile_order) render_tile(tile);
    } else {
        std::atomic<size_t> cursor{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (size_t i = cursor.fetch_add(1); i < tile_order.size();
                     i = cursor.fetch_add(1))
                    render_tile(tile_order[i]);
            });
        for (auto &t : pool) t.join();
    }
    return fb;
}

// --------------------------------------------------------------- decoding

ad::ParameterSet init_decoder(int in_channels, int hidden, int layers,
                              uint64_t seed) {
    if (in_channels <= 0 || hidden <= 0 || layers < 1)
        throw ArgumentError("decoder needs positive channel counts and >=1 layer");
    ad::ParameterSet ps;
    Rng rng(seed);
    int prev = in_channels;
    for (int i = 0; i < layers; ++i) {
        const int out = i == layers - 1 ? 3 : hidden;
        auto &w = ps.add("dec/conv" + std::to_string(i), out, prev * 9);
        const double std = std::sqrt(2.0 / double(prev * 9));
        for (auto &v : w.value) v = rng.normal() * std;
        ps.add("dec/cbias" + std::to_string(i), out, 1);
        prev = out;
    }
    return ps;
}

ad::Tensor build_decode(ad::Graph &g, ad::ParameterSet &decoder,
                        ad::Tensor features, int height, int width) {
    if (!decoder.has("dec/conv0"))
        throw ArgumentError("decoder parameters missing 'dec/conv0'");
    ad::Tensor x = features;
    for (int i = 0; decoder.has("dec/conv" + std::to_string(i)); ++i) {
        const std::string idx = std::to_string(i);
        const auto &w = decoder.entry("dec/conv" + idx);
        if (w.cols != x.rows() * 9)
            throw ShapeError("decoder layer " + idx + " expects " +
                             std::to_string(w.cols / 9) + " channels, got " +
                             std::to_string(x.rows()));
        ad::ConvSpec spec{x.rows(), height, width, w.rows, 3, 1, 1};
        x = g.conv2d(x, g.param(decoder, "dec/conv" + idx), spec);
        x = g.add_colvec(x, g.param(decoder, "dec/cbias" + idx));
        if (decoder.has("dec/conv" + std::to_string(i + 1))) x = g.relu(x);
    }
    if (x.rows() != 3) throw ShapeError("decoder must end in 3 channels");
    return x;
}

img::Grid decode_features(const Framebuffer &fb, ad::ParameterSet *decoder) {
    if (!decoder || !decoder->has("dec/conv0")) {
        // No decoder, or an empty one: both mean the payload is already RGB.
        if (fb.channels != 3)
            throw ArgumentError("pass-through decode needs a 3-channel buffer");
        return fb.to_grid();
    }
    ad::Graph g;
    ad::Tensor in = g.constant(fb.channels, fb.width * fb.height, fb.payload);
    ad::Tensor out = build_decode(g, *decoder, in, fb.height, fb.width);
    img::Grid rgb(fb.width, fb.height, 3);
    auto v = out.value();
    std::copy(v.begin(), v.end(), rgb.data.begin());
    return rgb;
}

}  // namespace splatflow::render
