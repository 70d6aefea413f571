#include "splatflow/field.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <memory>

namespace splatflow::field {

using ad::DualTensor;
using ad::Graph;
using ad::ParameterSet;
using ad::Tensor;

NormalizedCoord normalize_coords(const Vec3 &p, double t,
                                 const scene::Camera &camera,
                                 double total_seconds) {
    if (total_seconds <= 0)
        throw ArgumentError("normalize_coords: total_seconds must be positive");
    scene::PixelPoint px = camera.project(p);  // DomainError behind camera
    NormalizedCoord c;
    c.x = 2.0 * px.u / (camera.width - 1) - 1.0;
    c.y = 2.0 * px.v / (camera.height - 1) - 1.0;
    c.z = 2.0 / std::max(px.depth, 1.0) - 1.0;
    c.t = t / total_seconds;
    return c;
}

std::vector<double> positional_embedding(const NormalizedCoord &c, int levels) {
    if (levels < 0) throw ArgumentError("positional_embedding: negative level count");
    const double raw[4] = {c.x, c.y, c.z, c.t};
    std::vector<double> out;
    out.reserve(embedding_length(levels));
    out.assign(raw, raw + 4);
    for (int l = 0; l < levels; ++l) {
        const double f = std::ldexp(M_PI, l);  // 2^l * pi
        for (double v : raw) out.push_back(std::sin(f * v));
        for (double v : raw) out.push_back(std::cos(f * v));
    }
    return out;
}

std::vector<double> sample_feature(const FeatureGrid &grid, double u, double v) {
    if (grid.channels == 0) throw ArgumentError("sample_feature: empty grid");
    const double sx = double(grid.gw) / grid.source_width;
    const double sy = double(grid.gh) / grid.source_height;
    double gx = (u + 0.5) * sx - 0.5;
    double gy = (v + 0.5) * sy - 0.5;
    gx = std::clamp(gx, 0.0, double(grid.gw - 1));
    gy = std::clamp(gy, 0.0, double(grid.gh - 1));
    const int ix = std::min(int(gx), grid.gw - 2 >= 0 ? grid.gw - 2 : 0);
    const int iy = std::min(int(gy), grid.gh - 2 >= 0 ? grid.gh - 2 : 0);
    const double fx = gx - ix, fy = gy - iy;
    std::vector<double> out(grid.channels);
    for (int c = 0; c < grid.channels; ++c) {
        const double a = grid.at(c, iy, ix), b = grid.at(c, iy, std::min(ix + 1, grid.gw - 1));
        const double d = grid.at(c, std::min(iy + 1, grid.gh - 1), ix);
        const double e = grid.at(c, std::min(iy + 1, grid.gh - 1), std::min(ix + 1, grid.gw - 1));
        out[c] = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * d + fx * e);
    }
    return out;
}

img::Grid stack_conditioning(const img::Grid &image, const img::Grid &depth,
                             const img::Grid &mask, const img::Grid *hints,
                             int scale) {
    if (scale < 1) throw ArgumentError("conditioning scale must be >= 1");
    if (image.channels != 3) throw ArgumentError("conditioning image must be RGB");
    if (depth.width != image.width || depth.height != image.height ||
        mask.width != image.width || mask.height != image.height ||
        (hints && (hints->width != image.width || hints->height != image.height)))
        throw ShapeError("conditioning planes must share the image dimensions");
    const int w = image.width / scale, h = image.height / scale;
    if (w < 8 || h < 8) throw ArgumentError("conditioning grid too small");
    const int hint_ch = hints ? hints->channels : 0;
    img::Grid out(w, h, 5 + hint_ch);

    auto block_mean = [&](const img::Grid &src, int c, int ox, int oy) {
        double s = 0;
        int n = 0;
        for (int dy = 0; dy < scale; ++dy)
            for (int dx = 0; dx < scale; ++dx) {
                const int x = ox * scale + dx, y = oy * scale + dy;
                if (!src.inside(x, y)) continue;
                s += src.at(c, y, x);
                ++n;
            }
        return n ? s / n : 0.0;
    };

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) out.at(c, y, x) = block_mean(image, c, x, y);
            const double d = block_mean(depth, 0, x, y);
            out.at(3, y, x) = d > 0 ? 2.0 / std::max(d, 1.0) - 1.0 : -1.0;
            out.at(4, y, x) = block_mean(mask, 0, x, y) > 0.5 ? 1.0 : 0.0;
            for (int c = 0; c < hint_ch; ++c)
                out.at(5 + c, y, x) = block_mean(*hints, c, x, y);
        }
    return out;
}

namespace {

int encoder_stages(const ModelConfig &cfg) { return int(cfg.encoder_channels.size()); }

void grid_dims(const VelocityFieldModel &m, int &gh, int &gw) {
    gh = m.conditioning.height >> encoder_stages(m.cfg);
    gw = m.conditioning.width >> encoder_stages(m.cfg);
}

void he_fill(Rng &rng, std::vector<double> &v, int fan_in) {
    const double std = std::sqrt(2.0 / fan_in);
    for (auto &x : v) x = rng.normal() * std;
}

}  // namespace

VelocityFieldModel init_model(const ModelConfig &cfg,
                              const scene::SceneBundle &bundle,
                              double total_seconds, uint64_t seed) {
    if (cfg.mlp_hidden.empty()) throw ArgumentError("model needs hidden layers");
    VelocityFieldModel m;
    m.cfg = cfg;
    m.camera = bundle.camera;
    m.total_seconds = total_seconds;
    const img::Grid *hints =
        cfg.use_hints && bundle.hints ? &*bundle.hints : nullptr;
    if (cfg.use_hints && !hints)
        throw ArgumentError("config enables hints but the bundle has none");
    m.conditioning = stack_conditioning(bundle.image, bundle.depth, bundle.mask,
                                        hints, cfg.encoder_input_scale);

    Rng rng(seed);
    const int cin = m.conditioning.channels;

    // Encoder: stride-2 conv per stage, residual block and 1x1 projection at
    // the deepest scale.
    int prev = cin;
    for (size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
        const int ch = cfg.encoder_channels[i];
        auto &w = m.params.add("enc/conv" + std::to_string(i), ch, prev * 16);
        he_fill(rng, w.value, prev * 16);
        m.params.add("enc/bias" + std::to_string(i), ch, 1);
        prev = ch;
    }
    for (int r = 0; r < 2; ++r) {
        auto &w = m.params.add("enc/res" + std::to_string(r), prev, prev * 9);
        he_fill(rng, w.value, prev * 9);
        m.params.add("enc/resb" + std::to_string(r), prev, 1);
    }
    auto &proj = m.params.add("enc/proj", cfg.feature_channels, prev);
    he_fill(rng, proj.value, prev);
    m.params.add("enc/projb", cfg.feature_channels, 1);

    // Velocity MLP.
    int in_dim = embedding_length(cfg.embed_frequencies) + cfg.feature_channels;
    for (size_t i = 0; i < cfg.mlp_hidden.size(); ++i) {
        auto &w = m.params.add("mlp/w" + std::to_string(i), cfg.mlp_hidden[i], in_dim);
        he_fill(rng, w.value, in_dim);
        m.params.add("mlp/b" + std::to_string(i), cfg.mlp_hidden[i], 1);
        in_dim = cfg.mlp_hidden[i];
    }
    // Final layer zeros: the initial velocity field is identically zero.
    m.params.add("mlp/w" + std::to_string(cfg.mlp_hidden.size()), 3, in_dim);
    m.params.add("mlp/b" + std::to_string(cfg.mlp_hidden.size()), 3, 1);

    // External-force head: two stride-2 convs, pooled, two FC layers; the
    // final layer starts at zero so f_g = 0 until trained.
    const int fc = cfg.force_channels;
    auto &f0 = m.params.add("force/conv0", fc, cfg.feature_channels * 9);
    he_fill(rng, f0.value, cfg.feature_channels * 9);
    m.params.add("force/cbias0", fc, 1);
    auto &f1 = m.params.add("force/conv1", fc, fc * 9);
    he_fill(rng, f1.value, fc * 9);
    m.params.add("force/cbias1", fc, 1);
    auto &f2 = m.params.add("force/fc0", fc, fc);
    he_fill(rng, f2.value, fc);
    m.params.add("force/fbias0", fc, 1);
    m.params.add("force/fc1", 3, fc);
    m.params.add("force/fbias1", 3, 1);
    return m;
}

// ------------------------------------------------------------ graph builders

Tensor build_feature_grid(Graph &g, const VelocityFieldModel &m) {
    const auto &cfg = m.cfg;
    auto &params = const_cast<ParameterSet &>(m.params);
    const img::Grid &cond = m.conditioning;
    Tensor x = g.constant(cond.channels, cond.width * cond.height, cond.data);
    int h = cond.height, w = cond.width, ch = cond.channels;
    for (size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
        ad::ConvSpec spec;
        spec.in_ch = ch;
        spec.height = h;
        spec.width = w;
        spec.out_ch = cfg.encoder_channels[i];
        spec.ksize = 4;
        spec.stride = 2;
        spec.pad = 1;
        x = g.conv2d(x, g.param(params, "enc/conv" + std::to_string(i)), spec);
        x = g.add_colvec(x, g.param(params, "enc/bias" + std::to_string(i)));
        x = g.lrelu(x, 0.2);
        h = spec.out_h();
        w = spec.out_w();
        ch = spec.out_ch;
    }
    // Residual block at the deepest scale.
    {
        ad::ConvSpec spec;
        spec.in_ch = ch;
        spec.height = h;
        spec.width = w;
        spec.out_ch = ch;
        spec.ksize = 3;
        spec.stride = 1;
        spec.pad = 1;
        Tensor r = g.conv2d(x, g.param(params, "enc/res0"), spec);
        r = g.relu(g.add_colvec(r, g.param(params, "enc/resb0")));
        r = g.conv2d(r, g.param(params, "enc/res1"), spec);
        r = g.add_colvec(r, g.param(params, "enc/resb1"));
        x = g.add(x, r);
    }
    // 1x1 projection to the feature channel count.
    {
        ad::ConvSpec spec;
        spec.in_ch = ch;
        spec.height = h;
        spec.width = w;
        spec.out_ch = cfg.feature_channels;
        spec.ksize = 1;
        spec.stride = 1;
        spec.pad = 0;
        x = g.conv2d(x, g.param(params, "enc/proj"), spec);
        x = g.add_colvec(x, g.param(params, "enc/projb"));
    }
    return x;
}

Tensor build_force(Graph &g, const VelocityFieldModel &m, Tensor feature_grid) {
    auto &params = const_cast<ParameterSet &>(m.params);
    int gh, gw;
    grid_dims(m, gh, gw);
    ad::ConvSpec s0;
    s0.in_ch = m.cfg.feature_channels;
    s0.height = gh;
    s0.width = gw;
    s0.out_ch = m.cfg.force_channels;
    s0.ksize = 3;
    s0.stride = 2;
    s0.pad = 1;
    Tensor x = g.conv2d(feature_grid, g.param(params, "force/conv0"), s0);
    x = g.relu(g.add_colvec(x, g.param(params, "force/cbias0")));
    ad::ConvSpec s1 = s0;
    s1.in_ch = m.cfg.force_channels;
    s1.height = s0.out_h();
    s1.width = s0.out_w();
    x = g.conv2d(x, g.param(params, "force/conv1"), s1);
    x = g.relu(g.add_colvec(x, g.param(params, "force/cbias1")));
    x = g.rowmean(x);  // [force_channels x 1]
    x = g.add_colvec(g.matmul(g.param(params, "force/fc0"), x),
                     g.param(params, "force/fbias0"));
    x = g.relu(x);
    x = g.add_colvec(g.matmul(g.param(params, "force/fc1"), x),
                     g.param(params, "force/fbias1"));
    return x;
}

namespace {

// Shared probe preprocessing: camera transform constants and host-side
// validation of depths.
struct ProbeConstants {
    std::vector<double> pts;    // [3 x B] row-major
    std::vector<double> times;  // [1 x B]
    int batch = 0;
};

ProbeConstants pack_probes(std::span<const Vec3> points,
                           std::span<const double> times) {
    if (points.empty()) throw ArgumentError("velocity: empty probe batch");
    if (points.size() != times.size())
        throw ShapeError("velocity: point/time counts disagree");
    ProbeConstants pc;
    pc.batch = int(points.size());
    pc.pts.resize(3 * points.size());
    for (size_t i = 0; i < points.size(); ++i) {
        pc.pts[i] = points[i].x;
        pc.pts[points.size() + i] = points[i].y;
        pc.pts[2 * points.size() + i] = points[i].z;
    }
    pc.times.assign(times.begin(), times.end());
    return pc;
}

Tensor rot_constant(Graph &g, const scene::Camera &cam) {
    Mat3 R = cam.rotation();
    return g.constant(3, 3, std::span<const double>(R.m.data(), 9));
}

Tensor trans_constant(Graph &g, const scene::Camera &cam) {
    const double t[3] = {cam.trans.x, cam.trans.y, cam.trans.z};
    return g.constant(3, 1, std::span<const double>(t, 3));
}

// min(x, c) composed from the cmax primitive.
Tensor cmin(Graph &g, Tensor x, double c) {
    return g.neg(g.cmax(g.neg(x), -c));
}

DualTensor dt_cmin(Graph &g, const DualTensor &x, double c) {
    DualTensor nx;
    nx.v = g.neg(x.v);
    for (int k = 0; k < 4; ++k) nx.d[k] = g.neg(x.d[k]);
    DualTensor m = ad::dt_cmax(g, nx, -c);
    DualTensor r;
    r.v = g.neg(m.v);
    for (int k = 0; k < 4; ++k) r.d[k] = g.neg(m.d[k]);
    return r;
}

struct BilinearIndices {
    std::vector<int> i00, i10, i01, i11;
    std::vector<double> fx0, fy0;  // integer corner coordinates as doubles
};

// Host-side cell selection from clamped grid coordinates.
BilinearIndices bilinear_cells(std::span<const double> gx,
                               std::span<const double> gy, int gh, int gw) {
    BilinearIndices bi;
    const int n = int(gx.size());
    bi.i00.resize(n);
    bi.i10.resize(n);
    bi.i01.resize(n);
    bi.i11.resize(n);
    bi.fx0.resize(n);
    bi.fy0.resize(n);
    for (int i = 0; i < n; ++i) {
        int ix = std::min(int(gx[i]), std::max(gw - 2, 0));
        int iy = std::min(int(gy[i]), std::max(gh - 2, 0));
        const int ix1 = std::min(ix + 1, gw - 1), iy1 = std::min(iy + 1, gh - 1);
        bi.i00[i] = iy * gw + ix;
        bi.i10[i] = iy * gw + ix1;
        bi.i01[i] = iy1 * gw + ix;
        bi.i11[i] = iy1 * gw + ix1;
        bi.fx0[i] = ix;
        bi.fy0[i] = iy;
    }
    return bi;
}

}  // namespace

Tensor build_velocity(Graph &g, const VelocityFieldModel &m,
                      std::span<const Vec3> points, std::span<const double> times,
                      Tensor feature_grid, std::span<const Vec3> feature_points) {
    auto &params = const_cast<ParameterSet &>(m.params);
    ProbeConstants pc = pack_probes(points, times);
    const int B = pc.batch;
    const scene::Camera &cam = m.camera;

    Tensor P = g.constant(3, B, pc.pts);
    Tensor Xc = g.add_colvec(g.matmul(rot_constant(g, cam), P), trans_constant(g, cam));
    Tensor zc = g.slice_rows(Xc, 2, 1);
    for (double z : zc.value())
        if (z <= 0) throw DomainError("velocity probe behind the camera");
    Tensor u = g.affine(g.ediv(g.slice_rows(Xc, 0, 1), zc), cam.fx, cam.cx);
    Tensor v = g.affine(g.ediv(g.slice_rows(Xc, 1, 1), zc), cam.fy, cam.cy);

    Tensor xn = g.affine(u, 2.0 / (cam.width - 1), -1.0);
    Tensor yn = g.affine(v, 2.0 / (cam.height - 1), -1.0);
    Tensor two = g.constant(1, B, 2.0);
    Tensor zn = g.affine(g.ediv(two, g.cmax(zc, 1.0)), 1.0, -1.0);
    Tensor tn = g.affine(g.constant(1, B, pc.times), 1.0 / m.total_seconds, 0.0);

    Tensor coords = g.concat_rows(g.concat_rows(xn, yn), g.concat_rows(zn, tn));
    Tensor embed = coords;
    for (int l = 0; l < m.cfg.embed_frequencies; ++l) {
        Tensor scaled = g.affine(coords, std::ldexp(M_PI, l), 0.0);
        embed = g.concat_rows(embed, g.concat_rows(g.sin(scaled), g.cos(scaled)));
    }

    // Bilinear feature sampling at the projected pixel (of the anchor when
    // the caller pins conditioning elsewhere).
    Tensor uf = u, vf = v;
    if (!feature_points.empty()) {
        if (feature_points.size() != points.size())
            throw ShapeError("build_velocity: feature anchor count mismatch");
        ProbeConstants fc = pack_probes(feature_points, times);
        Tensor Pf = g.constant(3, B, fc.pts);
        Tensor Xf =
            g.add_colvec(g.matmul(rot_constant(g, cam), Pf), trans_constant(g, cam));
        Tensor zf = g.slice_rows(Xf, 2, 1);
        for (double z : zf.value())
            if (z <= 0) throw DomainError("feature anchor behind the camera");
        uf = g.affine(g.ediv(g.slice_rows(Xf, 0, 1), zf), cam.fx, cam.cx);
        vf = g.affine(g.ediv(g.slice_rows(Xf, 1, 1), zf), cam.fy, cam.cy);
    }
    int gh, gw;
    grid_dims(m, gh, gw);
    Tensor gx = cmin(g, g.cmax(g.affine(uf, double(gw) / cam.width,
                                        0.5 * gw / cam.width - 0.5), 0.0),
                     double(gw - 1));
    Tensor gy = cmin(g, g.cmax(g.affine(vf, double(gh) / cam.height,
                                        0.5 * gh / cam.height - 0.5), 0.0),
                     double(gh - 1));
    BilinearIndices bi = bilinear_cells(gx.value(), gy.value(), gh, gw);
    Tensor fx = g.sub(gx, g.constant(1, B, bi.fx0));
    Tensor fy = g.sub(gy, g.constant(1, B, bi.fy0));
    Tensor one_minus_fx = g.affine(fx, -1.0, 1.0);
    Tensor one_minus_fy = g.affine(fy, -1.0, 1.0);
    Tensor w00 = g.emul(one_minus_fx, one_minus_fy);
    Tensor w10 = g.emul(fx, one_minus_fy);
    Tensor w01 = g.emul(one_minus_fx, fy);
    Tensor w11 = g.emul(fx, fy);
    Tensor feats = g.add(
        g.add(g.mul_rowvec(g.gather_cols(feature_grid, bi.i00), w00),
              g.mul_rowvec(g.gather_cols(feature_grid, bi.i10), w10)),
        g.add(g.mul_rowvec(g.gather_cols(feature_grid, bi.i01), w01),
              g.mul_rowvec(g.gather_cols(feature_grid, bi.i11), w11)));

    Tensor x = g.concat_rows(embed, feats);
    const int layers = int(m.cfg.mlp_hidden.size()) + 1;
    for (int i = 0; i < layers; ++i) {
        x = g.add_colvec(g.matmul(g.param(params, "mlp/w" + std::to_string(i)), x),
                         g.param(params, "mlp/b" + std::to_string(i)));
        if (i + 1 < layers) x = g.relu(x);
    }
    return x;
}

DualTensor build_velocity_dual(Graph &g, const VelocityFieldModel &m,
                               std::span<const Vec3> points,
                               std::span<const double> times,
                               Tensor feature_grid) {
    using namespace ad;
    auto &params = const_cast<ParameterSet &>(m.params);
    ProbeConstants pc = pack_probes(points, times);
    const int B = pc.batch;
    const scene::Camera &cam = m.camera;

    // Input duals: position rows seeded along x/y/z, time along t.
    DualTensor P;
    P.v = g.constant(3, B, pc.pts);
    for (int k = 0; k < 4; ++k) {
        if (k < 3) {
            std::vector<double> seed(size_t(3) * B, 0.0);
            std::fill_n(seed.begin() + size_t(k) * B, B, 1.0);
            P.d[k] = g.constant(3, B, seed);
        } else {
            P.d[k] = g.constant(3, B, 0.0);
        }
    }
    DualTensor T;
    T.v = g.constant(1, B, pc.times);
    for (int k = 0; k < 4; ++k)
        T.d[k] = g.constant(1, B, k == 3 ? 1.0 : 0.0);

    DualTensor Xc = dt_add_colvec(g, dt_matmul(g, rot_constant(g, cam), P),
                                  trans_constant(g, cam));
    DualTensor zc = dt_slice_rows(g, Xc, 2, 1);
    for (double z : zc.v.value())
        if (z <= 0) throw DomainError("velocity probe behind the camera");
    DualTensor u = dt_affine(g, dt_ediv(g, dt_slice_rows(g, Xc, 0, 1), zc), cam.fx, cam.cx);
    DualTensor v = dt_affine(g, dt_ediv(g, dt_slice_rows(g, Xc, 1, 1), zc), cam.fy, cam.cy);

    DualTensor xn = dt_affine(g, u, 2.0 / (cam.width - 1), -1.0);
    DualTensor yn = dt_affine(g, v, 2.0 / (cam.height - 1), -1.0);
    DualTensor two = DualTensor::constant(g, 1, B, std::vector<double>(B, 2.0));
    DualTensor zn = dt_affine(g, dt_ediv(g, two, dt_cmax(g, zc, 1.0)), 1.0, -1.0);
    DualTensor tn = dt_affine(g, T, 1.0 / m.total_seconds, 0.0);

    DualTensor coords = dt_concat_rows(g, dt_concat_rows(g, xn, yn),
                                       dt_concat_rows(g, zn, tn));
    DualTensor embed = coords;
    for (int l = 0; l < m.cfg.embed_frequencies; ++l) {
        DualTensor scaled = dt_affine(g, coords, std::ldexp(M_PI, l), 0.0);
        embed = dt_concat_rows(g, embed,
                               dt_concat_rows(g, dt_sin(g, scaled), dt_cos(g, scaled)));
    }

    int gh, gw;
    grid_dims(m, gh, gw);
    DualTensor gx = dt_cmin(g, dt_cmax(g, dt_affine(g, u, double(gw) / cam.width,
                                                    0.5 * gw / cam.width - 0.5), 0.0),
                            double(gw - 1));
    DualTensor gy = dt_cmin(g, dt_cmax(g, dt_affine(g, v, double(gh) / cam.height,
                                                    0.5 * gh / cam.height - 0.5), 0.0),
                            double(gh - 1));
    BilinearIndices bi = bilinear_cells(gx.v.value(), gy.v.value(), gh, gw);
    DualTensor fx = dt_sub(g, gx, DualTensor::constant(g, 1, B, bi.fx0));
    DualTensor fy = dt_sub(g, gy, DualTensor::constant(g, 1, B, bi.fy0));
    DualTensor ifx = dt_affine(g, fx, -1.0, 1.0);
    DualTensor ify = dt_affine(g, fy, -1.0, 1.0);
    const DualTensor weights[4] = {dt_emul(g, ifx, ify), dt_emul(g, fx, ify),
                                   dt_emul(g, ifx, fy), dt_emul(g, fx, fy)};
    const std::vector<int> *cells[4] = {&bi.i00, &bi.i10, &bi.i01, &bi.i11};
    DualTensor feats;
    for (int c = 0; c < 4; ++c) {
        Tensor corner = g.gather_cols(feature_grid, *cells[c]);
        DualTensor term;
        term.v = g.mul_rowvec(corner, weights[c].v);
        for (int k = 0; k < 4; ++k)
            term.d[k] = g.mul_rowvec(corner, weights[c].d[k]);
        feats = c == 0 ? term : dt_add(g, feats, term);
    }

    DualTensor x = dt_concat_rows(g, embed, feats);
    const int layers = int(m.cfg.mlp_hidden.size()) + 1;
    for (int i = 0; i < layers; ++i) {
        x = dt_add_colvec(g, dt_matmul(g, g.param(params, "mlp/w" + std::to_string(i)), x),
                          g.param(params, "mlp/b" + std::to_string(i)));
        if (i + 1 < layers) x = dt_relu(g, x);
    }
    return x;
}

// ---------------------------------------------------------- inference paths

FeatureGrid encode_features(const VelocityFieldModel &m) {
    if (m.feature_cache) return *m.feature_cache;
    Graph g;
    Tensor t = build_feature_grid(g, m);
    FeatureGrid fg;
    fg.channels = t.rows();
    grid_dims(m, fg.gh, fg.gw);
    fg.source_width = m.camera.width;
    fg.source_height = m.camera.height;
    fg.data.assign(t.value().begin(), t.value().end());
    m.feature_cache = fg;
    return fg;
}

Vec3 external_force(const VelocityFieldModel &m) {
    if (m.force_cache) return *m.force_cache;
    Graph g;
    Tensor f = build_force(g, m, build_feature_grid(g, m));
    Vec3 out{f.value()[0], f.value()[1], f.value()[2]};
    m.force_cache = out;
    return out;
}

namespace {

Tensor feature_constant(Graph &g, const VelocityFieldModel &m) {
    FeatureGrid fg = encode_features(m);
    return g.constant(fg.channels, fg.gh * fg.gw, fg.data);
}

}  // namespace

Vec3 velocity(const VelocityFieldModel &m, const Vec3 &p, double t) {
    Graph g;
    Tensor u = build_velocity(g, m, std::span<const Vec3>(&p, 1),
                              std::span<const double>(&t, 1), feature_constant(g, m));
    return {u.value()[0], u.value()[1], u.value()[2]};
}

void velocity_batch(const VelocityFieldModel &m, std::span<const Vec3> points,
                    std::span<const double> times, std::span<Vec3> out,
                    std::span<const Vec3> feature_points) {
    if (points.size() != out.size() || points.size() != times.size())
        throw ShapeError("velocity_batch: span lengths disagree");
    if (!feature_points.empty() && feature_points.size() != points.size())
        throw ShapeError("velocity_batch: feature anchor count mismatch");
    const size_t chunk = 4096;
    const Mat3 R = m.camera.rotation();
    const Vec3 fallback = R.transposed() * (Vec3{0, 0, 1} - m.camera.trans);
    std::vector<Vec3> safe, fsafe;
    std::vector<double> tsafe;
    std::vector<size_t> bad;
    Graph g;
    for (size_t base = 0; base < points.size(); base += chunk) {
        const size_t n = std::min(chunk, points.size() - base);
        safe.assign(points.begin() + base, points.begin() + base + n);
        tsafe.assign(times.begin() + base, times.begin() + base + n);
        if (!feature_points.empty())
            fsafe.assign(feature_points.begin() + base,
                         feature_points.begin() + base + n);
        bad.clear();
        for (size_t i = 0; i < n; ++i) {
            const Vec3 pc = R * safe[i] + m.camera.trans;
            const Vec3 fc = fsafe.empty() ? pc : R * fsafe[i] + m.camera.trans;
            if (pc.z <= 1e-6 || fc.z <= 1e-6) {
                bad.push_back(i);
                // Substitute a point one unit in front of the camera; its
                // output is discarded below.
                safe[i] = fallback;
                if (!fsafe.empty()) fsafe[i] = fallback;
            }
        }
        g.reset();
        Tensor u = build_velocity(g, m, safe, tsafe, feature_constant(g, m),
                                  fsafe.empty() ? std::span<const Vec3>{}
                                                : std::span<const Vec3>(fsafe));
        auto vals = u.value();
        for (size_t i = 0; i < n; ++i)
            out[base + i] = {vals[i], vals[n + i], vals[2 * n + i]};
        for (size_t i : bad) out[base + i] = {0, 0, 0};
    }
}

std::vector<ad::JetResult> velocity_jets(const VelocityFieldModel &m,
                                         std::span<const Vec3> points,
                                         std::span<const double> times) {
    if (points.size() != times.size())
        throw ShapeError("velocity_jets: span lengths disagree");
    std::vector<ad::JetResult> out(points.size());
    const size_t chunk = 1024;
    Graph g;
    for (size_t base = 0; base < points.size(); base += chunk) {
        const size_t n = std::min(chunk, points.size() - base);
        g.reset();
        DualTensor u = build_velocity_dual(
            g, m, points.subspan(base, n), times.subspan(base, n),
            feature_constant(g, m));
        auto val = u.v.value();
        for (size_t i = 0; i < n; ++i) {
            auto &jr = out[base + i];
            for (int r = 0; r < 3; ++r) jr.value[r] = val[r * n + i];
            for (int k = 0; k < 4; ++k) {
                auto tan = u.d[k].value();
                for (int r = 0; r < 3; ++r) jr.jacobian(r, k) = tan[r * n + i];
            }
        }
    }
    return out;
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'P', 'L', 'A', 'T', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

struct NamedArray {
    std::string name;
    uint32_t rows = 0, cols = 0;
    std::vector<double> data;
};

void write_all(const std::string &path, const std::vector<NamedArray> &arrays) {
    FILE *f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    auto put = [&](const void *p, size_t n) {
        if (std::fwrite(p, 1, n, f) != n) {
            std::fclose(f);
            throw IoError("short write to '" + path + "'");
        }
    };
    put(kMagic, 8);
    uint32_t v = kVersion, count = uint32_t(arrays.size());
    put(&v, 4);
    put(&count, 4);
    for (const auto &a : arrays) {
        uint32_t len = uint32_t(a.name.size());
        put(&len, 4);
        put(a.name.data(), len);
        put(&a.rows, 4);
        put(&a.cols, 4);
    }
    for (const auto &a : arrays) put(a.data.data(), a.data.size() * 8);
    std::fclose(f);
}

std::vector<NamedArray> read_all(const std::string &path) {
    FILE *f = std::fopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    auto get = [&](void *p, size_t n) {
        if (std::fread(p, 1, n, f) != n) {
            std::fclose(f);
            throw IoError("truncated checkpoint '" + path + "'");
        }
    };
    char magic[8];
    get(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) {
        std::fclose(f);
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    }
    uint32_t version = 0, count = 0;
    get(&version, 4);
    if (version != kVersion) {
        std::fclose(f);
        throw IoError("unsupported checkpoint version");
    }
    get(&count, 4);
    if (count > 4096) {
        std::fclose(f);
        throw IoError("implausible checkpoint entry count");
    }
    std::vector<NamedArray> arrays(count);
    for (auto &a : arrays) {
        uint32_t len = 0;
        get(&len, 4);
        if (len > 256) {
            std::fclose(f);
            throw IoError("implausible checkpoint name length");
        }
        a.name.resize(len);
        get(a.name.data(), len);
        get(&a.rows, 4);
        get(&a.cols, 4);
    }
    for (auto &a : arrays) {
        a.data.resize(size_t(a.rows) * a.cols);
        get(a.data.data(), a.data.size() * 8);
    }
    std::fclose(f);
    return arrays;
}

NamedArray meta(const std::string &name, std::vector<double> vals) {
    return {name, 1, uint32_t(vals.size()), std::move(vals)};
}

}  // namespace

void save_checkpoint(const VelocityFieldModel &m, const std::string &path) {
    std::vector<NamedArray> arrays;
    arrays.push_back(meta("meta/embed_frequencies", {double(m.cfg.embed_frequencies)}));
    std::vector<double> widths(m.cfg.mlp_hidden.begin(), m.cfg.mlp_hidden.end());
    arrays.push_back(meta("meta/mlp_widths", widths));
    arrays.push_back(meta("meta/feature_channels", {double(m.cfg.feature_channels)}));
    std::vector<double> ech(m.cfg.encoder_channels.begin(), m.cfg.encoder_channels.end());
    arrays.push_back(meta("meta/encoder_channels", ech));
    arrays.push_back(meta("meta/encoder_input_scale", {double(m.cfg.encoder_input_scale)}));
    arrays.push_back(meta("meta/force_channels", {double(m.cfg.force_channels)}));
    arrays.push_back(meta("meta/use_hints", {m.cfg.use_hints ? 1.0 : 0.0}));
    arrays.push_back(meta("meta/total_seconds", {m.total_seconds}));
    const auto &c = m.camera;
    arrays.push_back(meta("meta/camera",
                          {c.fx, c.fy, c.cx, c.cy, double(c.width), double(c.height),
                           c.rot.w, c.rot.x, c.rot.y, c.rot.z, c.trans.x, c.trans.y,
                           c.trans.z}));
    arrays.push_back(meta("meta/conditioning_dims",
                          {double(m.conditioning.width), double(m.conditioning.height),
                           double(m.conditioning.channels)}));
    arrays.push_back(
        NamedArray{"conditioning/grid", uint32_t(m.conditioning.channels),
                   uint32_t(m.conditioning.plane()), m.conditioning.data});

    FeatureGrid fg = encode_features(m);
    arrays.push_back(NamedArray{"features/grid", uint32_t(fg.channels),
                                uint32_t(fg.gh * fg.gw), fg.data});
    Vec3 f = external_force(m);
    arrays.push_back(meta("force/value", {f.x, f.y, f.z}));

    for (const auto &e : m.params.entries())
        arrays.push_back(NamedArray{"param/" + e.name, uint32_t(e.rows),
                                    uint32_t(e.cols), e.value});
    write_all(path, arrays);
}

VelocityFieldModel load_checkpoint(const std::string &path) {
    auto arrays = read_all(path);
    auto find = [&](const std::string &name) -> NamedArray & {
        for (auto &a : arrays)
            if (a.name == name) return a;
        throw IoError("checkpoint missing entry '" + name + "'");
    };

    VelocityFieldModel m;
    m.cfg.embed_frequencies = int(find("meta/embed_frequencies").data[0]);
    m.cfg.mlp_hidden.clear();
    for (double w : find("meta/mlp_widths").data) m.cfg.mlp_hidden.push_back(int(w));
    m.cfg.feature_channels = int(find("meta/feature_channels").data[0]);
    m.cfg.encoder_channels.clear();
    for (double w : find("meta/encoder_channels").data)
        m.cfg.encoder_channels.push_back(int(w));
    m.cfg.encoder_input_scale = int(find("meta/encoder_input_scale").data[0]);
    m.cfg.force_channels = int(find("meta/force_channels").data[0]);
    m.cfg.use_hints = find("meta/use_hints").data[0] != 0.0;
    m.total_seconds = find("meta/total_seconds").data[0];
    const auto &cam = find("meta/camera").data;
    m.camera.fx = cam[0];
    m.camera.fy = cam[1];
    m.camera.cx = cam[2];
    m.camera.cy = cam[3];
    m.camera.width = int(cam[4]);
    m.camera.height = int(cam[5]);
    m.camera.rot = Quat{cam[6], cam[7], cam[8], cam[9]};
    m.camera.trans = {cam[10], cam[11], cam[12]};
    const auto &cd = find("meta/conditioning_dims").data;
    m.conditioning = img::Grid(int(cd[0]), int(cd[1]), int(cd[2]));
    m.conditioning.data = find("conditioning/grid").data;

    for (const auto &a : arrays) {
        if (a.name.rfind("param/", 0) != 0) continue;
        auto &e = m.params.add(a.name.substr(6), int(a.rows), int(a.cols));
        e.value = a.data;
    }

    const auto &fgrid = find("features/grid");
    FeatureGrid fg;
    fg.channels = int(fgrid.rows);
    int gh, gw;
    grid_dims(m, gh, gw);
    fg.gh = gh;
    fg.gw = gw;
    fg.source_width = m.camera.width;
    fg.source_height = m.camera.height;
    fg.data = fgrid.data;
    m.feature_cache = fg;
    const auto &fv = find("force/value").data;
    m.force_cache = Vec3{fv[0], fv[1], fv[2]};
    return m;
}

void save_params(const ad::ParameterSet &ps, const std::string &path) {
    std::vector<NamedArray> arrays;
    for (const auto &e : ps.entries())
        arrays.push_back(NamedArray{"param/" + e.name, uint32_t(e.rows),
                                    uint32_t(e.cols), e.value});
    write_all(path, arrays);
}

void load_params(ad::ParameterSet &ps, const std::string &path) {
    for (const auto &a : read_all(path)) {
        if (a.name.rfind("param/", 0) != 0) continue;
        const std::string name = a.name.substr(6);
        auto &e = ps.has(name) ? ps.entry(name)
                               : ps.add(name, int(a.rows), int(a.cols));
        if (size_t(e.rows) * e.cols != a.data.size())
            throw IoError("parameter '" + name + "' shape mismatch on load");
        e.value = a.data;
    }
}

}  // namespace splatflow::field
