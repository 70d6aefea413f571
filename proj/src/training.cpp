#include "splatflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace splatflow::train {

using ad::Graph;
using ad::ParameterSet;
using ad::Tensor;

// ------------------------------------------------------------- optimizer

void adam_step(ParameterSet &params, AdamState &st, const AdamConfig &hp) {
    auto &entries = params.entries();
    if (st.m.empty() && st.v.empty()) {
        st.m.resize(entries.size());
        st.v.resize(entries.size());
        size_t i = 0;
        for (const auto &e : entries) {
            st.m[i].assign(e.value.size(), 0.0);
            st.v[i].assign(e.value.size(), 0.0);
            ++i;
        }
    }
    if (st.m.size() != entries.size() || st.v.size() != entries.size())
        throw ShapeError("adam_step: state/parameter entry counts disagree");
    ++st.step;
    const double bc1 = 1.0 - std::pow(hp.beta1, double(st.step));
    const double bc2 = 1.0 - std::pow(hp.beta2, double(st.step));
    size_t ei = 0;
    for (auto &e : entries) {
        auto &m = st.m[ei];
        auto &v = st.v[ei];
        ++ei;
        if (m.size() != e.value.size() || v.size() != e.value.size())
            throw ShapeError("adam_step: state shape drifted for '" + e.name + "'");
        for (size_t i = 0; i < e.value.size(); ++i) {
            const double grad = e.grad[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad * grad;
            e.value[i] -= hp.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + hp.eps);
        }
    }
}

double decayed_lr(double base, int iteration, int total_iterations) {
    if (total_iterations <= 0) return base;
    const double f = double(iteration) / total_iterations;
    if (f >= 0.8) return 0.25 * base;
    if (f >= 0.4) return 0.5 * base;
    return base;
}

// --------------------------------------------------------------- config

void TrainConfig::validate() const {
    if (!(adam.lr > 0)) throw ArgumentError("training: learning rate must be > 0");
    if (iterations < 0) throw ArgumentError("training: iterations must be >= 0");
    if (flow_batch < 1 || physics_batch < 1)
        throw ArgumentError("training: batch sizes must be >= 1");
    if (boundary_batch < 0)
        throw ArgumentError("training: boundary batch must be >= 0");
    if (!(boundary_dt > 0))
        throw ArgumentError("training: boundary horizon must be > 0");
    if (checkpoint_every < 0)
        throw ArgumentError("training: checkpoint cadence must be >= 0");
    if (decoder_hidden < 1 || decoder_layers < 1 || crop < 1)
        throw ArgumentError("training: decoder dimensions must be >= 1");
    weights.validate();
}

namespace {

void hash_mix(uint64_t &h, const std::string &s) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;  // FNV-1a
    }
    h ^= '|';
    h *= 1099511628211ULL;
}

template <typename T>
void hash_field(uint64_t &h, T v) {
    hash_mix(h, std::to_string(v));
}

}  // namespace

uint64_t config_hash(const TrainConfig &c) {
    uint64_t h = 14695981039346656037ULL;
    hash_field(h, c.iterations);
    hash_field(h, c.adam.lr);
    hash_field(h, c.adam.beta1);
    hash_field(h, c.adam.beta2);
    hash_field(h, c.adam.eps);
    hash_field(h, c.flow_batch);
    hash_field(h, c.physics_batch);
    hash_field(h, c.boundary_batch);
    hash_field(h, c.boundary_band_px);
    hash_field(h, c.boundary_dt);
    hash_field(h, c.checkpoint_every);
    hash_field(h, c.seed);
    hash_field(h, int(c.physics_on));
    hash_field(h, int(c.force_on));
    hash_field(h, int(c.hints_on));
    hash_field(h, c.weights.lambda_ns);
    hash_field(h, c.weights.lambda_div);
    hash_field(h, c.weights.lambda_physics);
    hash_field(h, c.weights.lambda_novel_view);
    hash_field(h, c.model.embed_frequencies);
    for (int w : c.model.mlp_hidden) hash_field(h, w);
    hash_field(h, c.model.feature_channels);
    for (int w : c.model.encoder_channels) hash_field(h, w);
    hash_field(h, c.model.encoder_input_scale);
    hash_field(h, c.model.force_channels);
    hash_field(h, int(c.model.use_hints));
    hash_field(h, c.decoder_hidden);
    hash_field(h, c.decoder_layers);
    hash_field(h, c.crop);
    return h;
}

// ------------------------------------------------------------------ logs

void save_log_csv(const TrainLog &log, const std::string &path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write training log '" + path + "'");
    out << "iteration,motion,ns,div,boundary,total\n";
    char line[256];
    for (const auto &r : log.rows) {
        std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.iteration, r.motion, r.ns, r.div, r.boundary, r.total);
        out << line;
    }
    if (!out) throw IoError("failed writing training log '" + path + "'");
}

// ------------------------------------------------------- dynamics stage

std::vector<physics::SceneFlowSample> flow_from_hints(const scene::SceneBundle &b,
                                                      int count, Rng &rng) {
    if (count < 1) throw ArgumentError("flow_from_hints: count must be >= 1");
    if (!b.hints || b.hints->channels != 3)
        throw ArgumentError("flow_from_hints: bundle carries no hint map");
    const img::Grid &h = *b.hints;
    std::vector<std::pair<int, int>> valid;
    for (int y = 0; y < h.height; ++y)
        for (int x = 0; x < h.width; ++x)
            if (h.at(2, y, x) > 0.5 && b.depth.at(0, y, x) > 0 &&
                b.mask.at(0, y, x) > 0.5)
                valid.emplace_back(x, y);
    if (valid.empty())
        throw ArgumentError("flow_from_hints: hint map has no valid pixels");
    std::vector<physics::SceneFlowSample> out;
    out.reserve(count);
    const double fps = b.trajectory.fps;
    for (int i = 0; i < count; ++i) {
        const auto [x, y] = valid[rng.below(valid.size())];
        const double d = b.depth.at(0, y, x);
        const Vec3 p = b.camera.lift_pixel(x, y, d);
        // Hint displacements are per-frame pixel offsets; re-lift at the same
        // depth and scale by the frame rate. Exact for fronto-parallel
        // motion, first-order otherwise.
        const Vec3 q = b.camera.lift_pixel(x + h.at(0, y, x), y + h.at(1, y, x), d);
        out.push_back({p, 0.0, (q - p) * fps});
    }
    return out;
}

namespace {

// In-memory (and optionally on-disk) parameter snapshots for the abort path.
struct Restore {
    std::vector<std::vector<double>> values;
    int iteration = 0;

    void take(const ParameterSet &ps, int iter) {
        values.clear();
        for (const auto &e : ps.entries()) values.push_back(e.value);
        iteration = iter;
    }
    void apply(ParameterSet &ps) const {
        size_t i = 0;
        for (auto &e : ps.entries()) e.value = values[i++];
    }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
        .count();
}

}  // namespace

DynamicsResult train_dynamics(const DynamicsData &data, const TrainConfig &cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(cfg.seed);

    field::ModelConfig mc = cfg.model;
    mc.use_hints = cfg.hints_on && data.bundle.hints.has_value();
    DynamicsResult res{
        field::init_model(mc, data.bundle, data.total_seconds, cfg.seed), {}};
    field::VelocityFieldModel &model = res.model;
    TrainLog &log = res.log;
    log.seed = cfg.seed;
    log.config_hash = config_hash(cfg);

    std::vector<physics::SceneFlowSample> pool = data.flow;
    if (pool.empty() && mc.use_hints) pool = flow_from_hints(data.bundle, 4096, rng);
    if (pool.empty())
        throw ArgumentError("train_dynamics: no motion supervision available");

    const bool to_disk = !cfg.checkpoint_dir.empty();
    if (to_disk) std::filesystem::create_directories(cfg.checkpoint_dir);
    Restore restore;
    auto checkpoint = [&](int iter) {
        restore.take(model.params, iter);
        if (to_disk)
            field::save_checkpoint(model, cfg.checkpoint_dir + "/ckpt_" +
                                              std::to_string(iter) + ".splat");
    };
    checkpoint(0);

    AdamState state;
    std::vector<physics::SceneFlowSample> batch(size_t(cfg.flow_batch));
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        for (auto &s : batch) s = pool[rng.below(pool.size())];
        physics::ProbeSet probes;
        std::vector<physics::BoundaryProbe> boundary;
        if (cfg.physics_on) {
            probes = physics::sample_fluid_probes(data.bundle, cfg.physics_batch,
                                                  data.total_seconds, rng);
            if (cfg.boundary_batch > 0)
                boundary = physics::sample_boundary_probes(
                    data.bundle, cfg.boundary_batch, data.total_seconds,
                    cfg.boundary_band_px, rng);
        }

        // A diverged run can surface either as a non-finite total or as a
        // NumericError thrown from inside an operator once activations
        // overflow; both roll the model back to the last checkpoint.
        try {
            model.params.zero_grads();
            Graph g;
            Tensor fg = field::build_feature_grid(g, model);
            Tensor force = cfg.force_on ? field::build_force(g, model, fg)
                                        : g.constant(3, 1, 0.0);
            Tensor motion = physics::build_loss_motion(g, model, batch, fg);
            LossRow row;
            row.iteration = iter;
            row.motion = motion.value()[0];
            Tensor total = motion;
            if (cfg.physics_on) {
                physics::PhysicsTerms terms = physics::build_loss_physics(
                    g, model, probes, boundary, data.region, cfg.boundary_dt,
                    cfg.weights, fg, force);
                total = g.add(total, g.affine(terms.combined,
                                              cfg.weights.lambda_physics, 0.0));
                row.ns = terms.ns.value()[0];
                row.div = terms.div.value()[0];
                row.boundary = terms.boundary.value()[0];
            }
            row.total = total.value()[0];
            if (!std::isfinite(row.total))
                throw NumericError("train_dynamics", "total loss");
            log.rows.push_back(row);

            g.backward(total);
            AdamConfig hp = cfg.adam;
            hp.lr = decayed_lr(cfg.adam.lr, iter, cfg.iterations);
            adam_step(model.params, state, hp);
            model.invalidate();
        } catch (const NumericError &) {
            log.aborted = true;
            log.restored_iteration = restore.iteration;
            restore.apply(model.params);
            model.invalidate();
            break;
        }

        if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
            iter + 1 < cfg.iterations)
            checkpoint(iter + 1);
    }

    if (!log.aborted) checkpoint(cfg.iterations);
    if (to_disk) field::save_checkpoint(model, cfg.checkpoint_dir + "/model.splat");
    log.wall_seconds = seconds_since(t0);
    return res;
}

// -------------------------------------------------------- decoder stage

DecoderResult train_decoder(const DecoderData &data, const TrainConfig &cfg) {
    cfg.validate();
    if (data.samples.empty()) throw ArgumentError("train_decoder: empty dataset");
    const int channels = data.samples[0].features.channels;
    for (const auto &s : data.samples) {
        if (s.features.channels != channels)
            throw ShapeError("train_decoder: mixed feature channel counts");
        if (s.target.channels != 3 || s.target.width != s.features.width ||
            s.target.height != s.features.height)
            throw ShapeError("train_decoder: target must be RGB at feature dims");
    }

    DecoderResult res;
    res.log.seed = cfg.seed;
    res.log.config_hash = config_hash(cfg);
    // RGB payloads need no decoding; the empty parameter set is the identity.
    if (channels == 3) return res;

    const auto t0 = std::chrono::steady_clock::now();
    res.params =
        render::init_decoder(channels, cfg.decoder_hidden, cfg.decoder_layers,
                             cfg.seed);
    Rng rng(cfg.seed);
    AdamState state;
    Restore restore;
    restore.take(res.params, 0);

    std::vector<double> feat, tgt;
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const auto &s = data.samples[rng.below(data.samples.size())];
        const int cw = std::min(cfg.crop, s.features.width);
        const int ch = std::min(cfg.crop, s.features.height);
        const int x0 = cw == s.features.width
                           ? 0
                           : int(rng.below(size_t(s.features.width - cw + 1)));
        const int y0 = ch == s.features.height
                           ? 0
                           : int(rng.below(size_t(s.features.height - ch + 1)));
        feat.resize(size_t(channels) * ch * cw);
        tgt.resize(size_t(3) * ch * cw);
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < ch; ++y)
                for (int x = 0; x < cw; ++x)
                    feat[(size_t(c) * ch + y) * cw + x] =
                        s.features.at(c, y0 + y, x0 + x);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < ch; ++y)
                for (int x = 0; x < cw; ++x)
                    tgt[(size_t(c) * ch + y) * cw + x] =
                        s.target.at(c, y0 + y, x0 + x);

        // Mirrors the dynamics trainer: divergence, whether seen as an inf
        // loss or an operator-level numeric failure, restores the checkpoint.
        try {
            res.params.zero_grads();
            Graph g;
            Tensor out = render::build_decode(
                g, res.params, g.constant(channels, ch * cw, feat), ch, cw);
            Tensor diff = g.sub(out, g.constant(3, ch * cw, tgt));
            Tensor l1 = g.affine(g.sum(g.add(g.relu(diff), g.relu(g.neg(diff)))),
                                 1.0 / (3.0 * ch * cw), 0.0);

            LossRow row;
            row.iteration = iter;
            row.total = l1.value()[0];
            if (!std::isfinite(row.total))
                throw NumericError("train_decoder", "total loss");
            res.log.rows.push_back(row);

            g.backward(l1);
            AdamConfig hp = cfg.adam;
            hp.lr = decayed_lr(cfg.adam.lr, iter, cfg.iterations);
            adam_step(res.params, state, hp);
        } catch (const NumericError &) {
            res.log.aborted = true;
            res.log.restored_iteration = restore.iteration;
            restore.apply(res.params);
            break;
        }

        if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
            iter + 1 < cfg.iterations)
            restore.take(res.params, iter + 1);
    }

    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        field::save_params(res.params, cfg.checkpoint_dir + "/decoder.splat");
    }
    res.log.wall_seconds = seconds_since(t0);
    return res;
}

}  // namespace splatflow::train
