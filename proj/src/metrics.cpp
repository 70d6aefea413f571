#include "splatflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "json.hpp"

namespace splatflow::metrics {

namespace {

void require_same_dims(const img::Grid &a, const img::Grid &b, const char *who) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw ShapeError(std::string(who) + ": image dimensions disagree");
}

void require_mask_dims(const img::Grid &a, const img::Grid &mask,
                       const char *who) {
    if (mask.width != a.width || mask.height != a.height)
        throw ShapeError(std::string(who) + ": mask dimensions disagree");
}

double db_from_mse(double mse, double peak) {
    if (mse <= 0.0) return 99.0;
    return std::clamp(10.0 * std::log10(peak * peak / mse), 0.0, 99.0);
}

}  // namespace

// ------------------------------------------------------------ image metrics

double psnr(const img::Grid &a, const img::Grid &b, double peak) {
    require_same_dims(a, b, "psnr");
    double sum = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sum += d * d;
    }
    return db_from_mse(a.data.empty() ? 0.0 : sum / double(a.data.size()), peak);
}

double psnr(const img::Grid &a, const img::Grid &b, const img::Grid &mask,
            double peak) {
    require_same_dims(a, b, "psnr");
    require_mask_dims(a, mask, "psnr");
    // Channel-major accumulation so an all-ones mask reproduces the unmasked
    // sum bit for bit.
    double sum = 0;
    size_t n = 0;
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y < a.height; ++y)
            for (int x = 0; x < a.width; ++x) {
                if (mask.at(0, y, x) <= 0.5) continue;
                const double d = a.at(c, y, x) - b.at(c, y, x);
                sum += d * d;
                ++n;
            }
    return db_from_mse(n == 0 ? 0.0 : sum / double(n), peak);
}

namespace {

std::vector<double> gaussian_taps(int window, double sigma) {
    std::vector<double> taps(static_cast<size_t>(window));
    const double mid = (window - 1) / 2.0;
    double total = 0;
    for (int i = 0; i < window; ++i) {
        taps[i] = std::exp(-(i - mid) * (i - mid) / (2.0 * sigma * sigma));
        total += taps[i];
    }
    for (double &t : taps) t /= total;
    return taps;
}

// Valid-region separable blur: (h x w) plane -> (h-window+1) x (w-window+1).
std::vector<double> blur_valid(const std::vector<double> &plane, int w, int h,
                               std::span<const double> taps) {
    const int k = int(taps.size());
    const int ow = w - k + 1, oh = h - k + 1;
    std::vector<double> rows(size_t(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < k; ++i) s += taps[i] * plane[size_t(y) * w + x + i];
            rows[size_t(y) * ow + x] = s;
        }
    std::vector<double> out(size_t(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0;
            for (int i = 0; i < k; ++i) s += taps[i] * rows[size_t(y + i) * ow + x];
            out[size_t(y) * ow + x] = s;
        }
    return out;
}

// Shared core of the masked and unmasked variants; a null mask selects every
// window.
double ssim_impl(const img::Grid &a, const img::Grid &b, const img::Grid *mask,
                 const SsimOptions &opt) {
    require_same_dims(a, b, "ssim");
    if (mask) require_mask_dims(a, *mask, "ssim");
    if (opt.window < 1 || opt.window % 2 == 0)
        throw ArgumentError("ssim: window must be odd and positive");
    if (opt.window > a.width || opt.window > a.height)
        throw ArgumentError("ssim: window exceeds the image");
    if (opt.sigma <= 0) throw ArgumentError("ssim: sigma must be positive");

    const auto taps = gaussian_taps(opt.window, opt.sigma);
    const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
    const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
    const int w = a.width, h = a.height;
    const int ow = w - opt.window + 1, oh = h - opt.window + 1;
    const int half = opt.window / 2;

    double sum = 0;
    size_t n = 0;
    std::vector<double> pa(a.plane()), pb(a.plane()), paa(a.plane()),
        pbb(a.plane()), pab(a.plane());
    for (int c = 0; c < a.channels; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double va = a.at(c, y, x), vb = b.at(c, y, x);
                const size_t i = size_t(y) * w + x;
                pa[i] = va;
                pb[i] = vb;
                paa[i] = va * va;
                pbb[i] = vb * vb;
                pab[i] = va * vb;
            }
        const auto mu_a = blur_valid(pa, w, h, taps);
        const auto mu_b = blur_valid(pb, w, h, taps);
        const auto m_aa = blur_valid(paa, w, h, taps);
        const auto m_bb = blur_valid(pbb, w, h, taps);
        const auto m_ab = blur_valid(pab, w, h, taps);
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                if (mask && mask->at(0, y + half, x + half) <= 0.5) continue;
                const size_t i = size_t(y) * ow + x;
                const double va = m_aa[i] - mu_a[i] * mu_a[i];
                const double vb = m_bb[i] - mu_b[i] * mu_b[i];
                const double cab = m_ab[i] - mu_a[i] * mu_b[i];
                sum += (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cab + c2) /
                       ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) *
                        (va + vb + c2));
                ++n;
            }
    }
    return n == 0 ? 1.0 : sum / double(n);
}

}  // namespace

double ssim(const img::Grid &a, const img::Grid &b, const SsimOptions &opt) {
    return ssim_impl(a, b, nullptr, opt);
}

double ssim(const img::Grid &a, const img::Grid &b, const img::Grid &mask,
            const SsimOptions &opt) {
    return ssim_impl(a, b, &mask, opt);
}

// --------------------------------------------------------- velocity metrics

VelocityError velocity_error(const physics::VelocitySource &model,
                             const physics::VelocitySource &oracle,
                             std::span<const Vec3> points,
                             std::span<const double> times) {
    if (points.size() != times.size())
        throw ShapeError("velocity_error: points and times disagree in length");
    if (points.empty()) throw ArgumentError("velocity_error: empty probe set");
    std::vector<Vec3> um(points.size()), uo(points.size());
    model.velocity_batch(points, times, um);
    oracle.velocity_batch(points, times, uo);
    VelocityError e;
    for (size_t i = 0; i < points.size(); ++i) {
        const Vec3 d = um[i] - uo[i];
        e.l1_sum += std::abs(d.x) + std::abs(d.y) + std::abs(d.z);
        e.epe += d.norm();
    }
    e.l1_sum /= double(points.size());
    e.epe /= double(points.size());
    e.l1_component = e.l1_sum / 3.0;
    return e;
}

double mean_abs_divergence(const physics::VelocitySource &field,
                           const physics::ProbeSet &probes) {
    if (probes.points.size() != probes.times.size())
        throw ShapeError("mean_abs_divergence: points and times disagree");
    if (probes.size() == 0)
        throw ArgumentError("mean_abs_divergence: empty probe set");
    const auto js = field.jets(probes.points, probes.times);
    double sum = 0;
    for (const auto &j : js)
        sum += std::abs(j.jacobian(0, 0) + j.jacobian(1, 1) + j.jacobian(2, 2));
    return sum / double(js.size());
}

double boundary_violation_rate(const scene::GaussianScene &g0,
                               const physics::VelocitySource &field,
                               const physics::FluidRegion &region,
                               double horizon, int steps) {
    if (horizon <= 0)
        throw ArgumentError("boundary_violation_rate: horizon must be positive");
    if (steps < 1)
        throw ArgumentError("boundary_violation_rate: steps must be >= 1");
    std::vector<Vec3> pts;
    pts.reserve(g0.count());
    for (size_t i = 0; i < g0.count(); ++i)
        if (g0.fluid[i]) pts.push_back(g0.centers[i]);
    if (pts.empty()) return 0.0;

    const double dt = horizon / steps;
    std::vector<uint8_t> violated(pts.size(), 0);
    std::vector<Vec3> u(pts.size());
    std::vector<double> ts(pts.size());
    for (int k = 0; k < steps; ++k) {
        std::fill(ts.begin(), ts.end(), k * dt);
        field.velocity_batch(pts, ts, u);
        for (size_t i = 0; i < pts.size(); ++i) {
            pts[i] = pts[i] + dt * u[i];
            if (!violated[i] && !region.contains(pts[i], (k + 1) * dt))
                violated[i] = 1;
        }
    }
    size_t bad = 0;
    for (uint8_t v : violated) bad += v;
    return double(bad) / double(violated.size());
}

// ------------------------------------------------------------------ reports

EvalReport evaluate_frames(std::span<const img::Grid> rendered,
                           std::span<const img::Grid> reference,
                           const img::Grid *fluid_mask, int threads) {
    if (rendered.size() != reference.size())
        throw ShapeError("evaluate_frames: sequences disagree in length");
    if (threads < 1) throw ArgumentError("evaluate_frames: threads must be >= 1");
    const size_t n = rendered.size();
    EvalReport r;
    r.frame_psnr.resize(n);
    r.frame_ssim.resize(n);
    if (fluid_mask) {
        r.frame_psnr_fluid.resize(n);
        r.frame_ssim_fluid.resize(n);
    }

    auto frame = [&](size_t i) {
        r.frame_psnr[i] = psnr(rendered[i], reference[i]);
        r.frame_ssim[i] = ssim(rendered[i], reference[i]);
        if (fluid_mask) {
            r.frame_psnr_fluid[i] = psnr(rendered[i], reference[i], *fluid_mask);
            r.frame_ssim_fluid[i] = ssim(rendered[i], reference[i], *fluid_mask);
        }
    };

    const size_t workers = std::min(size_t(threads), std::max<size_t>(n, 1));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) frame(i);
        return r;
    }
    // Each frame writes only its own slots, so a strided split needs no locks
    // and cannot reorder anything.
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mu;
    for (size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (size_t i = w; i < n; i += workers) frame(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        });
    for (auto &t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return r;
}

namespace {

struct Row {
    const char *metric;
    int frame;  // < 0 for scalars
    double value;
};

std::vector<Row> report_rows(const EvalReport &r) {
    std::vector<Row> rows;
    auto frames = [&rows](const char *name, const std::vector<double> &v) {
        for (size_t i = 0; i < v.size(); ++i)
            rows.push_back({name, int(i), v[i]});
    };
    frames("psnr", r.frame_psnr);
    frames("ssim", r.frame_ssim);
    frames("psnr_fluid", r.frame_psnr_fluid);
    frames("ssim_fluid", r.frame_ssim_fluid);
    rows.push_back({"epe", -1, r.epe});
    rows.push_back({"l1_component", -1, r.l1_component});
    rows.push_back({"l1_sum", -1, r.l1_sum});
    rows.push_back({"mean_abs_div", -1, r.mean_abs_div});
    rows.push_back({"boundary_violation", -1, r.boundary_violation});
    rows.push_back({"train_seconds", -1, r.train_seconds});
    rows.push_back({"render_seconds", -1, r.render_seconds});
    rows.push_back({"eval_seconds", -1, r.eval_seconds});
    return rows;
}

}  // namespace

void save_report_csv(const EvalReport &report, const std::string &path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report '" + path + "'");
    out << "metric,frame,value\n";
    char line[160];
    for (const Row &r : report_rows(report)) {
        if (r.frame >= 0)
            std::snprintf(line, sizeof line, "%s,%d,%.17g\n", r.metric, r.frame,
                          r.value);
        else
            std::snprintf(line, sizeof line, "%s,,%.17g\n", r.metric, r.value);
        out << line;
    }
    if (!out) throw IoError("failed writing report '" + path + "'");
}

void save_report_jsonl(const EvalReport &report, const std::string &path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report '" + path + "'");
    for (const Row &r : report_rows(report)) {
        nlohmann::json j;
        j["metric"] = r.metric;
        if (r.frame >= 0) j["frame"] = r.frame;
        j["value"] = r.value;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("failed writing report '" + path + "'");
}

}  // namespace splatflow::metrics
