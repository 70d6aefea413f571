#include "splatflow/scene.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace splatflow::scene {

namespace fs = std::filesystem;
using nlohmann::json;

void GaussianScene::push(const GaussianKernel &k,
                         std::span<const double> payload_values) {
    if (int(payload_values.size()) != payload_dim)
        throw ShapeError("kernel payload length does not match scene payload_dim");
    centers.push_back(k.center);
    rotations.push_back(k.rotation);
    scales.push_back(k.scale);
    opacities.push_back(k.opacity);
    fluid.push_back(k.fluid ? 1 : 0);
    payloads.insert(payloads.end(), payload_values.begin(), payload_values.end());
}

void GaussianScene::validate() const {
    const size_t n = centers.size();
    if (rotations.size() != n || scales.size() != n || opacities.size() != n ||
        fluid.size() != n || payloads.size() != n * payload_dim)
        throw ShapeError("gaussian scene arrays disagree in length");
    for (size_t i = 0; i < n; ++i) {
        if (!(scales[i].x > 0 && scales[i].y > 0 && scales[i].z > 0))
            throw ArgumentError("kernel scale must be positive");
        if (opacities[i] < 0 || opacities[i] > 1)
            throw ArgumentError("kernel opacity must lie in [0,1]");
        check_finite(centers[i].x + centers[i].y + centers[i].z, "scene",
                     "kernel center");
    }
}

std::vector<LdiLayer> cluster_ldi(const img::Grid &depth, double threshold,
                                  const img::Grid *color) {
    if (depth.channels != 1)
        throw ArgumentError("cluster_ldi wants a single-channel depth grid");
    if (threshold <= 0) throw ArgumentError("cluster_ldi threshold must be positive");

    std::vector<double> values;
    values.reserve(depth.data.size());
    for (double d : depth.data)
        if (d > 0) values.push_back(d);
    if (values.empty())
        throw ArgumentError("cluster_ldi: no valid depth values");
    std::sort(values.begin(), values.end());

    // Single linkage in one dimension: a cluster ends where the gap to the
    // next sorted value exceeds the threshold.
    std::vector<std::pair<double, double>> ranges;
    double lo = values[0], hi = values[0];
    for (size_t i = 1; i < values.size(); ++i) {
        if (values[i] - hi > threshold) {
            ranges.emplace_back(lo, hi);
            lo = values[i];
        }
        hi = values[i];
    }
    ranges.emplace_back(lo, hi);

    std::vector<LdiLayer> layers(ranges.size());
    for (size_t li = 0; li < ranges.size(); ++li) {
        LdiLayer &L = layers[li];
        L.depth_min = ranges[li].first;
        L.depth_max = ranges[li].second;
        L.depth = img::Grid(depth.width, depth.height, 1, 0.0);
        L.validity = img::Grid(depth.width, depth.height, 1, 0.0);
        if (color) L.color = img::Grid(depth.width, depth.height, color->channels, 0.0);
    }
    for (int y = 0; y < depth.height; ++y)
        for (int x = 0; x < depth.width; ++x) {
            const double d = depth.at(0, y, x);
            if (d <= 0) continue;
            // Ranges are disjoint with gaps > threshold, so membership is
            // unambiguous.
            size_t li = 0;
            for (; li < ranges.size(); ++li)
                if (d >= ranges[li].first && d <= ranges[li].second) break;
            LdiLayer &L = layers[li];
            L.depth.at(0, y, x) = d;
            L.validity.at(0, y, x) = 1.0;
            if (color)
                for (int c = 0; c < color->channels; ++c)
                    L.color.at(c, y, x) = color->at(c, y, x);
        }
    return layers;
}

void feature_lift(std::span<const double> rgb, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    const size_t n = out.size();
    for (size_t i = 0; i < 3 && i < n; ++i) out[i] = rgb[i];
    for (size_t i = 0; i < 3 && 3 + i < n; ++i) out[3 + i] = rgb[i] * rgb[i];
    if (n > 6) out[6] = 1.0;
}

GaussianScene gaussians_from_image(const img::Grid &image, const img::Grid &depth,
                                   const img::Grid &mask, const Camera &camera,
                                   const KernelBuildOptions &opts) {
    if (image.channels != 3) throw ArgumentError("image must be 3-channel RGB");
    if (depth.channels != 1 || mask.channels != 1)
        throw ArgumentError("depth and mask must be single-channel");
    if (image.width != depth.width || image.height != depth.height ||
        image.width != mask.width || image.height != mask.height)
        throw ShapeError("image/depth/mask dimensions disagree");
    if (opts.payload_dim < 3)
        throw ArgumentError("payload_dim must be at least 3");

    GaussianScene out;
    out.payload_dim = opts.payload_dim;
    const size_t n_guess = size_t(image.width) * image.height;
    out.centers.reserve(n_guess);
    out.payloads.reserve(n_guess * opts.payload_dim);

    std::vector<double> payload(opts.payload_dim);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const double d = depth.at(0, y, x);
            if (d <= 0) continue;
            GaussianKernel k;
            k.center = camera.lift_pixel(x, y, d);
            const double s = opts.pixel_footprint * d / camera.fx;
            k.scale = {s, s, s};
            k.opacity = 1.0;
            k.fluid = mask.at(0, y, x) > 0.5;
            const double rgb[3] = {image.at(0, y, x), image.at(1, y, x),
                                   image.at(2, y, x)};
            if (opts.payload_dim == 3)
                std::copy(rgb, rgb + 3, payload.begin());
            else
                feature_lift(std::span<const double>(rgb, 3), payload);
            out.push(k, payload);
        }
    if (out.count() == 0)
        throw ArgumentError("gaussians_from_image: no valid pixels");
    out.validate();
    return out;
}

// --------------------------------------------------------------- bundles

namespace {

json quat_json(const Quat &q) { return json::array({q.w, q.x, q.y, q.z}); }
json vec_json(const Vec3 &v) { return json::array({v.x, v.y, v.z}); }

Quat quat_from(const json &j) {
    return Quat{j.at(0), j.at(1), j.at(2), j.at(3)}.normalized();
}
Vec3 vec_from(const json &j) { return {j.at(0), j.at(1), j.at(2)}; }

}  // namespace

void save_bundle(const std::string &dir, const SceneBundle &b) {
    fs::create_directories(dir);
    img::write_png(dir + "/image.png", b.image);
    img::write_f32grid(dir + "/depth.f32", b.depth);
    img::write_png(dir + "/mask.png", b.mask);
    if (b.hints) img::write_f32grid(dir + "/hints.f32", *b.hints);

    json cam;
    cam["intrinsics"] = {{"fx", b.camera.fx}, {"fy", b.camera.fy},
                         {"cx", b.camera.cx}, {"cy", b.camera.cy},
                         {"width", b.camera.width}, {"height", b.camera.height}};
    cam["input_pose"] = {{"q", quat_json(b.camera.rot)},
                         {"t", vec_json(b.camera.trans)}};
    cam["fps"] = b.trajectory.fps;
    json frames = json::array();
    for (const auto &[q, t] : b.trajectory.poses)
        frames.push_back({{"q", quat_json(q)}, {"t", vec_json(t)}});
    cam["trajectory"] = frames;
    std::ofstream(dir + "/camera.json") << cam.dump(2) << "\n";

    if (!b.scene_json.empty())
        std::ofstream(dir + "/scene.json") << b.scene_json << "\n";
}

SceneBundle load_bundle(const std::string &dir) {
    if (!fs::exists(dir + "/camera.json"))
        throw IoError("'" + dir + "' is not a scene bundle (no camera.json)");
    SceneBundle b;
    b.image = img::read_png(dir + "/image.png");
    b.depth = img::read_f32grid(dir + "/depth.f32");
    b.mask = img::read_png(dir + "/mask.png");
    if (b.image.channels != 3) throw IoError("bundle image must be RGB");
    if (fs::exists(dir + "/hints.f32"))
        b.hints = img::read_f32grid(dir + "/hints.f32");

    json cam;
    std::ifstream(dir + "/camera.json") >> cam;
    const auto &in = cam.at("intrinsics");
    b.camera.fx = in.at("fx");
    b.camera.fy = in.at("fy");
    b.camera.cx = in.at("cx");
    b.camera.cy = in.at("cy");
    b.camera.width = in.at("width");
    b.camera.height = in.at("height");
    b.camera.rot = quat_from(cam.at("input_pose").at("q"));
    b.camera.trans = vec_from(cam.at("input_pose").at("t"));
    b.trajectory.base = b.camera;
    b.trajectory.fps = cam.at("fps");
    for (const auto &f : cam.at("trajectory"))
        b.trajectory.poses.emplace_back(quat_from(f.at("q")), vec_from(f.at("t")));

    if (fs::exists(dir + "/scene.json")) {
        std::ifstream sf(dir + "/scene.json");
        b.scene_json.assign(std::istreambuf_iterator<char>(sf),
                            std::istreambuf_iterator<char>());
    }
    return b;
}

}  // namespace splatflow::scene
