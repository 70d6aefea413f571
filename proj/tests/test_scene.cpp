#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "splatflow/camera.hpp"
#include "splatflow/image.hpp"
#include "splatflow/scene.hpp"

using namespace splatflow;

namespace {

std::string temp_dir(const char *tag) {
    auto dir = std::filesystem::temp_directory_path() /
               (std::string("splatflow_test_") + tag);
    std::filesystem::create_directories(dir);
    return dir.string();
}

scene::Camera test_camera(int w = 32, int h = 24) {
    scene::Camera c;
    c.fx = 20;
    c.fy = 22;
    c.cx = (w - 1) / 2.0;
    c.cy = (h - 1) / 2.0;
    c.width = w;
    c.height = h;
    return c;
}

}  // namespace

TEST_CASE("png round-trip preserves 8-bit rgb values") {
    img::Grid g(7, 5, 3);
    Rng rng(11);
    for (auto &v : g.data) v = rng.uniform();
    const std::string path = temp_dir("png") + "/rt.png";
    img::write_png(path, g);
    img::Grid back = img::read_png(path);
    REQUIRE(back.width == 7);
    REQUIRE(back.height == 5);
    REQUIRE(back.channels == 3);
    // Quantized to 1/255 steps on disk.
    CHECK(img::mean_abs_diff(g, back) < 0.5 / 255.0);
}

TEST_CASE("f32 grid round-trip is exact at float precision") {
    img::Grid g(6, 4, 2);
    Rng rng(12);
    for (auto &v : g.data) v = rng.normal() * 10;
    const std::string path = temp_dir("f32") + "/rt.f32";
    img::write_f32grid(path, g);
    img::Grid back = img::read_f32grid(path);
    REQUIRE(back.channels == 2);
    for (size_t i = 0; i < g.data.size(); ++i)
        CHECK(back.data[i] == doctest::Approx(g.data[i]).epsilon(1e-7));
}

TEST_CASE("reading a non-image file fails with IoError") {
    const std::string path = temp_dir("badpng") + "/not_a_png.png";
    FILE *f = std::fopen(path.c_str(), "wb");
    std::fputs("this is not an image", f);
    std::fclose(f);
    CHECK_THROWS_AS(img::read_png(path), IoError);
    CHECK_THROWS_AS(img::read_f32grid(path), IoError);
}

TEST_CASE("camera projection and pixel lifting invert each other") {
    scene::Camera cam = test_camera();
    cam.rot = Quat{0.96, 0.1, 0.2, 0.12}.normalized();
    cam.trans = {0.3, -0.2, 0.5};
    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const double u = rng.uniform() * (cam.width - 1);
        const double v = rng.uniform() * (cam.height - 1);
        const double d = 2.0 + rng.uniform() * 10.0;
        Vec3 p = cam.lift_pixel(u, v, d);
        scene::PixelPoint px = cam.project(p);
        CHECK(px.u == doctest::Approx(u).epsilon(1e-10));
        CHECK(px.v == doctest::Approx(v).epsilon(1e-10));
        CHECK(px.depth == doctest::Approx(d).epsilon(1e-10));
    }
}

TEST_CASE("points behind the camera are rejected or skipped") {
    scene::Camera cam = test_camera();
    cam.trans = {0, 0, 4};
    const Vec3 behind{0, 0, -5};  // camera z = -1
    CHECK_THROWS_AS(cam.project(behind), DomainError);
    CHECK(!cam.try_project(behind).has_value());
    CHECK_THROWS_AS(cam.lift_pixel(3, 3, -1.0), ArgumentError);
}

TEST_CASE("dual projection matches finite differences of the plain one") {
    scene::Camera cam = test_camera();
    cam.rot = Quat{0.9, -0.15, 0.25, 0.05}.normalized();
    cam.trans = {0.4, 0.1, 6.0};
    const Vec3 p{0.7, -0.4, 1.2};

    auto project3 = [&](const Vec4 &x) {
        scene::PixelPoint px = cam.project({x.x, x.y, x.z});
        return Vec3{px.u, px.v, px.depth};
    };
    Mat3x4 fd_jac = fd::jacobian(project3, {p.x, p.y, p.z, 0.0});

    std::array<ad::Dual4, 3> in = {ad::Dual4::seeded(p.x, 0),
                                   ad::Dual4::seeded(p.y, 1),
                                   ad::Dual4::seeded(p.z, 2)};
    auto out = scene::project_dual(cam, in);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(fd::rel_err(out[r].d[c], fd_jac(r, c)) < 1e-6);
}

TEST_CASE("camera path poses override the base pose per frame") {
    scene::CameraPath path;
    path.base = test_camera();
    path.fps = 10;
    path.poses.push_back({Quat{}, {0, 0, 1}});
    path.poses.push_back({Quat{}, {0, 0, 2}});
    CHECK(path.frames() == 2);
    CHECK(path.duration() == doctest::Approx(0.2));
    CHECK(path.at(1).trans.z == 2);
    CHECK_THROWS_AS(path.at(2), ArgumentError);
}

TEST_CASE("depth clustering separates layers by gap and chains within one") {
    img::Grid depth(8, 1, 1);
    // Depths 5.0 and 6.5 chain through a 1.5 gap; 20 is its own layer;
    // zeros are invalid.
    const double vals[8] = {5.0, 6.5, 20.0, 0.0, 5.5, 20.2, 0.0, 6.0};
    for (int i = 0; i < 8; ++i) depth.at(0, 0, i) = vals[i];

    auto layers = scene::cluster_ldi(depth, 2.0);
    REQUIRE(layers.size() == 2);
    // Nearest first.
    CHECK(layers[0].depth_min == doctest::Approx(5.0));
    CHECK(layers[0].depth_max == doctest::Approx(6.5));
    CHECK(layers[1].depth_min == doctest::Approx(20.0));
    // Membership masks are disjoint and cover exactly the valid pixels.
    int members0 = 0, members1 = 0;
    for (int i = 0; i < 8; ++i) {
        members0 += int(layers[0].validity.at(0, 0, i));
        members1 += int(layers[1].validity.at(0, 0, i));
    }
    CHECK(members0 == 4);
    CHECK(members1 == 2);
    CHECK(layers[0].validity.at(0, 0, 3) == 0.0);

    // A tighter threshold breaks the 0.5 chains in the near cluster.
    auto fine = scene::cluster_ldi(depth, 0.4);
    CHECK(fine.size() == 5);

    CHECK_THROWS_AS(scene::cluster_ldi(depth, 0.0), ArgumentError);
    img::Grid empty(4, 4, 1);
    CHECK_THROWS_AS(scene::cluster_ldi(empty, 1.0), ArgumentError);
}

TEST_CASE("image lifting makes one kernel per valid pixel") {
    const int W = 6, H = 4;
    scene::Camera cam = test_camera(W, H);
    img::Grid image(W, H, 3), depth(W, H, 1), mask(W, H, 1);
    Rng rng(3);
    int valid = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            for (int c = 0; c < 3; ++c) image.at(c, y, x) = rng.uniform();
            const bool hole = (x == 2 && y == 1);
            depth.at(0, y, x) = hole ? 0.0 : 4.0 + 0.25 * x + 0.1 * y;
            mask.at(0, y, x) = y >= 2 ? 1.0 : 0.0;
            valid += hole ? 0 : 1;
        }

    scene::GaussianScene gs = scene::gaussians_from_image(image, depth, mask, cam);
    gs.validate();
    REQUIRE(int(gs.count()) == valid);

    // Every kernel center projects back onto its source pixel at its depth,
    // and the isotropic scale matches footprint * depth / focal.
    size_t i = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (depth.at(0, y, x) <= 0) continue;
            scene::PixelPoint px = cam.project(gs.centers[i]);
            CHECK(px.u == doctest::Approx(x).epsilon(1e-9));
            CHECK(px.v == doctest::Approx(y).epsilon(1e-9));
            CHECK(px.depth == doctest::Approx(depth.at(0, y, x)));
            const double want = 0.7 * depth.at(0, y, x) / cam.fx;
            CHECK(gs.scales[i].x == doctest::Approx(want));
            CHECK(gs.scales[i].y == doctest::Approx(want));
            CHECK(gs.scales[i].z == doctest::Approx(want));
            CHECK(gs.opacities[i] == 1.0);
            CHECK(bool(gs.fluid[i]) == (y >= 2));
            auto pay = gs.payload(i);
            CHECK(pay[0] == image.at(0, y, x));
            CHECK(pay[2] == image.at(2, y, x));
            ++i;
        }

    img::Grid nodepth(W, H, 1);
    CHECK_THROWS_AS(scene::gaussians_from_image(image, nodepth, mask, cam),
                    ArgumentError);
}

TEST_CASE("payload feature lift encodes rgb, squares and a constant") {
    std::vector<double> rgb{0.25, 0.5, 1.0};
    std::vector<double> out(9, -1.0);
    scene::feature_lift(rgb, out);
    CHECK(out[0] == 0.25);
    CHECK(out[3] == doctest::Approx(0.0625));
    CHECK(out[5] == doctest::Approx(1.0));
    CHECK(out[6] == 1.0);  // constant channel
    CHECK(out[7] == 0.0);  // zero padding
    CHECK(out[8] == 0.0);

    scene::KernelBuildOptions opts;
    opts.payload_dim = 9;
    img::Grid image(2, 2, 3, 0.5), depth(2, 2, 1, 3.0), mask(2, 2, 1, 1.0);
    auto gs = scene::gaussians_from_image(image, depth, mask, test_camera(2, 2), opts);
    CHECK(gs.payload_dim == 9);
    CHECK(gs.payload(0)[6] == 1.0);
}

TEST_CASE("scene validation catches inconsistent kernels") {
    scene::GaussianScene gs;
    scene::GaussianKernel k;
    k.center = {0, 0, 5};
    std::vector<double> rgb{1, 0, 0};
    gs.push(k, rgb);
    gs.validate();

    gs.opacities[0] = 1.5;
    CHECK_THROWS_AS(gs.validate(), ArgumentError);
    gs.opacities[0] = 1.0;
    gs.scales[0].y = -0.1;
    CHECK_THROWS_AS(gs.validate(), ArgumentError);
    gs.scales[0].y = 0.1;
    gs.payloads.pop_back();
    CHECK_THROWS_AS(gs.validate(), ShapeError);

    std::vector<double> wrong{1, 0};
    CHECK_THROWS_AS(gs.push(k, wrong), ShapeError);
}

TEST_CASE("scene bundles survive a save/load round-trip") {
    const int W = 10, H = 8;
    scene::SceneBundle b;
    b.image = img::Grid(W, H, 3);
    b.depth = img::Grid(W, H, 1);
    b.mask = img::Grid(W, H, 1);
    Rng rng(9);
    for (auto &v : b.image.data) v = rng.uniform();
    for (int i = 0; i < W * H; ++i) {
        b.depth.data[i] = 3.0 + rng.uniform();
        b.mask.data[i] = rng.uniform() > 0.5 ? 1.0 : 0.0;
    }
    b.camera = test_camera(W, H);
    b.camera.trans = {0.1, 0.2, 0.3};
    b.trajectory.base = b.camera;
    b.trajectory.fps = 24;
    for (int f = 0; f < 3; ++f)
        b.trajectory.poses.push_back({b.camera.rot, {0.1, 0.2, 0.3 + 0.01 * f}});
    b.hints = img::Grid(W, H, 3);
    for (auto &v : b.hints->data) v = rng.normal();
    b.scene_json = "{\"kind\":\"test\"}";

    const std::string dir = temp_dir("bundle");
    scene::save_bundle(dir, b);
    scene::SceneBundle back = scene::load_bundle(dir);

    CHECK(back.image.width == W);
    CHECK(img::mean_abs_diff(back.image, b.image) < 0.5 / 255.0);
    CHECK(img::mean_abs_diff(back.depth, b.depth) < 1e-6);
    CHECK(img::mean_abs_diff(back.mask, b.mask) == 0.0);
    CHECK(back.camera.fx == doctest::Approx(b.camera.fx));
    CHECK(back.camera.trans.z == doctest::Approx(0.3));
    CHECK(back.trajectory.frames() == 3);
    CHECK(back.trajectory.fps == doctest::Approx(24));
    CHECK(back.trajectory.poses[2].second.z == doctest::Approx(0.32));
    REQUIRE(back.hints.has_value());
    CHECK(img::mean_abs_diff(*back.hints, *b.hints) < 1e-6);
    CHECK(back.scene_json.find("test") != std::string::npos);

    CHECK_THROWS_AS(scene::load_bundle(temp_dir("nothere")), IoError);
}
