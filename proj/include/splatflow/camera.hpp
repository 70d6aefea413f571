#pragma once

// Pinhole camera. World-to-camera pose, +z looking forward; pixel centers
// sit at integer coordinates, so a W-wide image spans u in [0, W-1].

#include <optional>
#include <vector>

#include "splatflow/core.hpp"
#include "splatflow/dual.hpp"

namespace splatflow::scene {

struct PixelPoint {
    double u = 0, v = 0;
    double depth = 0;  // camera-space z
};

struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;
    Quat rot;    // world-to-camera rotation
    Vec3 trans;  // world-to-camera translation

    Mat3 rotation() const { return rot.to_matrix(); }

    Vec3 to_camera(const Vec3 &p_world) const {
        return rotation() * p_world + trans;
    }

    // Projects a world point; DomainError when at or behind the camera plane.
    PixelPoint project(const Vec3 &p_world) const {
        Vec3 pc = to_camera(p_world);
        if (pc.z <= 0)
            throw DomainError("projection: point not in front of camera");
        return {fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy, pc.z};
    }

    std::optional<PixelPoint> try_project(const Vec3 &p_world) const {
        Vec3 pc = to_camera(p_world);
        if (pc.z <= 1e-9) return std::nullopt;
        return PixelPoint{fx * pc.x / pc.z + cx, fy * pc.y / pc.z + cy, pc.z};
    }

    // Inverse of project for a known depth.
    Vec3 lift_pixel(double u, double v, double depth) const {
        if (depth <= 0) throw ArgumentError("lift_pixel: depth must be positive");
        Vec3 pc{(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
        return rotation().transposed() * (pc - trans);
    }

    bool pixel_inside(double u, double v) const {
        return u >= 0 && u <= width - 1 && v >= 0 && v <= height - 1;
    }
};

// Per-frame camera poses over an animation. Intrinsics are shared.
struct CameraPath {
    Camera base;
    double fps = 30.0;
    std::vector<std::pair<Quat, Vec3>> poses;  // world-to-camera per frame

    int frames() const { return int(poses.size()); }
    double duration() const { return frames() / fps; }

    Camera at(int frame) const {
        if (frame < 0 || frame >= frames())
            throw ArgumentError("camera path: frame out of range");
        Camera c = base;
        c.rot = poses[frame].first;
        c.trans = poses[frame].second;
        return c;
    }
};

// Projection on plain dual numbers, for input-derivative paths outside the
// training graph. Returns (u, v, depth) as duals.
inline std::array<ad::Dual4, 3> project_dual(const Camera &cam,
                                             const std::array<ad::Dual4, 3> &p) {
    const Mat3 R = cam.rotation();
    std::array<ad::Dual4, 3> pc;
    for (int i = 0; i < 3; ++i)
        pc[i] = R(i, 0) * p[0] + R(i, 1) * p[1] + R(i, 2) * p[2] +
                ad::Dual4(cam.trans[i]);
    if (pc[2].v <= 0)
        throw DomainError("projection: point not in front of camera");
    return {cam.fx * pc[0] / pc[2] + ad::Dual4(cam.cx),
            cam.fy * pc[1] / pc[2] + ad::Dual4(cam.cy), pc[2]};
}

}  // namespace splatflow::scene
