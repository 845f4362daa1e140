#pragma once

// Sphere-traced depth images from fixed cameras on a Fibonacci sphere of
// radius 2 looking at the origin.

#include <cmath>
#include <numbers>
#include <vector>

#include "lam3d/geometry.hpp"
#include "lam3d/tensor.hpp"

namespace lam3d {

struct CameraRig {
    std::size_t views = 16;
    std::size_t resolution = 64;
    double radius = 2.0;
    double fov_deg = 50.0;
};

inline constexpr int kTraceMaxSteps = 128;
inline constexpr double kTraceHit = 1e-3;
inline constexpr double kTraceFar = 4.0;

// Camera i of V: y = 1 - 2(i + 0.5)/V, azimuth i * golden angle.
inline Vec3 camera_position(std::size_t i, const CameraRig& rig) {
    const double y = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(rig.views);
    const double r = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double phi = static_cast<double>(i) * std::numbers::pi * (3.0 - std::sqrt(5.0));
    return Vec3{r * std::cos(phi), y, r * std::sin(phi)} * rig.radius;
}

struct CameraFrame {
    Vec3 eye, forward, right, up;
};

inline CameraFrame camera_frame(std::size_t i, const CameraRig& rig) {
    CameraFrame f;
    f.eye = camera_position(i, rig);
    f.forward = normalized(Vec3{} - f.eye);
    Vec3 world_up{0, 1, 0};
    if (norm(cross(f.forward, world_up)) < 1e-6) world_up = {0, 0, 1};
    f.right = normalized(cross(f.forward, world_up));
    f.up = cross(f.right, f.forward);
    return f;
}

// Ray length to the first point with sdf < 1e-3, or 0 on a miss.
inline double trace_ray(const ShapeSpec& s, Vec3 origin, Vec3 dir) {
    double t = 0.0;
    for (int step = 0; step < kTraceMaxSteps; ++step) {
        const double d = s.sdf(origin + dir * t);
        if (d < kTraceHit) return t;
        t += d;
        if (t > kTraceFar) return 0.0;
    }
    return 0.0;
}

// Row 0 is the top of the image; rays pass through pixel centers.
inline Tensor render_depth(const ShapeSpec& s, std::size_t camera, const CameraRig& rig = {}) {
    if (camera >= rig.views) throw ShapeError("camera index out of range");
    const auto f = camera_frame(camera, rig);
    const std::size_t D = rig.resolution;
    const double half = std::tan(rig.fov_deg * std::numbers::pi / 360.0);
    std::vector<float> depth(D * D);
    for (std::size_t r = 0; r < D; ++r) {
        const double v = (1.0 - 2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(D)) * half;
        for (std::size_t c = 0; c < D; ++c) {
            const double u = (2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(D) - 1.0) * half;
            const Vec3 dir = normalized(f.forward + f.right * u + f.up * v);
            depth[r * D + c] = static_cast<float>(trace_ray(s, f.eye, dir));
        }
    }
    return Tensor({D, D}, std::move(depth));
}

inline std::size_t silhouette_area(const Tensor& depth) {
    std::size_t n = 0;
    for (float d : depth.data()) n += d > 0.0f;
    return n;
}

// Camera with the largest silhouette; ties keep the lowest index.
inline std::size_t select_best_view(const ShapeSpec& s, const CameraRig& rig = {}) {
    if (rig.views == 0) throw ShapeError("need at least one camera");
    std::size_t best = 0, best_area = 0;
    for (std::size_t i = 0; i < rig.views; ++i) {
        const std::size_t a = silhouette_area(render_depth(s, i, rig));
        if (i == 0 || a > best_area) {
            best = i;
            best_area = a;
        }
    }
    return best;
}

} // namespace lam3d
