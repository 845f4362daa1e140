#pragma once

// Analytic shapes with exact signed distance functions (negative inside).
// All math here is double precision.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lam3d/error.hpp"

namespace lam3d {

struct Vec3 {
    double x = 0, y = 0, z = 0;

    double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
    friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
    friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
    friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
    friend Vec3 operator*(double s, Vec3 a) { return a * s; }
    friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline Vec3 cross(Vec3 a, Vec3 b) { return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x}; }
inline Vec3 normalized(Vec3 a) { return a * (1.0 / norm(a)); }
inline Vec3 vmax(Vec3 a, double s) { return {std::max(a.x, s), std::max(a.y, s), std::max(a.z, s)}; }
inline Vec3 vabs(Vec3 a) { return {std::fabs(a.x), std::fabs(a.y), std::fabs(a.z)}; }

// Rigid transform: rotations in degrees about the fixed X, then Y, then Z axes,
// then a translation. Maps object space to world space.
struct Pose {
    Vec3 euler_deg{};
    Vec3 translation{};

    std::array<double, 9> rotation() const {
        const double d = std::numbers::pi / 180.0;
        const double cx = std::cos(euler_deg.x * d), sx = std::sin(euler_deg.x * d);
        const double cy = std::cos(euler_deg.y * d), sy = std::sin(euler_deg.y * d);
        const double cz = std::cos(euler_deg.z * d), sz = std::sin(euler_deg.z * d);
        // R = Rz * Ry * Rx, row-major
        return {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
                sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
                -sy,     cy * sx,                cy * cx};
    }

    // world -> object: R^T (p - t)
    Vec3 to_local(Vec3 p) const {
        const auto r = rotation();
        const Vec3 q = p - translation;
        return {r[0] * q.x + r[3] * q.y + r[6] * q.z, r[1] * q.x + r[4] * q.y + r[7] * q.z,
                r[2] * q.x + r[5] * q.y + r[8] * q.z};
    }
};

enum class ShapeKind { sphere, box, torus, capsule, union_of_two };

inline std::string kind_name(ShapeKind k) {
    switch (k) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::box: return "box";
    case ShapeKind::torus: return "torus";
    case ShapeKind::capsule: return "capsule";
    case ShapeKind::union_of_two: return "union";
    }
    return "?";
}

inline ShapeKind kind_from_name(const std::string& s) {
    for (auto k : {ShapeKind::sphere, ShapeKind::box, ShapeKind::torus, ShapeKind::capsule, ShapeKind::union_of_two})
        if (kind_name(k) == s) return k;
    throw ShapeError("unknown shape kind '" + s + "'");
}

// Parameters by kind:
//   sphere  {radius}
//   box     {half_x, half_y, half_z}
//   torus   {major, minor}            ring in the local XZ plane
//   capsule {half_length, radius}     segment along local Y
//   union   parts[0], parts[1]        sdf = min of the two
struct ShapeSpec {
    ShapeKind kind = ShapeKind::sphere;
    std::vector<double> params;
    Pose pose;
    std::vector<ShapeSpec> parts;

    static ShapeSpec sphere(double r, Pose p = {}) { return {ShapeKind::sphere, {r}, p, {}}; }
    static ShapeSpec box(Vec3 h, Pose p = {}) { return {ShapeKind::box, {h.x, h.y, h.z}, p, {}}; }
    static ShapeSpec torus(double major, double minor, Pose p = {}) { return {ShapeKind::torus, {major, minor}, p, {}}; }
    static ShapeSpec capsule(double half_length, double r, Pose p = {}) {
        return {ShapeKind::capsule, {half_length, r}, p, {}};
    }
    static ShapeSpec unite(ShapeSpec a, ShapeSpec b, Pose p = {}) {
        return {ShapeKind::union_of_two, {}, p, {std::move(a), std::move(b)}};
    }

    double sdf(Vec3 world) const {
        const Vec3 p = pose.to_local(world);
        switch (kind) {
        case ShapeKind::sphere: return norm(p) - params.at(0);
        case ShapeKind::box: {
            const Vec3 q = vabs(p) - Vec3{params.at(0), params.at(1), params.at(2)};
            return norm(vmax(q, 0.0)) + std::min(std::max({q.x, q.y, q.z}), 0.0);
        }
        case ShapeKind::torus: {
            const double ring = std::hypot(p.x, p.z) - params.at(0);
            return std::hypot(ring, p.y) - params.at(1);
        }
        case ShapeKind::capsule: {
            const double h = params.at(0);
            const double y = std::clamp(p.y, -h, h);
            return norm(p - Vec3{0, y, 0}) - params.at(1);
        }
        case ShapeKind::union_of_two: return std::min(parts.at(0).sdf(p), parts.at(1).sdf(p));
        }
        return 0.0;
    }

    // Central-difference gradient; exact SDFs make this unit length away
    // from medial seams.
    Vec3 gradient(Vec3 p, double h = 1e-6) const {
        Vec3 g;
        for (std::size_t i = 0; i < 3; ++i) {
            Vec3 a = p, b = p;
            a[i] += h;
            b[i] -= h;
            g[i] = (sdf(a) - sdf(b)) / (2 * h);
        }
        return g;
    }
};

// Closed-form volume for primitives (unions unsupported); used by sampling
// checks.
inline double analytic_volume(const ShapeSpec& s) {
    const double pi = std::numbers::pi;
    switch (s.kind) {
    case ShapeKind::sphere: return 4.0 / 3.0 * pi * std::pow(s.params[0], 3);
    case ShapeKind::box: return 8.0 * s.params[0] * s.params[1] * s.params[2];
    case ShapeKind::torus: return 2.0 * pi * pi * s.params[0] * s.params[1] * s.params[1];
    case ShapeKind::capsule:
        return pi * s.params[1] * s.params[1] * (2.0 * s.params[0]) + 4.0 / 3.0 * pi * std::pow(s.params[1], 3);
    case ShapeKind::union_of_two: break;
    }
    throw ShapeError("no closed-form volume for unions");
}

// Shape must contain the origin and stay strictly inside the unit box.
inline void validate_shape(const ShapeSpec& s) {
    if (!(s.sdf({0, 0, 0}) < 0)) throw ShapeError(kind_name(s.kind) + " does not contain the origin");
    constexpr int n = 33;
    for (int face = 0; face < 6; ++face) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                const double u = -1.0 + 2.0 * i / (n - 1), v = -1.0 + 2.0 * j / (n - 1);
                const double w = face % 2 ? 1.0 : -1.0;
                Vec3 p = face / 2 == 0 ? Vec3{w, u, v} : (face / 2 == 1 ? Vec3{u, w, v} : Vec3{u, v, w});
                if (!(s.sdf(p) > 0)) throw ShapeError(kind_name(s.kind) + " touches the [-1,1]^3 boundary");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// key=value serialization, used by dataset manifests.

namespace detail {
inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}
inline std::string fmt_vec(Vec3 v) { return fmt_double(v.x) + "," + fmt_double(v.y) + "," + fmt_double(v.z); }
inline std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ShapeError("bad number '" + item + "'");
        }
    }
    return out;
}
inline Vec3 parse_vec(const std::string& s) {
    auto v = parse_list(s);
    if (v.size() != 3) throw ShapeError("expected 3 components in '" + s + "'");
    return {v[0], v[1], v[2]};
}
} // namespace detail

inline void shape_to_kv(const ShapeSpec& s, const std::string& prefix, std::map<std::string, std::string>& out) {
    out[prefix + "kind"] = kind_name(s.kind);
    std::string params;
    for (std::size_t i = 0; i < s.params.size(); ++i) params += (i ? "," : "") + detail::fmt_double(s.params[i]);
    if (s.kind != ShapeKind::union_of_two) out[prefix + "params"] = params;
    out[prefix + "rotation_deg"] = detail::fmt_vec(s.pose.euler_deg);
    out[prefix + "translation"] = detail::fmt_vec(s.pose.translation);
    for (std::size_t i = 0; i < s.parts.size(); ++i) shape_to_kv(s.parts[i], prefix + "part" + std::to_string(i) + ".", out);
}

inline ShapeSpec shape_from_kv(const std::map<std::string, std::string>& kv, const std::string& prefix) {
    auto get = [&](const std::string& k) {
        auto it = kv.find(prefix + k);
        if (it == kv.end()) throw ShapeError("missing key " + prefix + k);
        return it->second;
    };
    ShapeSpec s;
    s.kind = kind_from_name(get("kind"));
    s.pose.euler_deg = detail::parse_vec(get("rotation_deg"));
    s.pose.translation = detail::parse_vec(get("translation"));
    if (s.kind == ShapeKind::union_of_two) {
        s.parts.push_back(shape_from_kv(kv, prefix + "part0."));
        s.parts.push_back(shape_from_kv(kv, prefix + "part1."));
    } else {
        s.params = detail::parse_list(get("params"));
        const std::size_t want = s.kind == ShapeKind::box ? 3 : (s.kind == ShapeKind::sphere ? 1 : 2);
        if (s.params.size() != want) throw ShapeError("wrong parameter count for " + kind_name(s.kind));
        for (double p : s.params)
            if (!(p > 0)) throw ShapeError("shape parameters must be positive");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Desk-scale corpus. Every entry contains the origin and fits inside the box.

struct NamedShape {
    std::string name;
    ShapeSpec spec;
};

inline std::vector<NamedShape> shape_corpus() {
    return {
        {"sphere", ShapeSpec::sphere(0.55)},
        {"box", ShapeSpec::box({0.45, 0.3, 0.35}, {{20, 30, 0}, {}})},
        {"torus", ShapeSpec::torus(0.4, 0.2, {{0, 0, 0}, {0.3, 0, 0}})},
        {"capsule", ShapeSpec::capsule(0.35, 0.25, {{0, 0, 35}, {}})},
        {"sphere_box", ShapeSpec::unite(ShapeSpec::sphere(0.35, {{}, {-0.3, 0.1, 0}}),
                                        ShapeSpec::box({0.3, 0.25, 0.3}, {{0, 25, 0}, {0.3, -0.1, 0}}))},
        {"slab", ShapeSpec::box({0.6, 0.6, 0.15})},
        {"mallet", ShapeSpec::unite(ShapeSpec::capsule(0.45, 0.12, {{0, 0, 90}, {}}),
                                      ShapeSpec::sphere(0.3, {{}, {0.45, 0, 0}}))},
        {"tilted_torus", ShapeSpec::unite(ShapeSpec::torus(0.45, 0.15, {{60, 0, 0}, {}}),
                                          ShapeSpec::sphere(0.25))},
    };
}

} // namespace lam3d
