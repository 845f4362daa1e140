#pragma once

// Triangle meshes: cleanup, watertightness, area-weighted surface sampling,
// ray-parity inside test and OBJ export.

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <vector>

#include "lam3d/error.hpp"
#include "lam3d/geometry.hpp"
#include "lam3d/rng.hpp"

namespace lam3d {

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> triangles;  // counter-clockwise seen from outside

    bool empty() const { return triangles.empty(); }
};

inline double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) { return 0.5 * norm(cross(b - a, c - a)); }

inline double triangle_area(const Mesh& m, std::size_t f) {
    const auto& t = m.triangles[f];
    return triangle_area(m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]);
}

// Divergence-theorem volume; positive for outward winding.
inline double signed_volume(const Mesh& m) {
    double v = 0.0;
    for (const auto& t : m.triangles) v += dot(m.vertices[t[0]], cross(m.vertices[t[1]], m.vertices[t[2]]));
    return v / 6.0;
}

// Drops triangles below `min_area` and vertices no triangle uses.
inline Mesh clean_mesh(const Mesh& m, double min_area = 1e-12) {
    Mesh out;
    std::vector<std::int64_t> remap(m.vertices.size(), -1);
    for (std::size_t f = 0; f < m.triangles.size(); ++f) {
        if (triangle_area(m, f) < min_area) continue;
        std::array<std::uint32_t, 3> t{};
        for (int c = 0; c < 3; ++c) {
            const auto v = m.triangles[f][c];
            if (remap[v] < 0) {
                remap[v] = static_cast<std::int64_t>(out.vertices.size());
                out.vertices.push_back(m.vertices[v]);
            }
            t[c] = static_cast<std::uint32_t>(remap[v]);
        }
        out.triangles.push_back(t);
    }
    return out;
}

// Every directed edge appears once and its reverse appears once.
inline bool is_watertight(const Mesh& m) {
    std::map<std::pair<std::uint32_t, std::uint32_t>, int> directed;
    for (const auto& t : m.triangles)
        for (int c = 0; c < 3; ++c) ++directed[{t[c], t[(c + 1) % 3]}];
    for (const auto& [e, n] : directed) {
        if (n != 1) return false;
        const auto it = directed.find({e.second, e.first});
        if (it == directed.end() || it->second != 1) return false;
    }
    return true;
}

inline std::vector<Vec3> sample_mesh_surface(const Mesh& m, std::size_t n, Rng& rng) {
    if (m.empty()) throw ShapeError("cannot sample an empty mesh");
    std::vector<double> cumulative(m.triangles.size());
    double total = 0.0;
    for (std::size_t f = 0; f < m.triangles.size(); ++f) cumulative[f] = total += triangle_area(m, f);
    if (!(total > 0.0)) throw ShapeError("mesh has zero area");
    std::vector<Vec3> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pick = rng.uniform() * total;
        const auto f = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
        const auto& t = m.triangles[std::min(f, m.triangles.size() - 1)];
        const double r = std::sqrt(rng.uniform()), u = rng.uniform();
        const double a = 1.0 - r, b = r * (1.0 - u), c = r * u;
        out.push_back(m.vertices[t[0]] * a + m.vertices[t[1]] * b + m.vertices[t[2]] * c);
    }
    return out;
}

namespace detail {

// Moller-Trumbore; counts hits with t > 0.
inline bool ray_hits(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 e1 = b - a, e2 = c - a;
    const Vec3 p = cross(d, e2);
    const double det = dot(e1, p);
    if (std::abs(det) < 1e-14) return false;
    const double inv = 1.0 / det;
    const Vec3 s = o - a;
    const double u = dot(s, p) * inv;
    if (u < 0.0 || u > 1.0) return false;
    const Vec3 q = cross(s, e1);
    const double v = dot(d, q) * inv;
    if (v < 0.0 || u + v > 1.0) return false;
    return dot(e2, q) * inv > 0.0;
}

} // namespace detail

// Majority vote of crossing parity along +x, +y and +z.
inline bool mesh_inside_test(const Mesh& m, const Vec3& p) {
    int votes = 0;
    for (const Vec3 dir : {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}}) {
        std::size_t hits = 0;
        for (const auto& t : m.triangles)
            hits += detail::ray_hits(p, dir, m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]);
        votes += hits % 2 == 1;
    }
    return votes >= 2;
}

inline void write_obj(std::ostream& os, const Mesh& m) {
    os.precision(9);
    for (const auto& v : m.vertices) os << "v " << v.x << ' ' << v.y << ' ' << v.z << '\n';
    for (const auto& t : m.triangles) os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
}

inline void save_obj(const std::string& path, const Mesh& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    write_obj(os, m);
    if (!os) throw IoError("failed writing " + path);
}

// Reads v/f records; polygon faces are fanned.
inline Mesh load_obj(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path);
    Mesh m;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x >> v.y >> v.z)) throw IoError("malformed vertex in " + path);
            m.vertices.push_back(v);
        } else if (tag == "f") {
            std::vector<std::uint32_t> idx;
            std::string tok;
            while (ls >> tok) {
                const long i = std::stol(tok.substr(0, tok.find('/')));
                if (i < 1 || static_cast<std::size_t>(i) > m.vertices.size()) throw IoError("face index out of range in " + path);
                idx.push_back(static_cast<std::uint32_t>(i - 1));
            }
            if (idx.size() < 3) throw IoError("face with fewer than 3 vertices in " + path);
            for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.triangles.push_back({idx[0], idx[k], idx[k + 1]});
        }
    }
    return m;
}

} // namespace lam3d
