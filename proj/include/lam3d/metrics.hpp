#pragma once

// Chamfer distance, F-score and volumetric IoU.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lam3d/grid.hpp"
#include "lam3d/mesh.hpp"

namespace lam3d {

namespace detail {

// Squared distance from each point of `from` to its nearest point of `to`.
inline std::vector<double> nearest_sq(const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    std::vector<double> out(from.size());
    for (std::size_t i = 0; i < from.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        const Vec3 a = from[i];
        for (const auto& b : to) {
            const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
            best = std::min(best, dx * dx + dy * dy + dz * dz);
        }
        out[i] = best;
    }
    return out;
}

inline void check_nonempty(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) throw ShapeError("point sets must be non-empty");
}

inline double mean_of(const std::vector<double>& v, bool squared) {
    double s = 0.0;
    for (double d : v) s += squared ? d : std::sqrt(d);
    return s / static_cast<double>(v.size());
}

} // namespace detail

// Mean nearest squared distance A->B plus B->A. With squared = false the
// per-point distances are unsquared.
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b, bool squared = true) {
    detail::check_nonempty(a, b);
    return detail::mean_of(detail::nearest_sq(a, b), squared) + detail::mean_of(detail::nearest_sq(b, a), squared);
}

struct FScore {
    double precision = 0, recall = 0, f = 0;  // f in percent
};

inline FScore f_score_detail(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double tau) {
    detail::check_nonempty(a, b);
    if (!(tau > 0)) throw ShapeError("f-score threshold must be positive");
    auto fraction_within = [tau](const std::vector<double>& d) {
        std::size_t n = 0;
        for (double v : d) n += std::sqrt(v) <= tau;
        return static_cast<double>(n) / static_cast<double>(d.size());
    };
    FScore s;
    s.precision = fraction_within(detail::nearest_sq(a, b));
    s.recall = fraction_within(detail::nearest_sq(b, a));
    s.f = s.precision + s.recall > 0 ? 200.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

inline double f_score(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double tau = 0.05) {
    return f_score_detail(a, b, tau).f;
}

inline double volume_iou(const SdfGrid& a, const SdfGrid& b) {
    if (a.resolution != b.resolution || a.values.size() != b.values.size()) throw ShapeError("grid shapes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const bool x = a.values[i] < 0.0f, y = b.values[i] < 0.0f;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Interior mask of a closed mesh on the G^3 lattice (-1 inside, +1 outside):
// crossing parity along lattice lines in x, y and z, majority of the three.
inline SdfGrid voxelize_mesh(const Mesh& m, std::size_t G) {
    if (G < 2) throw ShapeError("grid resolution must be at least 2");
    SdfGrid out{G, std::vector<float>(G * G * G, 1.0f)};
    std::vector<std::uint8_t> votes(G * G * G, 0);
    const double h = out.spacing();
    // Rays run slightly off the lattice lines so they never graze mesh edges
    // that a marching-cubes mesh on a commensurate grid places exactly on them.
    const double nudge_u = 1.4142135e-6 * h, nudge_w = 1.7320508e-6 * h;
    auto lattice_range = [&](double lo, double hi) {
        const auto a = static_cast<long>(std::ceil((lo + 1.0) / h)) - 1;
        const auto b = static_cast<long>(std::floor((hi + 1.0) / h)) + 1;
        return std::pair<long, long>{std::max(a, 0L), std::min(b, static_cast<long>(G) - 1)};
    };
    for (int axis = 0; axis < 3; ++axis) {
        const int u = (axis + 1) % 3, w = (axis + 2) % 3;
        std::vector<std::vector<double>> hits(G * G);
        for (const auto& t : m.triangles) {
            const Vec3 a = m.vertices[t[0]], b = m.vertices[t[1]], c = m.vertices[t[2]];
            const auto [u0, u1] = lattice_range(std::min({a[u], b[u], c[u]}), std::max({a[u], b[u], c[u]}));
            const auto [w0, w1] = lattice_range(std::min({a[w], b[w], c[w]}), std::max({a[w], b[w], c[w]}));
            for (long iu = u0; iu <= u1; ++iu) {
                for (long iw = w0; iw <= w1; ++iw) {
                    Vec3 o;
                    o[axis] = -2.0;
                    o[u] = out.coord(static_cast<std::size_t>(iu)) + nudge_u;
                    o[w] = out.coord(static_cast<std::size_t>(iw)) + nudge_w;
                    Vec3 d;
                    d[axis] = 1.0;
                    if (!detail::ray_hits(o, d, a, b, c)) continue;
                    // Crossing coordinate along the axis, from the plane of the triangle.
                    const Vec3 n = cross(b - a, c - a);
                    const double s = dot(n, a - o) / n[axis];
                    hits[static_cast<std::size_t>(iu) * G + static_cast<std::size_t>(iw)].push_back(o[axis] + s);
                }
            }
        }
        for (std::size_t iu = 0; iu < G; ++iu) {
            for (std::size_t iw = 0; iw < G; ++iw) {
                auto& xs = hits[iu * G + iw];
                std::sort(xs.begin(), xs.end());
                std::size_t passed = 0;
                for (std::size_t i = 0; i < G; ++i) {
                    const double x = out.coord(i);
                    while (passed < xs.size() && xs[passed] < x) ++passed;
                    if (passed % 2 == 1) {
                        std::size_t idx[3];
                        idx[axis] = i;
                        idx[u] = iu;
                        idx[w] = iw;
                        ++votes[(idx[0] * G + idx[1]) * G + idx[2]];
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < votes.size(); ++i)
        if (votes[i] >= 2) out.values[i] = -1.0f;
    return out;
}

struct MetricReport {
    double chamfer = 0, f_score = 0, volume_iou = 0;
    std::size_t samples = 2048;
    double tau = 0.05;
    std::size_t grid = 128;
    std::string name;

    std::string to_kv() const {
        std::ostringstream os;
        os.precision(10);
        if (!name.empty()) os << "shape=" << name << '\n';
        os << "chamfer=" << chamfer << "\nf_score=" << f_score << "\nvolume_iou=" << volume_iou
           << "\nsamples=" << samples << "\ntau=" << tau << "\ngrid=" << grid << '\n';
        return os.str();
    }

    nlohmann::json to_json() const {
        return {{"shape", name}, {"chamfer", chamfer}, {"f_score", f_score}, {"volume_iou", volume_iou},
                {"samples", samples}, {"tau", tau}, {"grid", grid}};
    }
};

struct EvalOptions {
    std::size_t samples = 2048;
    double tau = 0.05;
    std::size_t grid = 128;
    bool squared_chamfer = true;
};

// Metrics between a predicted mesh and field and a ground-truth mesh and field.
inline MetricReport evaluate(const Mesh& pred_mesh, const SdfGrid& pred_grid, const Mesh& gt_mesh,
                             const SdfGrid& gt_grid, const EvalOptions& opt, Rng& rng) {
    MetricReport r;
    r.samples = opt.samples;
    r.tau = opt.tau;
    r.grid = gt_grid.resolution;
    r.volume_iou = volume_iou(pred_grid, gt_grid);
    if (pred_mesh.empty()) {
        r.chamfer = std::numeric_limits<double>::infinity();
        r.f_score = 0.0;
        return r;
    }
    const auto a = sample_mesh_surface(pred_mesh, opt.samples, rng);
    const auto b = sample_mesh_surface(gt_mesh, opt.samples, rng);
    r.chamfer = chamfer(a, b, opt.squared_chamfer);
    r.f_score = f_score(a, b, opt.tau);
    return r;
}

} // namespace lam3d
