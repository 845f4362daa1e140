#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "lam3d/geometry.hpp"
#include "lam3d/rng.hpp"
#include "lam3d/tensor.hpp"

namespace lam3d {

struct SdfSampleBatch {
    Tensor surface_points;   // [N0, 3]
    Tensor surface_normals;  // [N0, 3]
    Tensor volume_points;    // [N, 3]
    Tensor volume_sdf;       // [N]
};

struct PointCloud {
    Tensor points;   // [M, 3]
    Tensor normals;  // [M, 3], may be undefined
};

inline Vec3 row3(const Tensor& t, std::size_t i) {
    const auto d = t.data();
    return {d[3 * i], d[3 * i + 1], d[3 * i + 2]};
}

inline Vec3 to_float_precision(Vec3 p) {
    return {static_cast<float>(p.x), static_cast<float>(p.y), static_cast<float>(p.z)};
}

inline constexpr double kProjectionTolerance = 1e-5;
inline constexpr int kProjectionMaxSteps = 64;

// Pulls p onto the zero level set along the SDF gradient. Returns false when
// the gradient degenerates or the tolerance is not met in time.
inline bool project_to_surface(const ShapeSpec& s, Vec3& p) {
    for (int step = 0; step <= kProjectionMaxSteps; ++step) {
        const Vec3 q = to_float_precision(p);
        const double d = s.sdf(q);
        if (std::fabs(d) <= kProjectionTolerance) {
            p = q;
            return true;
        }
        if (step == kProjectionMaxSteps) break;
        const Vec3 g = s.gradient(p);
        const double gn = norm(g);
        if (gn < 1e-6) return false;
        p = p - g * (d / (gn * gn));
    }
    return false;
}

// Surface points come from uniform box samples pushed onto the surface;
// samples whose gradient vanishes (e.g. the exact center of a sphere) are
// redrawn. More than 1% of draws failing to converge is an error.
inline void sample_surface(const ShapeSpec& s, std::size_t count, Rng& rng, std::vector<float>& pts,
                           std::vector<float>& nrm) {
    pts.clear();
    nrm.clear();
    std::size_t failures = 0, attempts = 0;
    while (pts.size() < 3 * count) {
        ++attempts;
        Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        if (!project_to_surface(s, p) || std::max({std::fabs(p.x), std::fabs(p.y), std::fabs(p.z)}) > 1.0) {
            ++failures;
            if (attempts >= 100 && failures * 100 > attempts) {
                throw ShapeError("surface projection failed for more than 1% of samples (" + kind_name(s.kind) + ")");
            }
            continue;
        }
        const Vec3 n = normalized(s.gradient(p));
        for (std::size_t i = 0; i < 3; ++i) {
            pts.push_back(static_cast<float>(p[i]));
            nrm.push_back(static_cast<float>(n[i]));
        }
    }
    if (failures * 100 > attempts) {
        throw ShapeError("surface projection failed for more than 1% of samples (" + kind_name(s.kind) + ")");
    }
}

inline SdfSampleBatch sample_batch(const ShapeSpec& s, std::size_t n_surface, std::size_t n_volume, Rng& rng) {
    if (n_surface == 0 || n_volume == 0) throw ShapeError("sample counts must be positive");
    std::vector<float> pts, nrm;
    sample_surface(s, n_surface, rng, pts, nrm);
    std::vector<float> vol(3 * n_volume), sdf(n_volume);
    for (std::size_t i = 0; i < n_volume; ++i) {
        Vec3 p = to_float_precision({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        vol[3 * i] = static_cast<float>(p.x);
        vol[3 * i + 1] = static_cast<float>(p.y);
        vol[3 * i + 2] = static_cast<float>(p.z);
        sdf[i] = static_cast<float>(s.sdf(p));
    }
    return {Tensor({n_surface, 3}, std::move(pts)), Tensor({n_surface, 3}, std::move(nrm)),
            Tensor({n_volume, 3}, std::move(vol)), Tensor({n_volume}, std::move(sdf))};
}

inline PointCloud sample_point_cloud(const ShapeSpec& s, std::size_t count, Rng& rng) {
    std::vector<float> pts, nrm;
    sample_surface(s, count, rng, pts, nrm);
    return {Tensor({count, 3}, std::move(pts)), Tensor({count, 3}, std::move(nrm))};
}

// Greedy max-min selection starting from index 0; ties keep the lowest index.
inline std::vector<std::size_t> furthest_point_sampling(const Tensor& points, std::size_t n) {
    const std::size_t M = points.dim(0);
    if (n > M) throw ShapeError("cannot pick " + std::to_string(n) + " of " + std::to_string(M) + " points");
    std::vector<std::size_t> picked;
    if (n == 0) return picked;
    std::vector<double> best(M, std::numeric_limits<double>::infinity());
    std::size_t current = 0;
    picked.push_back(0);
    while (picked.size() < n) {
        const Vec3 c = row3(points, current);
        std::size_t arg = 0;
        double far = -1.0;
        for (std::size_t i = 0; i < M; ++i) {
            const Vec3 d = row3(points, i) - c;
            best[i] = std::min(best[i], dot(d, d));
            if (best[i] > far) {
                far = best[i];
                arg = i;
            }
        }
        current = arg;
        picked.push_back(current);
    }
    return picked;
}

// For each center, the K nearest points as offsets from the center, nearest
// first; equal distances keep the lower index first. Returns [n, K, 3].
inline Tensor knn_group(const Tensor& points, const std::vector<std::size_t>& centers, std::size_t K) {
    const std::size_t M = points.dim(0);
    if (K == 0 || K > M) throw ShapeError("K must be in [1, M]");
    std::vector<float> out(centers.size() * K * 3);
    std::vector<std::pair<double, std::size_t>> dist(M);
    for (std::size_t c = 0; c < centers.size(); ++c) {
        const Vec3 o = row3(points, centers[c]);
        for (std::size_t i = 0; i < M; ++i) {
            const Vec3 d = row3(points, i) - o;
            dist[i] = {dot(d, d), i};
        }
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(K), dist.end());
        for (std::size_t k = 0; k < K; ++k) {
            const Vec3 d = row3(points, dist[k].second) - o;
            for (std::size_t a = 0; a < 3; ++a) out[(c * K + k) * 3 + a] = static_cast<float>(d[a]);
        }
    }
    return Tensor({centers.size(), K, 3}, std::move(out));
}

inline Tensor gather_rows(const Tensor& points, const std::vector<std::size_t>& idx) {
    const std::size_t w = points.dim(1);
    std::vector<float> out;
    out.reserve(idx.size() * w);
    const auto d = points.data();
    for (auto i : idx) out.insert(out.end(), d.begin() + static_cast<std::ptrdiff_t>(i * w),
                                  d.begin() + static_cast<std::ptrdiff_t>((i + 1) * w));
    return Tensor({idx.size(), w}, std::move(out));
}

} // namespace lam3d
