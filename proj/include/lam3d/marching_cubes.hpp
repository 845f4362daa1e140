#pragma once

#include <unordered_map>

#include "lam3d/detail/mc_tables.hpp"
#include "lam3d/grid.hpp"
#include "lam3d/mesh.hpp"

namespace lam3d {

namespace detail {

inline constexpr std::array<std::array<int, 3>, 8> kCorner = {{
    {0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1},
}};
inline constexpr std::array<std::array<int, 2>, 12> kEdgeCorners = {{
    {0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7},
}};

} // namespace detail

// Interior is value < iso. Vertices on a shared lattice edge are welded, so
// a closed level set gives a closed mesh. Edge crossings are kept a small
// fraction away from lattice points to avoid zero-area triangles.
inline Mesh marching_cubes(const SdfGrid& grid, float iso = 0.0f) {
    const std::size_t G = grid.resolution;
    if (G < 2 || grid.values.size() != G * G * G) throw ShapeError("marching cubes needs a G^3 grid with G >= 2");
    Mesh mesh;
    std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
    auto flat = [G](std::size_t i, std::size_t j, std::size_t k) { return (i * G + j) * G + k; };

    auto vertex_on = [&](std::size_t i, std::size_t j, std::size_t k, int e) -> std::uint32_t {
        const auto [ca, cb] = detail::kEdgeCorners[e];
        const auto& A = detail::kCorner[ca];
        const auto& B = detail::kCorner[cb];
        const std::size_t ai = i + A[0], aj = j + A[1], ak = k + A[2];
        const std::size_t bi = i + B[0], bj = j + B[1], bk = k + B[2];
        const int axis = A[0] != B[0] ? 0 : (A[1] != B[1] ? 1 : 2);
        const std::size_t lo = std::min(flat(ai, aj, ak), flat(bi, bj, bk));
        const std::uint64_t key = 3 * static_cast<std::uint64_t>(lo) + static_cast<std::uint64_t>(axis);
        if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
        const double va = grid(ai, aj, ak), vb = grid(bi, bj, bk);
        double t = (static_cast<double>(iso) - va) / (vb - va);
        t = std::clamp(t, 1e-3, 1.0 - 1e-3);
        const Vec3 pa = grid.point(ai, aj, ak), pb = grid.point(bi, bj, bk);
        const auto id = static_cast<std::uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(pa + (pb - pa) * t);
        edge_vertex.emplace(key, id);
        return id;
    };

    for (std::size_t i = 0; i + 1 < G; ++i) {
        for (std::size_t j = 0; j + 1 < G; ++j) {
            for (std::size_t k = 0; k + 1 < G; ++k) {
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    const auto& o = detail::kCorner[c];
                    if (grid(i + o[0], j + o[1], k + o[2]) < iso) cube |= 1 << c;
                }
                if (detail::kEdgeTable[cube] == 0) continue;
                const auto& tris = detail::kTriTable[cube];
                for (int n = 0; tris[n] != -1; n += 3) {
                    // The table lists triangles clockwise seen from outside.
                    mesh.triangles.push_back({vertex_on(i, j, k, tris[n]), vertex_on(i, j, k, tris[n + 2]),
                                              vertex_on(i, j, k, tris[n + 1])});
                }
            }
        }
    }
    return clean_mesh(mesh);
}

} // namespace lam3d
