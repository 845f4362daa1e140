#pragma once

// Scalar fields sampled on the G^3 corner lattice of [-1,1]^3. Storage is
// x-major: value(i, j, k) sits at (i*G + j)*G + k.

#include <functional>
#include <vector>

#include "lam3d/error.hpp"
#include "lam3d/geometry.hpp"

namespace lam3d {

struct SdfGrid {
    std::size_t resolution = 0;
    std::vector<float> values;

    float operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return values[(i * resolution + j) * resolution + k];
    }
    double spacing() const { return 2.0 / static_cast<double>(resolution - 1); }
    double coord(std::size_t i) const { return -1.0 + spacing() * static_cast<double>(i); }
    Vec3 point(std::size_t i, std::size_t j, std::size_t k) const { return {coord(i), coord(j), coord(k)}; }
};

inline SdfGrid sample_grid(const std::function<double(const Vec3&)>& field, std::size_t G) {
    if (G < 2) throw ShapeError("grid resolution must be at least 2");
    SdfGrid g{G, std::vector<float>(G * G * G)};
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j)
            for (std::size_t k = 0; k < G; ++k)
                g.values[(i * G + j) * G + k] = static_cast<float>(field(g.point(i, j, k)));
    return g;
}

inline SdfGrid sample_grid(const ShapeSpec& s, std::size_t G) {
    return sample_grid([&](const Vec3& p) { return s.sdf(p); }, G);
}

} // namespace lam3d
