#include <gtest/gtest.h>

#include <cmath>

#include "lam3d/marching_cubes.hpp"
#include "lam3d/selfcheck.hpp"

using namespace lam3d;

namespace {

SdfGrid constant_grid(std::size_t G, float v) { return {G, std::vector<float>(G * G * G, v)}; }

} // namespace

TEST(MarchingCubes, UniformGridsAreEmpty) {
    EXPECT_TRUE(marching_cubes(constant_grid(8, 1.0f)).empty());
    EXPECT_TRUE(marching_cubes(constant_grid(8, -1.0f)).empty());
}

TEST(MarchingCubes, RejectsBadGrids) {
    EXPECT_THROW(marching_cubes(constant_grid(1, 1.0f)), ShapeError);
    EXPECT_THROW(marching_cubes(SdfGrid{4, std::vector<float>(10, 1.0f)}), ShapeError);
}

// One interior lattice point at the centre of a 3^3 grid: each of the eight
// cells cuts off one corner, giving a closed octahedron.
TEST(MarchingCubes, SingleInteriorPointGivesClosedOctahedron) {
    auto g = constant_grid(3, 1.0f);
    g.values[(1 * 3 + 1) * 3 + 1] = -1.0f;
    const auto m = marching_cubes(g);
    EXPECT_EQ(m.triangles.size(), 8u);
    EXPECT_EQ(m.vertices.size(), 6u);
    EXPECT_TRUE(is_watertight(m));
    EXPECT_GT(signed_volume(m), 0.0);
    // Crossings at the midpoint of each spoke, half a cell from the centre.
    for (const auto& v : m.vertices) EXPECT_NEAR(norm(v), 0.5, 1e-12);
}

TEST(MarchingCubes, SingleCornerTriangle) {
    auto g = constant_grid(2, 1.0f);
    g.values[0] = -1.0f;
    const auto m = marching_cubes(g);
    ASSERT_EQ(m.triangles.size(), 1u);
    // Normal points away from the inside corner at (-1,-1,-1).
    const auto& t = m.triangles[0];
    const Vec3 n = cross(m.vertices[t[1]] - m.vertices[t[0]], m.vertices[t[2]] - m.vertices[t[0]]);
    EXPECT_GT(dot(n, Vec3{1, 1, 1}), 0.0);
}

TEST(MarchingCubes, SphereAt64) {
    const auto r = sphere_mesh_report(3);
    EXPECT_TRUE(r.watertight);
    EXPECT_LE(r.max_radius_error, 0.054);
    EXPECT_GE(r.iou, 0.98);
    EXPECT_GE(r.f_score, 99.0);
}

TEST(MarchingCubes, VolumeApproachesAnalytic) {
    const auto sphere = ShapeSpec::sphere(0.5);
    const double exact = analytic_volume(sphere);
    const double coarse = std::abs(signed_volume(marching_cubes(sample_grid(sphere, 32))) - exact);
    const double fine = std::abs(signed_volume(marching_cubes(sample_grid(sphere, 96))) - exact);
    EXPECT_LT(fine, coarse);
    EXPECT_LT(fine / exact, 5e-3);
}

TEST(MarchingCubes, CorpusMeshesAreWatertight) {
    for (const auto& ns : shape_corpus()) {
        const auto m = marching_cubes(sample_grid(ns.spec, 48));
        ASSERT_FALSE(m.empty()) << ns.name;
        EXPECT_TRUE(is_watertight(m)) << ns.name;
        EXPECT_GT(signed_volume(m), 0.0) << ns.name;
        for (std::size_t f = 0; f < m.triangles.size(); ++f) EXPECT_GE(triangle_area(m, f), 1e-12) << ns.name;
    }
}

TEST(MarchingCubes, IsoLevelShiftsSurface) {
    const auto g = sample_grid(ShapeSpec::sphere(0.5), 64);
    const auto m = marching_cubes(g, 0.1f);
    double mean_r = 0;
    for (const auto& v : m.vertices) mean_r += norm(v);
    EXPECT_NEAR(mean_r / static_cast<double>(m.vertices.size()), 0.6, 0.01);
}
