#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "lam3d/gradcheck.hpp"
#include "lam3d/triplane.hpp"

using namespace lam3d;

namespace {

// Smooth, band-limited planes so finite differences behave.
Tensor smooth_planes(std::size_t C, std::size_t R, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(3 * C * R * R);
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t c = 0; c < C; ++c) {
            const double a = rng.uniform(0.5, 2.0), b = rng.uniform(0.5, 2.0), ph = rng.uniform(0, 6.28);
            for (std::size_t i = 0; i < R; ++i)
                for (std::size_t j = 0; j < R; ++j) {
                    const double u = -1.0 + 2.0 * i / (R - 1), w = -1.0 + 2.0 * j / (R - 1);
                    v[((p * C + c) * R + i) * R + j] = static_cast<float>(std::sin(a * u + b * w + ph));
                }
        }
    return Tensor({3, C, R, R}, std::move(v));
}

SdfMlp single_linear(std::size_t C, std::vector<float> w) {
    Rng rng(0);
    SdfMlp m;
    m.net.layers.emplace_back(C, 1, rng);
    m.net.layers[0].weight = make_param(Tensor({C, 1}, std::move(w)));
    m.net.layers[0].bias = make_param(Tensor::zeros({1}));
    return m;
}

} // namespace

TEST(ProjectPoints, CornerLandsInFirstCell) {
    const auto planes = project_points(Tensor({1, 3}, {-1, -1, -1}), Tensor({1, 2}, {3, 4}), 4);
    EXPECT_EQ(planes.shape(), (Shape{3, 2, 4, 4}));
    for (std::size_t p = 0; p < 3; ++p) {
        EXPECT_EQ(planes.at((p * 2 + 0) * 16), 3.0f);
        EXPECT_EQ(planes.at((p * 2 + 1) * 16), 4.0f);
    }
    // +1 clamps into the last cell.
    const auto top = project_points(Tensor({1, 3}, {1, 1, 1}), Tensor({1, 1}, {5}), 4);
    EXPECT_EQ(top.at(15), 5.0f);
}

TEST(ProjectPoints, SameCellAverages) {
    const auto planes = project_points(Tensor({2, 3}, {0.1f, 0.1f, 0.1f, 0.12f, 0.13f, 0.11f}), Tensor({2, 1}, {1, 4}), 4);
    EXPECT_FLOAT_EQ(planes.at(2 * 4 + 2), 2.5f);
    std::size_t nonzero = 0;
    for (float v : planes.data()) nonzero += v != 0.0f;
    EXPECT_EQ(nonzero, 3u);
}

TEST(ProjectPoints, MatchesDictionaryOracleAndConservesMass) {
    Rng rng(4);
    const std::size_t n = 20, C = 3, R = 5;
    const auto centers = Tensor::uniform({n, 3}, rng, -1, 1);
    const auto emb = Tensor::uniform({n, C}, rng, -1, 1);
    const auto planes = project_points(centers, emb, R);
    for (std::size_t p = 0; p < 3; ++p) {
        std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
        for (std::size_t i = 0; i < n; ++i) {
            const auto cell = [&](float x) { return std::min<int>(R - 1, std::max(0, int(std::floor((x + 1) / 2 * R)))); };
            cells[{cell(centers.at(3 * i + kPlaneAxes[p][0])), cell(centers.at(3 * i + kPlaneAxes[p][1]))}].push_back(i);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double mass = 0, total = 0;
            for (std::size_t a = 0; a < R; ++a)
                for (std::size_t b = 0; b < R; ++b) {
                    const float got = planes.at(((p * C + c) * R + a) * R + b);
                    auto it = cells.find({int(a), int(b)});
                    double want = 0;
                    if (it != cells.end()) {
                        for (auto i : it->second) want += emb.at(i * C + c);
                        mass += want;
                        want /= it->second.size();
                    }
                    EXPECT_NEAR(got, want, 1e-6);
                }
            for (std::size_t i = 0; i < n; ++i) total += emb.at(i * C + c);
            EXPECT_NEAR(mass, total, 1e-4 * std::max(1.0, std::fabs(total)));
        }
    }
}

TEST(ProjectPoints, GradientCheck) {
    Rng rng(6);
    const auto centers = Tensor::uniform({12, 3}, rng, -1, 1);
    auto w = Tensor::uniform({3, 2, 4, 4}, rng, -1, 1);
    const auto r = finite_diff_check([&](const Tensor& e) { return sum(project_points(centers, e, 4) * w); },
                                     Tensor::uniform({12, 2}, rng, -1, 1));
    EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(Bilinear, CellCentersConstantsAndMidpoint) {
    const std::size_t R = 4;
    Rng rng(8);
    const auto plane = Tensor::uniform({2, R, R}, rng, -1, 1);
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < R; ++j) {
            const float u = -1.0f + 2.0f * i / (R - 1), v = -1.0f + 2.0f * j / (R - 1);
            const auto f = bilinear_lookup(plane, Tensor({1, 2}, {u, v}));
            for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(f.at(c), plane.at((c * R + i) * R + j), 1e-6);
        }
    const auto flat = bilinear_lookup(Tensor::full({1, R, R}, 0.7f), Tensor::uniform({30, 2}, rng, -1.2f, 1.2f));
    for (float v : flat.data()) EXPECT_NEAR(v, 0.7f, 1e-6);
    const auto quad = bilinear_lookup(Tensor({1, 2, 2}, {1, 2, 3, 4}), Tensor({1, 2}, {0, 0}));
    EXPECT_NEAR(quad.item(), 2.5f, 1e-7);
}

TEST(Bilinear, LinearInPlane) {
    Rng rng(9);
    const auto p1 = Tensor::uniform({3, 5, 5}, rng, -1, 1);
    const auto p2 = Tensor::uniform({3, 5, 5}, rng, -1, 1);
    const auto uv = Tensor::uniform({25, 2}, rng, -1, 1);
    const auto lhs = bilinear_lookup(p1 * 2.0f + p2 * -0.5f, uv);
    const auto rhs = bilinear_lookup(p1, uv) * 2.0f + bilinear_lookup(p2, uv) * -0.5f;
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs.at(i), rhs.at(i), 1e-6);
}

TEST(Bilinear, GradientWrtPlaneAndCoordinates) {
    Rng rng(10);
    auto w = Tensor::uniform({7, 2}, rng, -1, 1);
    const auto r = finite_diff_check(
        [&](const std::vector<Tensor>& in) { return sum(bilinear_lookup(in[0], in[1]) * w); },
        {Tensor::uniform({2, 4, 4}, rng, -1, 1), Tensor::uniform({7, 2}, rng, -0.9f, 0.9f)});
    EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(QuerySdf, ZeroPlanesGiveConstantField) {
    Rng rng(11);
    SdfMlp mlp(4, rng);
    const auto out = query_sdf(Tensor::zeros({3, 4, 6, 6}), mlp, Tensor::uniform({10, 3}, rng, -1, 1));
    const auto at_zero = mlp(Tensor::zeros({1, 4})).item();
    for (float v : out.data()) EXPECT_EQ(v, at_zero);
}

TEST(QuerySdf, LinearHeadMatchesManualLookup) {
    Rng rng(12);
    const std::size_t C = 3, R = 6;
    const auto planes = Tensor::uniform({3, C, R, R}, rng, -1, 1);
    const std::vector<float> w{0.3f, -1.2f, 0.8f};
    const auto mlp = single_linear(C, w);
    const auto pts = Tensor::uniform({15, 3}, rng, -1, 1);
    const auto got = query_sdf(planes, mlp, pts);
    for (std::size_t q = 0; q < 15; ++q) {
        double want = 0;
        for (std::size_t p = 0; p < 3; ++p) {
            const auto plane = select(planes, 0, p);
            const float u = pts.at(3 * q + kPlaneAxes[p][0]), v = pts.at(3 * q + kPlaneAxes[p][1]);
            // Independent bilinear blend.
            const double gu = (u + 1) / 2 * (R - 1), gv = (v + 1) / 2 * (R - 1);
            const std::size_t i = std::min<std::size_t>(std::size_t(gu), R - 2), j = std::min<std::size_t>(std::size_t(gv), R - 2);
            const double fu = gu - i, fv = gv - j;
            for (std::size_t c = 0; c < C; ++c) {
                auto at = [&](std::size_t a, std::size_t b) { return double(plane.at((c * R + a) * R + b)); };
                const double f = (1 - fu) * (1 - fv) * at(i, j) + (1 - fu) * fv * at(i, j + 1) + fu * (1 - fv) * at(i + 1, j) +
                                 fu * fv * at(i + 1, j + 1);
                want += w[c] * f;
            }
        }
        EXPECT_NEAR(got.at(q), want, 1e-6);
    }
}

TEST(QuerySdf, PlaneSumIsOrderFree) {
    Rng rng(13);
    const std::size_t C = 2, R = 4;
    const auto planes = Tensor::uniform({3, C, R, R}, rng, -1, 1);
    const auto pts = Tensor::uniform({9, 3}, rng, -1, 1);
    const auto summed = triplane_features(planes, pts);
    std::vector<Tensor> each;
    for (std::size_t p = 0; p < 3; ++p) {
        const auto uv = concat({slice(pts, 1, kPlaneAxes[p][0], 1), slice(pts, 1, kPlaneAxes[p][1], 1)}, 1);
        each.push_back(bilinear_lookup(select(planes, 0, p), uv));
    }
    const auto a = each[2] + each[0] + each[1];
    const auto b = each[1] + each[2] + each[0];
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a.at(i), summed.at(i), 1e-6);
        EXPECT_NEAR(b.at(i), summed.at(i), 1e-6);
    }
}

TEST(QuerySdf, FullGradientCheck) {
    Rng rng(14);
    SdfMlp mlp(4, rng, 16);
    ParamList pl;
    mlp.collect(pl, "mlp");
    std::vector<Tensor> inputs{smooth_planes(4, 6, 15), Tensor::uniform({5, 3}, rng, -0.9f, 0.9f)};
    for (const auto& p : pl) inputs.push_back(p.tensor);
    auto f = [&](const std::vector<Tensor>& in) {
        SdfMlp m = mlp;
        for (std::size_t i = 0; i < m.net.layers.size(); ++i) {
            m.net.layers[i].weight = in[2 + 2 * i];
            m.net.layers[i].bias = in[3 + 2 * i];
        }
        return sum(query_sdf(in[0], m, in[1]));
    };
    const auto r = finite_diff_check(f, inputs);
    EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_input << ":" << r.worst_index;
}

TEST(SpatialGradient, ConstantFieldAndRamp) {
    Rng rng(16);
    SdfMlp mlp(2, rng);
    const auto pts = Tensor::uniform({8, 3}, rng, -0.9f, 0.9f);
    const auto g0 = sdf_spatial_gradient(Tensor::full({3, 2, 5, 5}, 0.3f), mlp, pts, 0.2f);
    for (float v : g0.data()) EXPECT_NEAR(v, 0.0f, 1e-6);

    // XY plane value = x (align-corners ramp along rows), other planes zero.
    const std::size_t R = 8;
    std::vector<float> ramp(3 * R * R, 0.0f);
    for (std::size_t i = 0; i < R; ++i)
        for (std::size_t j = 0; j < R; ++j) ramp[i * R + j] = -1.0f + 2.0f * i / (R - 1);
    const auto g = sdf_spatial_gradient(Tensor({3, 1, R, R}, std::move(ramp)), single_linear(1, {1.0f}), pts, 1.0f / R);
    for (std::size_t q = 0; q < 8; ++q) {
        EXPECT_NEAR(g.at(3 * q), 1.0f, 1e-3);
        EXPECT_NEAR(g.at(3 * q + 1), 0.0f, 1e-3);
        EXPECT_NEAR(g.at(3 * q + 2), 0.0f, 1e-3);
    }
}

TEST(SpatialGradient, AgreesWithTapeAndImprovesWithSmallerStep) {
    Rng rng(17);
    SdfMlp mlp(4, rng);
    const auto planes = smooth_planes(4, 16, 18);
    auto pts = Tensor::uniform({64, 3}, rng, -0.85f, 0.85f).set_requires_grad();
    sum(query_sdf(planes, mlp, pts)).backward();
    const auto tape = *pts.grad();
    auto err = [&](float delta) {
        const auto fd = sdf_spatial_gradient(planes, mlp, pts.detach(), delta);
        double e = 0, m = 0;
        for (std::size_t i = 0; i < fd.size(); ++i) {
            e += std::fabs(fd.at(i) - tape[i]);
            m += std::fabs(tape[i]);
        }
        return e / m;
    };
    const double fine = err(1e-3f), coarse = err(1e-1f);
    EXPECT_LE(fine, 1e-2);
    EXPECT_LE(fine, coarse);
}

TEST(SpatialGradient, StaysOnTape) {
    Rng rng(19);
    SdfMlp mlp(2, rng, 8);
    const auto pts = Tensor::uniform({4, 3}, rng, -0.8f, 0.8f);
    const auto r = finite_diff_check(
        [&](const Tensor& planes) { return sum(square(sdf_spatial_gradient(planes, mlp, pts, 0.25f))); },
        smooth_planes(2, 5, 20));
    EXPECT_LE(r.max_rel_error, 1e-3);
}
