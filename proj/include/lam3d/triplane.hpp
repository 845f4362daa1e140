#pragma once

// Tri-plane feature fields. Planes are stored as one [3, C, R, R] tensor in
// the fixed order XY, XZ, YZ. For a plane built on axes (a, b), element
// [c, i, j] sits at coordinate a along rows (i) and b along columns (j).

#include <array>
#include <cmath>
#include <string>

#include "lam3d/nn.hpp"
#include "lam3d/ops.hpp"

namespace lam3d {

enum class PlaneRole { initial, latent, reconstructed };

inline std::string role_name(PlaneRole r) {
    switch (r) {
    case PlaneRole::initial: return "initial";
    case PlaneRole::latent: return "latent";
    case PlaneRole::reconstructed: return "reconstructed";
    }
    return "?";
}

// (row axis, column axis) per plane.
inline constexpr std::array<std::array<std::size_t, 2>, 3> kPlaneAxes{{{0, 1}, {0, 2}, {1, 2}}};

struct TriPlane {
    Tensor planes;  // [3, C, R, R]
    PlaneRole role = PlaneRole::initial;

    std::size_t channels() const { return planes.dim(1); }
    std::size_t resolution() const { return planes.dim(2); }
};

inline void check_planes(const Tensor& planes) {
    if (planes.rank() != 4 || planes.dim(0) != 3 || planes.dim(2) != planes.dim(3)) {
        throw ShapeError("tri-plane tensor must be [3, C, R, R], got " + to_string(planes.shape()));
    }
}

inline std::size_t cell_index(float coord, std::size_t R) {
    const double g = std::floor((static_cast<double>(coord) + 1.0) / 2.0 * static_cast<double>(R));
    return static_cast<std::size_t>(std::clamp(g, 0.0, static_cast<double>(R - 1)));
}

// Scatter-mean of per-point embeddings into the three planes. Empty cells are
// zero. Differentiable with respect to the embeddings.
inline Tensor project_points(const Tensor& centers, const Tensor& embeddings, std::size_t R) {
    const std::size_t n = centers.dim(0), C = embeddings.dim(1);
    if (centers.rank() != 2 || centers.dim(1) != 3 || embeddings.rank() != 2 || embeddings.dim(0) != n) {
        throw ShapeError("project_points expects centers [n,3] and embeddings [n,C]");
    }
    const auto pc = centers.data();
    const auto pe = embeddings.data();
    // cells[p * n + i] = flat cell index of point i on plane p
    std::vector<std::size_t> cells(3 * n);
    std::vector<float> counts(3 * R * R, 0.0f);
    for (std::size_t p = 0; p < 3; ++p) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = cell_index(pc[3 * i + kPlaneAxes[p][0]], R);
            const std::size_t b = cell_index(pc[3 * i + kPlaneAxes[p][1]], R);
            cells[p * n + i] = a * R + b;
            counts[p * R * R + a * R + b] += 1.0f;
        }
    }
    std::vector<double> acc(3 * C * R * R, 0.0);
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < C; ++c) acc[(p * C + c) * R * R + cells[p * n + i]] += pe[i * C + c];
    std::vector<float> out(acc.size());
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < R * R; ++k) {
                const float cnt = counts[p * R * R + k];
                const std::size_t o = (p * C + c) * R * R + k;
                out[o] = cnt > 0 ? static_cast<float>(acc[o] / cnt) : 0.0f;
            }
    return detail::make_result({3, C, R, R}, std::move(out), "project_points", {&embeddings},
                               [n, C, R, cells = std::move(cells), counts = std::move(counts)](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < 3; ++p)
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = cells[p * n + i];
                const float inv = 1.0f / counts[p * R * R + k];
                for (std::size_t c = 0; c < C; ++c) g[i * C + c] += self.grad[(p * C + c) * R * R + k] * inv;
            }
    });
}

namespace detail {

struct BilinearTap {
    std::size_t i0, i1, j0, j1;
    float fu, fv;        // fractional offsets
    float du, dv;        // d(grid coord)/d(coord), 0 where clamped
};

inline BilinearTap bilinear_tap(float u, float v, std::size_t R) {
    const float scale = 0.5f * static_cast<float>(R - 1);
    auto axis = [&](float x, std::size_t& k0, std::size_t& k1, float& f, float& d) {
        float g = (x + 1.0f) * scale;
        d = scale;
        if (g <= 0.0f) {
            g = 0.0f;
            d = x < -1.0f ? 0.0f : d;
        } else if (g >= static_cast<float>(R - 1)) {
            g = static_cast<float>(R - 1);
            d = x > 1.0f ? 0.0f : d;
        }
        const std::size_t base = std::min(static_cast<std::size_t>(g), R - 2);
        k0 = base;
        k1 = base + 1;
        f = g - static_cast<float>(base);
    };
    BilinearTap t{};
    axis(u, t.i0, t.i1, t.fu, t.du);
    axis(v, t.j0, t.j1, t.fv, t.dv);
    return t;
}

} // namespace detail

// Sum over the three planes of the bilinearly interpolated features at each
// query point. planes [3,C,R,R], points [Q,3] -> [Q,C]. Differentiable with
// respect to both the planes and the points.
inline Tensor triplane_features(const Tensor& planes, const Tensor& points) {
    check_planes(planes);
    if (points.rank() != 2 || points.dim(1) != 3) throw ShapeError("query points must be [Q,3]");
    const std::size_t C = planes.dim(1), R = planes.dim(2), Q = points.dim(0);
    if (R < 2) throw ShapeError("tri-plane resolution must be at least 2");
    const float* P = planes.data().data();
    const float* X = points.data().data();
    std::vector<detail::BilinearTap> taps(3 * Q);
    std::vector<float> out(Q * C, 0.0f);
    for (std::size_t q = 0; q < Q; ++q) {
        for (std::size_t p = 0; p < 3; ++p) {
            const auto t = detail::bilinear_tap(X[3 * q + kPlaneAxes[p][0]], X[3 * q + kPlaneAxes[p][1]], R);
            taps[q * 3 + p] = t;
            const float w00 = (1 - t.fu) * (1 - t.fv), w01 = (1 - t.fu) * t.fv, w10 = t.fu * (1 - t.fv), w11 = t.fu * t.fv;
            for (std::size_t c = 0; c < C; ++c) {
                const float* pl = P + (p * C + c) * R * R;
                out[q * C + c] += w00 * pl[t.i0 * R + t.j0] + w01 * pl[t.i0 * R + t.j1] + w10 * pl[t.i1 * R + t.j0] +
                                  w11 * pl[t.i1 * R + t.j1];
            }
        }
    }
    return detail::make_result({Q, C}, std::move(out), "triplane_features", {&planes, &points},
                               [C, R, Q, taps = std::move(taps)](detail::Node& self) {
        auto& np = *self.inputs[0];
        auto& nx = *self.inputs[1];
        float* gp = np.requires_grad ? np.grad_buffer().data() : nullptr;
        float* gx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
        const float* P = np.data.data();
        for (std::size_t q = 0; q < Q; ++q) {
            const float* g = self.grad.data() + q * C;
            for (std::size_t p = 0; p < 3; ++p) {
                const auto& t = taps[q * 3 + p];
                const float w00 = (1 - t.fu) * (1 - t.fv), w01 = (1 - t.fu) * t.fv, w10 = t.fu * (1 - t.fv),
                            w11 = t.fu * t.fv;
                double su = 0.0, sv = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t base = (p * C + c) * R * R;
                    const float v00 = P[base + t.i0 * R + t.j0], v01 = P[base + t.i0 * R + t.j1];
                    const float v10 = P[base + t.i1 * R + t.j0], v11 = P[base + t.i1 * R + t.j1];
                    if (gp) {
                        gp[base + t.i0 * R + t.j0] += w00 * g[c];
                        gp[base + t.i0 * R + t.j1] += w01 * g[c];
                        gp[base + t.i1 * R + t.j0] += w10 * g[c];
                        gp[base + t.i1 * R + t.j1] += w11 * g[c];
                    }
                    if (gx) {
                        su += g[c] * ((1 - t.fv) * (v10 - v00) + t.fv * (v11 - v01));
                        sv += g[c] * ((1 - t.fu) * (v01 - v00) + t.fu * (v11 - v10));
                    }
                }
                if (gx) {
                    gx[3 * q + kPlaneAxes[p][0]] += static_cast<float>(su) * t.du;
                    gx[3 * q + kPlaneAxes[p][1]] += static_cast<float>(sv) * t.dv;
                }
            }
        }
    });
}

// Single-plane lookup: plane [C,R,R], uv [Q,2] -> [Q,C].
inline Tensor bilinear_lookup(const Tensor& plane, const Tensor& uv) {
    if (plane.rank() != 3 || uv.rank() != 2 || uv.dim(1) != 2) throw ShapeError("bilinear_lookup expects [C,R,R] and [Q,2]");
    // Embed as the XY plane of a tri-plane whose other planes are zero; the
    // z coordinate is then irrelevant.
    const std::size_t C = plane.dim(0), R = plane.dim(1), Q = uv.dim(0);
    const auto zeros = Tensor::zeros({2, C, R, R});
    const auto planes = concat({reshape(plane, {1, C, R, R}), zeros}, 0);
    const auto pts = concat({uv, Tensor::zeros({Q, 1})}, 1);
    return triplane_features(planes, pts);
}

// Phi(p) = MLP(F_xy + F_xz + F_yz): 3 hidden layers of width 64, GELU,
// linear output.
class SdfMlp {
public:
    SdfMlp() = default;
    SdfMlp(std::size_t channels, Rng& rng, std::size_t hidden = 64) : net({channels, hidden, hidden, hidden, 1}, rng) {}

    Tensor operator()(const Tensor& features) const { return net(features); }
    void collect(ParamList& out, const std::string& prefix) const { net.collect(out, prefix); }
    std::size_t input_width() const { return net.layers.front().in_features(); }

    Mlp net;
};

// points [Q,3] -> [Q]
inline Tensor query_sdf(const Tensor& planes, const SdfMlp& mlp, const Tensor& points) {
    const auto y = mlp(triplane_features(planes, points));
    return reshape(y, {points.dim(0)});
}

// Central differences with 6 field queries per point, offsets clamped to the
// box; the divisor is the actual (clamped) spacing. points [Q,3] -> [Q,3].
// Stays on the tape, so losses on it backpropagate into planes and MLP.
inline Tensor sdf_spatial_gradient(const Tensor& planes, const SdfMlp& mlp, const Tensor& points, float delta) {
    if (!(delta > 0.0f)) throw NumericalError("finite-difference spacing must be positive");
    const std::size_t Q = points.dim(0);
    const auto src = points.data();
    std::vector<float> probe(6 * Q * 3);
    std::vector<float> inv_span(3 * Q);
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t q = 0; q < Q; ++q) {
            float* plus = probe.data() + ((2 * a) * Q + q) * 3;
            float* minus = probe.data() + ((2 * a + 1) * Q + q) * 3;
            for (std::size_t k = 0; k < 3; ++k) plus[k] = minus[k] = src[3 * q + k];
            plus[a] = std::min(plus[a] + delta, 1.0f);
            minus[a] = std::max(minus[a] - delta, -1.0f);
            inv_span[q * 3 + a] = 1.0f / (plus[a] - minus[a]);
        }
    }
    const auto phi = query_sdf(planes, mlp, Tensor({6 * Q, 3}, std::move(probe)));
    std::vector<Tensor> cols;
    for (std::size_t a = 0; a < 3; ++a) {
        cols.push_back(reshape(slice(phi, 0, 2 * a * Q, Q) - slice(phi, 0, (2 * a + 1) * Q, Q), {Q, 1}));
    }
    return concat(cols, 1) * Tensor({Q, 3}, std::move(inv_span));
}

} // namespace lam3d
