#pragma once

// Built-in checks: gradient integrity of every differentiable op and of the
// full stage-1 loss, diffusion identities, metric oracles and the
// marching-cubes sphere test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lam3d/attention.hpp"
#include "lam3d/compressor.hpp"
#include "lam3d/diffusion.hpp"
#include "lam3d/gradcheck.hpp"
#include "lam3d/marching_cubes.hpp"
#include "lam3d/metrics.hpp"
#include "lam3d/triplane.hpp"

namespace lam3d {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline std::string format_check(const CheckResult& r) {
    return std::string(r.pass ? "PASS " : "FAIL ") + r.name + (r.detail.empty() ? "" : "  " + r.detail);
}

namespace detail {

inline Tensor uniform_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Scalarises y through fixed random weights so every output element matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return sum(y * Tensor::uniform(y.shape(), rng, -1.0f, 1.0f));
}

inline std::string fmt_sci(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

} // namespace detail

struct OpCheck {
    std::string name;
    TensorFunction f;
    std::vector<Tensor> inputs;
};

inline std::vector<OpCheck> op_checks() {
    using detail::uniform_tensor;
    using detail::weighted_sum;
    std::vector<OpCheck> c;
    auto un = [&](const std::string& name, std::function<Tensor(const Tensor&)> op, Tensor x) {
        c.push_back({name, [op](const std::vector<Tensor>& in) { return weighted_sum(op(in[0]), 7); }, {std::move(x)}});
    };
    auto bin = [&](const std::string& name, std::function<Tensor(const Tensor&, const Tensor&)> op, Tensor a, Tensor b) {
        c.push_back({name, [op](const std::vector<Tensor>& in) { return weighted_sum(op(in[0], in[1]), 8); },
                     {std::move(a), std::move(b)}});
    };
    bin("add", [](const Tensor& a, const Tensor& b) { return a + b; }, uniform_tensor({2, 3, 4}, 1), uniform_tensor({3, 4}, 2));
    bin("sub", [](const Tensor& a, const Tensor& b) { return a - b; }, uniform_tensor({2, 3, 4}, 3), uniform_tensor({2, 1, 4}, 4));
    bin("mul", [](const Tensor& a, const Tensor& b) { return a * b; }, uniform_tensor({2, 3, 4}, 5), uniform_tensor({4}, 6));
    bin("div", [](const Tensor& a, const Tensor& b) { return a / b; }, uniform_tensor({3, 4}, 7), uniform_tensor({3, 4}, 8, 0.5f, 2.0f));
    un("exp", [](const Tensor& x) { return exp(x); }, uniform_tensor({10}, 9));
    un("log", [](const Tensor& x) { return log(x); }, uniform_tensor({10}, 10, 0.5f, 2.0f));
    un("sqrt", [](const Tensor& x) { return sqrt(x); }, uniform_tensor({10}, 11, 0.5f, 2.0f));
    un("gelu", [](const Tensor& x) { return gelu(x); }, uniform_tensor({12}, 12, -3.0f, 3.0f));
    un("elu", [](const Tensor& x) { return elu(x); }, uniform_tensor({12}, 13, -2.0f, 2.0f));
    un("sigmoid", [](const Tensor& x) { return sigmoid(x); }, uniform_tensor({12}, 14, -3.0f, 3.0f));
    un("square", [](const Tensor& x) { return square(x); }, uniform_tensor({12}, 15));
    un("softmax", [](const Tensor& x) { return softmax(x); }, uniform_tensor({3, 5}, 16, -2.0f, 2.0f));
    un("layer_norm", [](const Tensor& x) { return layer_norm(x); }, uniform_tensor({3, 6}, 17));
    un("sum_axis", [](const Tensor& x) { return sum_axis(x, 1); }, uniform_tensor({3, 4, 2}, 18));
    un("max_axis", [](const Tensor& x) { return max_axis(x, 1); }, uniform_tensor({3, 5, 2}, 19));
    un("permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); }, uniform_tensor({2, 3, 4}, 20));
    un("slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, uniform_tensor({2, 4, 3}, 21));
    un("upsample2x", [](const Tensor& x) { return upsample2x(x); }, uniform_tensor({1, 2, 3, 3}, 22));
    bin("matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, b); }, uniform_tensor({2, 3, 4}, 23),
        uniform_tensor({4, 5}, 24));
    bin("conv2d", [](const Tensor& x, const Tensor& w) { return conv2d(x, w, {.stride = 2, .pad = 1}); },
        uniform_tensor({2, 3, 5, 4}, 25), uniform_tensor({2, 3, 3, 3}, 26));
    c.push_back({"softmax_attention",
                 [](const std::vector<Tensor>& in) { return weighted_sum(softmax_attention(in[0], in[1], in[2], 2), 27); },
                 {uniform_tensor({1, 3, 4}, 28), uniform_tensor({1, 5, 4}, 29), uniform_tensor({1, 5, 4}, 30)}});
    c.push_back({"linear_attention",
                 [](const std::vector<Tensor>& in) { return weighted_sum(linear_attention(in[0], in[1], in[2], 2), 31); },
                 {uniform_tensor({1, 3, 4}, 32), uniform_tensor({1, 5, 4}, 33), uniform_tensor({1, 5, 4}, 34)}});
    c.push_back({"project_points",
                 [](const std::vector<Tensor>& in) {
                     const auto centers = uniform_tensor({6, 3}, 35, -0.9f, 0.9f);
                     return weighted_sum(project_points(centers, in[0], 4), 36);
                 },
                 {uniform_tensor({6, 2}, 37)}});
    c.push_back({"triplane_features",
                 [](const std::vector<Tensor>& in) { return weighted_sum(triplane_features(in[0], in[1]), 38); },
                 {uniform_tensor({3, 2, 4, 4}, 39), uniform_tensor({5, 3}, 40, -0.9f, 0.9f)}});
    return c;
}

inline constexpr double kOpGradTolerance = 1e-3;
inline constexpr double kLossGradTolerance = 1e-2;

// With `corrupt`, the backward pass gains an extra 0.5 per coordinate of the
// first input while the forward value stays bit-identical.
inline CheckResult run_op_check(const OpCheck& c, bool corrupt = false) {
    TensorFunction f = c.f;
    if (corrupt) {
        f = [g = c.f](const std::vector<Tensor>& in) { return g(in) + scale(sum(in[0] - in[0].detach()), 0.5f); };
    }
    const auto r = finite_diff_check(f, c.inputs);
    return {"grad:" + c.name, r.max_rel_error <= kOpGradTolerance,
            "rel_err=" + detail::fmt_sci(r.max_rel_error) + " tol=" + detail::fmt_sci(kOpGradTolerance)};
}

inline CompressorConfig tiny_compressor_config() {
    CompressorConfig c;
    c.points = 128;
    c.centers = 16;
    c.neighbors = 8;
    c.embed_dim = 16;
    c.center_depth = 1;
    c.center_heads = 2;
    c.resolution = 8;
    c.latent_channels = 2;
    c.latent_resolution = 2;
    c.plane_blocks = 1;
    c.plane_width = 16;
    c.plane_heads = 2;
    c.decoded_channels = 8;
    c.refiner_width = 8;
    c.sdf_hidden = 16;
    return c;
}

// Full stage-1 loss, including the finite-difference normal stencil, on the
// tiny configuration; 16 random parameter coordinates whose stencils stay on
// one side of every L1 kink.
inline GradCheckReport compressor_loss_grad_check(std::uint64_t seed, std::size_t coordinates = 16,
                                                  float step = 1.0f / 512.0f) {
    const auto cfg = tiny_compressor_config();
    CompressorModel model(cfg, seed);
    const auto shape = ShapeSpec::torus(0.45, 0.2);
    Rng data_rng(seed + 1);
    const auto cloud = sample_point_cloud(shape, cfg.points, data_rng);
    const auto input = prepare_point_input(cloud, cfg.centers, cfg.neighbors);
    const auto batch = sample_batch(shape, 32, 32, data_rng);
    auto loss = [&] {
        Rng noise(seed + 2);
        const auto lat = model.encode(model.initial_triplane(input), &noise);
        return model.losses(lat, model.decode(lat.sample), batch).total;
    };
    const auto params = model.parameters();
    Rng pick(seed + 3);
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    while (coords.size() < 8 * coordinates) {
        const std::size_t k = pick.below(params.size());
        coords.emplace_back(k, pick.below(params[k].tensor.size()));
    }
    return parameter_grad_check(loss, params, coords, {.step = step, .floor = 1.0, .subset = std::nullopt, .skip_kinks = true, .coordinates = coordinates});
}

inline CheckResult check_compressor_loss_gradient(std::uint64_t seed = 11) {
    const auto r = compressor_loss_grad_check(seed);
    return {"grad:compressor_loss", r.max_rel_error <= kLossGradTolerance,
            "rel_err=" + detail::fmt_sci(r.max_rel_error) + " tol=" + detail::fmt_sci(kLossGradTolerance)};
}

// beta_tilde_t (1 - abar_t) = beta_t (1 - abar_{t-1}) for every t.
inline CheckResult check_schedule_identity(const NoiseSchedule& s) {
    double worst = 0.0;
    for (std::size_t t = 1; t <= s.steps(); ++t) {
        const double lhs = s.posterior_variance(t) * (1.0 - s.alpha_bar(t));
        const double rhs = s.beta(t) * (1.0 - s.alpha_bar(t - 1));
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    return {"ddpm:posterior_variance_identity", worst <= 1e-7, "max_abs_err=" + detail::fmt_sci(worst)};
}

// Sample variance of z_t for z0 = 0 over 10^4 draws against 1 - abar_t.
inline CheckResult check_forward_variance(const NoiseSchedule& s, std::uint64_t seed) {
    const std::size_t n = 10000;
    double worst_sigmas = 0.0;
    for (std::size_t t : {std::size_t{1}, s.steps() / 10, s.steps() / 2, s.steps()}) {
        if (t < 1) continue;
        Rng rng(seed + t);
        const auto z = forward_sample(Tensor::zeros({4, n / 4}), t, s, rng).zt;
        double m = 0, m2 = 0;
        for (float v : z.data()) m += v;
        m /= static_cast<double>(n);
        for (float v : z.data()) m2 += (v - m) * (v - m);
        const double var = m2 / static_cast<double>(n - 1);
        const double expected = 1.0 - s.alpha_bar(t);
        const double sigma = expected * std::sqrt(2.0 / static_cast<double>(n - 1));
        worst_sigmas = std::max(worst_sigmas, std::abs(var - expected) / sigma);
    }
    return {"ddpm:forward_variance", worst_sigmas <= 3.0, "worst_sigmas=" + detail::fmt_sci(worst_sigmas)};
}

inline CheckResult check_posterior_recovery(const NoiseSchedule& s, std::uint64_t seed) {
    Rng rng(seed);
    const auto z0 = Tensor::randn({3, 2, 4, 4}, rng);
    const auto z1 = forward_sample(z0, 1, s, rng).zt;
    const auto back = posterior_step(z1, z0, 1, s, rng);
    std::size_t mismatched = 0;
    for (std::size_t i = 0; i < z0.size(); ++i) mismatched += back.at(i) != z0.at(i);
    return {"ddpm:posterior_recovers_z0_at_t1", mismatched == 0, "mismatched=" + std::to_string(mismatched)};
}

namespace detail {

inline std::vector<Vec3> random_points(std::size_t n, Rng& rng) {
    std::vector<Vec3> p(n);
    for (auto& v : p) v = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    return p;
}

// Exhaustive oracles written independently of the library versions.
inline double chamfer_oracle(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    auto one_way = [](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
        double total = 0.0;
        for (const auto& p : x) {
            std::vector<double> d;
            for (const auto& q : y) d.push_back(dot(p - q, p - q));
            total += *std::min_element(d.begin(), d.end());
        }
        return total / static_cast<double>(x.size());
    };
    return one_way(a, b) + one_way(b, a);
}

inline double f_score_oracle(const std::vector<Vec3>& a, const std::vector<Vec3>& b, double tau) {
    auto covered = [tau](const std::vector<Vec3>& x, const std::vector<Vec3>& y) {
        double hit = 0;
        for (const auto& p : x)
            hit += std::any_of(y.begin(), y.end(), [&](const Vec3& q) { return norm(p - q) <= tau; }) ? 1.0 : 0.0;
        return hit / static_cast<double>(x.size());
    };
    const double p = covered(a, b), r = covered(b, a);
    return p + r == 0 ? 0.0 : 100.0 * 2.0 * p * r / (p + r);
}

} // namespace detail

inline CheckResult check_metric_oracles(std::size_t trials, std::uint64_t seed) {
    Rng rng(seed);
    double cd_err = 0, f_err = 0, iou_err = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        const auto a = detail::random_points(10, rng), b = detail::random_points(12, rng);
        cd_err = std::max(cd_err, std::abs(chamfer(a, b) - detail::chamfer_oracle(a, b)));
        const double tau = rng.uniform(0.2, 0.8);
        f_err = std::max(f_err, std::abs(f_score(a, b, tau) - detail::f_score_oracle(a, b, tau)));
        const std::size_t G = 2 + rng.below(7);
        SdfGrid ga{G, std::vector<float>(G * G * G)}, gb = ga;
        std::set<std::size_t> ia, ib;
        for (std::size_t i = 0; i < G * G * G; ++i) {
            ga.values[i] = static_cast<float>(rng.uniform(-1, 1));
            gb.values[i] = static_cast<float>(rng.uniform(-1, 1));
            if (ga.values[i] < 0) ia.insert(i);
            if (gb.values[i] < 0) ib.insert(i);
        }
        std::vector<std::size_t> inter, uni;
        std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(inter));
        std::set_union(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(uni));
        const double oracle = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
        iou_err = std::max(iou_err, std::abs(volume_iou(ga, gb) - oracle));
    }
    const bool pass = cd_err <= 1e-9 && f_err <= 0.01 && iou_err <= 0.01;
    return {"metrics:brute_force_oracles", pass,
            "trials=" + std::to_string(trials) + " chamfer_err=" + detail::fmt_sci(cd_err) +
                " fscore_err=" + detail::fmt_sci(f_err) + " iou_err=" + detail::fmt_sci(iou_err)};
}

struct SphereMeshReport {
    bool watertight = false;
    double max_radius_error = 0;
    double iou = 0;
    double f_score = 0;
};

// Sphere r = 0.5 meshed at 64^3, scored against the analytic sphere: IoU on
// the 128^3 lattice, F-score against exact surface samples.
inline SphereMeshReport sphere_mesh_report(std::uint64_t seed) {
    const double radius = 0.5;
    const auto sphere = ShapeSpec::sphere(radius);
    const auto mesh = marching_cubes(sample_grid(sphere, 64));
    SphereMeshReport r;
    r.watertight = !mesh.empty() && is_watertight(mesh);
    for (const auto& v : mesh.vertices) r.max_radius_error = std::max(r.max_radius_error, std::abs(norm(v) - radius));
    r.iou = volume_iou(voxelize_mesh(mesh, 128), sample_grid(sphere, 128));
    Rng rng(seed);
    const auto pred = sample_mesh_surface(mesh, 2048, rng);
    std::vector<Vec3> truth(2048);
    for (auto& p : truth) p = normalized(Vec3{rng.normal(), rng.normal(), rng.normal()}) * radius;
    r.f_score = f_score(pred, truth, 0.05);
    return r;
}

inline CheckResult check_marching_cubes_sphere(std::uint64_t seed) {
    const auto r = sphere_mesh_report(seed);
    const double cell_diagonal = std::sqrt(3.0) * 2.0 / 63.0;
    const bool pass = r.watertight && r.max_radius_error <= cell_diagonal && r.iou >= 0.98 && r.f_score >= 99.0;
    std::ostringstream os;
    os << "watertight=" << r.watertight << " max_radius_err=" << detail::fmt_sci(r.max_radius_error)
       << " iou=" << r.iou << " f=" << r.f_score;
    return {"mc:sphere64", pass, os.str()};
}

// Every check; `corrupt_op` injects a gradient bug into the named op check.
inline std::vector<CheckResult> run_selfcheck(const std::string& corrupt_op = "",
                                              const std::function<void(const CheckResult&)>& on_result = {}) {
    std::vector<CheckResult> out;
    auto add = [&](CheckResult r) {
        if (on_result) on_result(r);
        out.push_back(std::move(r));
    };
    for (const auto& c : op_checks()) add(run_op_check(c, c.name == corrupt_op));
    add(check_compressor_loss_gradient());
    const auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
    add(check_schedule_identity(sched));
    add(check_forward_variance(sched, 5));
    add(check_posterior_recovery(sched, 6));
    add(check_metric_oracles(100, 7));
    add(check_marching_cubes_sphere(8));
    return out;
}

} // namespace lam3d
