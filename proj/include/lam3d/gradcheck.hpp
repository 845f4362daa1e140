#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <vector>

#include "lam3d/nn.hpp"
#include "lam3d/tensor.hpp"

namespace lam3d {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
    std::size_t skipped = 0;  // stencils that straddled a kink
};

struct GradCheckOptions {
    float step = 1e-3f;
    // Per-coordinate error is |a - n| / max(|a|, |n|, floor * G) where G is
    // the largest analytic magnitude among the probed coordinates
    // (parameter_grad_check: over the whole gradient). With the
    // default of 1 this is the normwise (max-norm) relative error; float32
    // rounding of f leaves an absolute noise floor under every difference
    // quotient, so purely componentwise ratios are meaningless near zero.
    double floor = 1.0;
    // If set, probe only these (input, index) pairs.
    std::optional<std::vector<std::pair<std::size_t, std::size_t>>> subset;
    // parameter_grad_check only: drop coordinates whose +-step evaluations
    // take a different abs/clamp/elu/max branch than the base point (the central
    // difference then averages two one-sided slopes), and stop after
    // `coordinates` accepted ones when nonzero.
    bool skip_kinks = false;
    std::size_t coordinates = 0;
};

using TensorFunction = std::function<Tensor(const std::vector<Tensor>&)>;

namespace detail {

inline GradCheckReport grad_report(const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                                   const std::vector<std::vector<float>>& analytic, const std::vector<double>& numeric,
                                   double floor, bool whole_gradient_scale = false) {
    double scale = 0.0;
    if (whole_gradient_scale) {
        for (const auto& g : analytic)
            for (float v : g) scale = std::max(scale, std::fabs(static_cast<double>(v)));
    } else {
        for (const auto& [k, i] : coords) scale = std::max(scale, std::fabs(static_cast<double>(analytic[k][i])));
    }
    if (scale == 0.0) scale = 1.0;
    GradCheckReport report;
    report.coordinates = coords.size();
    for (std::size_t c = 0; c < coords.size(); ++c) {
        const auto [k, i] = coords[c];
        const double a = analytic[k][i];
        const double n = numeric[c];
        const double denom = std::max({std::fabs(a), std::fabs(n), floor * scale});
        const double err = std::fabs(a - n) / denom;
        if (c == 0 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_input = k;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    return report;
}

} // namespace detail

// Compares tape gradients of a scalar f against central differences
// (f(x + d e_i) - f(x - d e_i)) / (x_i+d - (x_i-d)), per coordinate.
// The denominator uses the float-rounded perturbation actually applied.
inline GradCheckReport finite_diff_check(const TensorFunction& f, std::vector<Tensor> inputs,
                                         const GradCheckOptions& opt = {}) {
    if (!(opt.step > 0.0f)) throw NumericalError("finite_diff_check step must be positive");
    for (auto& x : inputs) {
        x = x.detach();
        x.set_requires_grad(true);
    }

    const Tensor y0 = f(inputs);
    if (y0.size() != 1) throw ShapeError("finite_diff_check needs a scalar-valued function");
    {
        NoGradGuard ng;
        const Tensor y1 = f(inputs);
        const float a = y0.item(), b = y1.item();
        if (std::memcmp(&a, &b, sizeof(float)) != 0) {
            throw NumericalError("finite_diff_check: function is not deterministic");
        }
    }
    y0.backward();

    std::vector<std::vector<float>> analytic;
    for (const auto& x : inputs) {
        auto g = x.grad();
        analytic.emplace_back(g ? std::vector<float>(g->begin(), g->end()) : std::vector<float>(x.size(), 0.0f));
    }

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    if (opt.subset) {
        coords = *opt.subset;
    } else {
        for (std::size_t k = 0; k < inputs.size(); ++k)
            for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.emplace_back(k, i);
    }

    std::vector<double> numeric;
    numeric.reserve(coords.size());
    {
        NoGradGuard ng;
        for (const auto& [k, i] : coords) {
            const float x = inputs[k].at(i);
            const float xp = x + opt.step;
            const float xm = x - opt.step;
            auto probe = inputs;
            probe[k] = inputs[k].with_value(i, xp);
            const double fp = f(probe).item();
            probe[k] = inputs[k].with_value(i, xm);
            const double fm = f(probe).item();
            numeric.push_back((fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm)));
        }
    }
    return detail::grad_report(coords, analytic, numeric, opt.floor);
}

inline GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                         const GradCheckOptions& opt = {}) {
    return finite_diff_check([&](const std::vector<Tensor>& in) { return f(in[0]); }, std::vector<Tensor>{x}, opt);
}

// The same check for parameters that `loss` reads in place (model weights).
// Coordinates index into `params`.
inline GradCheckReport parameter_grad_check(const std::function<Tensor()>& loss, const ParamList& params,
                                            const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                                            const GradCheckOptions& opt = {}) {
    ParamList list = params;
    list.zero_grad();
    std::vector<std::int8_t> base_pattern;
    Tensor y0;
    {
        KinkProbe probe;
        y0 = loss();
        base_pattern = probe.pattern();
    }
    if (y0.size() != 1) throw ShapeError("parameter_grad_check needs a scalar loss");
    {
        NoGradGuard ng;
        const float a = y0.item(), b = loss().item();
        if (std::memcmp(&a, &b, sizeof(float)) != 0) throw NumericalError("parameter_grad_check: loss is not deterministic");
    }
    y0.backward();
    std::vector<std::vector<float>> analytic;
    for (std::size_t k = 0; k < list.size(); ++k) {
        auto g = list[k].tensor.grad();
        analytic.emplace_back(g ? std::vector<float>(g->begin(), g->end()) : std::vector<float>(list[k].tensor.size(), 0.0f));
    }
    list.zero_grad();
    std::vector<std::pair<std::size_t, std::size_t>> used;
    std::vector<double> numeric;
    std::size_t skipped = 0;
    {
        NoGradGuard ng;
        auto eval = [&](bool& same_branch) {
            KinkProbe probe;
            const double v = loss().item();
            same_branch = same_branch && probe.pattern() == base_pattern;
            return v;
        };
        for (const auto& [k, i] : coords) {
            if (opt.coordinates && used.size() == opt.coordinates) break;
            Tensor p = list[k].tensor;
            auto data = p.mutable_data();
            const float x = data[i], xp = x + opt.step, xm = x - opt.step;
            bool smooth = true;
            data[i] = xp;
            const double fp = eval(smooth);
            data[i] = xm;
            const double fm = eval(smooth);
            data[i] = x;
            if (opt.skip_kinks && !smooth) {
                ++skipped;
                continue;
            }
            used.emplace_back(k, i);
            numeric.push_back((fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm)));
        }
    }
    if (used.empty()) throw NumericalError("parameter_grad_check: every probed coordinate straddled a kink");
    // G is taken over the whole gradient, not only the probed subset, so the
    // error is the same normwise quantity finite_diff_check reports when it
    // probes every coordinate.
    auto report = detail::grad_report(used, analytic, numeric, opt.floor, true);
    report.skipped = skipped;
    return report;
}

} // namespace lam3d
