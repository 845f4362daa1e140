#pragma once

// Linear-beta DDPM schedule over latent tensors, with a z0-parameterised
// posterior step.

#include <cmath>
#include <vector>

#include "lam3d/error.hpp"
#include "lam3d/rng.hpp"
#include "lam3d/tensor.hpp"

namespace lam3d {

class NoiseSchedule {
public:
    NoiseSchedule() = default;

    static NoiseSchedule linear(std::size_t T, double beta_start, double beta_end) {
        if (T == 0) throw ConfigError("diffusion steps must be positive");
        if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end < 1.0 && (T == 1 || beta_start < beta_end)))
            throw ConfigError("schedule needs 0 < beta_start < beta_end < 1");
        std::vector<double> betas(T);
        for (std::size_t i = 0; i < T; ++i) {
            const double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
            betas[i] = beta_start + f * (beta_end - beta_start);
        }
        return from_betas(std::move(betas));
    }

    // Non-decreasing betas in (0, 1); a constant schedule is allowed here so
    // that tiny-beta limits can be tested.
    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.empty()) throw ConfigError("diffusion steps must be positive");
        NoiseSchedule s;
        s.beta_.assign(1, 0.0);
        s.alpha_bar_.assign(1, 1.0);
        for (std::size_t i = 0; i < betas.size(); ++i) {
            const double b = betas[i];
            if (!(b > 0.0 && b < 1.0)) throw ConfigError("betas must lie in (0, 1)");
            if (i > 0 && b < betas[i - 1]) throw ConfigError("betas must be non-decreasing");
            s.beta_.push_back(b);
            s.alpha_bar_.push_back(s.alpha_bar_.back() * (1.0 - b));
        }
        return s;
    }

    std::size_t steps() const { return beta_.size() - 1; }
    // Index 0 holds the convention alpha_bar_0 = 1, beta_0 = 0.
    double beta(std::size_t t) const { return beta_.at(t); }
    double alpha(std::size_t t) const { return 1.0 - beta_.at(t); }
    double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
    double posterior_variance(std::size_t t) const {
        check_step(t);
        return (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]) * beta_[t];
    }
    // Coefficients of the posterior mean on z0 and on z_t.
    double coef_z0(std::size_t t) const {
        check_step(t);
        return std::sqrt(alpha_bar_[t - 1]) * beta_[t] / (1.0 - alpha_bar_[t]);
    }
    double coef_zt(std::size_t t) const {
        check_step(t);
        return std::sqrt(alpha(t)) * (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]);
    }

    void check_step(std::size_t t) const {
        if (t < 1 || t > steps()) throw ShapeError("diffusion step out of range");
    }

private:
    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

struct NoisedLatent {
    Tensor zt;
    Tensor noise;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with eps given.
inline Tensor forward_mix(const Tensor& z0, const Tensor& eps, std::size_t t, const NoiseSchedule& sched) {
    sched.check_step(t);
    if (z0.shape() != eps.shape()) throw ShapeError("noise shape mismatch");
    const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
    std::vector<float> out(z0.size());
    const auto x = z0.data(), e = eps.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * x[i] + b * e[i]);
    return Tensor(z0.shape(), std::move(out));
}

// Noise for a [3, ...] latent: plane p draws from its own derived stream so
// that the per-plane values do not depend on evaluation order.
inline Tensor plane_noise(const Shape& shape, std::uint64_t seed) {
    if (shape.empty() || shape[0] == 0) throw ShapeError("plane noise needs a leading plane axis");
    const std::size_t per = numel(shape) / shape[0];
    std::vector<float> v(numel(shape));
    for (std::size_t p = 0; p < shape[0]; ++p) {
        Rng rng = Rng::derive(seed, p);
        for (std::size_t i = 0; i < per; ++i) v[p * per + i] = static_cast<float>(rng.normal());
    }
    return Tensor(shape, std::move(v));
}

inline NoisedLatent forward_sample(const Tensor& z0, std::size_t t, const NoiseSchedule& sched, Rng& rng) {
    auto eps = plane_noise(z0.shape(), rng.next());
    auto zt = forward_mix(z0, eps, t, sched);
    return {std::move(zt), std::move(eps)};
}

// z_{t-1} ~ N(mu(z_t, z0_hat), beta_tilde_t I); the t = 1 step is deterministic.
inline Tensor posterior_step(const Tensor& zt, const Tensor& z0_hat, std::size_t t, const NoiseSchedule& sched,
                             Rng& rng) {
    sched.check_step(t);
    if (zt.shape() != z0_hat.shape()) throw ShapeError("posterior inputs differ in shape");
    const double c0 = sched.coef_z0(t), ct = sched.coef_zt(t);
    const double sigma = t > 1 ? std::sqrt(sched.posterior_variance(t)) : 0.0;
    std::vector<float> out(zt.size());
    const auto a = zt.data(), b = z0_hat.data();
    if (sigma > 0.0) {
        const auto eps = plane_noise(zt.shape(), rng.next());
        const auto e = eps.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(c0 * b[i] + ct * a[i] + sigma * e[i]);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(c0 * b[i] + ct * a[i]);
    }
    return Tensor(zt.shape(), std::move(out));
}

} // namespace lam3d
