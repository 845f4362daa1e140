#pragma once

#include <cmath>
#include <vector>

#include "lam3d/nn.hpp"

namespace lam3d {

struct AdamOptions {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
public:
    Adam(ParamList params, AdamOptions opt = {}) : params_(std::move(params)), opt_(opt) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.size(), 0.0f);
            v_.emplace_back(p.tensor.size(), 0.0f);
        }
    }

    // Parameters without a gradient buffer are skipped (their moments still
    // count the step so bias correction stays aligned).
    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(t_));
        const float step_size = static_cast<float>(opt_.lr / c1);
        const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
        std::size_t k = 0;
        for (auto& p : params_) {
            auto& m = m_[k];
            auto& v = v_[k];
            ++k;
            auto g = p.tensor.grad();
            if (!g) continue;
            auto w = p.tensor.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const float gi = (*g)[i];
                m[i] = opt_.beta1 * m[i] + (1.0f - opt_.beta1) * gi;
                v[i] = opt_.beta2 * v[i] + (1.0f - opt_.beta2) * gi * gi;
                w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + opt_.eps);
            }
        }
    }

    void zero_grad() { params_.zero_grad(); }
    long steps() const { return t_; }
    void set_lr(float lr) { opt_.lr = lr; }
    const ParamList& params() const { return params_; }

    // Moment buffers, for checkpointing.
    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    void set_steps(long t) { t_ = t; }

private:
    ParamList params_;
    AdamOptions opt_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

} // namespace lam3d
