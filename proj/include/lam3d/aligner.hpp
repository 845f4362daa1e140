#pragma once

// Stage 2: conditional z0-predicting denoisers over the latent tri-plane.
// Parallel mode runs one UNet per plane; single mode stacks the planes into
// one UNet; deterministic mode regresses z0 from the image alone.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "lam3d/diffusion.hpp"
#include "lam3d/nn.hpp"
#include "lam3d/optim.hpp"

namespace lam3d {

enum class DenoiserMode { parallel, single, deterministic };

inline const char* mode_name(DenoiserMode m) {
    switch (m) {
        case DenoiserMode::parallel: return "parallel";
        case DenoiserMode::single: return "single";
        case DenoiserMode::deterministic: return "deterministic";
    }
    return "?";
}

inline DenoiserMode mode_from_name(const std::string& s) {
    if (s == "parallel") return DenoiserMode::parallel;
    if (s == "single") return DenoiserMode::single;
    if (s == "deterministic") return DenoiserMode::deterministic;
    throw ConfigError("unknown denoiser mode '" + s + "'");
}

inline constexpr std::size_t kTimeEmbedding = 128;

// Sinusoidal embedding of integer steps: [B] -> [B, 128], sines then cosines.
inline Tensor timestep_embedding(const std::vector<std::size_t>& steps) {
    const std::size_t half = kTimeEmbedding / 2;
    std::vector<float> out(steps.size() * kTimeEmbedding);
    for (std::size_t b = 0; b < steps.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
            const double a = static_cast<double>(steps[b]) * freq;
            out[b * kTimeEmbedding + i] = static_cast<float>(std::sin(a));
            out[b * kTimeEmbedding + half + i] = static_cast<float>(std::cos(a));
        }
    }
    return Tensor({steps.size(), kTimeEmbedding}, std::move(out));
}

struct DenoiserConfig {
    DenoiserMode mode = DenoiserMode::parallel;
    std::size_t width = 32;
    std::size_t heads = 4;
    std::size_t single_width = 0;  // 0: chosen to match the parallel parameter count
};

// Two-level UNet with per-block time injection and cross-attention to the
// image tokens at the bottleneck.
class DenoiserUNet {
public:
    DenoiserUNet() = default;
    DenoiserUNet(std::size_t channels, std::size_t width, std::size_t heads, std::size_t ctx_dim, Rng& rng)
        : in(channels, width, 3, 1, 1, rng),
          enc(width, width, 3, 1, 1, rng),
          enc_time({kTimeEmbedding, width, width}, rng),
          down(width, 2 * width, 3, 2, 1, rng),
          mid(2 * width, 2 * width, 3, 1, 1, rng),
          mid_time({kTimeEmbedding, 2 * width, 2 * width}, rng),
          cross_norm(2 * width),
          cross(2 * width, heads, AttentionKind::softmax, rng, ctx_dim),
          up(2 * width, width, 3, 1, 1, rng),
          fuse(2 * width, width, 3, 1, 1, rng),
          dec_time({kTimeEmbedding, width, width}, rng),
          out(width, channels, 3, 1, 1, rng) {
        if ((2 * width) % heads != 0) throw ConfigError("denoiser width must make 2*width divisible by heads");
    }

    // x [B, C, R, R], temb [B, 128], ctx [B, S, D]
    Tensor operator()(const Tensor& x, const Tensor& temb, const Tensor& ctx) const {
        const std::size_t B = x.dim(0);
        const auto h1 = gelu(enc(gelu(in(x))) + as_bias(enc_time(temb), B));
        auto h2 = gelu(mid(gelu(down(h1))) + as_bias(mid_time(temb), B));
        const std::size_t C2 = h2.dim(1), r = h2.dim(2), c = h2.dim(3);
        auto tok = reshape(permute(h2, {0, 2, 3, 1}), {B, r * c, C2});
        tok = tok + cross(cross_norm(tok), &ctx);
        h2 = permute(reshape(tok, {B, r, c, C2}), {0, 3, 1, 2});
        const auto u = gelu(up(upsample2x(h2)));
        const auto f = gelu(fuse(concat({u, h1}, 1)) + as_bias(dec_time(temb), B));
        return out(f);
    }

    void collect(ParamList& list, const std::string& prefix) const {
        in.collect(list, prefix + ".in");
        enc.collect(list, prefix + ".enc");
        enc_time.collect(list, prefix + ".enc_time");
        down.collect(list, prefix + ".down");
        mid.collect(list, prefix + ".mid");
        mid_time.collect(list, prefix + ".mid_time");
        cross_norm.collect(list, prefix + ".cross_norm");
        cross.collect(list, prefix + ".cross");
        up.collect(list, prefix + ".up");
        fuse.collect(list, prefix + ".fuse");
        dec_time.collect(list, prefix + ".dec_time");
        out.collect(list, prefix + ".out");
    }

    Conv2d in, enc;
    Mlp enc_time;
    Conv2d down, mid;
    Mlp mid_time;
    LayerNorm cross_norm;
    MultiHeadAttention cross;
    Conv2d up, fuse;
    Mlp dec_time;
    Conv2d out;

private:
    static Tensor as_bias(const Tensor& t, std::size_t B) { return reshape(t, {B, t.dim(1), 1, 1}); }
};

inline std::size_t unet_parameter_count(std::size_t channels, std::size_t width, std::size_t heads, std::size_t ctx_dim) {
    Rng rng(0);
    ParamList p;
    DenoiserUNet(channels, width, heads, ctx_dim, rng).collect(p, "u");
    return p.count();
}

// Width of the single joint UNet whose parameter count is closest to three
// parallel UNets of the given width.
inline std::size_t matched_single_width(std::size_t latent_channels, std::size_t width, std::size_t heads,
                                        std::size_t ctx_dim) {
    const std::size_t target = 3 * unet_parameter_count(latent_channels, width, heads, ctx_dim);
    const std::size_t step = heads % 2 == 0 ? heads / 2 : heads;
    std::size_t best = width;
    double best_gap = 1e300;
    for (std::size_t w = step; w <= 4 * width; w += step) {
        const double gap = std::abs(static_cast<double>(unet_parameter_count(3 * latent_channels, w, heads, ctx_dim)) -
                                    static_cast<double>(target));
        if (gap < best_gap) {
            best_gap = gap;
            best = w;
        }
    }
    return best;
}

class DenoiserSet {
public:
    DenoiserSet() = default;
    DenoiserSet(const DenoiserConfig& cfg, std::size_t latent_channels, std::size_t ctx_dim, std::uint64_t seed)
        : cfg_(cfg), latent_channels_(latent_channels) {
        if (cfg.mode == DenoiserMode::single) {
            const std::size_t w = cfg.single_width ? cfg.single_width
                                                   : matched_single_width(latent_channels, cfg.width, cfg.heads, ctx_dim);
            cfg_.single_width = w;
            Rng rng = Rng::derive(seed, 0xd0);
            unets_.emplace_back(3 * latent_channels, w, cfg.heads, ctx_dim, rng);
        } else {
            // Each plane's UNet draws from its own stream.
            for (std::size_t p = 0; p < 3; ++p) {
                Rng rng = Rng::derive(seed, 0xd0 + p);
                unets_.emplace_back(latent_channels, cfg.width, cfg.heads, ctx_dim, rng);
            }
        }
    }

    const DenoiserConfig& config() const { return cfg_; }
    DenoiserMode mode() const { return cfg_.mode; }

    // zt [B, 3, C_l, R, R], tokens [B, S, D], one step per batch entry.
    Tensor operator()(const Tensor& zt, const Tensor& tokens, const std::vector<std::size_t>& steps) const {
        if (zt.rank() != 5 || zt.dim(1) != 3 || zt.dim(2) != latent_channels_)
            throw ShapeError("denoiser expects latents [B,3,C_l,R,R], got " + to_string(zt.shape()));
        if (tokens.rank() != 3 || tokens.dim(0) != zt.dim(0) || steps.size() != zt.dim(0))
            throw ShapeError("denoiser batch mismatch");
        ++calls_;
        const std::size_t B = zt.dim(0), C = zt.dim(2), R = zt.dim(3);
        const auto temb = timestep_embedding(steps);
        if (cfg_.mode == DenoiserMode::single) {
            const auto y = unets_[0](reshape(zt, {B, 3 * C, R, R}), temb, tokens);
            return reshape(y, zt.shape());
        }
        std::vector<Tensor> planes;
        for (std::size_t p = 0; p < 3; ++p) {
            const auto y = unets_[p](reshape(select(zt, 1, p), {B, C, R, R}), temb, tokens);
            planes.push_back(reshape(y, {B, 1, C, R, R}));
        }
        return concat(planes, 1);
    }

    // Unbatched form: zt [3, C_l, R, R], tokens [S, D].
    Tensor denoise(const Tensor& zt, const Tensor& tokens, std::size_t t) const {
        Shape zs{1};
        zs.insert(zs.end(), zt.shape().begin(), zt.shape().end());
        const auto y = (*this)(reshape(zt, zs), reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}), {t});
        return reshape(y, zt.shape());
    }

    void collect(ParamList& out) const {
        for (std::size_t i = 0; i < unets_.size(); ++i) unets_[i].collect(out, "unet" + std::to_string(i));
    }
    ParamList parameters() const {
        ParamList p;
        collect(p);
        return p;
    }

    std::size_t calls() const { return calls_; }
    void reset_calls() { calls_ = 0; }

private:
    DenoiserConfig cfg_;
    std::size_t latent_channels_ = 0;
    std::vector<DenoiserUNet> unets_;
    mutable std::size_t calls_ = 0;
};

struct AlignSample {
    Tensor latent;  // [3, C_l, R_l, R_l]
    Tensor tokens;  // [S, D]
};

struct AlignTrainOptions {
    std::size_t steps = 2000;
    std::size_t batch = 4;
    float lr = 1e-3f;
    std::uint64_t seed = 0;
};

struct AlignTraceRow {
    std::size_t step;
    float loss;
};

inline Tensor stack_rows(const std::vector<Tensor>& items) {
    std::vector<Tensor> parts;
    for (const auto& t : items) {
        Shape s{1};
        s.insert(s.end(), t.shape().begin(), t.shape().end());
        parts.push_back(reshape(t, s));
    }
    return concat(parts, 0);
}

class AlignerTrainer {
public:
    AlignerTrainer(DenoiserSet& set, std::vector<AlignSample> data, NoiseSchedule sched, AlignTrainOptions opt)
        : set_(set), data_(std::move(data)), sched_(std::move(sched)), opt_(opt), adam_(set.parameters(), {.lr = opt.lr}) {
        if (data_.empty()) throw ConfigError("alignment dataset is empty");
    }

    AlignTraceRow step() {
        const std::size_t s = step_;
        Rng rng = Rng::derive(opt_.seed, s);
        std::vector<Tensor> z0s, zts, toks;
        std::vector<std::size_t> steps;
        for (std::size_t b = 0; b < opt_.batch; ++b) {
            const auto& d = data_[rng.below(data_.size())];
            z0s.push_back(d.latent);
            toks.push_back(d.tokens);
            if (set_.mode() == DenoiserMode::deterministic) {
                zts.push_back(Tensor::zeros(d.latent.shape()));
                steps.push_back(0);
            } else {
                const std::size_t t = 1 + rng.below(sched_.steps());
                zts.push_back(forward_sample(d.latent, t, sched_, rng).zt);
                steps.push_back(t);
            }
        }
        const auto target = stack_rows(z0s);
        const auto pred = set_(stack_rows(zts), stack_rows(toks), steps);
        const auto loss = mean(square(pred - target));
        const float value = loss.item();
        if (!std::isfinite(value)) throw NumericalError("non-finite alignment loss at step " + std::to_string(s));
        adam_.zero_grad();
        loss.backward();
        adam_.step();
        ++step_;
        return {s, value};
    }

    std::vector<AlignTraceRow> run(std::size_t count, const std::function<void(const AlignTraceRow&)>& on_step = {}) {
        std::vector<AlignTraceRow> trace;
        for (std::size_t i = 0; i < count; ++i) {
            trace.push_back(step());
            if (on_step) on_step(trace.back());
        }
        return trace;
    }

    std::size_t steps_done() const { return step_; }
    void set_steps_done(std::size_t s) { step_ = s; }
    Adam& optimizer() { return adam_; }

private:
    DenoiserSet& set_;
    std::vector<AlignSample> data_;
    NoiseSchedule sched_;
    AlignTrainOptions opt_;
    Adam adam_;
    std::size_t step_ = 0;
};

// Ancestral sampling from z_T ~ N(0, I). With `clip`, each z0 prediction is
// clamped to [-clip, clip].
inline Tensor sample_latent(const DenoiserSet& set, const Tensor& tokens, const Shape& latent_shape,
                            const NoiseSchedule& sched, Rng& rng, std::optional<float> clip = std::nullopt) {
    NoGradGuard ng;
    if (set.mode() == DenoiserMode::deterministic) return set.denoise(Tensor::zeros(latent_shape), tokens, 0);
    auto z = plane_noise(latent_shape, rng.next());
    for (std::size_t t = sched.steps(); t >= 1; --t) {
        auto z0 = set.denoise(z, tokens, t);
        if (clip) z0 = clamp(z0, -*clip, *clip);
        z = posterior_step(z, z0, t, sched, rng);
    }
    return z;
}

} // namespace lam3d
