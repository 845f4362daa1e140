#pragma once

// Stage 1: point cloud -> initial tri-plane -> variational latent tri-plane
// -> decoded and refined tri-plane, trained with SDF, normal, latent-SDF and
// KL terms.

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "lam3d/grid.hpp"
#include "lam3d/nn.hpp"
#include "lam3d/optim.hpp"
#include "lam3d/sampling.hpp"
#include "lam3d/triplane.hpp"

namespace lam3d {

enum class LatentMode { triplane, vector };

struct LossWeights {
    float surface = 1.0f;         // lambda1: |Phi_P| on surface points
    float volume = 1.0f;          // lambda2: |Phi_P - d| on volume points
    float normal = 0.1f;          // lambda3
    float latent_surface = 0.5f;  // lambda4
    float latent_volume = 0.5f;   // lambda5
    float kl = 1e-4f;
    float delta = 0.0f;           // finite-difference spacing; 0 means one cell (1/R)
};

struct CompressorConfig {
    std::size_t points = 2048;          // M
    std::size_t centers = 256;          // n
    std::size_t neighbors = 32;         // K
    std::size_t embed_dim = 64;         // C_e
    std::size_t center_depth = 2;
    std::size_t center_heads = 4;
    std::size_t resolution = 32;        // R
    std::size_t latent_channels = 4;    // C_l
    std::size_t latent_resolution = 8;  // R_l
    std::size_t plane_blocks = 2;       // B
    std::size_t plane_width = 64;
    std::size_t plane_heads = 4;
    std::size_t decoded_channels = 32;
    std::size_t refiner_width = 32;
    std::size_t sdf_hidden = 64;
    bool use_refiner = true;
    LatentMode latent_mode = LatentMode::triplane;
    float logvar_init = -6.0f;
    LossWeights weights;

    std::size_t latent_size() const { return 3 * latent_channels * latent_resolution * latent_resolution; }
    float fd_delta() const { return weights.delta > 0 ? weights.delta : 1.0f / static_cast<float>(resolution); }
};

// Per-shape network input: FPS centers and their center-relative KNN groups.
struct PointInput {
    Tensor centers;  // [n, 3]
    Tensor groups;   // [n, K, 3]
};

inline PointInput prepare_point_input(const PointCloud& pc, std::size_t n, std::size_t K) {
    const auto idx = furthest_point_sampling(pc.points, n);
    return {gather_rows(pc.points, idx), knn_group(pc.points, idx, K)};
}

// [3, C, h, w] -> [1, 3*h*w, C] and back.
inline Tensor planes_to_tokens(const Tensor& planes) {
    const std::size_t C = planes.dim(1), h = planes.dim(2), w = planes.dim(3);
    return reshape(permute(planes, {0, 2, 3, 1}), {1, 3 * h * w, C});
}

inline Tensor tokens_to_planes(const Tensor& tokens, std::size_t h, std::size_t w) {
    const std::size_t C = tokens.dim(2);
    return permute(reshape(tokens, {3, h, w, C}), {0, 3, 1, 2});
}

class PointEmbedder {
public:
    PointEmbedder() = default;
    PointEmbedder(std::size_t embed_dim, Rng& rng) : point_mlp({3, 64, embed_dim}, rng), merge(embed_dim + 3, embed_dim, rng) {}

    // groups [n,K,3], centers [n,3] -> [n, C_e]
    Tensor operator()(const Tensor& groups, const Tensor& centers) const {
        const std::size_t n = groups.dim(0), K = groups.dim(1);
        auto h = point_mlp(reshape(groups, {n * K, 3}));
        auto pooled = max_axis(reshape(h, {n, K, h.dim(1)}), 1);
        return merge(concat({pooled, centers}, 1));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        point_mlp.collect(out, prefix + ".point_mlp");
        merge.collect(out, prefix + ".merge");
    }

    Mlp point_mlp;
    Linear merge;
};

// Two-level residual UNet over one plane.
class PlaneRefiner {
public:
    PlaneRefiner() = default;
    PlaneRefiner(std::size_t channels, std::size_t width, Rng& rng)
        : in(channels, width, 3, 1, 1, rng),
          down(width, 2 * width, 3, 2, 1, rng),
          mid(2 * width, 2 * width, 3, 1, 1, rng),
          up(2 * width, width, 3, 1, 1, rng),
          fuse(2 * width, width, 3, 1, 1, rng),
          out(width, channels, 3, 1, 1, rng) {
        // Starts as the identity map.
        std::fill(out.weight.mutable_data().begin(), out.weight.mutable_data().end(), 0.0f);
    }

    // x [1, C, R, R]
    Tensor operator()(const Tensor& x) const {
        const auto h1 = gelu(in(x));
        const auto h2 = gelu(mid(gelu(down(h1))));
        const auto u = gelu(up(upsample2x(h2)));
        const auto f = gelu(fuse(concat({u, h1}, 1)));
        return x + out(f);
    }

    void collect(ParamList& list, const std::string& prefix) const {
        in.collect(list, prefix + ".in");
        down.collect(list, prefix + ".down");
        mid.collect(list, prefix + ".mid");
        up.collect(list, prefix + ".up");
        fuse.collect(list, prefix + ".fuse");
        out.collect(list, prefix + ".out");
    }

    Conv2d in, down, mid, up, fuse, out;
};

struct Latent {
    Tensor mean;    // [3, C_l, R_l, R_l], or [V] in vector mode
    Tensor logvar;  // same shape as mean
    Tensor sample;  // t
};

struct LossTerms {
    Tensor sdf, normal, lsdf, kl, total;
};

inline Tensor loss_sdf(const Tensor& phi_surface, const Tensor& phi_volume, const Tensor& target, float w_surface,
                       float w_volume) {
    if (phi_surface.size() == 0 || phi_volume.size() == 0) throw ShapeError("empty query set");
    return mean(abs(phi_surface)) * w_surface + mean(abs(phi_volume - target)) * w_volume;
}

// Mean over points of the L1 norm of (gradient - normal).
inline Tensor loss_normal(const Tensor& grad, const Tensor& normals, float weight) {
    return scale(sum(abs(grad - normals)), weight / static_cast<float>(grad.dim(0)));
}

inline Tensor loss_kl(const Tensor& mu, const Tensor& logvar) {
    return mean(scale(square(mu) + exp(logvar) - logvar, 0.5f) - 0.5f);
}

class CompressorModel {
public:
    CompressorModel() = default;
    CompressorModel(const CompressorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        Rng rng = Rng::derive(seed, 0x5eed);
        const std::size_t W = cfg.plane_width, C_l = cfg.latent_channels, L = 3 * cfg.latent_resolution * cfg.latent_resolution;
        embedder = PointEmbedder(cfg.embed_dim, rng);
        for (std::size_t i = 0; i < cfg.center_depth; ++i)
            center_blocks.emplace_back(cfg.embed_dim, cfg.center_heads, AttentionKind::softmax, rng);
        center_norm = LayerNorm(cfg.embed_dim);

        enc_conv1 = Conv2d(cfg.embed_dim, W, 3, 2, 1, rng);
        enc_conv2 = Conv2d(W, W, 3, 2, 1, rng);
        enc_pos = make_param(Tensor::randn({1, L, W}, rng, 0.02f));
        for (std::size_t i = 0; i < cfg.plane_blocks; ++i)
            enc_blocks.emplace_back(W, cfg.plane_heads, AttentionKind::linear, rng);
        enc_norm = LayerNorm(W);
        enc_head = Linear(W, 2 * C_l, rng);
        auto bias = enc_head.bias.mutable_data();
        for (std::size_t c = C_l; c < 2 * C_l; ++c) bias[c] = cfg.logvar_init;
        if (cfg.latent_mode == LatentMode::vector) {
            const std::size_t V = cfg.latent_size();
            vec_head = Linear(2 * V, 2 * V, rng);
            auto vb = vec_head.bias.mutable_data();
            for (std::size_t i = V; i < 2 * V; ++i) vb[i] = cfg.logvar_init;
            vec_expand = Linear(V, V, rng);
        }

        dec_in = Linear(C_l, W, rng);
        dec_pos = make_param(Tensor::randn({1, L, W}, rng, 0.02f));
        for (std::size_t i = 0; i < cfg.plane_blocks; ++i)
            dec_blocks.emplace_back(W, cfg.plane_heads, AttentionKind::linear, rng);
        dec_norm = LayerNorm(W);
        dec_conv1 = Conv2d(W, W, 3, 1, 1, rng);
        dec_conv2 = Conv2d(W, cfg.decoded_channels, 3, 1, 1, rng);
        for (std::size_t p = 0; p < 3; ++p) refiners.emplace_back(cfg.decoded_channels, cfg.refiner_width, rng);

        phi_latent = SdfMlp(C_l, rng, cfg.sdf_hidden);
        phi_planes = SdfMlp(cfg.decoded_channels, rng, cfg.sdf_hidden);
    }

    const CompressorConfig& config() const { return cfg_; }

    Tensor initial_triplane(const PointInput& in) const {
        auto h = embedder(in.groups, in.centers);
        const std::size_t n = h.dim(0), C = h.dim(1);
        h = reshape(h, {1, n, C});
        for (const auto& b : center_blocks) h = b(h);
        h = reshape(center_norm(h), {n, C});
        return project_points(in.centers, h, cfg_.resolution);
    }

    // Training mode draws t = mean + exp(logvar/2) * eps; eval mode returns the mean.
    Latent encode(const Tensor& initial, Rng* noise) const {
        const std::size_t Rl = cfg_.latent_resolution, C_l = cfg_.latent_channels;
        auto h = gelu(enc_conv2(gelu(enc_conv1(initial))));
        if (h.dim(2) != Rl) throw ShapeError("encoder output resolution does not match latent_resolution");
        auto tok = planes_to_tokens(h) + enc_pos;
        for (const auto& b : enc_blocks) tok = b(tok);
        auto stats = enc_head(enc_norm(tok));  // [1, L, 2 C_l]
        Latent lat;
        if (cfg_.latent_mode == LatentMode::vector) {
            const std::size_t V = cfg_.latent_size();
            auto flat = vec_head(reshape(stats, {1, 2 * V}));
            lat.mean = reshape(slice(flat, 1, 0, V), {V});
            lat.logvar = clamp(reshape(slice(flat, 1, V, V), {V}), -10.0f, 10.0f);
        } else {
            const auto planes = tokens_to_planes(stats, Rl, Rl);  // [3, 2 C_l, Rl, Rl]
            lat.mean = slice(planes, 1, 0, C_l);
            lat.logvar = clamp(slice(planes, 1, C_l, C_l), -10.0f, 10.0f);
        }
        for (float v : lat.mean.data())
            if (!std::isfinite(v)) throw NumericalError("non-finite latent mean");
        if (noise) {
            const auto eps = Tensor::randn(lat.mean.shape(), *noise);
            lat.sample = lat.mean + exp(scale(lat.logvar, 0.5f)) * eps;
        } else {
            lat.sample = lat.mean;
        }
        return lat;
    }

    // Latent (planes or flat vector) -> refined tri-plane [3, C_p, R, R].
    Tensor decode(const Tensor& t) const {
        const std::size_t Rl = cfg_.latent_resolution, C_l = cfg_.latent_channels;
        Tensor tok;
        if (cfg_.latent_mode == LatentMode::vector) {
            const std::size_t V = cfg_.latent_size();
            tok = reshape(vec_expand(reshape(t, {1, V})), {1, V / C_l, C_l});
        } else {
            tok = planes_to_tokens(t);
        }
        tok = dec_in(tok) + dec_pos;
        for (const auto& b : dec_blocks) tok = b(tok);
        auto h = tokens_to_planes(dec_norm(tok), Rl, Rl);
        h = gelu(dec_conv1(upsample2x(h)));
        h = dec_conv2(upsample2x(h));
        if (!cfg_.use_refiner) return h;
        std::vector<Tensor> refined;
        for (std::size_t p = 0; p < 3; ++p) {
            refined.push_back(refiners[p](slice(h, 0, p, 1)));
        }
        return concat(refined, 0);
    }

    LossTerms losses(const Latent& lat, const Tensor& planes, const SdfSampleBatch& batch) const {
        const auto& w = cfg_.weights;
        LossTerms L;
        const auto phi_s = query_sdf(planes, phi_planes, batch.surface_points);
        const auto phi_v = query_sdf(planes, phi_planes, batch.volume_points);
        L.sdf = loss_sdf(phi_s, phi_v, batch.volume_sdf, w.surface, w.volume);
        if (w.normal > 0) {
            const auto g = sdf_spatial_gradient(planes, phi_planes, batch.surface_points, cfg_.fd_delta());
            L.normal = loss_normal(g, batch.surface_normals, w.normal);
        } else {
            L.normal = Tensor::scalar(0.0f);
        }
        if (cfg_.latent_mode == LatentMode::triplane && (w.latent_surface > 0 || w.latent_volume > 0)) {
            const auto ts = query_sdf(lat.sample, phi_latent, batch.surface_points);
            const auto tv = query_sdf(lat.sample, phi_latent, batch.volume_points);
            L.lsdf = loss_sdf(ts, tv, batch.volume_sdf, w.latent_surface, w.latent_volume);
        } else {
            L.lsdf = Tensor::scalar(0.0f);
        }
        L.kl = loss_kl(lat.mean, lat.logvar);
        L.total = L.sdf + L.normal + L.lsdf + scale(L.kl, w.kl);
        return L;
    }

    // Eval-mode reconstruction of the refined planes.
    Tensor reconstruct(const PointInput& in) const { return decode(encode(initial_triplane(in), nullptr).mean); }

    void collect(ParamList& out) const {
        embedder.collect(out, "embedder");
        for (std::size_t i = 0; i < center_blocks.size(); ++i) center_blocks[i].collect(out, "center." + std::to_string(i));
        center_norm.collect(out, "center.norm");
        enc_conv1.collect(out, "enc.conv1");
        enc_conv2.collect(out, "enc.conv2");
        out.add("enc.pos", enc_pos);
        for (std::size_t i = 0; i < enc_blocks.size(); ++i) enc_blocks[i].collect(out, "enc.block" + std::to_string(i));
        enc_norm.collect(out, "enc.norm");
        enc_head.collect(out, "enc.head");
        if (cfg_.latent_mode == LatentMode::vector) {
            vec_head.collect(out, "vec.head");
            vec_expand.collect(out, "vec.expand");
        }
        dec_in.collect(out, "dec.in");
        out.add("dec.pos", dec_pos);
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) dec_blocks[i].collect(out, "dec.block" + std::to_string(i));
        dec_norm.collect(out, "dec.norm");
        dec_conv1.collect(out, "dec.conv1");
        dec_conv2.collect(out, "dec.conv2");
        if (cfg_.use_refiner)
            for (std::size_t p = 0; p < 3; ++p) refiners[p].collect(out, "refiner" + std::to_string(p));
        phi_latent.collect(out, "phi_latent");
        phi_planes.collect(out, "phi_planes");
    }

    ParamList parameters() const {
        ParamList p;
        collect(p);
        return p;
    }

    PointEmbedder embedder;
    std::vector<TransformerBlock> center_blocks;
    LayerNorm center_norm;
    Conv2d enc_conv1, enc_conv2;
    Tensor enc_pos;
    std::vector<TransformerBlock> enc_blocks;
    LayerNorm enc_norm;
    Linear enc_head;
    Linear vec_head, vec_expand;
    Linear dec_in;
    Tensor dec_pos;
    std::vector<TransformerBlock> dec_blocks;
    LayerNorm dec_norm;
    Conv2d dec_conv1, dec_conv2;
    std::vector<PlaneRefiner> refiners;
    SdfMlp phi_latent, phi_planes;

private:
    CompressorConfig cfg_;
};

// Field of the reconstructed planes on the G^3 lattice. No tape.
inline SdfGrid evaluate_grid(const Tensor& planes, const SdfMlp& mlp, std::size_t G) {
    if (G < 2) throw ShapeError("grid resolution must be at least 2");
    NoGradGuard ng;
    SdfGrid grid{G, std::vector<float>(G * G * G)};
    const std::size_t chunk = 16384;
    std::vector<float> pts;
    for (std::size_t start = 0; start < grid.values.size(); start += chunk) {
        const std::size_t count = std::min(chunk, grid.values.size() - start);
        pts.resize(3 * count);
        for (std::size_t q = 0; q < count; ++q) {
            const std::size_t flat = start + q;
            const Vec3 p = grid.point(flat / (G * G), (flat / G) % G, flat % G);
            pts[3 * q] = static_cast<float>(p.x);
            pts[3 * q + 1] = static_cast<float>(p.y);
            pts[3 * q + 2] = static_cast<float>(p.z);
        }
        const auto v = query_sdf(planes, mlp, Tensor({count, 3}, pts));
        std::copy(v.data().begin(), v.data().end(), grid.values.begin() + static_cast<std::ptrdiff_t>(start));
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Training

struct ShapeSample {
    ShapeSpec spec;
    PointInput input;
};

struct TraceRow {
    std::size_t step;
    float sdf, normal, lsdf, kl, total;
};

struct CompressorTrainOptions {
    std::size_t steps = 1000;
    std::size_t surface_samples = 512;
    std::size_t volume_samples = 512;
    float lr = 1e-3f;
    float lr_final = 1e-3f;  // cosine decay target
    std::uint64_t seed = 0;
};

class CompressorTrainer {
public:
    CompressorTrainer(CompressorModel& model, std::vector<ShapeSample> shapes, CompressorTrainOptions opt)
        : model_(model), shapes_(std::move(shapes)), opt_(opt), adam_(model.parameters(), {.lr = opt.lr}) {
        if (shapes_.empty()) throw ConfigError("training corpus is empty");
    }

    // Shape visited at a given step: epochs are seeded shuffles of the corpus.
    std::size_t shape_for_step(std::size_t step) const {
        const std::size_t n = shapes_.size();
        const std::size_t epoch = step / n;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = Rng::derive(opt_.seed ^ 0x0e0c, epoch);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        return order[step % n];
    }

    float lr_at(std::size_t step) const {
        if (opt_.steps <= 1) return opt_.lr;
        const double f = static_cast<double>(step) / static_cast<double>(opt_.steps - 1);
        return static_cast<float>(opt_.lr_final + 0.5 * (opt_.lr - opt_.lr_final) * (1.0 + std::cos(std::numbers::pi * f)));
    }

    TraceRow step() {
        const std::size_t s = step_;
        const auto& shape = shapes_[shape_for_step(s)];
        Rng sample_rng = Rng::derive(opt_.seed, 2 * s);
        Rng noise_rng = Rng::derive(opt_.seed, 2 * s + 1);
        const auto batch = sample_batch(shape.spec, opt_.surface_samples, opt_.volume_samples, sample_rng);
        const auto init = model_.initial_triplane(shape.input);
        const auto lat = model_.encode(init, &noise_rng);
        const auto planes = model_.decode(lat.sample);
        const auto L = model_.losses(lat, planes, batch);
        const TraceRow row{s, L.sdf.item(), L.normal.item(), L.lsdf.item(), L.kl.item(), L.total.item()};
        if (!std::isfinite(row.total)) {
            throw NumericalError("non-finite loss at step " + std::to_string(s));
        }
        adam_.zero_grad();
        L.total.backward();
        adam_.set_lr(lr_at(s));
        adam_.step();
        ++step_;
        return row;
    }

    std::vector<TraceRow> run(std::size_t count, const std::function<void(const TraceRow&)>& on_step = {}) {
        std::vector<TraceRow> trace;
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
    CompressorModel& model_;
    std::vector<ShapeSample> shapes_;
    CompressorTrainOptions opt_;
    Adam adam_;
    std::size_t step_ = 0;
};

} // namespace lam3d
