#pragma once

// Parameterized building blocks. Every module exposes its tensors through
// collect(ParamList&, prefix) so optimizers and checkpoints see one flat,
// stably ordered, named list.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lam3d/attention.hpp"
#include "lam3d/ops.hpp"

namespace lam3d {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

class ParamList {
public:
    void add(std::string name, const Tensor& t) { items_.push_back({std::move(name), t}); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    std::size_t size() const { return items_.size(); }
    const NamedParam& operator[](std::size_t i) const { return items_.at(i); }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : items_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedParam> items_;
};

inline Tensor make_param(Tensor t) {
    t.set_requires_grad(true);
    return t;
}

// Bias over axis 1 of [B, C, ...].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() < 2 || bias.size() != x.dim(1)) throw ShapeError("channel bias mismatch for " + to_string(x.shape()));
    const std::size_t B = x.dim(0), C = x.dim(1), inner = x.size() / (B * C);
    auto out = x.to_vector();
    const auto b = bias.data();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            float* p = out.data() + (n * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
        }
    return detail::make_result(x.shape(), std::move(out), "channel_bias", {&x, &bias}, [B, C, inner](detail::Node& self) {
        auto& nx = *self.inputs[0];
        auto& nb = *self.inputs[1];
        if (nx.requires_grad) {
            auto& g = nx.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    const float* p = self.grad.data() + (n * C + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                    g[c] += static_cast<float>(acc);
                }
        }
    });
}

class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, float init_scale = 1.0f) : in_(in), out_(out) {
        const float bound = init_scale / std::sqrt(static_cast<float>(in));
        weight = make_param(Tensor::uniform({in, out}, rng, -bound, bound));
        bias = make_param(Tensor::zeros({out}));
    }

    // x: [..., in] -> [..., out]
    Tensor operator()(const Tensor& x) const {
        if (x.shape().back() != in_) {
            throw ShapeError("linear expects last dim " + std::to_string(in_) + ", got " + to_string(x.shape()));
        }
        Shape out_shape = x.shape();
        out_shape.back() = out_;
        const auto flat = x.rank() == 2 ? x : reshape(x, {x.size() / in_, in_});
        auto y = matmul(flat, weight) + bias;
        return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        out.add(prefix + ".weight", weight);
        out.add(prefix + ".bias", bias);
    }

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

    Tensor weight;
    Tensor bias;

private:
    std::size_t in_ = 0, out_ = 0;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng,
           float init_scale = 1.0f)
        : opt_{stride, pad} {
        const float bound = init_scale / std::sqrt(static_cast<float>(in * kernel * kernel));
        weight = make_param(Tensor::uniform({out, in, kernel, kernel}, rng, -bound, bound));
        bias = make_param(Tensor::zeros({out}));
    }

    Tensor operator()(const Tensor& x) const { return add_channel_bias(conv2d(x, weight, opt_), bias); }

    void collect(ParamList& out, const std::string& prefix) const {
        out.add(prefix + ".weight", weight);
        out.add(prefix + ".bias", bias);
    }

    Tensor weight;
    Tensor bias;

private:
    Conv2dOptions opt_;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim)
        : gain(make_param(Tensor::ones({dim}))), shift(make_param(Tensor::zeros({dim}))) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x) * gain + shift; }

    void collect(ParamList& out, const std::string& prefix) const {
        out.add(prefix + ".gain", gain);
        out.add(prefix + ".shift", shift);
    }

    Tensor gain;
    Tensor shift;
};

// Linear stack with GELU between layers and none after the last.
class Mlp {
public:
    Mlp() = default;
    Mlp(const std::vector<std::size_t>& widths, Rng& rng) {
        for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
    }

    Tensor operator()(Tensor x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i](x);
            if (i + 1 < layers.size()) x = gelu(x);
        }
        return x;
    }

    void collect(ParamList& out, const std::string& prefix) const {
        for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + "." + std::to_string(i));
    }

    std::vector<Linear> layers;
};

enum class AttentionKind { softmax, linear };

// Multi-head attention with projections. Keys and values come from `ctx`
// when given, otherwise from x.
class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t dim, std::size_t heads, AttentionKind kind, Rng& rng, std::size_t ctx_dim = 0)
        : heads_(heads), kind_(kind) {
        const std::size_t kv_in = ctx_dim ? ctx_dim : dim;
        q = Linear(dim, dim, rng);
        k = Linear(kv_in, dim, rng);
        v = Linear(kv_in, dim, rng);
        o = Linear(dim, dim, rng);
    }

    Tensor operator()(const Tensor& x, const Tensor* ctx = nullptr) const {
        const Tensor& src = ctx ? *ctx : x;
        const auto qq = q(x), kk = k(src), vv = v(src);
        const auto y = kind_ == AttentionKind::softmax ? softmax_attention(qq, kk, vv, heads_)
                                                       : linear_attention(qq, kk, vv, heads_);
        return o(y);
    }

    void collect(ParamList& out, const std::string& prefix) const {
        q.collect(out, prefix + ".q");
        k.collect(out, prefix + ".k");
        v.collect(out, prefix + ".v");
        o.collect(out, prefix + ".o");
    }

    Linear q, k, v, o;

private:
    std::size_t heads_ = 1;
    AttentionKind kind_ = AttentionKind::softmax;
};

// Pre-norm block: x + attn(ln(x)), then x + mlp(ln(x)).
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(std::size_t dim, std::size_t heads, AttentionKind kind, Rng& rng)
        : ln1(dim), attn(dim, heads, kind, rng), ln2(dim), mlp({dim, 2 * dim, dim}, rng) {}

    Tensor operator()(const Tensor& x) const {
        auto h = x + attn(ln1(x));
        return h + mlp(ln2(h));
    }

    void collect(ParamList& out, const std::string& prefix) const {
        ln1.collect(out, prefix + ".ln1");
        attn.collect(out, prefix + ".attn");
        ln2.collect(out, prefix + ".ln2");
        mlp.collect(out, prefix + ".mlp");
    }

    LayerNorm ln1;
    MultiHeadAttention attn;
    LayerNorm ln2;
    Mlp mlp;
};

} // namespace lam3d
