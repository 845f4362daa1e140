#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "lam3d/detail/gemm.hpp"
#include "lam3d/tensor.hpp"

namespace lam3d {

namespace detail {

// Per-output-dimension strides into each operand; zero where the operand is
// broadcast. Shapes are right-aligned (numpy rule).
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    enum class Kind { same, b_suffix, a_suffix, general } kind = Kind::general;
    std::size_t na = 0;
    std::size_t nb = 0;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline bool is_suffix(const Shape& longer, const Shape& shorter) {
    if (shorter.size() > longer.size()) return false;
    std::size_t off = longer.size() - shorter.size();
    std::size_t start = 0;
    while (start < shorter.size() && shorter[start] == 1) ++start;  // leading ones are harmless
    for (std::size_t i = start; i < shorter.size(); ++i)
        if (shorter[i] != longer[off + i]) return false;
    return true;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    BroadcastPlan p;
    p.na = numel(a);
    p.nb = numel(b);
    const std::size_t rank = std::max(a.size(), b.size());
    p.out.assign(rank, 1);
    p.stride_a.assign(rank, 0);
    p.stride_b.assign(rank, 0);
    const auto sa = contiguous_strides(a);
    const auto sb = contiguous_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ia = i + a.size() >= rank ? i + a.size() - rank : SIZE_MAX;
        const std::size_t ib = i + b.size() >= rank ? i + b.size() - rank : SIZE_MAX;
        const std::size_t ea = ia == SIZE_MAX ? 1 : a[ia];
        const std::size_t eb = ib == SIZE_MAX ? 1 : b[ib];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
        }
        p.out[i] = std::max(ea, eb);
        if (ea != 1) p.stride_a[i] = sa[ia];
        if (eb != 1) p.stride_b[i] = sb[ib];
    }
    if (a == b) {
        p.kind = BroadcastPlan::Kind::same;
    } else if (p.na == numel(p.out) && is_suffix(a, b)) {
        p.kind = BroadcastPlan::Kind::b_suffix;
    } else if (p.nb == numel(p.out) && is_suffix(b, a)) {
        p.kind = BroadcastPlan::Kind::a_suffix;
    }
    return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void broadcast_for_each(const BroadcastPlan& p, F&& f) {
    const std::size_t n = numel(p.out);
    switch (p.kind) {
    case BroadcastPlan::Kind::same:
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
    case BroadcastPlan::Kind::b_suffix:
        for (std::size_t i = 0, j = 0; i < n; ++i, j = (j + 1 == p.nb ? 0 : j + 1)) f(i, i, j);
        return;
    case BroadcastPlan::Kind::a_suffix:
        for (std::size_t i = 0, j = 0; i < n; ++i, j = (j + 1 == p.na ? 0 : j + 1)) f(i, j, i);
        return;
    case BroadcastPlan::Kind::general:
        break;
    }
    const std::size_t rank = p.out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.stride_a[d] * idx[d];
            ib -= p.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

inline void check_divisor(float v) {
    if (checked_mode && std::fabs(v) < 1e-12f) {
        throw NumericalError("division by a value of magnitude < 1e-12");
    }
}

template <typename Fwd, typename Dfdx>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Dfdx dfdx) {
    const auto in = x.data();
    std::vector<float> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
    return make_result(x.shape(), std::move(out), name, {&x}, [dfdx](Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * dfdx(in.data[i], self.data[i]);
    });
}

inline constexpr float inv_sqrt2 = static_cast<float>(1.0 / std::numbers::sqrt2);

inline float gelu_value(float x) {
    return 0.5f * x * (1.0f + std::erf(x * inv_sqrt2));
}

inline float gelu_slope(float x) {
    const float cdf = 0.5f * (1.0f + std::erf(x * inv_sqrt2));
    const float pdf = std::exp(-0.5f * x * x) * static_cast<float>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

// Branch taken by each abs/clamp/elu input and max_axis winner, appended while a KinkProbe is active.
inline thread_local std::vector<std::int8_t>* kink_log = nullptr;

template <class Branch>
void log_kinks(const Tensor& x, Branch branch) {
    if (!kink_log) return;
    for (float v : x.data()) kink_log->push_back(branch(v));
}

} // namespace detail

// Records which side of every non-differentiable point the forward pass
// visited, so a finite-difference probe can tell whether it straddled one.
class KinkProbe {
public:
    KinkProbe() : prev_(detail::kink_log) { detail::kink_log = &log_; }
    ~KinkProbe() { detail::kink_log = prev_; }
    KinkProbe(const KinkProbe&) = delete;
    KinkProbe& operator=(const KinkProbe&) = delete;
    const std::vector<std::int8_t>& pattern() const { return log_; }

private:
    std::vector<std::int8_t> log_;
    std::vector<std::int8_t>* prev_;
};

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryKind { add, sub, mul, div };

inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
    auto plan = detail::plan_broadcast(a.shape(), b.shape());
    const auto da = a.data();
    const auto db = b.data();
    std::vector<float> out(numel(plan.out));
    switch (kind) {
    case BinaryKind::add:
        detail::broadcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = da[ia] + db[ib]; });
        break;
    case BinaryKind::sub:
        detail::broadcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = da[ia] - db[ib]; });
        break;
    case BinaryKind::mul:
        detail::broadcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = da[ia] * db[ib]; });
        break;
    case BinaryKind::div:
        detail::broadcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            detail::check_divisor(db[ib]);
            out[i] = da[ia] / db[ib];
        });
        break;
    }
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    Shape out_shape = plan.out;
    return detail::make_result(std::move(out_shape), std::move(out), names[static_cast<int>(kind)], {&a, &b},
                               [kind, plan = std::move(plan)](detail::Node& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        const auto& g = self.grad;
        float* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
        float* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
        const float* va = na.data.data();
        const float* vb = nb.data.data();
        detail::broadcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            const float gi = g[i];
            switch (kind) {
            case BinaryKind::add:
                if (ga) ga[ia] += gi;
                if (gb) gb[ib] += gi;
                break;
            case BinaryKind::sub:
                if (ga) ga[ia] += gi;
                if (gb) gb[ib] -= gi;
                break;
            case BinaryKind::mul:
                if (ga) ga[ia] += gi * vb[ib];
                if (gb) gb[ib] += gi * va[ia];
                break;
            case BinaryKind::div:
                if (ga) ga[ia] += gi / vb[ib];
                if (gb) gb[ib] -= gi * va[ia] / (vb[ib] * vb[ib]);
                break;
            }
        });
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary(BinaryKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinaryKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinaryKind::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary(BinaryKind::div, a, b); }

inline Tensor neg(const Tensor& x) {
    return detail::unary(x, "neg", [](float v) { return -v; }, [](float, float) { return -1.0f; });
}

inline Tensor exp(const Tensor& x) {
    return detail::unary(x, "exp", [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary(
        x, "log",
        [](float v) {
            if (checked_mode() && !(v > 0.0f)) throw NumericalError("log of a non-positive value");
            return std::log(v);
        },
        [](float v, float) { return 1.0f / v; });
}

inline Tensor sqrt(const Tensor& x) {
    return detail::unary(
        x, "sqrt",
        [](float v) {
            if (checked_mode() && v < 0.0f) throw NumericalError("sqrt of a negative value");
            return std::sqrt(v);
        },
        [](float, float y) { return 0.5f / y; });
}

inline Tensor gelu(const Tensor& x) {
    return detail::unary(x, "gelu", detail::gelu_value, [](float v, float) { return detail::gelu_slope(v); });
}

inline Tensor elu(const Tensor& x) {
    // Continuous slope but a jump in curvature at 0: central differences lose an order there.
    detail::log_kinks(x, [](float v) { return static_cast<std::int8_t>(v > 0.0f); });
    return detail::unary(
        x, "elu", [](float v) { return v > 0.0f ? v : std::expm1(v); },
        [](float v, float y) { return v > 0.0f ? 1.0f : y + 1.0f; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid", [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
        [](float, float y) { return y * (1.0f - y); });
}

inline Tensor abs(const Tensor& x) {
    detail::log_kinks(x, [](float v) { return static_cast<std::int8_t>((v > 0.0f) - (v < 0.0f)); });
    return detail::unary(
        x, "abs", [](float v) { return std::fabs(v); },
        [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(x, "square", [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

inline Tensor scale(const Tensor& x, float s) {
    return detail::unary(x, "scale", [s](float v) { return v * s; }, [s](float, float) { return s; });
}

inline Tensor add_scalar(const Tensor& x, float s) {
    return detail::unary(x, "add_scalar", [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

// Gradient passes only where the input lies strictly inside [lo, hi].
inline Tensor clamp(const Tensor& x, float lo, float hi) {
    detail::log_kinks(x, [lo, hi](float v) { return static_cast<std::int8_t>((v > lo) + (v >= hi)); });
    return detail::unary(
        x, "clamp", [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0f : 0.0f; });
}

inline Tensor clamp_min(const Tensor& x, float lo) {
    detail::log_kinks(x, [lo](float v) { return static_cast<std::int8_t>(v > lo); });
    return detail::unary(
        x, "clamp_min", [lo](float v) { return std::max(v, lo); },
        [lo](float v, float) { return v > lo ? 1.0f : 0.0f; });
}

enum class ElementwiseKind { add, sub, mul, div, neg, exp, log, sqrt, gelu, elu, sigmoid };

// Single dispatch point over the elementwise family; `b` is required for the
// binary kinds and ignored otherwise.
inline Tensor elementwise(ElementwiseKind kind, const Tensor& a, const Tensor* b = nullptr) {
    auto need_b = [&]() -> const Tensor& {
        if (!b || !b->defined()) throw ShapeError("binary elementwise op needs a second operand");
        return *b;
    };
    switch (kind) {
    case ElementwiseKind::add: return add(a, need_b());
    case ElementwiseKind::sub: return sub(a, need_b());
    case ElementwiseKind::mul: return mul(a, need_b());
    case ElementwiseKind::div: return div(a, need_b());
    case ElementwiseKind::neg: return neg(a);
    case ElementwiseKind::exp: return exp(a);
    case ElementwiseKind::log: return log(a);
    case ElementwiseKind::sqrt: return sqrt(a);
    case ElementwiseKind::gelu: return gelu(a);
    case ElementwiseKind::elu: return elu(a);
    case ElementwiseKind::sigmoid: return sigmoid(a);
    }
    throw ShapeError("unknown elementwise kind");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, float s) { return scale(a, s); }
inline Tensor operator*(float s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, float s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, float s) { return add_scalar(a, -s); }

// ---------------------------------------------------------------------------
// Reductions (accumulated in double)

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    return detail::make_result({1}, {static_cast<float>(acc)}, "sum", {&x}, [](detail::Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const double n = static_cast<double>(x.size());
    return detail::make_result({1}, {static_cast<float>(acc / n)}, "mean", {&x}, [n](detail::Node& self) {
        auto& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const float gi = static_cast<float>(self.grad[0] / n);
        for (auto& v : g) v += gi;
    });
}

namespace detail {
struct AxisSplit {
    std::size_t outer, extent, inner;
};
inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
    AxisSplit a{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
    return a;
}
inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[axis] = 1;
    } else {
        out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
        if (out.empty()) out.push_back(1);
    }
    return out;
}
} // namespace detail

inline Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false) {
    const auto sp = detail::split_axis(x.shape(), axis);
    const auto in = x.data();
    std::vector<float> out(sp.outer * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            double acc = 0.0;
            for (std::size_t e = 0; e < sp.extent; ++e) acc += in[(o * sp.extent + e) * sp.inner + i];
            out[o * sp.inner + i] = static_cast<float>(acc);
        }
    }
    return detail::make_result(detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), "sum_axis", {&x},
                               [sp](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t e = 0; e < sp.extent; ++e)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    g[(o * sp.extent + e) * sp.inner + i] += self.grad[o * sp.inner + i];
    });
}

// Maximum along an axis; ties resolve to the lowest index, which also receives
// the whole adjoint.
inline Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim = false) {
    const auto sp = detail::split_axis(x.shape(), axis);
    const auto in = x.data();
    std::vector<float> out(sp.outer * sp.inner);
    std::vector<std::size_t> arg(out.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            std::size_t best = 0;
            float bv = in[o * sp.extent * sp.inner + i];
            for (std::size_t e = 1; e < sp.extent; ++e) {
                const float v = in[(o * sp.extent + e) * sp.inner + i];
                if (v > bv) {
                    bv = v;
                    best = e;
                }
            }
            out[o * sp.inner + i] = bv;
            arg[o * sp.inner + i] = (o * sp.extent + best) * sp.inner + i;
            if (detail::kink_log) detail::kink_log->push_back(static_cast<std::int8_t>(best % 128));
        }
    }
    return detail::make_result(detail::reduced_shape(x.shape(), axis, keepdim), std::move(out), "max_axis", {&x},
                               [arg = std::move(arg)](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t j = 0; j < arg.size(); ++j) g[arg[j]] += self.grad[j];
    });
}

// Softmax over the last dimension.
inline Tensor softmax(const Tensor& x) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    const auto in = x.data();
    std::vector<float> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xi = in.data() + r * d;
        float* yo = out.data() + r * d;
        float m = xi[0];
        for (std::size_t j = 1; j < d; ++j) m = std::max(m, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            yo[j] = std::exp(xi[j] - m);
            z += yo[j];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::size_t j = 0; j < d; ++j) yo[j] *= inv;
    }
    return detail::make_result(x.shape(), std::move(out), "softmax", {&x}, [d, rows](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * d;
            const float* gy = self.grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * y[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - static_cast<float>(dot));
        }
    });
}

// Normalizes each row of the last dimension to zero mean, unit variance.
inline Tensor layer_norm(const Tensor& x, float eps = 1e-5f) {
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.size() / d;
    const auto in = x.data();
    std::vector<float> out(x.size());
    std::vector<float> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xi = in.data() + r * d;
        double m = 0.0;
        for (std::size_t j = 0; j < d; ++j) m += xi[j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - m) * (xi[j] - m);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<float>(is);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = static_cast<float>((xi[j] - m) * is);
    }
    return detail::make_result(x.shape(), std::move(out), "layer_norm", {&x},
                               [d, rows, inv_std = std::move(inv_std)](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const float* y = self.data.data() + r * d;
            const float* gy = self.grad.data() + r * d;
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                mg += gy[j];
                mgy += static_cast<double>(gy[j]) * y[j];
            }
            mg /= static_cast<double>(d);
            mgy /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j)
                g[r * d + j] += inv_std[r] * static_cast<float>(gy[j] - mg - y[j] * mgy);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation (always copies)

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    return detail::make_result(std::move(shape), x.to_vector(), "reshape", {&x}, [](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

namespace detail {
// For each output flat index, the input flat index.
inline std::vector<std::size_t> permutation_map(const Shape& in, const std::vector<std::size_t>& perm, Shape& out) {
    const std::size_t rank = in.size();
    if (perm.size() != rank) throw ShapeError("permutation rank mismatch");
    std::vector<bool> seen(rank, false);
    for (auto p : perm) {
        if (p >= rank || seen[p]) throw ShapeError("invalid permutation");
        seen[p] = true;
    }
    const auto st = contiguous_strides(in);
    out.resize(rank);
    std::vector<std::size_t> ost(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out[i] = in[perm[i]];
        ost[i] = st[perm[i]];
    }
    const std::size_t n = numel(in);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) {
        map[i] = src;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += ost[d];
            if (idx[d] < out[d]) break;
            src -= ost[d] * idx[d];
            idx[d] = 0;
        }
    }
    return map;
}
} // namespace detail

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
    Shape out_shape;
    auto map = detail::permutation_map(x.shape(), perm, out_shape);
    const auto in = x.data();
    std::vector<float> out(map.size());
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = in[map[i]];
    return detail::make_result(std::move(out_shape), std::move(out), "permute", {&x},
                               [map = std::move(map)](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& x, std::size_t a, std::size_t b) {
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm.at(a), perm.at(b));
    return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    Shape out_shape = parts[0].shape();
    if (axis >= out_shape.size()) throw ShapeError("concat axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != out_shape.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t d = 0; d < out_shape.size(); ++d)
            if (d != axis && p.dim(d) != out_shape[d]) throw ShapeError("concat extent mismatch");
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    const auto sp = detail::split_axis(out_shape, axis);
    std::vector<float> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.dim(axis) * sp.inner;
        const auto src = p.data();
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(src.data() + o * len, len, out.data() + o * total * sp.inner + off * sp.inner);
        off += p.dim(axis);
    }
    std::vector<std::size_t> lens;
    for (const auto& p : parts) lens.push_back(p.dim(axis));
    return detail::make_result(std::move(out_shape), std::move(out), "concat", parts,
                               [sp, total, offsets, lens](detail::Node& self) {
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            auto& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            auto& g = in.grad_buffer();
            const std::size_t len = lens[k] * sp.inner;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                const float* src = self.grad.data() + o * total * sp.inner + offsets[k] * sp.inner;
                float* dst = g.data() + o * len;
                for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
        }
    });
}

inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const auto sp = detail::split_axis(x.shape(), axis);
    if (length == 0 || start + length > sp.extent) throw ShapeError("slice out of range");
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    const auto in = x.data();
    std::vector<float> out(sp.outer * length * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(in.data() + (o * sp.extent + start) * sp.inner, length * sp.inner,
                    out.data() + o * length * sp.inner);
    return detail::make_result(std::move(out_shape), std::move(out), "slice", {&x},
                               [sp, start, length](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            float* dst = g.data() + (o * sp.extent + start) * sp.inner;
            const float* src = self.grad.data() + o * length * sp.inner;
            for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

// Removes `axis` by picking one index along it.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
    auto s = slice(x, axis, index, 1);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    if (shape.empty()) shape.push_back(1);
    return reshape(s, std::move(shape));
}

// ---------------------------------------------------------------------------
// Matrix product over the last two dimensions with broadcast batch dimensions.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
    const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    if (batch_a.empty()) batch_a.push_back(1);
    if (batch_b.empty()) batch_b.push_back(1);
    auto plan = detail::plan_broadcast(batch_a, batch_b);
    std::vector<std::size_t> ia, ib;
    detail::broadcast_for_each(plan, [&](std::size_t, std::size_t x, std::size_t y) {
        ia.push_back(x);
        ib.push_back(y);
    });
    Shape out_shape = plan.out;
    if (a.rank() == 2 && b.rank() == 2) out_shape.clear();
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<float> out(ia.size() * m * n, 0.0f);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (std::size_t t = 0; t < ia.size(); ++t)
        detail::gemm_nn(m, n, k, pa + ia[t] * m * k, pb + ib[t] * k * n, out.data() + t * m * n);
    return detail::make_result(std::move(out_shape), std::move(out), "matmul", {&a, &b},
                               [m, n, k, ia = std::move(ia), ib = std::move(ib)](detail::Node& self) {
        auto& na = *self.inputs[0];
        auto& nb = *self.inputs[1];
        for (std::size_t t = 0; t < ia.size(); ++t) {
            const float* g = self.grad.data() + t * m * n;
            if (na.requires_grad)  // dA = G B^T
                detail::gemm_nt(m, n, k, g, nb.data.data() + ib[t] * k * n, na.grad_buffer().data() + ia[t] * m * k);
            if (nb.requires_grad)  // dB = A^T G
                detail::gemm_tn(m, n, k, na.data.data() + ia[t] * m * k, g, nb.grad_buffer().data() + ib[t] * k * n);
        }
    });
}

// ---------------------------------------------------------------------------
// Spatial ops on [B, C, H, W]

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    const auto padded = static_cast<long long>(in + 2 * pad);
    const auto span = padded - static_cast<long long>(kernel);
    if (span < 0) return 0;
    return static_cast<std::size_t>(span) / stride + 1;
}

// Cross-correlation (no kernel flip), zero padding. Bias is applied by the caller.
inline Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dOptions opt = {}) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects [B,C,H,W] input and [O,C,kh,kw] weight");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C) throw ShapeError("conv2d channel mismatch: " + to_string(x.shape()) + " vs " + to_string(w.shape()));
    if (opt.stride == 0) throw ShapeError("conv2d stride must be positive");
    const std::size_t Ho = conv_out_extent(H, kh, opt.stride, opt.pad);
    const std::size_t Wo = conv_out_extent(W, kw, opt.stride, opt.pad);
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d output extent < 1 for input " + to_string(x.shape()));
    const std::size_t K = C * kh * kw, P = Ho * Wo;

    const float* px = x.data().data();
    std::vector<float> cols(B * K * P, 0.0f);
    for (std::size_t b = 0; b < B; ++b) {
        float* col = cols.data() + b * K * P;
        for (std::size_t c = 0; c < C; ++c) {
            const float* img = px + (b * C + c) * H * W;
            for (std::size_t i = 0; i < kh; ++i) {
                for (std::size_t j = 0; j < kw; ++j) {
                    float* row = col + ((c * kh + i) * kw + j) * P;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long long iy = static_cast<long long>(oy * opt.stride + i) - static_cast<long long>(opt.pad);
                        if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            const long long ix = static_cast<long long>(ox * opt.stride + j) - static_cast<long long>(opt.pad);
                            if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                            row[oy * Wo + ox] = img[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }
    std::vector<float> out(B * O * P, 0.0f);
    for (std::size_t b = 0; b < B; ++b)
        detail::gemm_nn(O, P, K, w.data().data(), cols.data() + b * K * P, out.data() + b * O * P);

    return detail::make_result(
        {B, O, Ho, Wo}, std::move(out), "conv2d", {&x, &w},
        [=, cols = std::move(cols)](detail::Node& self) {
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            std::vector<float> dcol;
            if (nx.requires_grad) dcol.resize(K * P);
            for (std::size_t b = 0; b < B; ++b) {
                const float* g = self.grad.data() + b * O * P;
                const float* col = cols.data() + b * K * P;
                if (nw.requires_grad) detail::gemm_nt(O, P, K, g, col, nw.grad_buffer().data());
                if (!nx.requires_grad) continue;
                std::fill(dcol.begin(), dcol.end(), 0.0f);
                detail::gemm_tn(O, P, K, nw.data.data(), g, dcol.data());
                float* gx = nx.grad_buffer().data();
                for (std::size_t c = 0; c < C; ++c) {
                    float* img = gx + (b * C + c) * H * W;
                    for (std::size_t i = 0; i < kh; ++i) {
                        for (std::size_t j = 0; j < kw; ++j) {
                            const float* row = dcol.data() + ((c * kh + i) * kw + j) * P;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const long long iy = static_cast<long long>(oy * opt.stride + i) - static_cast<long long>(opt.pad);
                                if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                                for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const long long ix = static_cast<long long>(ox * opt.stride + j) - static_cast<long long>(opt.pad);
                                    if (ix < 0 || ix >= static_cast<long long>(W)) continue;
                                    img[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)] += row[oy * Wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
}

// Nearest-neighbour 2x upsampling of the last two dimensions.
inline Tensor upsample2x(const Tensor& x) {
    if (x.rank() < 2) throw ShapeError("upsample2x needs at least two dimensions");
    const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
    const std::size_t planes = x.size() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = 2 * H;
    out_shape[out_shape.size() - 1] = 2 * W;
    const auto in = x.data();
    std::vector<float> out(x.size() * 4);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < 2 * H; ++y)
            for (std::size_t z = 0; z < 2 * W; ++z)
                out[(p * 2 * H + y) * 2 * W + z] = in[(p * H + y / 2) * W + z / 2];
    return detail::make_result(std::move(out_shape), std::move(out), "upsample2x", {&x},
                               [planes, H, W](detail::Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t y = 0; y < 2 * H; ++y)
                for (std::size_t z = 0; z < 2 * W; ++z)
                    g[(p * H + y / 2) * W + z / 2] += self.grad[(p * 2 * H + y) * 2 * W + z];
    });
}

} // namespace lam3d
