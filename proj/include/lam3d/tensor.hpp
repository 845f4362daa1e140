#pragma once

// Dense float tensor with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle to a node. Ops always allocate fresh storage, so
// a result never aliases its inputs. When gradient recording is enabled and an
// input requires a gradient, the result remembers its inputs and a closure that
// pushes the output adjoint back into them. backward() walks that graph in
// reverse topological order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lam3d/error.hpp"
#include "lam3d/rng.hpp"

namespace lam3d {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor;

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<float>& grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
        return grad;
    }
};

inline thread_local bool grad_enabled = true;
inline thread_local bool checked_mode = true;

} // namespace detail

// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Checked mode turns near-zero divisors into errors. On by default.
class CheckedModeGuard {
public:
    explicit CheckedModeGuard(bool enabled) : previous_(detail::checked_mode) {
        detail::checked_mode = enabled;
    }
    ~CheckedModeGuard() { detail::checked_mode = previous_; }
    CheckedModeGuard(const CheckedModeGuard&) = delete;
    CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }
inline bool checked_mode() { return detail::checked_mode; }

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<float> data) : node_(std::make_shared<detail::Node>()) {
        for (auto extent : shape) {
            if (extent == 0) throw ShapeError("tensor extents must be positive: " + to_string(shape));
        }
        if (numel(shape) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             to_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
    }

    static Tensor full(Shape shape, float value) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<float>(n, value));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0f); }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
    static Tensor scalar(float value) { return Tensor({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f) {
        std::vector<float> v(numel(shape));
        for (auto& x : v) x = static_cast<float>(rng.normal()) * stddev;
        return Tensor(std::move(shape), std::move(v));
    }

    static Tensor uniform(Shape shape, Rng& rng, float lo, float hi) {
        std::vector<float> v(numel(shape));
        for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
        return Tensor(std::move(shape), std::move(v));
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const float> data() const { return node_->data; }
    float at(std::size_t i) const { return node_->data.at(i); }

    float item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    std::vector<float> to_vector() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    // Only meaningful on leaves: marks the tensor as a differentiable input.
    Tensor& set_requires_grad(bool flag = true) {
        node_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }

    std::optional<std::span<const float>> grad() const {
        if (!has_grad()) return std::nullopt;
        return std::span<const float>(node_->grad);
    }

    void zero_grad() { node_->grad.clear(); }

    // Copy of the values with no tape history.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    // Same-shape copy with `value` written at flat index i; used by finite
    // difference probes.
    Tensor with_value(std::size_t i, float value) const {
        auto v = node_->data;
        v.at(i) = value;
        Tensor t(shape(), std::move(v));
        t.set_requires_grad(requires_grad());
        return t;
    }

    // In-place write access. Reserved for optimizers and checkpoint loading;
    // everything else treats tensors as immutable.
    std::span<float> mutable_data() { return node_->data; }
    std::span<float> mutable_grad() { return node_->grad_buffer(); }

    const char* op_name() const { return node_->op; }

    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result. The backward closure receives the result node; its
// `inputs` are the recorded operands in the order given here.
inline Tensor make_result(Shape shape, std::vector<float> data, const char* op,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled) return out;
    bool any = false;
    for (const auto* t : inputs) any = any || t->requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.is_leaf = false;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (const auto* t : inputs) node.inputs.push_back(t->node());
    node.backward = std::move(backward);
    return out;
}

inline Tensor make_result(Shape shape, std::vector<float> data, const char* op,
                          const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.is_leaf = false;
    node.op = op;
    for (const auto& t : inputs) node.inputs.push_back(t.node());
    node.backward = std::move(backward);
    return out;
}

} // namespace detail

inline void Tensor::backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar loss, got " + to_string(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            detail::Node* child = n->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // Interior adjoints restart from zero on every call; leaves accumulate.
    for (auto* n : order) {
        if (!n->is_leaf) n->grad.assign(n->data.size(), 0.0f);
    }
    node_->grad_buffer()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

} // namespace lam3d
