#pragma once

// Functional attention cores on [B, N, D] tensors split into `heads` groups
// along D. Projections live in nn.hpp.

#include <cmath>

#include "lam3d/ops.hpp"

namespace lam3d {

namespace detail {

// [B, N, D] -> [B, heads, N, D/heads]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
    if (x.rank() != 3) throw ShapeError("attention expects [B,N,D] tensors, got " + to_string(x.shape()));
    const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
    if (heads == 0 || D % heads != 0) throw ShapeError("width " + std::to_string(D) + " not divisible by heads");
    return permute(reshape(x, {B, N, heads, D / heads}), {0, 2, 1, 3});
}

// [B, heads, N, dh] -> [B, N, heads*dh]
inline Tensor merge_heads(const Tensor& x) {
    const std::size_t B = x.dim(0), H = x.dim(1), N = x.dim(2), dh = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {B, N, H * dh});
}

inline void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
        k.dim(1) != v.dim(1) || q.dim(2) != k.dim(2)) {
        throw ShapeError("attention shape mismatch: q " + to_string(q.shape()) + " k " + to_string(k.shape()) +
                         " v " + to_string(v.shape()));
    }
}

} // namespace detail

// softmax(q k^T / sqrt(dh)) v per head.
inline Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    detail::check_qkv(q, k, v);
    const auto qh = detail::split_heads(q, heads);
    const auto kh = detail::split_heads(k, heads);
    const auto vh = detail::split_heads(v, heads);
    const float s = 1.0f / std::sqrt(static_cast<float>(qh.dim(3)));
    const auto logits = scale(matmul(qh, transpose(kh, 2, 3)), s);
    return detail::merge_heads(matmul(softmax(logits), vh));
}

// Kernelized attention with feature map elu(x)+1:
//   out_i = phi(q_i) (sum_j phi(k_j)^T v_j) / (phi(q_i) . sum_j phi(k_j))
// Denominator is floored at 1e-8.
inline Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
    detail::check_qkv(q, k, v);
    const auto fq = add_scalar(elu(detail::split_heads(q, heads)), 1.0f);
    const auto fk = add_scalar(elu(detail::split_heads(k, heads)), 1.0f);
    const auto vh = detail::split_heads(v, heads);
    const auto kv = matmul(transpose(fk, 2, 3), vh);           // [B,h,dh,dv]
    const auto ksum = sum_axis(fk, 2, /*keepdim=*/true);      // [B,h,1,dh]
    const auto num = matmul(fq, kv);                          // [B,h,N,dv]
    const auto den = matmul(fq, transpose(ksum, 2, 3));       // [B,h,N,1]
    return detail::merge_heads(div(num, clamp_min(den, 1e-8f)));
}

} // namespace lam3d
