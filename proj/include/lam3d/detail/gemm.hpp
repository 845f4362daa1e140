#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

namespace lam3d::detail {

// Row-major kernels. All of them accumulate into C. Vectorisation runs across
// output columns, never across a reduction, so results are bit-reproducible.

// 8-lane float vector (GCC/Clang extension); loads and stores go through memcpy.
using f32x8 = float __attribute__((vector_size(32)));

inline f32x8 load8(const float* p) {
    f32x8 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

inline void store8(float* p, f32x8 v) { std::memcpy(p, &v, sizeof v); }

// C[m,n] += A[m,k] * B[k,n]. Full 4x16 output tiles accumulate in registers;
// every output element still sums its k products in order p = 0..k-1.
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* A, const float* B,
                    float* C) {
    constexpr std::size_t MR = 4, NR = 16;
    const std::size_t m_full = m - m % MR, n_full = n - n % NR;
    for (std::size_t i0 = 0; i0 < m_full; i0 += MR) {
        const float* a0 = A + i0 * k;
        const float* a1 = a0 + k;
        const float* a2 = a1 + k;
        const float* a3 = a2 + k;
        for (std::size_t j0 = 0; j0 < n_full; j0 += NR) {
            float* c = C + i0 * n + j0;
            f32x8 c00 = load8(c), c01 = load8(c + 8);
            f32x8 c10 = load8(c + n), c11 = load8(c + n + 8);
            f32x8 c20 = load8(c + 2 * n), c21 = load8(c + 2 * n + 8);
            f32x8 c30 = load8(c + 3 * n), c31 = load8(c + 3 * n + 8);
            const float* b = B + j0;
            for (std::size_t p = 0; p < k; ++p, b += n) {
                const f32x8 b0 = load8(b), b1 = load8(b + 8);
                c00 += a0[p] * b0;
                c01 += a0[p] * b1;
                c10 += a1[p] * b0;
                c11 += a1[p] * b1;
                c20 += a2[p] * b0;
                c21 += a2[p] * b1;
                c30 += a3[p] * b0;
                c31 += a3[p] * b1;
            }
            store8(c, c00);
            store8(c + 8, c01);
            store8(c + n, c10);
            store8(c + n + 8, c11);
            store8(c + 2 * n, c20);
            store8(c + 2 * n + 8, c21);
            store8(c + 3 * n, c30);
            store8(c + 3 * n + 8, c31);
        }
    }
    // Right edge of the full row blocks, then the remaining rows.
    auto rows = [&](std::size_t i_begin, std::size_t i_end, std::size_t j_begin) {
        for (std::size_t i = i_begin; i < i_end; ++i) {
            float* __restrict c = C + i * n;
            const float* a = A + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const float av = a[p];
                const float* __restrict b = B + p * n;
                for (std::size_t j = j_begin; j < n; ++j) c[j] += av * b[j];
            }
        }
    };
    if (n_full < n) rows(0, m_full, n_full);
    rows(m_full, m, 0);
}

inline void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
    constexpr std::size_t tile = 32;
    for (std::size_t r0 = 0; r0 < rows; r0 += tile) {
        for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
            const std::size_t r1 = r0 + tile < rows ? r0 + tile : rows;
            const std::size_t c1 = c0 + tile < cols ? c0 + tile : cols;
            for (std::size_t r = r0; r < r1; ++r)
                for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* A, const float* B,
                    float* C) {
    std::vector<float> at(k * m);
    transpose(m, k, A, at.data());
    gemm_nn(k, n, m, at.data(), B, C);
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* A, const float* B,
                    float* C) {
    std::vector<float> bt(k * n);
    transpose(k, n, B, bt.data());
    gemm_nn(m, k, n, A, bt.data(), C);
}

} // namespace lam3d::detail
