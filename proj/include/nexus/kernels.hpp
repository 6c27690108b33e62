// SPDX-License-Identifier: Apache-2.0
//
// Row-major GEMM kernels. Each output element accumulates its inner
// products in ascending index order, independent of the row's position in
// the batch, so identical input rows always yield bit-identical output rows.

#pragma once

#include <algorithm>
#include <cstddef>

namespace nexus::kernels {

/// C[M,N] (+)= A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A,
             const T* __restrict B, T* __restrict C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (std::size_t i = 0; i < M; ++i) {
    T* __restrict c = C + i * N;
    const T* __restrict a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      const T* __restrict b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

/// C[K,N] += A[M,K]^T * D[M,N]
template <typename T>
void gemm_tn_acc(std::size_t M, std::size_t K, std::size_t N, const T* __restrict A,
                 const T* __restrict D, T* __restrict C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* __restrict a = A + i * K;
    const T* __restrict d = D + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      T* __restrict c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * d[j];
    }
  }
}

/// dst[cols,rows] = src[rows,cols]^T
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* __restrict src, T* __restrict dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace nexus::kernels
