// SPDX-License-Identifier: Apache-2.0
//
// Plain GEMM loops. Every output element is reduced over its inner index
// in ascending order regardless of the number of rows or of how the
// operands are strided, so a row computed inside a large batch is
// bit-identical to the same row computed alone, and a strided weight view
// gives the same bits as a materialized copy of it.
#pragma once

#include <cstddef>
#include <vector>

namespace versatile::kernels {

/// C[M,N] += A[M,K] * B[K,N].
template <typename Real>
void gemm(std::size_t M, std::size_t K, std::size_t N, const Real* A, std::size_t lda, const Real* B,
          std::size_t ldb, Real* C, std::size_t ldc) {
  for (std::size_t i = 0; i < M; ++i) {
    Real* c = C + i * ldc;
    const Real* a = A + i * lda;
    for (std::size_t k = 0; k < K; ++k) {
      const Real aik = a[k];
      const Real* b = B + k * ldb;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

/// dB[K,N] += A[M,K]^T * G[M,N], reduced over M ascending.
template <typename Real>
void gemm_at_b(std::size_t M, std::size_t K, std::size_t N, const Real* A, std::size_t lda, const Real* G,
               std::size_t ldg, Real* dB, std::size_t ldb) {
  for (std::size_t i = 0; i < M; ++i) {
    const Real* a = A + i * lda;
    const Real* g = G + i * ldg;
    for (std::size_t k = 0; k < K; ++k) {
      const Real aik = a[k];
      Real* db = dB + k * ldb;
      for (std::size_t j = 0; j < N; ++j) db[j] += aik * g[j];
    }
  }
}

/// dA[M,K] += G[M,N] * B[K,N]^T, reduced over N ascending.
template <typename Real>
void gemm_a_bt(std::size_t M, std::size_t K, std::size_t N, const Real* G, std::size_t ldg, const Real* B,
               std::size_t ldb, Real* dA, std::size_t lda) {
  std::vector<Real> bt(N * K);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t j = 0; j < N; ++j) bt[j * K + k] = B[k * ldb + j];
  }
  gemm(M, N, K, G, ldg, bt.data(), K, dA, lda);
}

}  // namespace versatile::kernels
