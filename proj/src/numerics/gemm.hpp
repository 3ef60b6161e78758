#pragma once

#include <cstddef>

namespace msinet::detail {

// C[M,N] += op(A) op(B) with op(A) of shape [M,K] and op(B) of shape [K,N].
// A is stored [K,M] when transpose_a, B is stored [N,K] when transpose_b.
template <typename T>
void gemm_acc(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
              const T* b, T* c) {
  if (!transpose_b) {
    for (std::size_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = transpose_a ? a[p * m + i] : a[i * k + p];
        if (aip == T(0)) continue;
        const T* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      if (transpose_a) {
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
      } else {
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      }
      crow[j] += acc;
    }
  }
}

// Gradients of C = op(A) op(B) given dC.
template <typename T>
void gemm_backward(bool transpose_a, bool transpose_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
                   const T* b, const T* dc, T* da, T* db) {
  if (da) {
    if (!transpose_a)
      gemm_acc(false, !transpose_b, m, k, n, dc, b, da);
    else
      gemm_acc(transpose_b, true, k, m, n, b, dc, da);
  }
  if (db) {
    if (!transpose_b)
      gemm_acc(!transpose_a, false, k, n, m, a, dc, db);
    else
      gemm_acc(true, transpose_a, n, k, m, dc, a, db);
  }
}

}  // namespace msinet::detail
