#pragma once

#include <cstddef>

namespace exprbench {

// Small row-major matrix kernels shared by the conv and fc layers. All three
// accumulate into C with a fixed summation order, so results are reproducible
// for a given build. Inner loops run over contiguous rows of B and C and
// auto-vectorize without reassociation.

// C (m x n) += A (m x k) * B (k x n)
template <class T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        T* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j)
                crow[j] += av * brow[j];
        }
    }
}

// C (k x n) += A^T * B, where A is (m x k) and B is (m x n)
template <class T>
void gemm_tn(int m, int n, int k, const T* a, const T* b, T* c) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::size_t>(i) * k;
        const T* brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j)
                crow[j] += av * brow[j];
        }
    }
}

// out-of-place transpose: B (n x m) = A^T for A (m x n)
template <class T>
void transpose(int m, int n, const T* a, T* b) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            b[static_cast<std::size_t>(j) * m + i] =
                a[static_cast<std::size_t>(i) * n + j];
}

} // namespace exprbench
