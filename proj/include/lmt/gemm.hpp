#pragma once

#include <cstdint>

namespace lmt {

// Fixed-order single-threaded kernels. Loop order keeps the inner axis
// contiguous for both operands so the compiler can vectorize; every variant is
// bitwise deterministic for a given input.

// C[m,n] += A[m,k] * B[k,n]
template <class S>
void gemm_nn(int64_t m, int64_t n, int64_t k, const S *a, const S *b, S *c) {
    for (int64_t i = 0; i < m; ++i) {
        S *crow = c + i * n;
        const S *arow = a + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const S av = arow[l];
            const S *brow = b + l * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A^T * B where A is stored [k,m]
template <class S>
void gemm_tn(int64_t m, int64_t n, int64_t k, const S *a, const S *b, S *c) {
    for (int64_t l = 0; l < k; ++l) {
        const S *arow = a + l * m;
        const S *brow = b + l * n;
        for (int64_t i = 0; i < m; ++i) {
            const S av = arow[i];
            S *crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is stored [n,k]
template <class S>
void gemm_nt(int64_t m, int64_t n, int64_t k, const S *a, const S *b, S *c) {
    for (int64_t i = 0; i < m; ++i) {
        const S *arow = a + i * k;
        S *crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const S *brow = b + j * k;
            S acc = 0;
            for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

}  // namespace lmt
