#pragma once

#include <cblas.h>

#include <cstdlib>

namespace stf {

namespace gemm_detail {

// Single-threaded BLAS keeps runs bit-reproducible regardless of core count.
// (OPENBLAS_CORETYPE can still be set by the caller when auto-detection picks
// a poor kernel, e.g. in VMs that mask the CPU model.)
inline const bool kBlasConfigured = [] {
  openblas_set_num_threads(1);
  return true;
}();

}  // namespace gemm_detail

// C[m x n] = alpha * A[m x k] (or A^T) * B[k x n] (or B^T) + beta * C, row-major.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace stf
