#pragma once

#include <Eigen/Core>
#include <cstdint>

namespace jl1 {

// C = beta * C + op(A) * op(B) on row-major buffers, with op() an
// optional transpose. Thin wrapper over Eigen so the autodiff ops never
// touch Eigen types directly. Single-threaded by construction (the
// whole project runs on one core; determinism requires a fixed
// reduction order).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
          std::int64_t k, const T* a, const T* b, T beta, T* c) {
  using Mat =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;

  CMap A(a, trans_a ? k : m, trans_a ? m : k);
  CMap B(b, trans_b ? n : k, trans_b ? k : n);
  MMap C(c, m, n);

  if (beta == T(0)) {
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else
      C.noalias() = A.transpose() * B.transpose();
  } else {
    if (beta != T(1)) C *= beta;
    if (!trans_a && !trans_b)
      C.noalias() += A * B;
    else if (trans_a && !trans_b)
      C.noalias() += A.transpose() * B;
    else if (!trans_a && trans_b)
      C.noalias() += A * B.transpose();
    else
      C.noalias() += A.transpose() * B.transpose();
  }
}

}  // namespace jl1
