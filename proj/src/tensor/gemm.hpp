#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace bicap::detail {

// C[M, N] (+)= op(A) * op(B), all buffers row-major. A is stored [M, K]
// (or [K, M] when trans_a), B is stored [K, N] (or [N, K] when trans_b).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<const Mat>;
  const auto M = static_cast<Eigen::Index>(m);
  const auto N = static_cast<Eigen::Index>(n);
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> cm(c, M, N);
  const Map am(a, trans_a ? K : M, trans_a ? M : K);
  const Map bm(b, trans_b ? N : K, trans_b ? K : N);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(am, bm);
  } else if (trans_a && !trans_b) {
    run(am.transpose(), bm);
  } else if (!trans_a && trans_b) {
    run(am, bm.transpose());
  } else {
    run(am.transpose(), bm.transpose());
  }
}

}  // namespace bicap::detail
