#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "unembed/kernels.hpp"

namespace unembed {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Log-softmax in the form logprob_i = (z_i - z_top) - log1p(rest), where
// rest = sum_{j != top} exp(z_j - z_top). Keeping the top term out of the sum
// preserves full relative precision for near-zero logprobs, which the
// large-bias recovery formulas depend on.
struct LogSoftmax {
  size_t top;
  double max;
  double log1p_rest;

  double logprob(double z_i) const { return (z_i - max) - log1p_rest; }
};

inline LogSoftmax log_softmax_stats(const double* z, size_t n) {
  const size_t top = kernels::active_ops().argmax(z, n);
  const double m = z[top];
  double rest = 0.0;
  for (size_t j = 0; j < n; ++j) {
    if (j == top) continue;
    rest += std::exp(z[j] - m);
  }
  return LogSoftmax{top, m, std::log1p(rest)};
}

inline double logsumexp(const VectorXd& z) {
  const auto s = log_softmax_stats(z.data(), static_cast<size_t>(z.size()));
  return s.max + s.log1p_rest;
}

inline double median_inplace(std::vector<double>& v) {
  const size_t n = v.size();
  auto mid = v.begin() + n / 2;
  std::nth_element(v.begin(), mid, v.end());
  if (n % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

inline VectorXd quantize_fp16(const VectorXd& x) {
  VectorXd out(x.size());
  kernels::active_ops().round_fp16(x.data(), out.data(), static_cast<size_t>(x.size()));
  return out;
}

inline VectorXd quantize_fp32(const VectorXd& x) {
  VectorXd out(x.size());
  kernels::active_ops().round_fp32(x.data(), out.data(), static_cast<size_t>(x.size()));
  return out;
}

}  // namespace unembed
