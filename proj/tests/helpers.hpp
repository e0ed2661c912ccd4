#pragma once

#include <cmath>
#include <vector>

#include "pvera/rng.hpp"
#include "pvera/tensor.hpp"

namespace testing {

inline pvera::Tensor random_tensor(pvera::Shape shape, std::uint64_t seed, double stddev = 1.0,
                                   bool requires_grad = false) {
  pvera::RngStream rng(seed, 0xfeed);
  std::vector<double> v(pvera::shape_numel(shape));
  rng.fill_normal(v, 0.0, stddev);
  return pvera::Tensor(std::move(shape), std::move(v), requires_grad);
}

// Plain triple loop, independent of the blocked kernels.
inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                        std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline std::vector<double> values(const pvera::Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-300));
  return m;
}

}  // namespace testing
