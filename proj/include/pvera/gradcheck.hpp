#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pvera/tensor.hpp"

namespace pvera {

/// Central-difference gradient of a tensor-to-scalar function at x.
/// f receives a perturbed copy of x and must be deterministic.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h = 1e-5);

/// Central differences with respect to leaves that f reads implicitly (model
/// parameters). Each leaf is perturbed in place and restored exactly.
std::vector<std::vector<double>> finite_difference_grad(const std::function<double()>& f,
                                                        std::vector<Tensor> leaves,
                                                        double h = 1e-5);

/// |ad - fd| / (|fd| + floor), maximized over coordinates.
double max_relative_error(std::span<const double> ad, std::span<const double> fd,
                          double floor = 1e-8);

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

/// Runs `loss()` once on the tape, backpropagates, and compares every named
/// leaf's gradient against central differences of `loss()` values.
GradCheckReport gradcheck(const std::function<Tensor()>& loss,
                          std::vector<std::pair<std::string, Tensor>> leaves,
                          double h = 1e-5);

}  // namespace pvera
