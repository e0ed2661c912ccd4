#include "pvera/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "pvera/errors.hpp"

namespace pvera {

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h) {
  if (!(h > 0.0)) throw DomainError("finite_difference_grad: step must be positive");
  Tensor probe = x.detach();
  auto values = probe.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double up = f(probe);
    values[i] = saved - h;
    const double down = f(probe);
    values[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor(x.shape(), std::move(grad));
}

std::vector<std::vector<double>> finite_difference_grad(const std::function<double()>& f,
                                                        std::vector<Tensor> leaves, double h) {
  if (!(h > 0.0)) throw DomainError("finite_difference_grad: step must be positive");
  std::vector<std::vector<double>> grads;
  grads.reserve(leaves.size());
  for (Tensor& leaf : leaves) {
    auto values = leaf.mutable_data();
    std::vector<double> g(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f();
      values[i] = saved - h;
      const double down = f();
      values[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

double max_relative_error(std::span<const double> ad, std::span<const double> fd, double floor) {
  if (ad.size() != fd.size()) {
    throw DimensionError("max_relative_error: " + std::to_string(ad.size()) + " vs " +
                         std::to_string(fd.size()) + " coordinates");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i)
    worst = std::max(worst, std::abs(ad[i] - fd[i]) / (std::abs(fd[i]) + floor));
  return worst;
}

GradCheckReport gradcheck(const std::function<Tensor()>& loss,
                          std::vector<std::pair<std::string, Tensor>> leaves, double h) {
  for (auto& [name, leaf] : leaves) {
    if (!leaf.requires_grad()) throw ContractError("gradcheck: leaf '" + name + "' is frozen");
    leaf.zero_grad();
  }
  backward(loss());

  std::vector<Tensor> handles;
  for (const auto& [name, leaf] : leaves) handles.push_back(leaf);
  const auto fd = finite_difference_grad(
      [&] {
        NoGradGuard no_grad;
        return loss().item();
      },
      handles, h);

  GradCheckReport report;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    const auto& leaf = leaves[i].second;
    std::vector<double> ad(leaf.numel(), 0.0);
    const auto g = leaf.grad();
    std::copy(g.begin(), g.end(), ad.begin());
    GradCheckEntry e;
    e.name = leaves[i].first;
    e.size = ad.size();
    e.max_rel_error = max_relative_error(ad, fd[i]);
    for (double v : ad) e.max_abs_grad = std::max(e.max_abs_grad, std::abs(v));
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace pvera
