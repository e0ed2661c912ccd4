#include "pvera/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "pvera/errors.hpp"

namespace pvera {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor handle

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<double>{value}, requires_grad);
}

namespace {
const Node& checked(const NodePtr& n) {
  if (!n) throw ContractError("use of an undefined tensor");
  return *n;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  const auto& s = shape();
  if (s.size() != 2 || i >= s[0] || j >= s[1]) {
    throw IndexError("at(" + std::to_string(i) + ", " + std::to_string(j) + ") on " +
                     shape_str(s));
  }
  return node_->value[i * s[1] + j];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }
bool Tensor::is_leaf() const { return checked(node_).leaf; }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

std::span<double> Tensor::mutable_data() {
  if (!checked(node_).leaf) throw ContractError("mutable_data() on a non-leaf tensor");
  return node_->value;
}

void Tensor::set_requires_grad(bool flag) {
  if (!checked(node_).leaf) throw ContractError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

Tensor Tensor::detach() const { return clone(false); }

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = checked(node_);
  return Tensor(n.shape, n.value, requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
thread_local bool tls_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }
bool grad_enabled() { return tls_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward() on an undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const NodePtr& root = loss.node();
  if (!root->requires_grad) throw ContractError("backward() on a tensor that is not on the tape");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->leaf) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->requires_grad = false;
  }
}

namespace {

/// Builds an op result. The backward closure is only kept when some input is
/// on the tape, so frozen computations never record history.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(const Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->leaf = false;
  const bool any = tls_grad_enabled && std::any_of(parents.begin(), parents.end(),
                               [](const NodePtr& p) { return p && p->requires_grad; });
  if (any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto pa = a.node(), pb = b.node();
  return make_result({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](const Node& self) {
    if (pa->requires_grad)
      gemm_nt(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), m, n, k, true);
    if (pb->requires_grad)
      gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), k, m, n, true);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(0);
  if (weight.dim(1) != k) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  // Transposed copy of W keeps the hot loop contiguous.
  std::vector<double> wt(k * n);
  const auto w = weight.data();
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) wt[p * n + j] = w[j * k + p];
  std::vector<double> out(m * n);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv.begin(), bv.end(), out.begin() + i * n);
  }
  gemm_nn(x.data().data(), wt.data(), out.data(), m, k, n, bias.defined());
  auto px = x.node(), pw = weight.node();
  NodePtr pbias = bias.defined() ? bias.node() : nullptr;
  return make_result({m, n}, std::move(out), {px, pw, pbias},
                     [px, pw, pbias, m, k, n](const Node& self) {
                       const double* g = self.grad.data();
                       if (px->requires_grad)
                         gemm_nn(g, pw->value.data(), px->grad_buffer().data(), m, n, k, true);
                       if (pw->requires_grad)
                         gemm_tn(g, px->value.data(), pw->grad_buffer().data(), n, m, k, true);
                       if (pbias && pbias->requires_grad) {
                         auto& gb = pbias->grad_buffer();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](const Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](const Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return make_result(a.shape(), std::move(out), {pa, pb}, [pa, pb](const Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& x : out) x *= factor;
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {pa}, [pa, factor](const Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& x : out) x = std::exp(x);
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {pa}, [pa](const Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

Tensor gelu(const Tensor& a) {
  // Exact form x·Φ(x).
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double kInvSqrt2Pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  std::vector<double> out(a.numel());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
  auto pa = a.node();
  return make_result(a.shape(), std::move(out), {pa}, [pa, kInvSqrt2Pi](const Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = pa->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      g[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "add_rowvec");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (v.numel() != n) {
    throw DimensionError("add_rowvec: " + shape_str(v.shape()) + " does not broadcast over " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += vv[j];
  auto px = x.node(), pv = v.node();
  return make_result(x.shape(), std::move(out), {px, pv}, [px, pv, m, n](const Node& self) {
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "mul_rowvec");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (v.numel() != n) {
    throw DimensionError("mul_rowvec: " + shape_str(v.shape()) + " does not broadcast over " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto vv = v.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= vv[j];
  auto px = x.node(), pv = v.node();
  return make_result(x.shape(), std::move(out), {px, pv}, [px, pv, m, n](const Node& self) {
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * pv->value[j];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j] * px->value[i * n + j];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin + count > n) {
    throw IndexError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(m * count);
  const auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.begin() + i * n + begin, count, out.begin() + i * count);
  auto px = x.node();
  return make_result({m, count}, std::move(out), {px}, [px, m, n, begin, count](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += self.grad[i * count + j];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto px = x.node();
  return make_result(std::move(shape), std::move(out), {px}, [px](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  auto px = x.node();
  return make_result({n, m}, std::move(out), {px}, [px, m, n](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto px = x.node();
  return make_result({}, {s}, {px}, [px](const Node& self) {
    auto& g = px->grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean_pool(const Tensor& x, std::size_t group) {
  require_rank(x, 2, "mean_pool");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (group == 0 || rows % group != 0) {
    throw DimensionError("mean_pool: " + std::to_string(rows) + " rows do not split into groups of " +
                         std::to_string(group));
  }
  const std::size_t n = rows / group;
  const double inv = 1.0 / static_cast<double>(group);
  std::vector<double> out(n * d, 0.0);
  const auto xv = x.data();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t t = 0; t < group; ++t)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xv[(s * group + t) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] *= inv;
  }
  auto px = x.node();
  return make_result({n, d}, std::move(out), {px}, [px, n, d, group, inv](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t t = 0; t < group; ++t)
        for (std::size_t j = 0; j < d; ++j) g[(s * group + t) * d + j] += self.grad[s * d + j] * inv;
  });
}

namespace {

void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}

// dx = y ⊙ (dy − <dy, y>) for one softmax row.
void softmax_row_backward(const double* y, const double* dy, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  const auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) softmax_row(xv.data() + i * n, out.data() + i * n, n);
  auto px = x.node();
  return make_result(x.shape(), std::move(out), {px}, [px, m, n](const Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      softmax_row_backward(self.value.data() + i * n, self.grad.data() + i * n, g.data() + i * n, n);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " does not fit " + shape_str(x.shape()));
  }
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  std::vector<double> out(m * d), xhat(m * d), rstd(m);
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mean) * rstd[i];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, m, d, xhat = std::move(xhat), rstd = std::move(rstd)](const Node& self) {
        const double* dy = self.grad.data();
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j] * xhat[i * d + j];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dy[i * d + j];
        }
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[i * d + j] * pg->value[j];
              s1 += dxh;
              s2 += dxh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = dy[i * d + j] * pg->value[j];
              g[i * d + j] += rstd[i] * (dxh - inv_d * s1 - xhat[i * d + j] * inv_d * s2);
            }
          }
        }
      });
}

namespace {

struct AttentionDims {
  std::size_t batch, seq, width, heads, head_dim;
};

AttentionDims attention_dims(const Tensor& q, const Tensor& k, const Tensor* v, std::size_t batch,
                             std::size_t heads) {
  require_rank(q, 2, "attention");
  require_same_shape(q, k, "attention");
  if (v) require_same_shape(q, *v, "attention");
  const std::size_t rows = q.dim(0), width = q.dim(1);
  if (batch == 0 || rows % batch != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows do not split into " +
                         std::to_string(batch) + " sequences");
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) +
                         " is not divisible by head count " + std::to_string(heads));
  }
  return {batch, rows / batch, width, heads, width / heads};
}

// Probabilities P[b,h] (seq×seq), packed as [(b·heads + h)·seq + i]·seq + j.
std::vector<double> attention_probs(const double* q, const double* k, const AttentionDims& a) {
  const std::size_t L = a.seq, W = a.width, dh = a.head_dim;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> probs(a.batch * a.heads * L * L);
  std::vector<double> scores(L);
  for (std::size_t b = 0; b < a.batch; ++b)
    for (std::size_t h = 0; h < a.heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        const double* qi = q + (b * L + i) * W + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          const double* kj = k + (b * L + j) * W + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * sc;
        }
        softmax_row(scores.data(), probs.data() + ((b * a.heads + h) * L + i) * L, L);
      }
  return probs;
}

}  // namespace

Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads) {
  const auto a = attention_dims(q, k, nullptr, batch, heads);
  auto probs = attention_probs(q.data().data(), k.data().data(), a);
  return Tensor({a.batch * a.heads * a.seq, a.seq}, std::move(probs));
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                            std::size_t heads) {
  const auto a = attention_dims(q, k, &v, batch, heads);
  const std::size_t L = a.seq, W = a.width, dh = a.head_dim;
  auto probs = attention_probs(q.data().data(), k.data().data(), a);
  std::vector<double> out(batch * L * W, 0.0);
  const double* vv = v.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < L; ++i) {
        const double* p = probs.data() + ((b * heads + h) * L + i) * L;
        double* oi = out.data() + (b * L + i) * W + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          const double* vj = vv + (b * L + j) * W + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return make_result(
      q.shape(), std::move(out), {pq, pk, pv},
      [pq, pk, pv, a, probs = std::move(probs)](const Node& self) {
        const std::size_t L = a.seq, W = a.width, dh = a.head_dim;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        const double* dout = self.grad.data();
        double* gq = pq->requires_grad ? pq->grad_buffer().data() : nullptr;
        double* gk = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
        double* gv = pv->requires_grad ? pv->grad_buffer().data() : nullptr;
        std::vector<double> dp(L), ds(L);
        for (std::size_t b = 0; b < a.batch; ++b)
          for (std::size_t h = 0; h < a.heads; ++h)
            for (std::size_t i = 0; i < L; ++i) {
              const double* p = probs.data() + ((b * a.heads + h) * L + i) * L;
              const double* doi = dout + (b * L + i) * W + h * dh;
              for (std::size_t j = 0; j < L; ++j) {
                const double* vj = pv->value.data() + (b * L + j) * W + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
                dp[j] = s;
                if (gv) {
                  double* gvj = gv + (b * L + j) * W + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * doi[c];
                }
              }
              std::fill(ds.begin(), ds.end(), 0.0);
              softmax_row_backward(p, dp.data(), ds.data(), L);
              const double* qi = pq->value.data() + (b * L + i) * W + h * dh;
              for (std::size_t j = 0; j < L; ++j) {
                const double dsij = ds[j] * sc;
                const double* kj = pk->value.data() + (b * L + j) * W + h * dh;
                if (gq) {
                  double* gqi = gq + (b * L + i) * W + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsij * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (b * L + j) * W + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsij * qi[c];
                }
              }
            }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  if (b == 0) throw DimensionError("cross_entropy: empty batch");
  std::vector<double> probs(b * c);
  const auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    const double* row = lv.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[y];
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - lse);
  }
  std::vector<int> ys(labels.begin(), labels.end());
  auto pl = logits.node();
  return make_result({}, {total / static_cast<double>(b)}, {pl},
                     [pl, b, c, ys = std::move(ys), probs = std::move(probs)](const Node& self) {
                       auto& g = pl->grad_buffer();
                       const double s = self.grad[0] / static_cast<double>(b);
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t j = 0; j < c; ++j) {
                           const double onehot = static_cast<int>(j) == ys[i] ? 1.0 : 0.0;
                           g[i * c + j] += s * (probs[i * c + j] - onehot);
                         }
                     });
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& sigma) {
  require_same_shape(mu, sigma, "gaussian_kl");
  if (mu.numel() == 0) throw DimensionError("gaussian_kl: empty latent");
  const std::size_t latent = mu.rank() == 0 ? 1 : mu.shape().back();
  const std::size_t rows = mu.numel() / latent;
  const auto mv = mu.data(), sv = sigma.data();
  double total = 0.0;
  for (std::size_t i = 0; i < mv.size(); ++i) {
    const double s = sv[i];
    if (!(s > 0.0)) {
      throw DomainError("gaussian_kl: sigma must be positive, got " + std::to_string(s));
    }
    total += 0.5 * (s * s + mv[i] * mv[i] - 1.0 - 2.0 * std::log(s));
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  auto pm = mu.node(), ps = sigma.node();
  return make_result({}, {total * inv_rows}, {pm, ps}, [pm, ps, inv_rows](const Node& self) {
    const double g0 = self.grad[0] * inv_rows;
    if (pm->requires_grad) {
      auto& g = pm->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pm->value[i];
    }
    if (ps->requires_grad) {
      auto& g = ps->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = ps->value[i];
        g[i] += g0 * (s - 1.0 / s);
      }
    }
  });
}

}  // namespace pvera
