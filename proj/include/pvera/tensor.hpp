#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pvera {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grad buffers.
  std::function<void(const Node& self)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient tape node.
///
/// Tensors are handles: copying a Tensor shares the underlying node. Values
/// produced by an op are never modified afterwards; only leaves (parameters,
/// inputs) may be written through `mutable_data()`.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  double item() const;
  /// Element (i, j) of a rank-2 tensor.
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const;
  bool is_leaf() const;
  /// Accumulated gradient; empty span when nothing has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  /// Writable view of a leaf's values. Throws ContractError on op outputs.
  std::span<double> mutable_data();
  void set_requires_grad(bool flag);

  /// Same values, fresh leaf, no tape history.
  Tensor detach() const;
  Tensor clone(bool requires_grad = false) const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Op implementation hooks.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, op results on this thread record no tape history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate (call
/// zero_grad between steps); the intermediate graph is released afterwards,
/// so a tape can be consumed exactly once.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Differentiable ops. Matrices are rank-2; "rows" below means the leading
// extent of a rank-2 tensor.

Tensor matmul(const Tensor& a, const Tensor& b);
/// x · Wᵀ + bias with W stored as [out × in]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
/// x[m×n] + v[n] broadcast over rows.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
/// x[m×n] ⊙ v[n] broadcast over rows.
Tensor mul_rowvec(const Tensor& x, const Tensor& v);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
/// Mean over consecutive groups of `group` rows: [(n·group)×d] -> [n×d].
Tensor mean_pool(const Tensor& x, std::size_t group);
Tensor softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
/// Multi-head scaled dot-product attention over `batch` sequences stacked as
/// rows: q, k, v are [(batch·seq)×width]; scale is 1/sqrt(width / heads).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t batch, std::size_t heads);
/// Attention probabilities [batch·heads·seq × seq] (no tape).
Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads);
/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// KL(N(mu, sigma²) || N(0, I)): summed over the last axis, averaged over all
/// leading axes.
Tensor gaussian_kl(const Tensor& mu, const Tensor& sigma);

// ---------------------------------------------------------------------------
// Plain (non-taped) kernels shared by ops and by code that needs raw numbers.

/// C[m×n] (+)= A[m×k] · B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
/// C[m×n] (+)= A[m×k] · B[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
/// C[m×n] (+)= A[k×m]ᵀ · B[k×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);

Tensor transpose(const Tensor& x);

}  // namespace pvera
