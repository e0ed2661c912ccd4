#pragma once

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "pvera/config.hpp"
#include "pvera/rng.hpp"
#include "pvera/tensor.hpp"

namespace pvera {

/// Frozen random projections shared by every layer and branch.
/// A is [d × k·r] (k = 2 for PVeRA, 1 for VeRA), B is [r × d]. Entries are
/// N(0, 1/d) draws from (seed, streams::kBasisInit): all of A, then all of B.
struct SharedBasis {
  Tensor a;
  Tensor b;
  std::uint64_t seed = 0;

  static SharedBasis generate(std::size_t d, std::size_t rank, AdapterKind kind, std::uint64_t seed);
  std::size_t rank() const { return b.dim(0); }
  /// The first r columns of A (the mean head of a PVeRA basis) with B unchanged.
  SharedBasis mu_half() const;
};

struct LoraParams {
  Tensor a;  // [d × r], seeded Gaussian
  Tensor b;  // [r × d], zero at init
};

/// Per-(layer, branch) scaling vectors. For VeRA d_vec has r entries, for
/// PVeRA 2r (mean half then log-sigma half).
struct ScalingParams {
  Tensor d_vec;
  Tensor b_vec;
};
using VeraParams = ScalingParams;
using PVeraParams = ScalingParams;

using BranchParams = std::variant<LoraParams, ScalingParams>;

/// Diagonal Gaussian over the latent, one row per token: mu, sigma [rows × r].
struct GaussianLatent {
  Tensor mu;
  Tensor sigma;
};

/// (alpha / r) · x · A · B — the additive LoRA term.
Tensor lora_forward(const Tensor& x, const LoraParams& p, double alpha, std::size_t rank);

/// alpha · (((x · A) ⊙ d) · B) ⊙ b — the additive VeRA term.
Tensor vera_forward(const Tensor& x, const SharedBasis& basis, const VeraParams& p, double alpha);

/// h = (x · A) ⊙ d; mu is the first r columns of h and sigma = exp of the
/// last r columns (the second head emits log sigma).
GaussianLatent pvera_heads(const Tensor& x, const SharedBasis& basis, const PVeraParams& p);

/// z = mu + noise_scale · eps ⊙ sigma with eps drawn row-major from rng.
/// noise_scale == 0 returns mu and draws nothing.
Tensor reparameterize(const GaussianLatent& latent, RngStream& rng, double noise_scale = 1.0);

struct PVeraOutput {
  Tensor delta;
  GaussianLatent latent;
};

/// alpha · (z · B) ⊙ b with z sampled (Train, ProbInfer) or z = mu (DetInfer).
/// rng may be null in DetInfer; it is never touched in that mode.
PVeraOutput pvera_forward(const Tensor& x, const SharedBasis& basis, const PVeraParams& p,
                          double alpha, Mode mode, RngStream* rng, double noise_scale = 1.0);

/// Mean over the given branches of the per-branch Gaussian KL.
Tensor kl_layer(std::span<const GaussianLatent> latents);

/// The dense map M with adapter(x) == x · M in deterministic inference.
Tensor adapter_dense_map(const BranchParams& params, const AdapterConfig& cfg,
                         const SharedBasis* basis);

/// W + Mᵀ for a [out × in] weight used as x · Wᵀ, so that the merged affine
/// map reproduces the frozen branch plus the deterministic adapter term.
Tensor merge_weights(const Tensor& weight, const BranchParams& params, const AdapterConfig& cfg,
                     const SharedBasis* basis);

/// Trainable adapter parameters (the linear probe is excluded).
std::size_t count_trainable_params(const AdapterConfig& cfg, const BackboneConfig& backbone);
std::size_t count_probe_params(const BackboneConfig& backbone);

/// Everything a branch adapter contributed during one forward pass.
struct BranchResult {
  Tensor delta;                         // undefined when no adapter is attached
  std::optional<GaussianLatent> latent;  // PVeRA only
};

/// All adapters of one model: per layer, an optional adapter on each of Q, K, V.
class AdapterSet {
 public:
  AdapterSet() = default;

  /// Fresh adapters in their initial state. The basis comes from
  /// cfg.basis_seed; per-branch init uses (seed, kAdapterInit + 4·layer + branch).
  static AdapterSet create(const AdapterConfig& cfg, const BackboneConfig& backbone,
                           std::uint64_t seed);

  const AdapterConfig& config() const { return config_; }
  AdapterKind kind() const { return config_.kind; }
  const std::shared_ptr<const SharedBasis>& basis() const { return basis_; }
  void set_basis(std::shared_ptr<const SharedBasis> basis) { basis_ = std::move(basis); }
  std::size_t n_layers() const { return layers_.size(); }

  bool attached(std::size_t layer, Branch branch) const;
  const BranchParams& params(std::size_t layer, Branch branch) const;
  BranchParams& params(std::size_t layer, Branch branch);
  void set_params(std::size_t layer, Branch branch, BranchParams params);

  /// Once merged the adapters are folded into backbone weights and are not applied.
  bool merged() const { return merged_; }
  void mark_merged() { merged_ = true; }

  /// Multiplier on the sampled noise (1 = the learned sigma, 0 = z fixed at mu).
  double noise_scale() const { return noise_scale_; }
  void set_noise_scale(double s) { noise_scale_ = s; }

  /// Adapter contribution for one branch of one layer on input x [rows × d].
  BranchResult apply(std::size_t layer, Branch branch, const Tensor& x, Mode mode,
                     RngStream* rng) const;

  /// Trainable leaves named "layer{i}.{q|k|v}.{a|b|d|b_vec}".
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  /// Deep copy of the trainable tensors; the frozen basis stays shared.
  AdapterSet clone() const;

 private:
  AdapterConfig config_;
  std::shared_ptr<const SharedBasis> basis_;
  std::vector<std::array<std::optional<BranchParams>, 3>> layers_;
  bool merged_ = false;
  double noise_scale_ = 1.0;
};

}  // namespace pvera
