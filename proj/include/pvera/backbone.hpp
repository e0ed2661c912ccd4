#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pvera/adapters.hpp"
#include "pvera/config.hpp"
#include "pvera/rng.hpp"
#include "pvera/tensor.hpp"

namespace pvera {

/// Frozen weights of one pre-norm encoder layer. Projections are stored
/// [out × in] and applied as x · Wᵀ + b.
struct EncoderLayerWeights {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v;
  Tensor w_o, b_o;
  Tensor w_mlp1, b_mlp1;  // [hidden × d]
  Tensor w_mlp2, b_mlp2;  // [d × hidden]
  Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;

  const Tensor& weight(Branch b) const;
  const Tensor& bias(Branch b) const;
  Tensor& weight(Branch b);
};

/// The frozen encoder: layers plus the fixed sinusoidal positional table.
struct BackboneState {
  BackboneConfig config;
  std::vector<EncoderLayerWeights> layers;
  Tensor positional;  // [seq_len × d]
  std::uint64_t seed = 0;

  /// Weights ~ N(0, 0.02²) from (seed, kBackboneInit); biases 0; layer norms identity.
  static BackboneState generate(const BackboneConfig& config, std::uint64_t seed);

  /// Every frozen tensor under a stable name ("layer{i}.w_q", ..., "positional").
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  /// Deep copy, used when merging writes new projection weights.
  BackboneState clone() const;
};

Tensor sinusoidal_positions(std::size_t seq_len, std::size_t d);

/// Trainable classification head on mean-pooled tokens: logits = pooled · W + b.
struct LinearProbe {
  Tensor w_head;  // [d × C]
  Tensor b_head;  // [C]

  static LinearProbe create(std::size_t d, std::size_t n_classes, std::uint64_t seed);
  Tensor forward(const Tensor& pooled) const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  LinearProbe clone() const;
};

/// Latents produced by the PVeRA branches of one layer, indexed by Branch.
using LayerLatents = std::array<std::optional<GaussianLatent>, 3>;

struct QkvResult {
  Tensor q, k, v;
  LayerLatents latents;
};

/// Frozen affine Q/K/V maps plus each attached adapter's additive term.
QkvResult qkv_project(const Tensor& x, const EncoderLayerWeights& layer, const AdapterSet* adapters,
                      std::size_t layer_index, Mode mode, RngStream* rng);

/// Per-head softmax(Q Kᵀ / sqrt(d / heads)) V, heads concatenated. Inputs are
/// [(batch·seq) × d]; the output projection is applied by the caller.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::size_t batch);

struct ForwardResult {
  Tensor logits;                     // [batch × C]
  std::vector<LayerLatents> latents;  // one entry per layer
};

/// tokens [batch × seq × d] -> logits. Train and ProbInfer draw fresh noise for
/// every PVeRA site from rng; DetInfer consumes no randomness.
ForwardResult backbone_forward(const Tensor& tokens, const BackboneState& state,
                               const LinearProbe& probe, const AdapterSet* adapters, Mode mode,
                               RngStream* rng);

/// A frozen backbone, its trainable probe, and its adapters.
struct Model {
  std::shared_ptr<const BackboneState> backbone;
  LinearProbe probe;
  AdapterSet adapters;
  std::uint64_t seed = 0;

  /// Backbone from backbone_seed, probe and adapters from seed.
  static Model create(const BackboneConfig& backbone, const AdapterConfig& adapter,
                      std::uint64_t seed, std::uint64_t backbone_seed);

  const BackboneConfig& config() const { return backbone->config; }
  ForwardResult forward(const Tensor& tokens, Mode mode, RngStream* rng) const;

  std::vector<std::pair<std::string, Tensor>> probe_parameters() const { return probe.named_parameters(); }
  std::vector<std::pair<std::string, Tensor>> adapter_parameters() const { return adapters.named_parameters(); }
  std::vector<std::pair<std::string, Tensor>> trainable_parameters() const;

  /// Copy with independent trainable tensors (backbone and basis shared).
  Model clone() const;

  /// Folds every adapter into the projection weights (deterministic
  /// inference semantics). Throws StateError when already merged and
  /// ContractError for a linear probe.
  Model merged() const;
};

}  // namespace pvera
