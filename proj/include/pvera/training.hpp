#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pvera/backbone.hpp"
#include "pvera/datasets.hpp"
#include "pvera/gradcheck.hpp"

namespace pvera {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t max_epochs = 500;
  std::size_t patience = 20;
  double rel_tolerance = 1e-3;  // an epoch improves only if val < best · (1 − tol)
  double probe_lr = 1e-4;
  double adapter_lr = 1e-3;
  double weight_decay = 1e-4;
  double beta = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam moments for one parameter group.
struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One AdamW step on every tensor in `params`, reading gradients from the
/// tensors themselves (a missing gradient counts as zero). Weight decay is
/// decoupled: θ ← θ − lr·wd·θ, then the bias-corrected Adam update.
void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr, double weight_decay);

/// Cross entropy plus beta times the sum over layers of the per-layer KL.
/// Latents must be present exactly when the adapter kind is pvera; beta > 0
/// with any other kind is a contract error.
Tensor total_loss(const Tensor& logits, std::span<const int> labels,
                  const std::vector<LayerLatents>& latents, double beta, AdapterKind kind);

/// Sum over layers of kl_layer (the KL term before beta).
Tensor kl_sum(const std::vector<LayerLatents>& latents);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainReport {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  double wall_time_s = 0.0;
  std::size_t optimizer_steps = 0;
};

/// Mean cross entropy and accuracy in deterministic inference.
std::pair<double, double> evaluate_loss(const Model& model, const Dataset& ds,
                                        std::span<const std::size_t> indices,
                                        std::size_t batch_size = 64);

/// Optional per-step observer (after the optimizer update), for tests.
using StepHook = std::function<void(std::size_t step, const Model& model)>;

/// Shuffled mini-batch AdamW training with early stopping on validation
/// loss. On return the model holds the parameters of the epoch with the
/// lowest validation loss. Probe and adapter parameters form two groups
/// with their own learning rates.
TrainReport train(Model& model, const Dataset& ds, const TrainConfig& cfg,
                  const StepHook& hook = {});

/// Overwrites every trainable tensor with N(0, stddev²) draws from
/// (seed, kGradCheck). Freshly initialized adapters have exact zeros (LoRA B,
/// VeRA b) that leave parts of the gradient identically zero, which says
/// nothing about its correctness.
void randomize_trainable(Model& model, std::uint64_t seed, double stddev = 0.1);

/// AD vs central differences on total_loss for one batch. The Train-mode
/// noise is frozen by replaying the sampling stream (noise_seed) on every
/// evaluation. h = 1e-4 balances roundoff against the curvature that exp()
/// adds to the PVeRA sigma head.
GradCheckReport model_gradcheck(const Model& model, const Tensor& tokens, std::span<const int> labels,
                                double beta, std::uint64_t noise_seed, double h = 1e-4);

struct GridSpec {
  std::string param;             // adapter_lr, probe_lr, beta or rank
  std::array<double, 3> values{};

  void validate() const;
};

struct GridTrial {
  double value = 0.0;
  std::size_t value_index = 0;
  std::uint64_t seed = 0;
  double best_val_loss = 0.0;
  std::size_t epochs_run = 0;
};

struct GridReport {
  GridSpec grid;
  std::vector<GridTrial> trials;
  std::vector<std::pair<std::uint64_t, std::size_t>> selected;  // (seed, value index)
  std::array<double, 3> fractions{};
  /// Fraction table in the layout "| | v1 | v2 | v3 |" / "| label | x% | ... |".
  std::string table(const std::string& row_label) const;
};

/// factory(seed, value) builds a fresh model for one trial; TrainConfig
/// fields named by grid.param are overridden with the candidate value.
/// Trials run on up to `jobs` threads; results do not depend on `jobs`.
/// Per seed the candidate with the lowest best validation loss wins, ties
/// going to the earlier candidate.
GridReport grid_search(const std::function<Model(std::uint64_t seed, double value)>& factory,
                       const GridSpec& grid, const Dataset& ds, const TrainConfig& base,
                       std::span<const std::uint64_t> seeds, std::size_t jobs = 1);

}  // namespace pvera
