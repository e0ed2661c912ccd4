#include "pvera/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "pvera/errors.hpp"

namespace pvera {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
  if (patience == 0) throw ConfigError("patience must be >= 1");
  if (!(rel_tolerance >= 0.0)) throw ConfigError("rel_tolerance must be non-negative");
  if (!(probe_lr >= 0.0) || !(adapter_lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
}

void adamw_step(std::span<Tensor> params, OptimizerState& state, double lr, double weight_decay) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].numel()) {
      throw DimensionError("adamw_step: moment size " + std::to_string(m.size()) +
                           " does not match parameter " + shape_str(params[i].shape()));
    }
    const auto g = params[i].grad();
    auto theta = params[i].mutable_data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      theta[j] -= lr * weight_decay * theta[j];
      theta[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

Tensor kl_sum(const std::vector<LayerLatents>& latents) {
  Tensor total;
  for (const auto& layer : latents) {
    std::vector<GaussianLatent> present;
    for (const auto& l : layer)
      if (l) present.push_back(*l);
    if (present.empty()) continue;
    Tensor kl = kl_layer(present);
    total = total.defined() ? add(total, kl) : kl;
  }
  if (!total.defined()) throw ContractError("kl_sum: no latents");
  return total;
}

Tensor total_loss(const Tensor& logits, std::span<const int> labels,
                  const std::vector<LayerLatents>& latents, double beta, AdapterKind kind) {
  const bool has_latents = std::any_of(latents.begin(), latents.end(), [](const LayerLatents& l) {
    return l[0].has_value() || l[1].has_value() || l[2].has_value();
  });
  if (beta > 0.0 && kind != AdapterKind::Pvera)
    throw ContractError("a KL weight (beta > 0) requires the pvera adapter");
  if (has_latents != (kind == AdapterKind::Pvera))
    throw ContractError("latents must be present exactly for the pvera adapter");
  Tensor ce = cross_entropy(logits, labels);
  if (beta == 0.0) return ce;
  return add(ce, scale(kl_sum(latents), beta));
}

std::pair<double, double> evaluate_loss(const Model& model, const Dataset& ds,
                                        std::span<const std::size_t> indices, std::size_t batch_size) {
  if (indices.empty()) throw InputError("evaluation set is empty");
  NoGradGuard no_grad;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto [tokens, labels] = gather(ds, chunk);
    const auto res = model.forward(tokens, Mode::DetInfer, nullptr);
    loss += cross_entropy(res.logits, labels).item() * static_cast<double>(chunk.size());
    const std::size_t C = res.logits.dim(1);
    const auto lv = res.logits.data();
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto row = lv.subspan(i * C, C);
      const auto arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      correct += arg == labels[i] ? 1 : 0;
    }
  }
  const double n = static_cast<double>(indices.size());
  return {loss / n, static_cast<double>(correct) / n};
}

namespace {

std::vector<Tensor> handles(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

TrainReport train(Model& model, const Dataset& ds, const TrainConfig& cfg, const StepHook& hook) {
  cfg.validate();
  if (ds.train.empty() || ds.val.empty()) throw InputError("training needs non-empty train and val splits");
  if (ds.width() != model.config().d || ds.seq_len() != model.config().seq_len) {
    throw ConfigError("dataset tokens [" + std::to_string(ds.seq_len()) + " x " +
                      std::to_string(ds.width()) + "] do not fit the backbone");
  }
  const auto started = std::chrono::steady_clock::now();
  const AdapterKind kind = model.adapters.kind();

  std::vector<Tensor> probe_params = handles(model.probe_parameters());
  std::vector<Tensor> adapter_params = handles(model.adapter_parameters());
  std::vector<Tensor> all = probe_params;
  all.insert(all.end(), adapter_params.begin(), adapter_params.end());

  OptimizerState probe_state, adapter_state;
  RngStream sampling(cfg.seed, streams::kTrainSampling);

  TrainReport report;
  double best_for_patience = std::numeric_limits<double>::infinity();
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  auto best_values = snapshot(all);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = ds.train;
    RngStream shuffler(cfg.seed, epoch);
    shuffler.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(cfg.batch_size, order.size() - start));
      auto [tokens, labels] = gather(ds, idx);
      for (auto& p : all) p.zero_grad();
      const auto res = model.forward(tokens, Mode::Train, &sampling);
      const Tensor loss = total_loss(res.logits, labels, res.latents, cfg.beta, kind);
      loss_sum += loss.item();
      ++batches;
      backward(loss);
      adamw_step(probe_params, probe_state, cfg.probe_lr, cfg.weight_decay);
      if (!adapter_params.empty())
        adamw_step(adapter_params, adapter_state, cfg.adapter_lr, cfg.weight_decay);
      ++report.optimizer_steps;
      if (hook) hook(report.optimizer_steps, model);
    }

    const auto [val_loss, val_acc] = evaluate_loss(model, ds, ds.val);
    report.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), val_loss, val_acc});
    report.epochs_run = epoch;

    if (val_loss < best_val) {
      best_val = val_loss;
      report.best_epoch = epoch;
      best_values = snapshot(all);
    }
    if (val_loss < best_for_patience * (1.0 - cfg.rel_tolerance)) {
      best_for_patience = val_loss;
      since_improvement = 0;
    } else if (++since_improvement >= cfg.patience) {
      report.stopped_early = true;
      break;
    }
  }

  restore(all, best_values);
  for (auto& p : all) p.zero_grad();
  report.best_val_loss = best_val;
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

void randomize_trainable(Model& model, std::uint64_t seed, double stddev) {
  RngStream rng(seed, streams::kGradCheck);
  for (auto& [name, t] : model.trainable_parameters()) {
    Tensor handle = t;
    rng.fill_normal(handle.mutable_data(), 0.0, stddev);
  }
}

GradCheckReport model_gradcheck(const Model& model, const Tensor& tokens, std::span<const int> labels,
                                double beta, std::uint64_t noise_seed, double h) {
  const AdapterKind kind = model.adapters.kind();
  auto loss = [&] {
    RngStream rng(noise_seed, streams::kTrainSampling);
    const auto res = model.forward(tokens, Mode::Train, &rng);
    return total_loss(res.logits, labels, res.latents, beta, kind);
  };
  return gradcheck(loss, model.trainable_parameters(), h);
}

// ---------------------------------------------------------------------------

void GridSpec::validate() const {
  if (param != "adapter_lr" && param != "probe_lr" && param != "beta" && param != "rank")
    throw ConfigError("grid parameter '" + param + "' (valid: adapter_lr, probe_lr, beta, rank)");
}

std::string GridReport::table(const std::string& row_label) const {
  std::ostringstream os;
  os << "| |";
  for (double v : grid.values) {
    char buf[32];
    std::snprintf(buf, sizeof buf, " %g |", v);
    os << buf;
  }
  os << "\n| " << row_label << " |";
  for (double f : fractions) os << ' ' << static_cast<long>(std::lround(100.0 * f)) << "% |";
  os << '\n';
  return os.str();
}

GridReport grid_search(const std::function<Model(std::uint64_t seed, double value)>& factory,
                       const GridSpec& grid, const Dataset& ds, const TrainConfig& base,
                       std::span<const std::uint64_t> seeds, std::size_t jobs) {
  grid.validate();
  if (seeds.empty()) throw ConfigError("grid search needs at least one seed");
  GridReport report;
  report.grid = grid;
  const std::size_t n = seeds.size() * grid.values.size();
  report.trials.resize(n);

  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t t = next++; t < n; t = next++) {
      try {
        GridTrial trial;
        trial.seed = seeds[t / grid.values.size()];
        trial.value_index = t % grid.values.size();
        trial.value = grid.values[trial.value_index];
        TrainConfig cfg = base;
        cfg.seed = trial.seed;
        if (grid.param == "adapter_lr") cfg.adapter_lr = trial.value;
        if (grid.param == "probe_lr") cfg.probe_lr = trial.value;
        if (grid.param == "beta") cfg.beta = trial.value;
        Model model = factory(trial.seed, trial.value);
        const TrainReport r = train(model, ds, cfg);
        trial.best_val_loss = r.best_val_loss;
        trial.epochs_run = r.epochs_run;
        report.trials[t] = trial;
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, n);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);

  std::array<std::size_t, 3> wins{};
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < grid.values.size(); ++v) {
      if (report.trials[s * 3 + v].best_val_loss < report.trials[s * 3 + best].best_val_loss) best = v;
    }
    report.selected.emplace_back(seeds[s], best);
    ++wins[best];
  }
  for (std::size_t v = 0; v < 3; ++v)
    report.fractions[v] = static_cast<double>(wins[v]) / static_cast<double>(seeds.size());
  return report;
}

}  // namespace pvera
