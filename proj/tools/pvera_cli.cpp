// pvera: generate data, train adapters, merge, evaluate and verify.
//
// Every subcommand prints one JSON summary line on stdout and writes its
// detailed outputs (plus manifest.json) into --out. Exit codes: 0 success,
// 2 bad configuration, 3 missing or malformed input, 4 invalid state
// (e.g. merging twice), 5 a verification check failed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pvera/checkpoint.hpp"
#include "pvera/errors.hpp"
#include "pvera/evaluation.hpp"
#include "pvera/pvt_io.hpp"
#include "pvera/training.hpp"
#include "pvera/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pvera;

namespace {

constexpr int kExitConfig = 2;

// ---------------------------------------------------------------------------
// Config files: flat key=value lines, '#' comments. Keys are long flag names.
// The pairs are spliced in ahead of the real arguments so flags given on the
// command line win (every option keeps its last value).

std::vector<std::string> config_tokens(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw MissingInputError("config file not found: " + file.string());
  std::vector<std::string> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(file.string() + ":" + std::to_string(n) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(file.string() + ":" + std::to_string(n) + ": empty key");
    out.push_back("--" + key);
    out.push_back(trim(line.substr(eq + 1)));
  }
  return out;
}

std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string file;
    std::size_t consumed = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[i + 1];
      consumed = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
      consumed = 1;
    } else {
      continue;
    }
    args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i + consumed));
    const auto tokens = config_tokens(file);
    // Right after the subcommand name, before any explicit flag.
    const auto at = args.empty() ? args.begin() : args.begin() + 1;
    args.insert(at, tokens.begin(), tokens.end());
    break;
  }
  return args;
}

// ---------------------------------------------------------------------------

std::string display_name(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::LinearProbe: return "Linear";
    case AdapterKind::Lora: return "LoRA";
    case AdapterKind::Vera: return "VeRA";
    case AdapterKind::Pvera: return "PVeRA";
  }
  return "?";
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingInputError("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// A checkpoint directory, or a run directory holding one under checkpoint/.
fs::path checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "checkpoint" / "manifest.json")) return p / "checkpoint";
  return p;
}

std::vector<std::size_t> select_split(const Dataset& ds, const std::string& which) {
  if (which == "train") return ds.train;
  if (which == "val") return ds.val;
  if (which == "test") return ds.test;
  if (which == "all") {
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  throw ConfigError("split '" + which + "' (valid: train, val, test, all)");
}

std::vector<std::size_t> nonempty_split(const Dataset& ds, const std::string& which) {
  auto idx = select_split(ds, which);
  if (idx.empty()) throw InputError("the " + which + " split of the dataset is empty");
  return idx;
}

void check_fits(const Model& m, const Dataset& ds) {
  const auto& c = m.config();
  if (ds.width() != c.d || ds.seq_len() != c.seq_len || ds.n_classes != c.n_classes) {
    throw ConfigError("dataset (seq_len " + std::to_string(ds.seq_len()) + ", d " + std::to_string(ds.width()) +
                      ", " + std::to_string(ds.n_classes) + " classes) does not fit the model (seq_len " +
                      std::to_string(c.seq_len) + ", d " + std::to_string(c.d) + ", " +
                      std::to_string(c.n_classes) + " classes)");
  }
}

/// Run provenance written next to every command's outputs.
struct RunManifest {
  std::string command;
  json config = json::object();
  json seeds = json::object();
  json inputs = json::object();
  json outputs = json::array();
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  json to_json() const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return {{"command", command}, {"config", config},     {"seeds", seeds},     {"inputs", inputs},
            {"outputs", outputs}, {"version", kVersion}, {"wall_time_s", wall}};
  }
  void write(const fs::path& dir) const { write_json(dir / "manifest.json", to_json()); }
};

// ---------------------------------------------------------------------------
// Options shared by several subcommands.

struct SeedOption {
  std::uint64_t value = 0;
  CLI::Option* opt = nullptr;

  void add(CLI::App* app) { opt = app->add_option("--seed", value, "Run seed (default: $PVERA_SEED or 0)"); }
  /// Flags and config files win over the environment.
  std::uint64_t resolve() {
    if (opt->count() > 0) return value;
    if (const char* env = std::getenv("PVERA_SEED"); env && *env) {
      try {
        std::size_t pos = 0;
        value = std::stoull(env, &pos);
        if (env[pos] != '\0') throw std::invalid_argument(env);
      } catch (const std::exception&) {
        throw ConfigError(std::string("PVERA_SEED must be a non-negative integer, got '") + env + "'");
      }
    }
    return value;
  }
};

struct ModelOptions {
  std::string adapter = "pvera";
  std::size_t rank = 32;
  double alpha = 16.0;
  double beta = 0.0;
  std::string placement = "qv";
  std::uint64_t basis_seed = 0;
  std::uint64_t backbone_seed = 0;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  double noise_scale = 1.0;

  void add(CLI::App* app) {
    app->add_option("--adapter", adapter, "linear, lora, vera or pvera");
    app->add_option("--rank", rank, "Adapter rank r");
    app->add_option("--alpha", alpha, "Adapter scaling alpha");
    app->add_option("--beta", beta, "KL weight (pvera only)");
    app->add_option("--placement", placement, "Adapted projections, e.g. qv or qkv");
    app->add_option("--basis-seed", basis_seed, "Seed of the shared frozen basis");
    app->add_option("--backbone-seed", backbone_seed, "Seed of the frozen backbone weights");
    app->add_option("--layers", layers, "Encoder layers");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--mlp-ratio", mlp_ratio, "MLP hidden width / d");
    app->add_option("--noise-scale", noise_scale, "PVeRA noise multiplier (0: z = mu)");
  }

  BackboneConfig backbone(std::size_t d, std::size_t seq_len, std::size_t n_classes) const {
    BackboneConfig b;
    b.d = d;
    b.seq_len = seq_len;
    b.n_layers = layers;
    b.n_heads = heads;
    b.n_classes = n_classes;
    b.mlp_ratio = mlp_ratio;
    b.validate();
    return b;
  }
  AdapterConfig adapter_config(double adapter_lr) const {
    AdapterConfig a;
    a.kind = parse_adapter_kind(adapter);
    a.rank = rank;
    a.alpha = alpha;
    a.beta = beta;
    a.placement = Placement::parse(placement);
    a.adapter_lr = adapter_lr;
    a.basis_seed = basis_seed;
    return a;
  }
  Model build(const BackboneConfig& b, const AdapterConfig& a, std::uint64_t seed) const {
    a.validate(b);
    Model m = Model::create(b, a, seed, backbone_seed);
    m.adapters.set_noise_scale(noise_scale);
    return m;
  }
  json to_json() const {
    return {{"adapter", adapter},       {"rank", rank},
            {"alpha", alpha},           {"beta", beta},
            {"placement", placement},   {"basis_seed", basis_seed},
            {"backbone_seed", backbone_seed}, {"layers", layers},
            {"heads", heads},           {"mlp_ratio", mlp_ratio},
            {"noise_scale", noise_scale}};
  }
};

struct TrainOptions {
  TrainConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--batch", cfg.batch_size, "Mini-batch size");
    app->add_option("--epochs", cfg.max_epochs, "Maximum epochs");
    app->add_option("--patience", cfg.patience, "Early-stopping patience (epochs)");
    app->add_option("--rel-tol", cfg.rel_tolerance, "Minimum relative validation improvement");
    app->add_option("--probe-lr", cfg.probe_lr, "Linear probe learning rate");
    app->add_option("--adapter-lr", cfg.adapter_lr, "Adapter learning rate");
    app->add_option("--weight-decay", cfg.weight_decay, "AdamW weight decay");
  }
  json to_json() const {
    return {{"batch", cfg.batch_size},      {"epochs", cfg.max_epochs},
            {"patience", cfg.patience},     {"rel_tol", cfg.rel_tolerance},
            {"probe_lr", cfg.probe_lr},     {"adapter_lr", cfg.adapter_lr},
            {"weight_decay", cfg.weight_decay}};
  }
};

json epochs_json(const TrainReport& r) {
  json out = json::array();
  for (const auto& e : r.epochs)
    out.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_acc", e.val_acc}});
  return out;
}

std::string curves_csv(const TrainReport& r) {
  std::string s = "epoch,train_loss,val_loss,val_acc\n";
  for (const auto& e : r.epochs)
    s += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," + fmt(e.val_loss) + "," + fmt(e.val_acc) + "\n";
  return s;
}

json calib_bins_json(const std::vector<CalibrationBin>& bins) {
  json out = json::array();
  for (const auto& b : bins)
    out.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"accuracy", b.accuracy}, {"confidence", b.confidence}});
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns the stdout summary.

struct GenArgs {
  SyntheticSpec spec;
  std::string kind = "blobs", base = "blobs";
  std::size_t n_train = 800, n_val = 200;
  std::string out;
  SeedOption seed;
};

json cmd_gen(GenArgs& a) {
  RunManifest run;
  run.command = "gen";
  a.spec.kind = parse_dataset_kind(a.kind);
  a.spec.base = parse_dataset_kind(a.base);
  a.spec.seed = a.seed.resolve();
  a.spec.validate();
  const std::size_t total = a.spec.per_class * a.spec.n_classes;
  if (a.n_train + a.n_val > total) {
    throw ConfigError("train + val (" + std::to_string(a.n_train + a.n_val) + ") exceeds the " +
                      std::to_string(total) + " generated samples");
  }
  const Dataset ds = split(generate(a.spec), a.n_train, a.n_val, a.spec.seed);
  const fs::path out = a.out;
  save_dataset(out, ds);

  // The dataset manifest doubles as the run manifest for this command.
  json manifest;
  {
    std::ifstream in(out / "manifest.json");
    manifest = json::parse(in);
  }
  run.config = {{"kind", a.kind},          {"base", a.base},           {"classes", a.spec.n_classes},
                {"per_class", a.spec.per_class}, {"d", a.spec.d},      {"seq_len", a.spec.seq_len},
                {"separation", a.spec.separation}, {"shift", a.spec.shift}, {"noise", a.spec.noise},
                {"train", a.n_train},      {"val", a.n_val}};
  run.seeds = {{"seed", a.spec.seed}};
  run.outputs = {"tokens.pvt", "labels.csv", "manifest.json"};
  manifest["run"] = run.to_json();
  write_json(out / "manifest.json", manifest);
  return {{"status", "ok"},
          {"command", "gen"},
          {"out", a.out},
          {"samples", ds.size()},
          {"train", ds.train.size()},
          {"val", ds.val.size()},
          {"test", ds.test.size()}};
}

struct TrainArgs {
  ModelOptions model;
  TrainOptions train;
  std::string data, out;
  SeedOption seed;
};

json cmd_train(TrainArgs& a) {
  RunManifest run;
  run.command = "train";
  const std::uint64_t seed = a.seed.resolve();
  const Dataset ds = load_dataset(a.data);
  const BackboneConfig b = a.model.backbone(ds.width(), ds.seq_len(), ds.n_classes);
  const AdapterConfig ac = a.model.adapter_config(a.train.cfg.adapter_lr);
  Model m = a.model.build(b, ac, seed);
  TrainConfig tc = a.train.cfg;
  tc.seed = seed;
  tc.beta = ac.beta;
  const TrainReport r = train(m, ds, tc);

  const fs::path out = a.out;
  fs::create_directories(out);
  save_checkpoint(out / "checkpoint", m);
  const json report = {{"config", {{"model", a.model.to_json()}, {"train", a.train.to_json()}}},
                       {"seed", seed},
                       {"trainable_params", count_trainable_params(ac, b)},
                       {"probe_params", count_probe_params(b)},
                       {"epochs", epochs_json(r)},
                       {"epochs_run", r.epochs_run},
                       {"best_epoch", r.best_epoch},
                       {"best_val_loss", r.best_val_loss},
                       {"stopped_early", r.stopped_early},
                       {"optimizer_steps", r.optimizer_steps},
                       {"wall_time_s", r.wall_time_s}};
  write_json(out / "report.json", report);
  write_text(out / "curves.csv", curves_csv(r));

  run.config = {{"model", a.model.to_json()}, {"train", a.train.to_json()}};
  run.seeds = {{"seed", seed}, {"backbone_seed", a.model.backbone_seed}, {"basis_seed", a.model.basis_seed}};
  run.inputs = {{"data", a.data}};
  run.outputs = {"checkpoint", "report.json", "curves.csv"};
  run.write(out);
  const auto [val_loss, val_acc] = evaluate_loss(m, ds, ds.val);
  return {{"status", "ok"},          {"command", "train"},       {"out", a.out},
          {"adapter", a.model.adapter}, {"epochs_run", r.epochs_run}, {"best_epoch", r.best_epoch},
          {"val_loss", val_loss},    {"val_acc", val_acc}};
}

struct MergeArgs {
  std::string checkpoint, out;
};

json cmd_merge(MergeArgs& a) {
  RunManifest run;
  run.command = "merge";
  const Model m = load_checkpoint(checkpoint_dir(a.checkpoint));
  const Model merged = m.merged();
  const fs::path out = a.out;
  fs::create_directories(out);
  save_checkpoint(out / "checkpoint", merged);
  run.inputs = {{"checkpoint", a.checkpoint}};
  run.outputs = {"checkpoint"};
  run.config = {{"adapter", std::string(to_string(m.adapters.kind()))}};
  run.seeds = {{"seed", m.seed}, {"backbone_seed", m.backbone->seed}};
  run.write(out);
  return {{"status", "ok"}, {"command", "merge"}, {"out", a.out}, {"merged", true}};
}

struct EvalArgs {
  std::string checkpoint, data, out, split = "test", mode = "det";
  SeedOption seed;
};

json cmd_eval(EvalArgs& a) {
  RunManifest run;
  run.command = "eval";
  const std::uint64_t seed = a.seed.resolve();
  const Model m = load_checkpoint(checkpoint_dir(a.checkpoint));
  const Dataset ds = load_dataset(a.data);
  check_fits(m, ds);
  const auto idx = nonempty_split(ds, a.split);
  const Mode mode = parse_mode(a.mode);
  if (mode == Mode::Train) throw ConfigError("eval mode must be det or prob");

  RngStream rng(seed, streams::kEvalSampling);
  NoGradGuard no_grad;
  std::vector<double> logits;
  double loss = 0.0;
  std::size_t correct = 0;
  const std::size_t C = m.config().n_classes;
  constexpr std::size_t kBatch = 64;
  for (std::size_t s = 0; s < idx.size(); s += kBatch) {
    const std::span<const std::size_t> chunk(idx.data() + s, std::min(kBatch, idx.size() - s));
    auto [tokens, labels] = gather(ds, chunk);
    const auto res = m.forward(tokens, mode, &rng);
    loss += cross_entropy(res.logits, labels).item() * static_cast<double>(chunk.size());
    const auto lv = res.logits.data();
    logits.insert(logits.end(), lv.begin(), lv.end());
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto row = lv.subspan(i * C, C);
      correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i] ? 1 : 0;
    }
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  write_pvt(out / "logits.pvt", Tensor({idx.size(), C}, std::move(logits)));
  const double n = static_cast<double>(idx.size());
  const json report = {{"split", a.split}, {"mode", a.mode},       {"samples", idx.size()},
                       {"loss", loss / n}, {"accuracy", static_cast<double>(correct) / n},
                       {"sample_ids", idx}};
  write_json(out / "report.json", report);
  run.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}};
  run.config = {{"split", a.split}, {"mode", a.mode}};
  run.seeds = {{"seed", seed}};
  run.outputs = {"logits.pvt", "report.json"};
  run.write(out);
  return {{"status", "ok"}, {"command", "eval"}, {"out", a.out}, {"loss", loss / n},
          {"accuracy", static_cast<double>(correct) / n}};
}

struct CalibrateArgs {
  std::string checkpoint, data, out, split = "test";
  std::size_t bins = kDefaultCalibrationBins;
};

json cmd_calibrate(CalibrateArgs& a) {
  RunManifest run;
  run.command = "calibrate";
  const Model m = load_checkpoint(checkpoint_dir(a.checkpoint));
  const Dataset ds = load_dataset(a.data);
  check_fits(m, ds);
  const auto idx = nonempty_split(ds, a.split);
  const auto [conf, correct] = confidence_and_correctness(m, ds, idx);
  const CalibrationReport r = calibration_report(conf, correct, a.bins);

  const fs::path out = a.out;
  fs::create_directories(out);
  std::string csv = "bin_lo,bin_hi,count,accuracy,confidence\n";
  for (const auto& b : r.bins)
    csv += fmt(b.lo) + "," + fmt(b.hi) + "," + std::to_string(b.count) + "," + fmt(b.accuracy) + "," +
           fmt(b.confidence) + "\n";
  write_text(out / "calib.csv", csv);
  write_json(out / "report.json", {{"split", a.split},
                                   {"samples", idx.size()},
                                   {"n_bins", r.n_bins},
                                   {"ece", r.ece},
                                   {"ace", r.ace},
                                   {"bins", calib_bins_json(r.bins)},
                                   {"ace_bins", calib_bins_json(r.ace_bins)}});
  run.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}};
  run.config = {{"split", a.split}, {"bins", a.bins}};
  run.outputs = {"calib.csv", "report.json"};
  run.write(out);
  return {{"status", "ok"}, {"command", "calibrate"}, {"out", a.out}, {"ece", r.ece}, {"ace", r.ace}};
}

struct UncertaintyArgs {
  std::string checkpoint, data, out, split = "test";
  std::size_t k = 16;
  double level = 0.95;
  SeedOption seed;
};

json cmd_uncertainty(UncertaintyArgs& a) {
  RunManifest run;
  run.command = "uncertainty";
  const std::uint64_t seed = a.seed.resolve();
  const Model m = load_checkpoint(checkpoint_dir(a.checkpoint));
  const Dataset ds = load_dataset(a.data);
  check_fits(m, ds);
  const auto idx = nonempty_split(ds, a.split);
  const UncertaintyReport r = estimate_uncertainty(m, ds, idx, a.k, seed, a.level);

  const fs::path out = a.out;
  fs::create_directories(out);
  std::string csv = "sample_id,label,std,mean_accuracy,group,majority,ci_lo,ci_hi,width";
  for (std::size_t i = 0; i < a.k; ++i) csv += ",max_" + std::to_string(i);
  csv += "\n";
  json samples = json::array();
  for (const auto& s : r.samples) {
    csv += std::to_string(s.sample_id) + "," + std::to_string(s.label) + "," + fmt(s.std) + "," +
           fmt(s.mean_accuracy) + "," + (s.correct ? "correct" : "incorrect") + "," + std::to_string(s.majority) +
           "," + fmt(s.interval.lo) + "," + fmt(s.interval.hi) + "," + fmt(s.interval.width());
    for (double v : s.maxima) csv += "," + fmt(v);
    csv += "\n";
    samples.push_back({{"sample_id", s.sample_id},
                       {"label", s.label},
                       {"maxima", s.maxima},
                       {"std", s.std},
                       {"mean_accuracy", s.mean_accuracy},
                       {"correct", s.correct},
                       {"majority", s.majority},
                       {"interval", {{"mean", s.interval.mean}, {"lo", s.interval.lo}, {"hi", s.interval.hi}}}});
  }
  write_text(out / "uncert.csv", csv);
  write_json(out / "report.json", {{"k", r.k},
                                   {"level", a.level},
                                   {"n_correct", r.std_correct.size()},
                                   {"n_incorrect", r.std_incorrect.size()},
                                   {"p_value", r.p_value},
                                   {"mean_width_correct", r.mean_width_correct},
                                   {"mean_width_incorrect", r.mean_width_incorrect},
                                   {"samples", samples}});
  run.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}};
  run.config = {{"split", a.split}, {"k", a.k}, {"level", a.level}};
  run.seeds = {{"seed", seed}};
  run.outputs = {"uncert.csv", "report.json"};
  run.write(out);
  return {{"status", "ok"},
          {"command", "uncertainty"},
          {"out", a.out},
          {"p_value", r.p_value},
          {"mean_width_correct", r.mean_width_correct},
          {"mean_width_incorrect", r.mean_width_incorrect}};
}

struct OodArgs {
  std::string checkpoint, data, ood_data, out, split = "test", reduction = "mean";
};

json cmd_ood(OodArgs& a) {
  RunManifest run;
  run.command = "ood";
  const Model m = load_checkpoint(checkpoint_dir(a.checkpoint));
  const Dataset in = load_dataset(a.data);
  const Dataset shifted = load_dataset(a.ood_data);
  check_fits(m, in);
  check_fits(m, shifted);
  OodReduction red;
  if (a.reduction == "mean") red = OodReduction::Mean;
  else if (a.reduction == "mean_abs") red = OodReduction::MeanAbs;
  else throw ConfigError("reduction '" + a.reduction + "' (valid: mean, mean_abs)");
  const auto in_idx = nonempty_split(in, a.split);
  const auto out_idx = nonempty_split(shifted, a.split);
  const OODReport r = ood_statistic(m, in, in_idx, shifted, out_idx, red);

  const fs::path out = a.out;
  fs::create_directories(out);
  std::string csv = "sample_id,statistic,group\n";
  for (std::size_t i = 0; i < in_idx.size(); ++i) csv += std::to_string(in_idx[i]) + "," + fmt(r.in_stat[i]) + ",in\n";
  for (std::size_t i = 0; i < out_idx.size(); ++i)
    csv += std::to_string(out_idx[i]) + "," + fmt(r.out_stat[i]) + ",out\n";
  write_text(out / "ood.csv", csv);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  write_json(out / "report.json", {{"reduction", a.reduction},
                                   {"p_value", r.p_value},
                                   {"in_mean", mean(r.in_stat)},
                                   {"out_mean", mean(r.out_stat)},
                                   {"n_in", r.in_stat.size()},
                                   {"n_out", r.out_stat.size()}});
  run.inputs = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"ood_data", a.ood_data}};
  run.config = {{"split", a.split}, {"reduction", a.reduction}};
  run.outputs = {"ood.csv", "report.json"};
  run.write(out);
  return {{"status", "ok"}, {"command", "ood"}, {"out", a.out}, {"p_value", r.p_value}};
}

struct GridArgs {
  ModelOptions model;
  TrainOptions train;
  std::string data, out, param = "adapter_lr";
  std::vector<double> values{1e-3, 1e-4, 1e-5};
  std::size_t seeds = 3, jobs = 1;
  SeedOption seed;
};

json cmd_gridsearch(GridArgs& a) {
  RunManifest run;
  run.command = "gridsearch";
  const std::uint64_t base_seed = a.seed.resolve();
  if (a.values.size() != 3) throw ConfigError("--values takes exactly three candidates");
  if (a.jobs == 0) throw ConfigError("--jobs must be >= 1");
  GridSpec grid;
  grid.param = a.param;
  std::copy(a.values.begin(), a.values.end(), grid.values.begin());
  grid.validate();
  if (grid.param == "rank") {
    for (double v : grid.values)
      if (v < 1.0 || v != std::floor(v)) throw ConfigError("rank candidates must be positive integers");
  }
  const Dataset ds = load_dataset(a.data);
  const BackboneConfig b = a.model.backbone(ds.width(), ds.seq_len(), ds.n_classes);
  AdapterConfig ac = a.model.adapter_config(a.train.cfg.adapter_lr);
  if (grid.param == "beta" && ac.kind != AdapterKind::Pvera) throw ConfigError("a beta grid needs --adapter pvera");
  for (double v : grid.values) {
    AdapterConfig probe = ac;
    if (grid.param == "rank") probe.rank = static_cast<std::size_t>(v);
    if (grid.param == "beta") probe.beta = v;
    probe.validate(b);
  }
  std::vector<std::uint64_t> seeds(a.seeds);
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = base_seed + i;
  auto factory = [&](std::uint64_t seed, double value) {
    AdapterConfig c = ac;
    if (grid.param == "rank") c.rank = static_cast<std::size_t>(value);
    if (grid.param == "beta") c.beta = value;
    return a.model.build(b, c, seed);
  };
  TrainConfig base = a.train.cfg;
  base.beta = ac.beta;
  const GridReport r = grid_search(factory, grid, ds, base, seeds, a.jobs);
  const std::string table = r.table(display_name(ac.kind));

  const fs::path out = a.out;
  fs::create_directories(out);
  json trials = json::array();
  for (const auto& t : r.trials)
    trials.push_back({{"seed", t.seed}, {"value", t.value}, {"best_val_loss", t.best_val_loss}, {"epochs_run", t.epochs_run}});
  json selected = json::array();
  for (const auto& [seed, i] : r.selected) selected.push_back({{"seed", seed}, {"value", grid.values[i]}});
  write_json(out / "report.json", {{"param", grid.param},
                                   {"values", grid.values},
                                   {"trials", trials},
                                   {"selected", selected},
                                   {"fractions", r.fractions},
                                   {"table", table}});
  write_text(out / "table.md", table);
  run.config = {{"model", a.model.to_json()}, {"train", a.train.to_json()}, {"param", a.param},
                {"values", a.values}, {"seeds", a.seeds}};
  run.seeds = {{"seeds", seeds}, {"backbone_seed", a.model.backbone_seed}, {"basis_seed", a.model.basis_seed}};
  run.inputs = {{"data", a.data}};
  run.outputs = {"report.json", "table.md"};
  run.write(out);
  return {{"status", "ok"}, {"command", "gridsearch"}, {"out", a.out}, {"fractions", r.fractions}, {"table", table}};
}

struct GradcheckArgs {
  std::string adapter = "pvera", placement = "qv", out;
  std::size_t rank = 32, layers = 2, heads = 4, batch = 4, d = 64, seq_len = 17, classes = 2;
  double beta = 1e-3, alpha = 16.0, step = 1e-4, tolerance = 1e-4;
  SeedOption seed;
};

json cmd_gradcheck(GradcheckArgs& a) {
  RunManifest run;
  run.command = "gradcheck";
  const std::uint64_t seed = a.seed.resolve();
  BackboneConfig b;
  b.d = a.d;
  b.seq_len = a.seq_len;
  b.n_layers = a.layers;
  b.n_heads = a.heads;
  b.n_classes = a.classes;
  b.validate();
  AdapterConfig ac;
  ac.kind = parse_adapter_kind(a.adapter);
  ac.rank = a.rank;
  ac.alpha = a.alpha;
  ac.placement = Placement::parse(a.placement);
  ac.beta = ac.kind == AdapterKind::Pvera ? a.beta : 0.0;
  ac.validate(b);
  if (a.batch == 0) throw ConfigError("--batch must be >= 1");

  Model m = Model::create(b, ac, seed, seed);
  randomize_trainable(m, seed);
  SyntheticSpec spec;
  spec.d = b.d;
  spec.seq_len = b.seq_len;
  spec.n_classes = b.n_classes;
  spec.per_class = (a.batch + b.n_classes - 1) / b.n_classes;
  spec.seed = seed;
  const Dataset ds = generate(spec);
  std::vector<std::size_t> idx(a.batch);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto [tokens, labels] = gather(ds, idx);
  const GradCheckReport r = model_gradcheck(m, tokens, labels, ac.beta, seed, a.step);
  const bool ok = r.passed(a.tolerance);

  const fs::path out = a.out;
  fs::create_directories(out);
  json entries = json::array();
  for (const auto& e : r.entries)
    entries.push_back({{"name", e.name}, {"size", e.size}, {"max_rel_error", e.max_rel_error}, {"max_abs_grad", e.max_abs_grad}});
  write_json(out / "report.json", {{"adapter", a.adapter},
                                   {"max_rel_error", r.max_rel_error},
                                   {"tolerance", a.tolerance},
                                   {"step", a.step},
                                   {"passed", ok},
                                   {"entries", entries}});
  run.config = {{"adapter", a.adapter}, {"rank", a.rank},   {"layers", a.layers}, {"heads", a.heads},
                {"batch", a.batch},     {"d", a.d},         {"seq_len", a.seq_len}, {"classes", a.classes},
                {"beta", ac.beta},      {"alpha", a.alpha}, {"placement", a.placement}, {"step", a.step},
                {"tolerance", a.tolerance}};
  run.seeds = {{"seed", seed}};
  run.outputs = {"report.json"};
  run.write(out);
  if (!ok) {
    throw CheckFailed("max relative gradient error " + fmt(r.max_rel_error) + " exceeds " + fmt(a.tolerance));
  }
  return {{"status", "ok"}, {"command", "gradcheck"}, {"out", a.out}, {"max_rel_error", r.max_rel_error}};
}

void add_config_flag(CLI::App* app) {
  // Consumed before parsing (see expand_config); declared for --help.
  app->add_option("--config", "key=value file; command-line flags override it");
}

json error_line(const std::string& message, int code) {
  return {{"status", "error"}, {"exit_code", code}, {"message", message}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PVeRA / VeRA / LoRA adapter toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_config_flag(g);
  g->add_option("--kind", gen.kind, "blobs, rings or shifted");
  g->add_option("--base", gen.base, "Base recipe for --kind shifted");
  g->add_option("--classes", gen.spec.n_classes, "Number of classes");
  g->add_option("--per-class", gen.spec.per_class, "Samples per class");
  g->add_option("--d", gen.spec.d, "Token width");
  g->add_option("--seq-len", gen.spec.seq_len, "Tokens per sample");
  g->add_option("--separation", gen.spec.separation, "Class separation");
  g->add_option("--shift", gen.spec.shift, "Distribution shift magnitude");
  g->add_option("--noise", gen.spec.noise, "Token noise std");
  g->add_option("--train", gen.n_train, "Training samples");
  g->add_option("--val", gen.n_val, "Validation samples");
  g->add_option("--out", gen.out, "Output directory")->required();
  gen.seed.add(g);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a probe and adapters with early stopping");
  add_config_flag(t);
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  tr.model.add(t);
  tr.train.add(t);
  tr.seed.add(t);

  MergeArgs mg;
  auto* m = app.add_subcommand("merge", "Fold adapters into the frozen weights");
  add_config_flag(m);
  m->add_option("--checkpoint", mg.checkpoint, "Checkpoint (or run) directory")->required();
  m->add_option("--out", mg.out, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Logits, loss and accuracy on a split");
  add_config_flag(e);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint (or run) directory")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--split", ev.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  e->add_option("--mode", ev.mode, "det or prob")->check(CLI::IsMember({"det", "prob"}));
  ev.seed.add(e);

  CalibrateArgs ca;
  auto* c = app.add_subcommand("calibrate", "ECE / ACE and a reliability table");
  add_config_flag(c);
  c->add_option("--checkpoint", ca.checkpoint, "Checkpoint (or run) directory")->required();
  c->add_option("--data", ca.data, "Dataset directory")->required();
  c->add_option("--out", ca.out, "Output directory")->required();
  c->add_option("--split", ca.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  c->add_option("--bins", ca.bins, "Number of bins");

  UncertaintyArgs un;
  auto* u = app.add_subcommand("uncertainty", "Monte Carlo uncertainty of a PVeRA model");
  add_config_flag(u);
  u->add_option("--checkpoint", un.checkpoint, "Checkpoint (or run) directory")->required();
  u->add_option("--data", un.data, "Dataset directory")->required();
  u->add_option("--out", un.out, "Output directory")->required();
  u->add_option("--split", un.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  u->add_option("--k", un.k, "Probabilistic passes per sample");
  u->add_option("--level", un.level, "Confidence level of the intervals");
  un.seed.add(u);

  OodArgs od;
  auto* o = app.add_subcommand("ood", "Latent-mean OOD statistic and rank-sum test");
  add_config_flag(o);
  o->add_option("--checkpoint", od.checkpoint, "Checkpoint (or run) directory")->required();
  o->add_option("--data", od.data, "In-distribution dataset")->required();
  o->add_option("--ood-data", od.ood_data, "Shifted dataset")->required();
  o->add_option("--out", od.out, "Output directory")->required();
  o->add_option("--split", od.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  o->add_option("--reduction", od.reduction, "mean or mean_abs")->check(CLI::IsMember({"mean", "mean_abs"}));

  GridArgs gr;
  auto* gs = app.add_subcommand("gridsearch", "Three-candidate grid over seeds");
  add_config_flag(gs);
  gs->add_option("--data", gr.data, "Dataset directory")->required();
  gs->add_option("--out", gr.out, "Output directory")->required();
  gs->add_option("--param", gr.param, "adapter_lr, probe_lr, beta or rank");
  gs->add_option("--values", gr.values, "Three candidates, comma separated")->delimiter(',')->multi_option_policy(
      CLI::MultiOptionPolicy::TakeAll);
  gs->add_option("--seeds", gr.seeds, "Number of seeds (seed, seed+1, ...)");
  gs->add_option("--jobs", gr.jobs, "Parallel trials");
  gr.model.add(gs);
  gr.train.add(gs);
  gr.seed.add(gs);

  GradcheckArgs gc;
  auto* k = app.add_subcommand("gradcheck", "AD vs finite differences on the training loss");
  add_config_flag(k);
  k->add_option("--adapter", gc.adapter, "linear, lora, vera or pvera");
  k->add_option("--rank", gc.rank, "Adapter rank");
  k->add_option("--alpha", gc.alpha, "Adapter scaling");
  k->add_option("--placement", gc.placement, "Adapted projections");
  k->add_option("--layers", gc.layers, "Encoder layers");
  k->add_option("--heads", gc.heads, "Attention heads");
  k->add_option("--batch", gc.batch, "Batch size");
  k->add_option("--d", gc.d, "Width");
  k->add_option("--seq-len", gc.seq_len, "Tokens per sample");
  k->add_option("--classes", gc.classes, "Classes");
  k->add_option("--beta", gc.beta, "KL weight (pvera)");
  k->add_option("--step", gc.step, "Finite-difference step");
  k->add_option("--tolerance", gc.tolerance, "Maximum relative error");
  k->add_option("--out", gc.out, "Output directory")->required();
  gc.seed.add(k);

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n";
    std::cout << error_line(err.what(), kExitConfig).dump() << "\n";
    return kExitConfig;
  } catch (const pvera::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    std::cout << error_line(err.what(), err.exit_code()).dump() << "\n";
    return err.exit_code();
  }

  try {
    json summary;
    if (*g) summary = cmd_gen(gen);
    else if (*t) summary = cmd_train(tr);
    else if (*m) summary = cmd_merge(mg);
    else if (*e) summary = cmd_eval(ev);
    else if (*c) summary = cmd_calibrate(ca);
    else if (*u) summary = cmd_uncertainty(un);
    else if (*o) summary = cmd_ood(od);
    else if (*gs) summary = cmd_gridsearch(gr);
    else if (*k) summary = cmd_gradcheck(gc);
    std::cout << summary.dump() << "\n";
    return 0;
  } catch (const pvera::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    std::cout << error_line(err.what(), err.exit_code()).dump() << "\n";
    return err.exit_code();
  } catch (const json::exception& err) {
    std::cerr << "error: malformed JSON input: " << err.what() << "\n";
    std::cout << error_line(err.what(), 3).dump() << "\n";
    return 3;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    std::cout << error_line(err.what(), 3).dump() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    std::cout << error_line(err.what(), 1).dump() << "\n";
    return 1;
  }
}
