// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "oracles.hpp"
#include "pvera/evaluation.hpp"
#include "pvera/training.hpp"

using namespace pvera;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// -- 1 ----------------------------------------------------------------------

Outcome parameter_counts() {
  BackboneConfig b;
  b.d = 768;
  b.n_layers = 12;
  AdapterConfig a;
  a.kind = AdapterKind::Pvera;
  bool ok = true;
  std::string detail;
  const std::map<std::size_t, std::size_t> by_rank{{64, 21504}, {128, 24576}, {256, 30720}, {512, 43008}};
  for (const auto& [r, want] : by_rank) {
    a.rank = r;
    const std::size_t got = count_trainable_params(a, b);
    ok = ok && got == want;
    detail += "r=" + std::to_string(r) + ":" + std::to_string(got) + " ";
  }
  a.rank = 256;
  const std::map<std::string, std::size_t> by_site{{"q", 15360}, {"qv", 30720}, {"qkv", 46080}};
  for (const auto& [p, want] : by_site) {
    a.placement = Placement::parse(p);
    const std::size_t got = count_trainable_params(a, b);
    ok = ok && got == want;
    detail += p + ":" + std::to_string(got) + " ";
  }
  return {ok, detail};
}

// -- 2 ----------------------------------------------------------------------

Outcome gradient_check() {
  BackboneConfig b;
  b.d = 64;
  b.n_layers = 2;
  AdapterConfig a;
  a.kind = AdapterKind::Pvera;
  a.rank = 32;
  a.beta = 1e-3;
  Model m = Model::create(b, a, 3, 0);
  randomize_trainable(m, 3);
  SyntheticSpec s;
  s.d = b.d;
  s.seq_len = b.seq_len;
  s.per_class = 2;
  s.seed = 3;
  const Dataset ds = generate(s);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto [tokens, labels] = gather(ds, idx);
  const auto r = model_gradcheck(m, tokens, labels, a.beta, 3);
  return {r.max_rel_error <= 1e-4, "max rel error " + fmt("%.3g", r.max_rel_error)};
}

// -- 3 ----------------------------------------------------------------------

Outcome merge_equivalence() {
  BackboneConfig b;
  b.d = 16;
  b.seq_len = 4;
  b.n_layers = 2;
  b.n_heads = 2;
  b.n_classes = 3;
  const Tensor x = testing::random_tensor({100, b.seq_len, b.d}, 21);
  double worst = 0.0;
  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    AdapterConfig a;
    a.kind = kind;
    a.rank = 8;
    Model m = Model::create(b, a, 4, 5);
    randomize_trainable(m, 6);
    const Model merged = m.merged();
    worst = std::max(worst, testing::max_rel_diff(merged.forward(x, Mode::DetInfer, nullptr).logits.data(),
                                                  m.forward(x, Mode::DetInfer, nullptr).logits.data()));
  }
  return {worst <= 1e-10, "max rel diff " + fmt("%.3g", worst)};
}

// -- 4 ----------------------------------------------------------------------

Outcome zero_at_init() {
  BackboneConfig b;
  b.d = 16;
  b.seq_len = 4;
  b.n_layers = 2;
  b.n_heads = 2;
  const Tensor x = testing::random_tensor({8, b.seq_len, b.d}, 22);
  AdapterConfig probe;
  probe.kind = AdapterKind::LinearProbe;
  const auto reference = testing::values(Model::create(b, probe, 7, 8).forward(x, Mode::DetInfer, nullptr).logits);
  bool ok = true;
  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    AdapterConfig a;
    a.kind = kind;
    a.rank = 8;
    const Model m = Model::create(b, a, 7, 8);
    RngStream rng(1, streams::kTrainSampling);
    ok = ok && testing::values(m.forward(x, Mode::DetInfer, nullptr).logits) == reference;
    ok = ok && testing::values(m.forward(x, Mode::Train, &rng).logits) == reference;
  }
  return {ok, "lora, vera, pvera vs frozen backbone"};
}

// -- 5 ----------------------------------------------------------------------

Outcome kl_oracle() {
  RngStream rng(9, 1);
  double worst = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t rows = 1 + rng.below(5), cols = 1 + rng.below(8);
    const Tensor mu = testing::random_tensor({rows, cols}, 1000 + c);
    const Tensor ls = testing::random_tensor({rows, cols}, 5000 + c, 0.5);
    const Tensor sigma = exp(ls);
    double want = 0.0;
    for (std::size_t i = 0; i < rows * cols; ++i) {
      const double m = mu.data()[i], s = sigma.data()[i];
      want += 0.5 * (s * s + m * m - 1.0 - 2.0 * std::log(s));
    }
    want /= static_cast<double>(rows);
    worst = std::max(worst, std::abs(gaussian_kl(mu, sigma).item() - want));
  }
  // E_q[log q(z) - log p(z)] from samples of q.
  int inside = 0;
  for (int c = 0; c < 10; ++c) {
    const Tensor mu = testing::random_tensor({1, 3}, 9000 + c, 0.8);
    const Tensor sigma = exp(testing::random_tensor({1, 3}, 9100 + c, 0.4));
    RngStream draw(10, c);
    const int n = 1'000'000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
      double lr = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        const double m = mu.data()[j], s = sigma.data()[j], e = draw.normal();
        const double z = m + s * e;
        lr += -std::log(s) - 0.5 * e * e + 0.5 * z * z;
      }
      sum += lr;
      sq += lr * lr;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / (n - 1));
    inside += std::abs(gaussian_kl(mu, sigma).item() - mean) <= 3 * se ? 1 : 0;
  }
  return {worst <= 1e-12 && inside == 10,
          "closed form max err " + fmt("%.3g", worst) + ", MC within 3 SE " + std::to_string(inside) + "/10"};
}

// -- 6 ----------------------------------------------------------------------

Outcome vera_reduction() {
  BackboneConfig b;
  b.d = 8;
  b.seq_len = 4;
  b.n_layers = 1;
  b.n_heads = 2;
  SyntheticSpec s;
  s.d = 8;
  s.seq_len = 4;
  s.per_class = 40;
  s.separation = 1.0;
  s.seed = 1;
  const Dataset ds = split(generate(s), 48, 16, 1);
  AdapterConfig vc;
  vc.kind = AdapterKind::Vera;
  vc.rank = 4;
  AdapterConfig pc = vc;
  pc.kind = AdapterKind::Pvera;
  Model vera = Model::create(b, vc, 6, 3);
  Model pvera = Model::create(b, pc, 6, 3);

  // PVeRA mean half = VeRA basis; sigma half arbitrary and switched off.
  const auto& vb = *vera.adapters.basis();
  const std::size_t d = 8, r = 4;
  std::vector<double> a(d * 2 * r);
  const Tensor extra = testing::random_tensor({d, r}, 7);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      a[i * 2 * r + j] = vb.a.at(i, j);
      a[i * 2 * r + r + j] = extra.at(i, j);
    }
  auto basis = std::make_shared<SharedBasis>();
  basis->a = Tensor({d, 2 * r}, a);
  basis->b = vb.b;
  pvera.adapters.set_basis(basis);
  pvera.adapters.set_noise_scale(0.0);

  std::vector<std::vector<double>> vt, pt;
  auto recorder = [](std::vector<std::vector<double>>& trace) {
    return [&trace](std::size_t step, const Model& m) {
      if (step > 50) return;
      std::vector<double> snap = testing::values(m.probe.w_head);
      for (Branch br : {Branch::Q, Branch::V}) {
        const auto& p = std::get<ScalingParams>(m.adapters.params(0, br));
        snap.insert(snap.end(), p.d_vec.data().begin(), p.d_vec.data().begin() + 4);
        snap.insert(snap.end(), p.b_vec.data().begin(), p.b_vec.data().end());
      }
      trace.push_back(std::move(snap));
    };
  };
  TrainConfig cfg;
  cfg.max_epochs = 17;
  cfg.patience = 17;
  cfg.seed = 8;
  cfg.probe_lr = 1e-2;
  train(vera, ds, cfg, recorder(vt));
  train(pvera, ds, cfg, recorder(pt));
  if (vt.size() < 50 || pt.size() < 50) return {false, "fewer than 50 steps"};
  double worst = 0.0;
  for (std::size_t i = 0; i < 50; ++i) worst = std::max(worst, testing::max_abs_diff(vt[i], pt[i]));
  return {worst <= 1e-10, "max param diff over 50 steps " + fmt("%.3g", worst)};
}

// -- 7-10 -------------------------------------------------------------------

struct Toy {
  Dataset ds, shifted;
  BackboneConfig backbone;
  Model pvera, vera;
  double pvera_acc = 0, vera_acc = 0, linear_acc = 0;
  double pvera_s = 0, vera_s = 0, linear_s = 0;
};

std::pair<double, double> fit(Model& m, const Dataset& ds) {
  TrainConfig cfg;
  cfg.seed = 1;
  const auto rep = train(m, ds, cfg);
  return {evaluate_loss(m, ds, ds.val).second, rep.wall_time_s};
}

Toy toy_runs() {
  SyntheticSpec s;
  s.kind = DatasetKind::Rings;
  s.d = 32;
  s.seq_len = 8;
  s.per_class = 600;
  s.seed = 1;
  SyntheticSpec sh = s;
  sh.kind = DatasetKind::Shifted;
  sh.base = DatasetKind::Rings;
  sh.shift = 4.0;
  Toy t;
  t.ds = split(generate(s), 800, 200, 1);
  t.shifted = split(generate(sh), 800, 200, 1);
  t.backbone.d = 32;
  t.backbone.seq_len = 8;
  t.backbone.n_layers = 2;
  t.backbone.n_heads = 2;
  AdapterConfig a;
  a.rank = 16;
  a.kind = AdapterKind::LinearProbe;
  Model linear = Model::create(t.backbone, a, 1, 0);
  std::tie(t.linear_acc, t.linear_s) = fit(linear, t.ds);
  a.kind = AdapterKind::Vera;
  t.vera = Model::create(t.backbone, a, 1, 0);
  std::tie(t.vera_acc, t.vera_s) = fit(t.vera, t.ds);
  a.kind = AdapterKind::Pvera;
  t.pvera = Model::create(t.backbone, a, 1, 0);
  std::tie(t.pvera_acc, t.pvera_s) = fit(t.pvera, t.ds);
  return t;
}

// -- 11, 12 -----------------------------------------------------------------

Outcome calibration_oracles() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto p = testing::random_predictions(seed, 40 + seed % 60);
    worst = std::max(worst, std::abs(ece(p.conf, p.correct) - testing::brute_ece(p, 15)));
    worst = std::max(worst, std::abs(ace(p.conf, p.correct) - testing::brute_ace(p, 15)));
  }
  std::vector<double> conf;
  std::vector<std::uint8_t> correct;
  for (int bin = 0; bin < 5; ++bin) {
    const double c = 0.1 + 0.2 * bin;
    for (int i = 0; i < 10; ++i) {
      conf.push_back(c);
      correct.push_back(i < std::lround(c * 10) ? 1 : 0);
    }
  }
  const double perfect = std::max(ece(conf, correct, 10), ace(conf, correct, 5));
  return {worst <= 1e-12 && perfect <= 1e-12,
          "max diff vs brute force " + fmt("%.3g", worst) + ", calibrated input " + fmt("%.3g", perfect)};
}

Outcome rank_sum_exact() {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const auto r = mann_whitney_u(a, b, Alternative::Less);
  return {r.exact && r.p_value == 1.0 / 20.0, "p = " + fmt("%.6g", r.p_value) + (r.p_value == 1.0 / 20.0 ? " (== 1/20)" : "")};
}

// -- 13 ---------------------------------------------------------------------

// Drops every "wall_time_s" key.
json strip_wall_time(json j) {
  if (j.is_object()) {
    j.erase("wall_time_s");
    for (auto& [k, v] : j.items()) v = strip_wall_time(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_wall_time(v);
  }
  return j;
}

std::string normalized(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string bytes = ss.str();
  if (p.extension() == ".json") {
    if (json::accept(bytes)) return strip_wall_time(json::parse(bytes)).dump();
    // One summary object per line (captured stdout).
    std::string out;
    std::istringstream lines(bytes);
    for (std::string line; std::getline(lines, line);)
      if (!line.empty()) out += strip_wall_time(json::parse(line)).dump() + "\n";
    return out;
  }
  return bytes;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = normalized(e.path());
  return files;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "pvera_acceptance_cli";
  const std::string w = root.string() + "/w";
  const std::vector<std::string> commands{
      "gen --kind rings --d 16 --seq-len 4 --per-class 60 --train 72 --val 24 --seed 5 --out " + w + "/data",
      "gen --kind shifted --base rings --shift 4 --d 16 --seq-len 4 --per-class 60 --train 72 --val 24 --seed 5 "
      "--out " + w + "/shifted",
      "train --data " + w + "/data --out " + w + "/run --adapter pvera --rank 4 --layers 1 --heads 2 --beta 1e-3 "
      "--epochs 4 --seed 2",
      "merge --checkpoint " + w + "/run --out " + w + "/merged",
      "eval --checkpoint " + w + "/run --data " + w + "/data --out " + w + "/eval_det",
      "eval --checkpoint " + w + "/run --data " + w + "/data --out " + w + "/eval_prob --mode prob --seed 3",
      "calibrate --checkpoint " + w + "/run --data " + w + "/data --out " + w + "/calib",
      "uncertainty --checkpoint " + w + "/run --data " + w + "/data --out " + w + "/unc --k 8 --seed 4",
      "ood --checkpoint " + w + "/run --data " + w + "/data --ood-data " + w + "/shifted --out " + w + "/ood",
      "gridsearch --data " + w + "/data --out " + w + "/grid --adapter lora --rank 4 --layers 1 --heads 2 "
      "--param adapter_lr --values 1e-3,3e-3,1e-2 --seeds 2 --jobs 2 --epochs 2",
      "gradcheck --adapter pvera --d 16 --seq-len 4 --rank 4 --layers 1 --heads 2 --batch 2 --out " + w + "/gc",
  };
  std::vector<std::map<std::string, std::string>> runs;
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(root);
    fs::create_directories(root / "stdout");
    for (std::size_t i = 0; i < commands.size(); ++i) {
      const std::string cmd = std::string(PVERA_CLI) + " " + commands[i] + " > " + root.string() + "/stdout/" +
                              std::to_string(i) + ".json 2>/dev/null";
      if (std::system(cmd.c_str()) != 0) return {false, "command failed: pvera " + commands[i]};
    }
    runs.push_back(snapshot(root));
  }
  std::size_t differing = 0;
  std::string first;
  for (const auto& [name, bytes] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) {
      ++differing;
      if (first.empty()) first = name;
    }
  }
  differing += runs[1].size() > runs[0].size() ? runs[1].size() - runs[0].size() : 0;
  fs::remove_all(root);
  return {differing == 0 && runs[0].size() == runs[1].size(),
          std::to_string(commands.size()) + " commands, " + std::to_string(runs[0].size()) + " files, " +
              std::to_string(differing) + " differing" + (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

using Report = std::function<void(int, const std::string&, const Outcome&, double)>;

// Criteria 7-10 share the three toy runs.
void toy_criteria(const Report& report) {
  const auto t0 = std::chrono::steady_clock::now();
  const Toy toy = toy_runs();
  const double toy_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    const double gap = 100.0 * (toy.pvera_acc - toy.linear_acc);
    const double slowest = std::max({toy.pvera_s, toy.vera_s, toy.linear_s});
    report(7, "toy-task learning",
           {gap >= 5.0 && slowest < 300.0,
            "val acc pvera " + fmt("%.3f", toy.pvera_acc) + " linear " + fmt("%.3f", toy.linear_acc) + " (vera " +
                fmt("%.3f", toy.vera_acc) + "), gap " + fmt("%.1f", gap) + " pts, slowest run " +
                fmt("%.0fs", slowest)},
           toy_s);
  }
  const auto t1 = std::chrono::steady_clock::now();
  const auto unc = estimate_uncertainty(toy.pvera, toy.ds, toy.ds.test, 16, 1);
  const double unc_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  report(8, "uncertainty separation",
         {unc.p_value < 0.05, "p = " + fmt("%.3g", unc.p_value) + " (" + std::to_string(unc.std_correct.size()) +
                                  " correct, " + std::to_string(unc.std_incorrect.size()) + " incorrect)"},
         unc_s);
  report(9, "interval width direction",
         {unc.mean_width_incorrect > unc.mean_width_correct,
          "incorrect " + fmt("%.4f", unc.mean_width_incorrect) + " vs correct " + fmt("%.4f", unc.mean_width_correct)},
         0.0);
  {
    const auto t2 = std::chrono::steady_clock::now();
    const auto p = ood_statistic(toy.pvera, toy.ds, toy.ds.test, toy.shifted, toy.shifted.test);
    const auto v = ood_statistic(toy.vera, toy.ds, toy.ds.test, toy.shifted, toy.shifted.test);
    report(10, "ood separation",
           {p.p_value < 0.05, "pvera p = " + fmt("%.3g", p.p_value) + " (vera, not asserted: p = " +
                                  fmt("%.3g", v.p_value) + ")"},
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t2).count());
  }
}

// Optional arguments select criteria by number; the default runs all 13.
int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  int failures = 0, ran = 0;
  const Report report = [&](int id, const std::string& name, const Outcome& o, double seconds) {
    std::printf("%s %2d %-28s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), seconds);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
    ++ran;
  };
  auto timed = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    const Outcome o = f();
    report(id, name, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  timed(1, "parameter counts", parameter_counts);
  timed(2, "gradient check", gradient_check);
  timed(3, "merge equivalence", merge_equivalence);
  timed(4, "zero at init", zero_at_init);
  timed(5, "kl oracle", kl_oracle);
  timed(6, "vera reduction", vera_reduction);

  if (wanted(7) || wanted(8) || wanted(9) || wanted(10)) toy_criteria(report);
  timed(11, "calibration oracles", calibration_oracles);
  timed(12, "rank-sum exactness", rank_sum_exact);
  timed(13, "cli determinism", cli_determinism);

  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
