#include "pvera/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "pvera/errors.hpp"

namespace pvera {

namespace {

void check_inputs(std::span<const double> conf, std::span<const std::uint8_t> correct,
                  std::size_t n_bins) {
  if (n_bins == 0) throw ConfigError("calibration needs at least one bin");
  if (conf.size() != correct.size()) {
    throw DimensionError("calibration: " + std::to_string(conf.size()) + " confidences vs " +
                         std::to_string(correct.size()) + " correctness flags");
  }
  if (conf.empty()) throw InputError("calibration: no predictions");
  for (double c : conf)
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("confidence " + std::to_string(c) + " outside [0, 1]");
}

double weighted_gap(const std::vector<CalibrationBin>& bins, std::size_t n) {
  double total = 0.0;
  for (const auto& b : bins)
    if (b.count > 0)
      total += static_cast<double>(b.count) * std::abs(b.accuracy - b.confidence);
  return total / static_cast<double>(n);
}

}  // namespace

std::vector<CalibrationBin> reliability_bins(std::span<const double> conf,
                                             std::span<const std::uint8_t> correct, std::size_t n_bins) {
  check_inputs(conf, correct, n_bins);
  std::vector<double> edges(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i) edges[i] = static_cast<double>(i) / static_cast<double>(n_bins);
  std::vector<CalibrationBin> bins(n_bins);
  std::vector<double> acc(n_bins, 0.0), cs(n_bins, 0.0);
  for (std::size_t i = 0; i < n_bins; ++i) {
    bins[i].lo = edges[i];
    bins[i].hi = edges[i + 1];
  }
  for (std::size_t i = 0; i < conf.size(); ++i) {
    // Largest edge index e with edges[e] <= conf, capped at the last bin.
    auto e = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), conf[i]) - edges.begin()) - 1;
    e = std::min(e, n_bins - 1);
    ++bins[e].count;
    acc[e] += correct[i] ? 1.0 : 0.0;
    cs[e] += conf[i];
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    bins[b].accuracy = acc[b] / static_cast<double>(bins[b].count);
    bins[b].confidence = cs[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

double ece(std::span<const double> conf, std::span<const std::uint8_t> correct, std::size_t n_bins) {
  return weighted_gap(reliability_bins(conf, correct, n_bins), conf.size());
}

std::vector<CalibrationBin> equal_mass_bins(std::span<const double> conf,
                                            std::span<const std::uint8_t> correct, std::size_t n_bins) {
  check_inputs(conf, correct, n_bins);
  const std::size_t n = conf.size();
  if (n < n_bins) {
    throw InputError("ACE needs at least as many predictions (" + std::to_string(n) + ") as bins (" +
                     std::to_string(n_bins) + ")");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] < conf[b]; });
  std::vector<CalibrationBin> bins(n_bins);
  const std::size_t base = n / n_bins, extra = n % n_bins;
  std::size_t pos = 0;
  for (std::size_t b = 0; b < n_bins; ++b) {
    const std::size_t count = base + (b < extra ? 1 : 0);
    double acc = 0.0, cs = 0.0;
    for (std::size_t j = pos; j < pos + count; ++j) {
      acc += correct[order[j]] ? 1.0 : 0.0;
      cs += conf[order[j]];
    }
    bins[b].lo = conf[order[pos]];
    bins[b].hi = conf[order[pos + count - 1]];
    bins[b].count = count;
    bins[b].accuracy = acc / static_cast<double>(count);
    bins[b].confidence = cs / static_cast<double>(count);
    pos += count;
  }
  return bins;
}

double ace(std::span<const double> conf, std::span<const std::uint8_t> correct, std::size_t n_bins) {
  return weighted_gap(equal_mass_bins(conf, correct, n_bins), conf.size());
}

CalibrationReport calibration_report(std::span<const double> conf, std::span<const std::uint8_t> correct,
                                     std::size_t n_bins) {
  CalibrationReport r;
  r.n_bins = n_bins;
  r.bins = reliability_bins(conf, correct, n_bins);
  r.ece = weighted_gap(r.bins, conf.size());
  r.ace_bins = equal_mass_bins(conf, correct, n_bins);
  r.ace = weighted_gap(r.ace_bins, conf.size());
  return r;
}

// ---------------------------------------------------------------------------
// Rank-sum

namespace {

struct Ranked {
  std::vector<long> doubled_a;  // 2 × midrank of each a value
  std::vector<long> doubled_all;
  double tie_term = 0.0;        // Σ (t³ − t) over tie groups
};

Ranked rank_pooled(std::span<const double> a, std::span<const double> b) {
  const std::size_t na = a.size(), n = na + b.size();
  std::vector<std::pair<double, std::size_t>> pooled;
  pooled.reserve(n);
  for (std::size_t i = 0; i < na; ++i) pooled.emplace_back(a[i], i);
  for (std::size_t i = 0; i < b.size(); ++i) pooled.emplace_back(b[i], na + i);
  std::sort(pooled.begin(), pooled.end());
  Ranked r;
  r.doubled_all.resize(n);
  std::vector<long> by_origin(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && pooled[j].first == pooled[i].first) ++j;
    // Ranks i+1 .. j share the midrank (i+1+j)/2; doubled: i+1+j.
    const long doubled = static_cast<long>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      by_origin[pooled[t].second] = doubled;
      r.doubled_all[t] = doubled;
    }
    const double t = static_cast<double>(j - i);
    r.tie_term += t * t * t - t;
    i = j;
  }
  r.doubled_a.assign(by_origin.begin(), by_origin.begin() + static_cast<long>(na));
  return r;
}

void require_nonempty(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw InputError("rank-sum test needs two non-empty groups");
  for (double x : a)
    if (std::isnan(x)) throw DomainError("rank-sum test on NaN");
  for (double x : b)
    if (std::isnan(x)) throw DomainError("rank-sum test on NaN");
}

double u_from_doubled(long doubled_sum, std::size_t na) {
  return static_cast<double>(doubled_sum) / 2.0 - static_cast<double>(na * (na + 1)) / 2.0;
}

}  // namespace

RankSumResult mann_whitney_u_exact(std::span<const double> a, std::span<const double> b, Alternative alt) {
  require_nonempty(a, b);
  const Ranked r = rank_pooled(a, b);
  const std::size_t na = a.size(), nb = b.size();
  const long observed = std::accumulate(r.doubled_a.begin(), r.doubled_a.end(), 0L);
  const long total = std::accumulate(r.doubled_all.begin(), r.doubled_all.end(), 0L);

  // Count subsets of the smaller group's size by doubled-rank sum. When b is
  // smaller, W_a = total − W_b flips the tail.
  const bool use_a = na <= nb;
  const std::size_t m = use_a ? na : nb;
  const long target = use_a ? observed : total - observed;
  const bool lower_tail = (alt == Alternative::Less) == use_a;

  const long max_sum = 2 * static_cast<long>(na + nb) * static_cast<long>(m);
  std::vector<std::vector<double>> ways(m + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t item = 0; item < r.doubled_all.size(); ++item) {
    const long w = r.doubled_all[item];
    for (std::size_t j = std::min(m, item + 1); j >= 1; --j) {
      auto& dst = ways[j];
      const auto& src = ways[j - 1];
      for (long s = max_sum; s >= w; --s) dst[static_cast<std::size_t>(s)] += src[static_cast<std::size_t>(s - w)];
    }
  }
  double hits = 0.0, all = 0.0;
  for (long s = 0; s <= max_sum; ++s) {
    const double c = ways[m][static_cast<std::size_t>(s)];
    all += c;
    if (lower_tail ? s <= target : s >= target) hits += c;
  }
  return {u_from_doubled(observed, na), hits / all, true};
}

RankSumResult mann_whitney_u_normal(std::span<const double> a, std::span<const double> b, Alternative alt) {
  require_nonempty(a, b);
  const Ranked r = rank_pooled(a, b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size()), n = na + nb;
  const long observed = std::accumulate(r.doubled_a.begin(), r.doubled_a.end(), 0L);
  const double u = u_from_doubled(observed, a.size());
  const double mean = na * nb / 2.0;
  const double var = na * nb / 12.0 * ((n + 1.0) - (n > 1.0 ? r.tie_term / (n * (n - 1.0)) : 0.0));
  if (!(var > 0.0)) return {u, 1.0, false};
  const double sd = std::sqrt(var);
  const double z = alt == Alternative::Less ? (u - mean + 0.5) / sd : (u - mean - 0.5) / sd;
  const boost::math::normal_distribution<double> standard;
  double p = alt == Alternative::Less ? boost::math::cdf(standard, z)
                                      : boost::math::cdf(boost::math::complement(standard, z));
  p = std::clamp(p, std::numeric_limits<double>::min(), 1.0);
  return {u, p, false};
}

RankSumResult mann_whitney_u(std::span<const double> a, std::span<const double> b, Alternative alt) {
  require_nonempty(a, b);
  if (a.size() * b.size() <= kExactRankSumLimit) return mann_whitney_u_exact(a, b, alt);
  return mann_whitney_u_normal(a, b, alt);
}

// ---------------------------------------------------------------------------

ConfidenceInterval mc_confidence_interval(std::span<const double> samples, double level) {
  const std::size_t k = samples.size();
  if (k < 2) throw InputError("a Monte Carlo interval needs at least 2 samples, got " + std::to_string(k));
  if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence level must be in (0, 1)");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(k);
  double ss = 0.0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double s = std::sqrt(ss / static_cast<double>(k - 1));
  const boost::math::students_t_distribution<double> t(static_cast<double>(k - 1));
  const double tq = boost::math::quantile(t, 0.5 + level / 2.0);
  const double half = tq * s / std::sqrt(static_cast<double>(k));
  return {mean, std::clamp(mean - half, 0.0, 1.0), std::clamp(mean + half, 0.0, 1.0)};
}

std::size_t majority_class(std::span<const double> probs, std::size_t k, std::size_t n_classes) {
  if (probs.size() != k * n_classes) throw DimensionError("majority_class: table size mismatch");
  std::vector<std::size_t> votes(n_classes, 0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = probs.subspan(i * n_classes, n_classes);
    ++votes[static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin())];
  }
  return static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

// ---------------------------------------------------------------------------

Tensor predict_proba(const Model& model, const Dataset& ds, std::span<const std::size_t> indices,
                     Mode mode, RngStream* rng, std::size_t batch_size) {
  NoGradGuard no_grad;
  const std::size_t C = model.config().n_classes;
  std::vector<double> out;
  out.reserve(indices.size() * C);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto [tokens, labels] = gather(ds, chunk);
    const auto res = model.forward(tokens, mode, rng);
    const Tensor probs = softmax_rows(res.logits);
    const auto p = probs.data();
    out.insert(out.end(), p.begin(), p.end());
  }
  return Tensor({indices.size(), C}, std::move(out));
}

std::pair<std::vector<double>, std::vector<std::uint8_t>> confidence_and_correctness(
    const Model& model, const Dataset& ds, std::span<const std::size_t> indices) {
  const Tensor probs = predict_proba(model, ds, indices);
  const std::size_t C = probs.dim(1);
  std::vector<double> conf(indices.size());
  std::vector<std::uint8_t> correct(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto row = probs.data().subspan(i * C, C);
    const auto it = std::max_element(row.begin(), row.end());
    conf[i] = *it;
    correct[i] = static_cast<int>(it - row.begin()) == ds.labels[indices[i]] ? 1 : 0;
  }
  return {std::move(conf), std::move(correct)};
}

UncertaintyReport estimate_uncertainty(const Model& model, const Dataset& ds,
                                       std::span<const std::size_t> indices, std::size_t k,
                                       std::uint64_t seed, double level) {
  if (model.adapters.kind() != AdapterKind::Pvera || model.adapters.merged())
    throw ContractError("uncertainty estimation needs an unmerged pvera model");
  if (k < 2) throw InputError("uncertainty estimation needs k >= 2 passes");
  NoGradGuard no_grad;
  const std::size_t C = model.config().n_classes;
  UncertaintyReport report;
  report.k = k;
  for (std::size_t id : indices) {
    const std::vector<std::size_t> repeated(k, id);
    auto [tokens, labels] = gather(ds, repeated);
    RngStream rng(seed, streams::kMonteCarlo + id);
    const auto res = model.forward(tokens, Mode::ProbInfer, &rng);
    const Tensor probs = softmax_rows(res.logits);
    const auto pv = probs.data();

    SampleUncertainty s;
    s.sample_id = id;
    s.label = ds.labels[id];
    std::size_t hits = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const auto row = pv.subspan(i * C, C);
      const auto it = std::max_element(row.begin(), row.end());
      s.maxima.push_back(*it);
      hits += static_cast<int>(it - row.begin()) == s.label ? 1 : 0;
    }
    // Deviations from the first draw keep identical draws at exactly zero spread.
    double sum = 0.0, ss = 0.0;
    for (double m : s.maxima) sum += m - s.maxima.front();
    const double shift = sum / static_cast<double>(k);
    for (double m : s.maxima) ss += (m - s.maxima.front() - shift) * (m - s.maxima.front() - shift);
    s.std = std::sqrt(ss / static_cast<double>(k));
    s.mean_accuracy = static_cast<double>(hits) / static_cast<double>(k);
    s.correct = s.mean_accuracy > 0.5;
    s.majority = majority_class(pv, k, C);
    std::vector<double> scores(k);
    for (std::size_t i = 0; i < k; ++i) scores[i] = pv[i * C + s.majority];
    s.interval = mc_confidence_interval(scores, level);
    (s.correct ? report.std_correct : report.std_incorrect).push_back(s.std);
    report.samples.push_back(std::move(s));
  }

  double wc = 0.0, wi = 0.0;
  for (const auto& s : report.samples) (s.correct ? wc : wi) += s.interval.width();
  if (!report.std_correct.empty()) report.mean_width_correct = wc / static_cast<double>(report.std_correct.size());
  if (!report.std_incorrect.empty())
    report.mean_width_incorrect = wi / static_cast<double>(report.std_incorrect.size());
  if (!report.std_correct.empty() && !report.std_incorrect.empty())
    report.p_value = mann_whitney_u(report.std_incorrect, report.std_correct, Alternative::Greater).p_value;
  return report;
}

std::vector<double> latent_statistic(const Model& model, const Dataset& ds,
                                     std::span<const std::size_t> indices, OodReduction reduction) {
  const auto& adapters = model.adapters;
  if (adapters.kind() != AdapterKind::Pvera && adapters.kind() != AdapterKind::Vera)
    throw ContractError("the latent statistic needs a vera or pvera model");
  if (adapters.merged()) throw ContractError("the latent statistic needs unmerged adapters");
  if (!adapters.config().placement.contains(Branch::Q) || !adapters.config().placement.contains(Branch::V))
    throw ContractError("the latent statistic needs adapters on both Q and V");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const std::size_t last = cfg.n_layers - 1, L = cfg.seq_len;
  const auto& basis = *adapters.basis();
  const std::size_t r = basis.rank();
  std::vector<double> out;
  out.reserve(indices.size());
  constexpr std::size_t kBatch = 64;
  for (std::size_t start = 0; start < indices.size(); start += kBatch) {
    const auto chunk = indices.subspan(start, std::min(kBatch, indices.size() - start));
    auto [tokens, labels] = gather(ds, chunk);
    std::array<Tensor, 2> mus;
    if (adapters.kind() == AdapterKind::Pvera) {
      const auto res = model.forward(tokens, Mode::DetInfer, nullptr);
      mus[0] = res.latents[last][static_cast<std::size_t>(Branch::Q)]->mu;
      mus[1] = res.latents[last][static_cast<std::size_t>(Branch::V)]->mu;
    } else {
      // VeRA's counterpart of mu: (x · A) ⊙ d at the last layer's input.
      // Re-run the frozen trunk up to the last layer norm.
      const auto& state = *model.backbone;
      const std::size_t rows = chunk.size() * L;
      std::vector<double> pos(rows * cfg.d);
      const auto pe = state.positional.data();
      for (std::size_t b = 0; b < chunk.size(); ++b) std::copy(pe.begin(), pe.end(), pos.begin() + b * pe.size());
      Tensor x = add(reshape(tokens, {rows, cfg.d}), Tensor({rows, cfg.d}, std::move(pos)));
      for (std::size_t i = 0; i <= last; ++i) {
        const auto& w = state.layers[i];
        const Tensor h = layer_norm(x, w.ln1_gamma, w.ln1_beta);
        if (i == last) {
          for (std::size_t j = 0; j < 2; ++j) {
            const Branch br = j == 0 ? Branch::Q : Branch::V;
            const auto& p = std::get<ScalingParams>(adapters.params(i, br));
            mus[j] = mul_rowvec(matmul(h, basis.a), p.d_vec);
          }
          break;
        }
        QkvResult qkv = qkv_project(h, w, &adapters, i, Mode::DetInfer, nullptr);
        x = add(x, linear(attention(qkv.q, qkv.k, qkv.v, cfg.n_heads, chunk.size()), w.w_o, w.b_o));
        const Tensor h2 = layer_norm(x, w.ln2_gamma, w.ln2_beta);
        x = add(x, linear(gelu(linear(h2, w.w_mlp1, w.b_mlp1)), w.w_mlp2, w.b_mlp2));
      }
    }
    const auto q = mus[0].data(), v = mus[1].data();
    for (std::size_t s = 0; s < chunk.size(); ++s) {
      double acc = 0.0;
      for (std::size_t e = s * L * r; e < (s + 1) * L * r; ++e) {
        const double val = q[e] + v[e];
        acc += reduction == OodReduction::MeanAbs ? std::abs(val) : val;
      }
      out.push_back(acc / static_cast<double>(L * r));
    }
  }
  return out;
}

OODReport ood_statistic(const Model& model, const Dataset& in_ds, std::span<const std::size_t> in_idx,
                        const Dataset& out_ds, std::span<const std::size_t> out_idx,
                        OodReduction reduction) {
  if (in_idx.empty() || out_idx.empty()) throw InputError("OOD comparison needs two non-empty groups");
  OODReport report;
  report.reduction = reduction;
  report.in_stat = latent_statistic(model, in_ds, in_idx, reduction);
  report.out_stat = latent_statistic(model, out_ds, out_idx, reduction);
  report.p_value = mann_whitney_u(report.in_stat, report.out_stat, Alternative::Less).p_value;
  return report;
}

}  // namespace pvera
