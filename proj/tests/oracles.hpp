#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "pvera/evaluation.hpp"
#include "pvera/rng.hpp"

// Brute-force references written straight from the definitions.
namespace testing {

using pvera::Alternative;
using pvera::RngStream;

struct Predictions {
  std::vector<double> conf;
  std::vector<std::uint8_t> correct;
};

inline Predictions random_predictions(std::uint64_t seed, std::size_t n) {
  RngStream rng(seed, 1);
  Predictions p;
  for (std::size_t i = 0; i < n; ++i) {
    // Some exact edge values and exact ties.
    double c = rng.uniform();
    if (i % 17 == 0) c = static_cast<double>(rng.below(16)) / 15.0;
    if (i % 23 == 0) c = 1.0;
    p.conf.push_back(c);
    p.correct.push_back(rng.uniform() < c ? 1 : 0);
  }
  return p;
}

// Direct definition: bin b holds b/B <= c < (b+1)/B, and c = 1 joins the last bin.
inline double brute_ece(const Predictions& p, std::size_t B) {
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double lo = static_cast<double>(b) / static_cast<double>(B);
    const double hi = static_cast<double>(b + 1) / static_cast<double>(B);
    double n = 0, acc = 0, conf = 0;
    for (std::size_t i = 0; i < p.conf.size(); ++i) {
      const double c = p.conf[i];
      const bool in = (c >= lo && c < hi) || (b == B - 1 && c == 1.0);
      if (!in) continue;
      n += 1;
      acc += p.correct[i];
      conf += c;
    }
    if (n > 0) total += n / static_cast<double>(p.conf.size()) * std::abs(acc / n - conf / n);
  }
  return total;
}

// Sort (confidence, original index) pairs and cut into B contiguous runs whose
// sizes differ by at most one, larger runs first.
inline double brute_ace(const Predictions& p, std::size_t B) {
  const std::size_t n = p.conf.size();
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t i = 0; i < n; ++i) order.emplace_back(p.conf[i], i);
  std::sort(order.begin(), order.end());
  double total = 0.0;
  std::size_t start = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t size = n / B + (b < n % B ? 1 : 0);
    double acc = 0, conf = 0;
    for (std::size_t j = start; j < start + size; ++j) {
      acc += p.correct[order[j].second];
      conf += order[j].first;
    }
    total += static_cast<double>(size) / static_cast<double>(n) *
             std::abs(acc / static_cast<double>(size) - conf / static_cast<double>(size));
    start += size;
  }
  return total;
}

// Midrank of x in the pool: (#less) + (#equal + 1) / 2.
inline double midrank(double x, const std::vector<double>& pool) {
  double less = 0, equal = 0;
  for (double y : pool) {
    less += y < x ? 1 : 0;
    equal += y == x ? 1 : 0;
  }
  return less + (equal + 1) / 2;
}

// Enumerates every way of choosing |a| pooled positions.
inline double brute_rank_sum_p(const std::vector<double>& a, const std::vector<double>& b, Alternative alt) {
  std::vector<double> pool = a;
  pool.insert(pool.end(), b.begin(), b.end());
  std::vector<double> ranks;
  for (double x : pool) ranks.push_back(midrank(x, pool));
  double observed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) observed += ranks[i];
  const std::size_t n = pool.size();
  std::vector<bool> pick(n, false);
  std::fill(pick.begin(), pick.begin() + static_cast<long>(a.size()), true);
  double hits = 0, all = 0;
  std::sort(pick.begin(), pick.end());
  do {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (pick[i]) s += ranks[i];
    all += 1;
    const bool extreme = alt == Alternative::Less ? s <= observed + 1e-9 : s >= observed - 1e-9;
    hits += extreme ? 1 : 0;
  } while (std::next_permutation(pick.begin(), pick.end()));
  return hits / all;
}

}  // namespace testing
