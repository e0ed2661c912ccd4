#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pvera/backbone.hpp"
#include "pvera/datasets.hpp"

namespace pvera {

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

struct CalibrationReport {
  double ece = 0.0;
  double ace = 0.0;
  std::size_t n_bins = 0;
  std::vector<CalibrationBin> bins;      // fixed-width (ECE) bins
  std::vector<CalibrationBin> ace_bins;  // equal-mass bins
};

inline constexpr std::size_t kDefaultCalibrationBins = 15;

/// Fixed-width bins [i/B, (i+1)/B); a confidence of exactly 1 goes to the
/// last bin. Throws DomainError for confidences outside [0, 1].
std::vector<CalibrationBin> reliability_bins(std::span<const double> confidences,
                                             std::span<const std::uint8_t> correct, std::size_t n_bins);
/// Sum over bins of (n_b / N) · |accuracy(b) − confidence(b)|.
double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
           std::size_t n_bins = kDefaultCalibrationBins);

/// Confidence-sorted (stable) equal-count bins; the N mod B leftover samples
/// go one each to the lowest bins. Throws InputError when N < B.
std::vector<CalibrationBin> equal_mass_bins(std::span<const double> confidences,
                                            std::span<const std::uint8_t> correct, std::size_t n_bins);
double ace(std::span<const double> confidences, std::span<const std::uint8_t> correct,
           std::size_t n_bins = kDefaultCalibrationBins);

CalibrationReport calibration_report(std::span<const double> confidences,
                                     std::span<const std::uint8_t> correct,
                                     std::size_t n_bins = kDefaultCalibrationBins);

// ---------------------------------------------------------------------------
// Rank-sum test

enum class Alternative { Less, Greater };

struct RankSumResult {
  double u = 0.0;  // U statistic of group a
  double p_value = 1.0;
  bool exact = false;
};

/// Mann-Whitney U with midranks for ties. `Less` tests whether group a tends
/// to be smaller than group b. Exact permutation distribution when
/// n_a·n_b <= 400, otherwise the tie-corrected normal approximation with
/// continuity correction.
RankSumResult mann_whitney_u(std::span<const double> a, std::span<const double> b, Alternative alt);
RankSumResult mann_whitney_u_exact(std::span<const double> a, std::span<const double> b, Alternative alt);
RankSumResult mann_whitney_u_normal(std::span<const double> a, std::span<const double> b, Alternative alt);
inline constexpr std::size_t kExactRankSumLimit = 400;

// ---------------------------------------------------------------------------
// Monte Carlo confidence intervals

struct ConfidenceInterval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
};

/// mean ± t(k−1, (1+level)/2) · s / sqrt(k), clipped to [0, 1].
ConfidenceInterval mc_confidence_interval(std::span<const double> samples, double level = 0.95);

/// Most frequent argmax over k rows of a [k × C] probability table; ties go
/// to the lower class index.
std::size_t majority_class(std::span<const double> probs, std::size_t k, std::size_t n_classes);

// ---------------------------------------------------------------------------
// Model-level evaluations

/// Softmax probabilities [n × C] for the given samples.
Tensor predict_proba(const Model& model, const Dataset& ds, std::span<const std::size_t> indices,
                     Mode mode = Mode::DetInfer, RngStream* rng = nullptr, std::size_t batch_size = 64);

/// Max-softmax confidences and correctness flags in deterministic inference.
std::pair<std::vector<double>, std::vector<std::uint8_t>> confidence_and_correctness(
    const Model& model, const Dataset& ds, std::span<const std::size_t> indices);

struct SampleUncertainty {
  std::size_t sample_id = 0;
  int label = 0;
  std::vector<double> maxima;  // k max-softmax values
  double std = 0.0;            // population std of maxima
  double mean_accuracy = 0.0;  // fraction of passes whose argmax is the label
  bool correct = false;        // mean_accuracy > 0.5
  std::size_t majority = 0;
  ConfidenceInterval interval;  // over the k scores of the majority class
};

struct UncertaintyReport {
  std::size_t k = 0;
  std::vector<SampleUncertainty> samples;
  std::vector<double> std_correct;
  std::vector<double> std_incorrect;
  /// One-sided rank-sum p-value that incorrect stds exceed correct stds
  /// (1 when either group is empty).
  double p_value = 1.0;
  double mean_width_correct = 0.0;
  double mean_width_incorrect = 0.0;
};

/// k probabilistic passes per sample. Sample i draws from stream
/// (seed, kMonteCarlo + i), so the result does not depend on sample order.
UncertaintyReport estimate_uncertainty(const Model& model, const Dataset& ds,
                                       std::span<const std::size_t> indices, std::size_t k,
                                       std::uint64_t seed, double level = 0.95);

enum class OodReduction { Mean, MeanAbs };

struct OODReport {
  std::vector<double> in_stat;
  std::vector<double> out_stat;
  double p_value = 1.0;  // one-sided: in-distribution lower
  OodReduction reduction = OodReduction::Mean;
};

/// Per sample, the last layer's (mu_q + mu_v) from a deterministic pass,
/// reduced over tokens and latent dimensions.
std::vector<double> latent_statistic(const Model& model, const Dataset& ds,
                                     std::span<const std::size_t> indices, OodReduction reduction);

OODReport ood_statistic(const Model& model, const Dataset& in_ds, std::span<const std::size_t> in_idx,
                        const Dataset& out_ds, std::span<const std::size_t> out_idx,
                        OodReduction reduction = OodReduction::Mean);

}  // namespace pvera
