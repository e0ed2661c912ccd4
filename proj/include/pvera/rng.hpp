#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace pvera {

/// Philox4x32 with 10 rounds (Salmon et al., Random123).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

/// Counter-based random stream. Draw number n of stream (seed, stream_id) is a
/// pure function of those three values, so streams can be split, replayed and
/// consumed in any order without coordination.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t counter = 0)
      : seed_(seed), stream_id_(stream_id), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  /// New stream with the same seed and a different id, counter reset.
  RngStream split(std::uint64_t stream_id) const { return {seed_, stream_id, 0}; }

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1), 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via the inverse normal CDF of one uniform draw.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  void fill_normal(std::span<double> out, double mean = 0.0, double stddev = 1.0);
  std::vector<double> normals(std::size_t n, double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_;
};

/// Well-known stream ids. Keeping them in one place makes it easy to see that
/// no two consumers share a stream.
namespace streams {
inline constexpr std::uint64_t kBackboneInit = 0x1000;
inline constexpr std::uint64_t kProbeInit = 0x1001;
inline constexpr std::uint64_t kBasisInit = 0x1002;
inline constexpr std::uint64_t kPositional = 0x1003;
/// Adapter init for (layer, branch) is kAdapterInit + 4 * layer + branch.
inline constexpr std::uint64_t kAdapterInit = 0x2000;
/// Training epoch shuffles use stream id == epoch; sampling uses this id.
inline constexpr std::uint64_t kTrainSampling = 0x3000'0000;
/// Monte Carlo passes for sample i use kMonteCarlo + i.
inline constexpr std::uint64_t kMonteCarlo = 0x4000'0000;
/// Probabilistic-mode evaluation of a whole split, one stream per run.
inline constexpr std::uint64_t kEvalSampling = 0x3000'0001;
inline constexpr std::uint64_t kDataset = 0x5000;
inline constexpr std::uint64_t kSplit = 0x5100;
/// Random trainable values for gradient checks.
inline constexpr std::uint64_t kGradCheck = 0x6000;
}  // namespace streams

}  // namespace pvera
