#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pvera/tensor.hpp"

namespace pvera {

enum class DatasetKind { Blobs, Rings, Shifted };

std::string_view to_string(DatasetKind kind);
/// Throws ConfigError listing the valid kinds.
DatasetKind parse_dataset_kind(std::string_view text);

/// Recipe for a synthetic token-sequence classification set. Every token
/// lives directly in embedding space.
///
/// - blobs: each class has a mean direction scaled by `separation`; tokens are
///   that mean plus unit Gaussian noise.
/// - rings: a 2-D latent point whose radius encodes the class, embedded
///   through a random orthonormal pair of directions on top of a fixed offset
///   orthogonal to them. Class regions are concentric, so the mean-pooled
///   tokens are not linearly separable.
/// - shifted: the `base` recipe with the same seed plus `shift` times a fixed
///   random unit direction added to every token.
struct SyntheticSpec {
  DatasetKind kind = DatasetKind::Blobs;
  DatasetKind base = DatasetKind::Blobs;  // for kind == Shifted
  std::size_t n_classes = 2;
  std::size_t per_class = 1000;
  std::size_t d = 64;
  std::size_t seq_len = 17;
  double separation = 3.0;
  double shift = 0.0;
  double noise = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  Tensor tokens;            // [N × seq_len × d]
  std::vector<int> labels;  // N entries in [0, n_classes)
  std::size_t n_classes = 0;
  std::vector<std::size_t> train, val, test;
  SyntheticSpec spec;

  std::size_t size() const { return labels.size(); }
  std::size_t seq_len() const { return tokens.dim(1); }
  std::size_t width() const { return tokens.dim(2); }
};

/// Deterministic in spec (including spec.seed). Labels cycle 0..C-1 so the
/// classes are balanced within one sample. No split is assigned.
Dataset generate(const SyntheticSpec& spec);

/// Stratified split: per-class seeded shuffles, then train and val quotas
/// handed out round-robin over classes so per-class counts differ by at most
/// one. Everything not in train or val becomes test.
Dataset split(Dataset ds, std::size_t n_train, std::size_t n_val, std::uint64_t seed);

/// Rows `indices` of the dataset as a batch.
std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, std::span<const std::size_t> indices);

/// dir/tokens.pvt, dir/labels.csv (sample_id,label), dir/manifest.json.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
/// Throws MissingInputError, FormatError (tensor bytes), ValidationError
/// (counts or extents disagree) or IndexError (label outside [0, C)).
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace pvera
