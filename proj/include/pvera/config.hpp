#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace pvera {

/// Shape of the frozen encoder. Defaults are the desk-scale model.
struct BackboneConfig {
  std::size_t d = 64;          // embedding width
  std::size_t seq_len = 17;    // tokens per sample
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_classes = 2;
  std::size_t mlp_ratio = 4;

  std::size_t head_dim() const { return d / n_heads; }
  std::size_t mlp_hidden() const { return d * mlp_ratio; }
  /// Throws ConfigError on zero extents or d not divisible by n_heads.
  void validate() const;
};

enum class AdapterKind { LinearProbe, Lora, Vera, Pvera };

std::string_view to_string(AdapterKind kind);
/// Accepts "linear" / "linear_probe", "lora", "vera", "pvera".
AdapterKind parse_adapter_kind(std::string_view text);

enum class Branch : std::size_t { Q = 0, K = 1, V = 2 };
inline constexpr std::array<Branch, 3> kAllBranches = {Branch::Q, Branch::K, Branch::V};
char branch_letter(Branch b);

/// Subset of {Q, K, V} projections carrying adapters.
struct Placement {
  std::array<bool, 3> on{false, false, false};

  static Placement parse(std::string_view letters);  // e.g. "qv"
  static Placement qv() { return parse("qv"); }
  bool contains(Branch b) const { return on[static_cast<std::size_t>(b)]; }
  std::size_t size() const { return std::size_t(on[0]) + std::size_t(on[1]) + std::size_t(on[2]); }
  std::string str() const;
  bool operator==(const Placement&) const = default;
};

/// Which latent sample the PVeRA branches feed forward.
enum class Mode { Train, DetInfer, ProbInfer };

std::string_view to_string(Mode mode);
Mode parse_mode(std::string_view text);

struct AdapterConfig {
  AdapterKind kind = AdapterKind::Pvera;
  std::size_t rank = 32;
  double alpha = 16.0;
  Placement placement = Placement::qv();
  double beta = 0.0;         // KL weight, pvera only
  double adapter_lr = 1e-3;  // vera / pvera
  std::uint64_t basis_seed = 0;

  /// Throws ConfigError when the combination is invalid for `backbone`.
  void validate(const BackboneConfig& backbone) const;
};

}  // namespace pvera
