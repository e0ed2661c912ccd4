#include "pvera/config.hpp"

#include <cctype>

#include "pvera/errors.hpp"

namespace pvera {

void BackboneConfig::validate() const {
  if (d == 0 || seq_len == 0 || n_layers == 0 || n_heads == 0 || n_classes == 0 || mlp_ratio == 0)
    throw ConfigError("backbone extents must all be >= 1");
  if (d % n_heads != 0) {
    throw ConfigError("embedding width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
}

std::string_view to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::LinearProbe: return "linear";
    case AdapterKind::Lora: return "lora";
    case AdapterKind::Vera: return "vera";
    case AdapterKind::Pvera: return "pvera";
  }
  return "?";
}

AdapterKind parse_adapter_kind(std::string_view text) {
  if (text == "linear" || text == "linear_probe") return AdapterKind::LinearProbe;
  if (text == "lora") return AdapterKind::Lora;
  if (text == "vera") return AdapterKind::Vera;
  if (text == "pvera") return AdapterKind::Pvera;
  throw ConfigError("unknown adapter '" + std::string(text) +
                    "' (valid: linear, lora, vera, pvera)");
}

char branch_letter(Branch b) { return "qkv"[static_cast<std::size_t>(b)]; }

Placement Placement::parse(std::string_view letters) {
  Placement p;
  for (char c : letters) {
    switch (std::tolower(static_cast<unsigned char>(c))) {
      case 'q': p.on[0] = true; break;
      case 'k': p.on[1] = true; break;
      case 'v': p.on[2] = true; break;
      default:
        throw ConfigError("placement '" + std::string(letters) + "' may only contain q, k, v");
    }
  }
  return p;
}

std::string Placement::str() const {
  std::string s;
  for (auto b : kAllBranches)
    if (contains(b)) s += branch_letter(b);
  return s;
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::Train: return "train";
    case Mode::DetInfer: return "det";
    case Mode::ProbInfer: return "prob";
  }
  return "?";
}

Mode parse_mode(std::string_view text) {
  if (text == "train") return Mode::Train;
  if (text == "det" || text == "det_infer") return Mode::DetInfer;
  if (text == "prob" || text == "prob_infer") return Mode::ProbInfer;
  throw ContractError("unknown mode '" + std::string(text) + "' (valid: train, det, prob)");
}

void AdapterConfig::validate(const BackboneConfig& backbone) const {
  if (kind == AdapterKind::LinearProbe) {
    if (beta != 0.0) throw ConfigError("beta > 0 requires the pvera adapter");
    return;
  }
  if (placement.size() == 0) throw ConfigError("adapter placement is empty");
  if (rank == 0) throw ConfigError("adapter rank must be >= 1");
  if (kind == AdapterKind::Lora && rank >= backbone.d) {
    throw ConfigError("lora rank " + std::to_string(rank) + " must be below width " +
                      std::to_string(backbone.d));
  }
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
  if (beta > 0.0 && kind != AdapterKind::Pvera) throw ConfigError("beta > 0 requires the pvera adapter");
}

}  // namespace pvera
