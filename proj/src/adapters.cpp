#include "pvera/adapters.hpp"

#include <cmath>

#include "pvera/errors.hpp"

namespace pvera {

namespace {

Tensor gaussian_tensor(RngStream& rng, Shape shape, double stddev, bool requires_grad) {
  auto values = rng.normals(shape_numel(shape), 0.0, stddev);
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

void check_width(const Tensor& x, std::size_t d, const char* what) {
  if (x.rank() != 2 || x.dim(1) != d) {
    throw DimensionError(std::string(what) + ": input " + shape_str(x.shape()) +
                         " does not have width " + std::to_string(d));
  }
}

}  // namespace

SharedBasis SharedBasis::generate(std::size_t d, std::size_t rank, AdapterKind kind,
                                  std::uint64_t seed) {
  if (kind != AdapterKind::Vera && kind != AdapterKind::Pvera)
    throw ContractError("shared basis exists only for vera and pvera");
  const std::size_t heads = kind == AdapterKind::Pvera ? 2 : 1;
  RngStream rng(seed, streams::kBasisInit);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  SharedBasis basis;
  basis.a = gaussian_tensor(rng, {d, heads * rank}, stddev, false);
  basis.b = gaussian_tensor(rng, {rank, d}, stddev, false);
  basis.seed = seed;
  return basis;
}

SharedBasis SharedBasis::mu_half() const {
  SharedBasis half;
  half.a = slice_cols(a, 0, rank()).detach();
  half.b = b;
  half.seed = seed;
  return half;
}

Tensor lora_forward(const Tensor& x, const LoraParams& p, double alpha, std::size_t rank) {
  check_width(x, p.a.dim(0), "lora_forward");
  return scale(matmul(matmul(x, p.a), p.b), alpha / static_cast<double>(rank));
}

Tensor vera_forward(const Tensor& x, const SharedBasis& basis, const VeraParams& p, double alpha) {
  check_width(x, basis.a.dim(0), "vera_forward");
  if (basis.a.dim(1) != basis.rank())
    throw DimensionError("vera_forward: basis A " + shape_str(basis.a.shape()) + " is not d x r");
  const Tensor down = mul_rowvec(matmul(x, basis.a), p.d_vec);
  return scale(mul_rowvec(matmul(down, basis.b), p.b_vec), alpha);
}

GaussianLatent pvera_heads(const Tensor& x, const SharedBasis& basis, const PVeraParams& p) {
  check_width(x, basis.a.dim(0), "pvera_heads");
  const std::size_t r = basis.rank();
  if (basis.a.dim(1) != 2 * r)
    throw DimensionError("pvera_heads: basis A " + shape_str(basis.a.shape()) + " is not d x 2r");
  const Tensor h = mul_rowvec(matmul(x, basis.a), p.d_vec);
  return {slice_cols(h, 0, r), exp(slice_cols(h, r, r))};
}

Tensor reparameterize(const GaussianLatent& latent, RngStream& rng, double noise_scale) {
  if (latent.mu.shape() != latent.sigma.shape()) {
    throw DimensionError("reparameterize: mu " + shape_str(latent.mu.shape()) + " vs sigma " +
                         shape_str(latent.sigma.shape()));
  }
  if (noise_scale == 0.0) return latent.mu;
  Tensor eps(latent.mu.shape(), rng.normals(latent.mu.numel(), 0.0, noise_scale));
  return add(latent.mu, mul(eps, latent.sigma));
}

PVeraOutput pvera_forward(const Tensor& x, const SharedBasis& basis, const PVeraParams& p,
                          double alpha, Mode mode, RngStream* rng, double noise_scale) {
  GaussianLatent latent = pvera_heads(x, basis, p);
  Tensor z;
  switch (mode) {
    case Mode::DetInfer:
      z = latent.mu;
      break;
    case Mode::Train:
    case Mode::ProbInfer:
      if (!rng) throw ContractError("pvera_forward: sampling mode needs a random stream");
      z = reparameterize(latent, *rng, noise_scale);
      break;
    default:
      throw ContractError("pvera_forward: invalid mode");
  }
  Tensor delta = scale(mul_rowvec(matmul(z, basis.b), p.b_vec), alpha);
  return {std::move(delta), std::move(latent)};
}

Tensor kl_layer(std::span<const GaussianLatent> latents) {
  if (latents.empty()) throw ContractError("kl_layer: no latents");
  Tensor total = gaussian_kl(latents[0].mu, latents[0].sigma);
  for (std::size_t i = 1; i < latents.size(); ++i)
    total = add(total, gaussian_kl(latents[i].mu, latents[i].sigma));
  return scale(total, 1.0 / static_cast<double>(latents.size()));
}

Tensor adapter_dense_map(const BranchParams& params, const AdapterConfig& cfg,
                         const SharedBasis* basis) {
  NoGradGuard no_grad;
  switch (cfg.kind) {
    case AdapterKind::LinearProbe:
      throw ContractError("merge: the linear probe has no adapter to merge");
    case AdapterKind::Lora: {
      const auto& p = std::get<LoraParams>(params);
      return scale(matmul(p.a, p.b), cfg.alpha / static_cast<double>(cfg.rank)).detach();
    }
    case AdapterKind::Vera:
    case AdapterKind::Pvera: {
      if (!basis) throw ContractError("merge: vera/pvera need the shared basis");
      const auto& p = std::get<ScalingParams>(params);
      const std::size_t r = basis->rank();
      // A_mu = A · diag(d) restricted to the mean columns (all columns for VeRA).
      const Tensor a_scaled = mul_rowvec(basis->a, p.d_vec);
      const Tensor a_mu = cfg.kind == AdapterKind::Pvera ? slice_cols(a_scaled, 0, r) : a_scaled;
      return scale(mul_rowvec(matmul(a_mu, basis->b), p.b_vec), cfg.alpha).detach();
    }
  }
  throw ContractError("merge: unknown adapter kind");
}

Tensor merge_weights(const Tensor& weight, const BranchParams& params, const AdapterConfig& cfg,
                     const SharedBasis* basis) {
  const Tensor m = adapter_dense_map(params, cfg, basis);
  if (weight.rank() != 2 || weight.dim(0) != m.dim(1) || weight.dim(1) != m.dim(0)) {
    throw DimensionError("merge: weight " + shape_str(weight.shape()) +
                         " does not match adapter map " + shape_str(m.shape()));
  }
  NoGradGuard no_grad;
  return add(weight.detach(), transpose(m)).detach();
}

std::size_t count_trainable_params(const AdapterConfig& cfg, const BackboneConfig& backbone) {
  const std::size_t sites = backbone.n_layers * cfg.placement.size();
  switch (cfg.kind) {
    case AdapterKind::LinearProbe: return 0;
    case AdapterKind::Lora: return sites * 2 * backbone.d * cfg.rank;
    case AdapterKind::Vera: return sites * (cfg.rank + backbone.d);
    case AdapterKind::Pvera: return sites * (2 * cfg.rank + backbone.d);
  }
  return 0;
}

std::size_t count_probe_params(const BackboneConfig& backbone) {
  return backbone.d * backbone.n_classes + backbone.n_classes;
}

// ---------------------------------------------------------------------------
// AdapterSet

AdapterSet AdapterSet::create(const AdapterConfig& cfg, const BackboneConfig& backbone,
                              std::uint64_t seed) {
  backbone.validate();
  cfg.validate(backbone);
  AdapterSet set;
  set.config_ = cfg;
  set.layers_.resize(backbone.n_layers);
  if (cfg.kind == AdapterKind::LinearProbe) return set;

  const std::size_t d = backbone.d, r = cfg.rank;
  if (cfg.kind != AdapterKind::Lora) {
    set.basis_ = std::make_shared<const SharedBasis>(
        SharedBasis::generate(d, r, cfg.kind, cfg.basis_seed));
  }
  const std::size_t d_len = cfg.kind == AdapterKind::Pvera ? 2 * r : r;
  for (std::size_t layer = 0; layer < backbone.n_layers; ++layer) {
    for (Branch branch : kAllBranches) {
      if (!cfg.placement.contains(branch)) continue;
      RngStream rng(seed, streams::kAdapterInit + 4 * layer + static_cast<std::size_t>(branch));
      if (cfg.kind == AdapterKind::Lora) {
        LoraParams p;
        p.a = gaussian_tensor(rng, {d, r}, 1.0 / std::sqrt(static_cast<double>(d)), true);
        p.b = Tensor::zeros({r, d}, true);
        set.set_params(layer, branch, std::move(p));
      } else {
        ScalingParams p;
        p.d_vec = Tensor::full({d_len}, rng.uniform(1e-5, 1.0), true);
        p.b_vec = Tensor::zeros({d}, true);
        set.set_params(layer, branch, std::move(p));
      }
    }
  }
  return set;
}

bool AdapterSet::attached(std::size_t layer, Branch branch) const {
  return layer < layers_.size() && layers_[layer][static_cast<std::size_t>(branch)].has_value();
}

const BranchParams& AdapterSet::params(std::size_t layer, Branch branch) const {
  if (!attached(layer, branch)) {
    throw IndexError("no adapter on layer " + std::to_string(layer) + " branch " +
                     branch_letter(branch));
  }
  return *layers_[layer][static_cast<std::size_t>(branch)];
}

BranchParams& AdapterSet::params(std::size_t layer, Branch branch) {
  return const_cast<BranchParams&>(std::as_const(*this).params(layer, branch));
}

void AdapterSet::set_params(std::size_t layer, Branch branch, BranchParams params) {
  if (layer >= layers_.size()) throw IndexError("layer " + std::to_string(layer) + " out of range");
  layers_[layer][static_cast<std::size_t>(branch)] = std::move(params);
}

BranchResult AdapterSet::apply(std::size_t layer, Branch branch, const Tensor& x, Mode mode,
                               RngStream* rng) const {
  BranchResult out;
  if (merged_ || !attached(layer, branch)) return out;
  const auto& p = params(layer, branch);
  switch (config_.kind) {
    case AdapterKind::LinearProbe:
      break;
    case AdapterKind::Lora:
      out.delta = lora_forward(x, std::get<LoraParams>(p), config_.alpha, config_.rank);
      break;
    case AdapterKind::Vera:
      out.delta = vera_forward(x, *basis_, std::get<ScalingParams>(p), config_.alpha);
      break;
    case AdapterKind::Pvera: {
      auto res = pvera_forward(x, *basis_, std::get<ScalingParams>(p), config_.alpha, mode, rng,
                               noise_scale_);
      out.delta = std::move(res.delta);
      out.latent = std::move(res.latent);
      break;
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> AdapterSet::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t layer = 0; layer < layers_.size(); ++layer) {
    for (Branch branch : kAllBranches) {
      if (!attached(layer, branch)) continue;
      const std::string prefix = "layer" + std::to_string(layer) + "." + branch_letter(branch) + ".";
      const auto& p = params(layer, branch);
      if (const auto* lora = std::get_if<LoraParams>(&p)) {
        out.emplace_back(prefix + "lora_a", lora->a);
        out.emplace_back(prefix + "lora_b", lora->b);
      } else {
        const auto& s = std::get<ScalingParams>(p);
        out.emplace_back(prefix + "d_vec", s.d_vec);
        out.emplace_back(prefix + "b_vec", s.b_vec);
      }
    }
  }
  return out;
}

AdapterSet AdapterSet::clone() const {
  AdapterSet copy = *this;
  for (auto& layer : copy.layers_) {
    for (auto& slot : layer) {
      if (!slot) continue;
      if (auto* lora = std::get_if<LoraParams>(&*slot)) {
        lora->a = lora->a.clone(lora->a.requires_grad());
        lora->b = lora->b.clone(lora->b.requires_grad());
      } else {
        auto& s = std::get<ScalingParams>(*slot);
        s.d_vec = s.d_vec.clone(s.d_vec.requires_grad());
        s.b_vec = s.b_vec.clone(s.b_vec.requires_grad());
      }
    }
  }
  return copy;
}

}  // namespace pvera
