#include "pvera/backbone.hpp"

#include <cmath>

#include "pvera/errors.hpp"

namespace pvera {

const Tensor& EncoderLayerWeights::weight(Branch b) const {
  switch (b) {
    case Branch::Q: return w_q;
    case Branch::K: return w_k;
    case Branch::V: return w_v;
  }
  throw IndexError("bad branch");
}

const Tensor& EncoderLayerWeights::bias(Branch b) const {
  switch (b) {
    case Branch::Q: return b_q;
    case Branch::K: return b_k;
    case Branch::V: return b_v;
  }
  throw IndexError("bad branch");
}

Tensor& EncoderLayerWeights::weight(Branch b) {
  return const_cast<Tensor&>(std::as_const(*this).weight(b));
}

Tensor sinusoidal_positions(std::size_t seq_len, std::size_t d) {
  std::vector<double> pe(seq_len * d);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      pe[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({seq_len, d}, std::move(pe));
}

BackboneState BackboneState::generate(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneState state;
  state.config = config;
  state.seed = seed;
  const std::size_t d = config.d, hidden = config.mlp_hidden();
  RngStream rng(seed, streams::kBackboneInit);
  auto gauss = [&](Shape shape) {
    auto v = rng.normals(shape_numel(shape), 0.0, 0.02);
    return Tensor(std::move(shape), std::move(v));
  };
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    EncoderLayerWeights w;
    w.w_q = gauss({d, d});
    w.w_k = gauss({d, d});
    w.w_v = gauss({d, d});
    w.w_o = gauss({d, d});
    w.w_mlp1 = gauss({hidden, d});
    w.w_mlp2 = gauss({d, hidden});
    w.b_q = Tensor::zeros({d});
    w.b_k = Tensor::zeros({d});
    w.b_v = Tensor::zeros({d});
    w.b_o = Tensor::zeros({d});
    w.b_mlp1 = Tensor::zeros({hidden});
    w.b_mlp2 = Tensor::zeros({d});
    w.ln1_gamma = Tensor::full({d}, 1.0);
    w.ln1_beta = Tensor::zeros({d});
    w.ln2_gamma = Tensor::full({d}, 1.0);
    w.ln2_beta = Tensor::zeros({d});
    state.layers.push_back(std::move(w));
  }
  state.positional = sinusoidal_positions(config.seq_len, d);
  return state;
}

std::vector<std::pair<std::string, Tensor>> BackboneState::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& w = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    for (auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"w_q", &w.w_q},         {"b_q", &w.b_q},           {"w_k", &w.w_k},
             {"b_k", &w.b_k},         {"w_v", &w.w_v},           {"b_v", &w.b_v},
             {"w_o", &w.w_o},         {"b_o", &w.b_o},           {"w_mlp1", &w.w_mlp1},
             {"b_mlp1", &w.b_mlp1},   {"w_mlp2", &w.w_mlp2},     {"b_mlp2", &w.b_mlp2},
             {"ln1_gamma", &w.ln1_gamma}, {"ln1_beta", &w.ln1_beta},
             {"ln2_gamma", &w.ln2_gamma}, {"ln2_beta", &w.ln2_beta}}) {
      out.emplace_back(p + name, *t);
    }
  }
  out.emplace_back("positional", positional);
  return out;
}

BackboneState BackboneState::clone() const {
  BackboneState copy = *this;
  for (auto& w : copy.layers) {
    for (Tensor* t : {&w.w_q, &w.b_q, &w.w_k, &w.b_k, &w.w_v, &w.b_v, &w.w_o, &w.b_o, &w.w_mlp1,
                      &w.b_mlp1, &w.w_mlp2, &w.b_mlp2, &w.ln1_gamma, &w.ln1_beta, &w.ln2_gamma,
                      &w.ln2_beta})
      *t = t->clone(false);
  }
  copy.positional = positional.clone(false);
  return copy;
}

// ---------------------------------------------------------------------------

LinearProbe LinearProbe::create(std::size_t d, std::size_t n_classes, std::uint64_t seed) {
  RngStream rng(seed, streams::kProbeInit);
  LinearProbe probe;
  probe.w_head = Tensor({d, n_classes}, rng.normals(d * n_classes, 0.0, 0.02), true);
  probe.b_head = Tensor::zeros({n_classes}, true);
  return probe;
}

Tensor LinearProbe::forward(const Tensor& pooled) const {
  return add_rowvec(matmul(pooled, w_head), b_head);
}

std::vector<std::pair<std::string, Tensor>> LinearProbe::named_parameters() const {
  return {{"probe.w_head", w_head}, {"probe.b_head", b_head}};
}

LinearProbe LinearProbe::clone() const {
  return {w_head.clone(w_head.requires_grad()), b_head.clone(b_head.requires_grad())};
}

// ---------------------------------------------------------------------------

QkvResult qkv_project(const Tensor& x, const EncoderLayerWeights& layer, const AdapterSet* adapters,
                      std::size_t layer_index, Mode mode, RngStream* rng) {
  const std::size_t d = layer.w_q.dim(1);
  if (x.rank() != 2 || x.dim(1) != d) {
    throw DimensionError("qkv_project: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(d));
  }
  QkvResult out;
  std::array<Tensor*, 3> dst = {&out.q, &out.k, &out.v};
  for (Branch branch : kAllBranches) {
    Tensor y = linear(x, layer.weight(branch), layer.bias(branch));
    if (adapters) {
      BranchResult r = adapters->apply(layer_index, branch, x, mode, rng);
      if (r.delta.defined()) {
        if (r.delta.shape() != y.shape()) {
          throw ConfigError("adapter on branch " + std::string(1, branch_letter(branch)) +
                            " produces " + shape_str(r.delta.shape()) + ", expected " +
                            shape_str(y.shape()));
        }
        y = add(y, r.delta);
      }
      out.latents[static_cast<std::size_t>(branch)] = std::move(r.latent);
    }
    *dst[static_cast<std::size_t>(branch)] = std::move(y);
  }
  return out;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 std::size_t batch) {
  return multi_head_attention(q, k, v, batch, n_heads);
}

ForwardResult backbone_forward(const Tensor& tokens, const BackboneState& state,
                               const LinearProbe& probe, const AdapterSet* adapters, Mode mode,
                               RngStream* rng) {
  const auto& cfg = state.config;
  if (tokens.rank() != 3 || tokens.dim(1) != cfg.seq_len || tokens.dim(2) != cfg.d) {
    throw DimensionError("backbone_forward: tokens " + shape_str(tokens.shape()) +
                         " do not match [batch x " + std::to_string(cfg.seq_len) + " x " +
                         std::to_string(cfg.d) + "]");
  }
  const bool sampling = adapters && adapters->kind() == AdapterKind::Pvera && !adapters->merged();
  if (mode == Mode::ProbInfer && !sampling)
    throw ContractError("probabilistic inference needs unmerged pvera adapters");
  if (adapters && !adapters->merged() && adapters->kind() != AdapterKind::LinearProbe &&
      adapters->n_layers() != cfg.n_layers) {
    throw ConfigError("adapter set has " + std::to_string(adapters->n_layers()) +
                      " layers, backbone has " + std::to_string(cfg.n_layers));
  }
  if (sampling && mode != Mode::DetInfer && !rng)
    throw ContractError("sampling mode needs a random stream");

  const std::size_t batch = tokens.dim(0), rows = batch * cfg.seq_len;

  // Positional table tiled over the batch.
  std::vector<double> pos(rows * cfg.d);
  const auto pe = state.positional.data();
  for (std::size_t b = 0; b < batch; ++b) std::copy(pe.begin(), pe.end(), pos.begin() + b * pe.size());
  Tensor x = add(reshape(tokens, {rows, cfg.d}), Tensor({rows, cfg.d}, std::move(pos)));

  ForwardResult out;
  out.latents.resize(cfg.n_layers);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const auto& w = state.layers[i];
    const Tensor h = layer_norm(x, w.ln1_gamma, w.ln1_beta);
    QkvResult qkv = qkv_project(h, w, adapters, i, mode, rng);
    const Tensor att = attention(qkv.q, qkv.k, qkv.v, cfg.n_heads, batch);
    x = add(x, linear(att, w.w_o, w.b_o));
    const Tensor h2 = layer_norm(x, w.ln2_gamma, w.ln2_beta);
    x = add(x, linear(gelu(linear(h2, w.w_mlp1, w.b_mlp1)), w.w_mlp2, w.b_mlp2));
    out.latents[i] = std::move(qkv.latents);
  }
  out.logits = probe.forward(mean_pool(x, cfg.seq_len));
  return out;
}

// ---------------------------------------------------------------------------

Model Model::create(const BackboneConfig& backbone, const AdapterConfig& adapter, std::uint64_t seed,
                    std::uint64_t backbone_seed) {
  Model m;
  m.backbone = std::make_shared<const BackboneState>(BackboneState::generate(backbone, backbone_seed));
  m.probe = LinearProbe::create(backbone.d, backbone.n_classes, seed);
  m.adapters = AdapterSet::create(adapter, backbone, seed);
  m.seed = seed;
  return m;
}

ForwardResult Model::forward(const Tensor& tokens, Mode mode, RngStream* rng) const {
  return backbone_forward(tokens, *backbone, probe, &adapters, mode, rng);
}

std::vector<std::pair<std::string, Tensor>> Model::trainable_parameters() const {
  auto out = probe_parameters();
  for (auto& p : adapter_parameters()) out.push_back(std::move(p));
  return out;
}

Model Model::clone() const {
  Model m;
  m.backbone = backbone;
  m.probe = probe.clone();
  m.adapters = adapters.clone();
  m.seed = seed;
  return m;
}

Model Model::merged() const {
  if (adapters.kind() == AdapterKind::LinearProbe)
    throw ContractError("a linear-probe model has no adapter weights to merge");
  if (adapters.merged()) throw StateError("model is already merged");
  BackboneState state = backbone->clone();
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    for (Branch b : kAllBranches) {
      if (!adapters.attached(i, b)) continue;
      auto& w = state.layers[i].weight(b);
      w = merge_weights(w, adapters.params(i, b), adapters.config(), adapters.basis().get());
    }
  }
  Model m = clone();
  m.backbone = std::make_shared<const BackboneState>(std::move(state));
  m.adapters.mark_merged();
  return m;
}

}  // namespace pvera
