#include "pvera/checkpoint.hpp"

#include <fstream>
#include <regex>

#include "pvera/errors.hpp"
#include "pvera/pvt_io.hpp"

namespace pvera {

using nlohmann::json;

json to_json(const BackboneConfig& c) {
  return {{"d", c.d}, {"seq_len", c.seq_len}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads}, {"n_classes", c.n_classes}, {"mlp_ratio", c.mlp_ratio}};
}

json to_json(const AdapterConfig& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"rank", c.rank},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"placement", c.placement.str()},
          {"adapter_lr", c.adapter_lr},
          {"basis_seed", c.basis_seed},
          {"basis_std", "1/sqrt(d)"}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  BackboneConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.seq_len = j.at("seq_len").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.validate();
  return c;
}

AdapterConfig adapter_config_from_json(const json& j) {
  AdapterConfig c;
  c.kind = parse_adapter_kind(j.at("kind").get<std::string>());
  c.rank = j.at("rank").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  c.beta = j.at("beta").get<double>();
  c.placement = Placement::parse(j.at("placement").get<std::string>());
  c.adapter_lr = j.at("adapter_lr").get<double>();
  c.basis_seed = j.at("basis_seed").get<std::uint64_t>();
  return c;
}

bool is_adapter_tensor(const std::string& name) {
  static const std::regex pattern(R"(layer\d+\.[qkv]\..+)");
  return std::regex_match(name, pattern);
}

namespace {

std::vector<std::pair<std::string, Tensor>> all_tensors(const Model& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : m.backbone->named_tensors()) out.emplace_back("backbone." + name, t);
  if (const auto& basis = m.adapters.basis()) {
    out.emplace_back("basis.a", basis->a);
    out.emplace_back("basis.b", basis->b);
  }
  for (auto& nt : m.probe_parameters()) out.push_back(nt);
  for (auto& nt : m.adapter_parameters()) out.push_back(nt);
  return out;
}

std::string file_name(const std::string& name) { return name + ".pvt"; }

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Model& model) {
  std::filesystem::create_directories(dir);
  json files = json::object();
  for (const auto& [name, t] : all_tensors(model)) {
    write_pvt(dir / file_name(name), t);
    files[name] = file_name(name);
  }
  const json manifest = {{"format_version", kCheckpointFormatVersion},
                         {"backbone", to_json(model.config())},
                         {"backbone_seed", model.backbone->seed},
                         {"seed", model.seed},
                         {"adapter", to_json(model.adapters.config())},
                         {"merged", model.adapters.merged()},
                         {"noise_scale", model.adapters.noise_scale()},
                         {"tensors", files}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw MissingInputError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Model load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw MissingInputError("checkpoint manifest not found: " + manifest_path.string());
  json manifest;
  try {
    std::ifstream is(manifest_path);
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  Model model;
  json files;
  try {
    const BackboneConfig bcfg = backbone_config_from_json(manifest.at("backbone"));
    const AdapterConfig acfg = adapter_config_from_json(manifest.at("adapter"));
    model = Model::create(bcfg, acfg, manifest.at("seed").get<std::uint64_t>(),
                          manifest.at("backbone_seed").get<std::uint64_t>());
    model.adapters.set_noise_scale(manifest.value("noise_scale", 1.0));
    if (manifest.at("merged").get<bool>()) model.adapters.mark_merged();
    files = manifest.at("tensors");
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }

  const auto expected = all_tensors(model);
  if (files.size() != expected.size()) {
    throw ValidationError("checkpoint lists " + std::to_string(files.size()) + " tensors, model expects " +
                          std::to_string(expected.size()));
  }
  for (auto [name, t] : expected) {
    if (!files.contains(name)) throw ValidationError("checkpoint has no tensor '" + name + "'");
    const Tensor stored = read_pvt(dir / files.at(name).get<std::string>());
    if (stored.shape() != t.shape()) {
      throw ValidationError("tensor '" + name + "' has shape " + shape_str(stored.shape()) + ", expected " +
                            shape_str(t.shape()));
    }
    auto dst = t.mutable_data();
    std::copy(stored.data().begin(), stored.data().end(), dst.begin());
  }
  return model;
}

}  // namespace pvera
