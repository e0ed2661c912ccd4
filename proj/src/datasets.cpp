#include "pvera/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "pvera/errors.hpp"
#include "pvera/pvt_io.hpp"
#include "pvera/rng.hpp"

namespace pvera {

using nlohmann::json;

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::Blobs: return "blobs";
    case DatasetKind::Rings: return "rings";
    case DatasetKind::Shifted: return "shifted";
  }
  return "?";
}

DatasetKind parse_dataset_kind(std::string_view text) {
  if (text == "blobs") return DatasetKind::Blobs;
  if (text == "rings") return DatasetKind::Rings;
  if (text == "shifted") return DatasetKind::Shifted;
  throw ConfigError("unknown dataset kind '" + std::string(text) +
                    "' (valid kinds: blobs, rings, shifted)");
}

void SyntheticSpec::validate() const {
  if (n_classes < 2) throw ConfigError("a dataset needs at least 2 classes");
  if (per_class == 0 || d == 0 || seq_len == 0) throw ConfigError("dataset extents must be >= 1");
  if (!(separation > 0.0)) throw ConfigError("class separation must be positive");
  if (!(noise >= 0.0)) throw ConfigError("noise must be non-negative");
  if (kind == DatasetKind::Shifted && base == DatasetKind::Shifted)
    throw ConfigError("a shifted dataset needs a blobs or rings base");
  if (kind == DatasetKind::Rings || (kind == DatasetKind::Shifted && base == DatasetKind::Rings)) {
    if (d < 3) throw ConfigError("rings need an embedding width of at least 3");
  }
}

namespace {

std::vector<double> unit_vector(RngStream& rng, std::size_t d) {
  auto v = rng.normals(d);
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

// Gram-Schmidt against the given orthonormal set.
std::vector<double> orthonormal_to(RngStream& rng, std::size_t d,
                                   const std::vector<std::vector<double>>& basis) {
  auto v = rng.normals(d);
  for (const auto& u : basis) {
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += v[i] * u[i];
    for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
  }
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

constexpr double kRingOffset = 2.0;
constexpr double kRingJitter = 0.15;

std::vector<double> generate_tokens(const SyntheticSpec& spec, DatasetKind kind,
                                    std::vector<int>& labels) {
  const std::size_t C = spec.n_classes, N = C * spec.per_class, L = spec.seq_len, d = spec.d;
  RngStream geometry(spec.seed, streams::kDataset);
  RngStream samples(spec.seed, streams::kDataset + 1);
  std::vector<double> tokens(N * L * d);
  labels.resize(N);

  if (kind == DatasetKind::Blobs) {
    std::vector<std::vector<double>> means;
    for (std::size_t c = 0; c < C; ++c) {
      auto u = unit_vector(geometry, d);
      for (double& x : u) x *= spec.separation;
      means.push_back(std::move(u));
    }
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t c = n % C;
      labels[n] = static_cast<int>(c);
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < d; ++j)
          tokens[(n * L + t) * d + j] = means[c][j] + spec.noise * samples.normal();
    }
  } else {
    std::vector<std::vector<double>> frame;
    frame.push_back(orthonormal_to(geometry, d, frame));
    frame.push_back(orthonormal_to(geometry, d, frame));
    const auto offset = orthonormal_to(geometry, d, frame);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t c = n % C;
      labels[n] = static_cast<int>(c);
      const double radius = spec.separation * (static_cast<double>(c) + 1.0 +
                                               kRingJitter * samples.normal());
      const double angle = 2.0 * std::numbers::pi * samples.uniform();
      const double px = radius * std::cos(angle), py = radius * std::sin(angle);
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t j = 0; j < d; ++j)
          tokens[(n * L + t) * d + j] = kRingOffset * spec.separation * offset[j] +
                                        px * frame[0][j] + py * frame[1][j] +
                                        spec.noise * samples.normal();
    }
  }
  return tokens;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.n_classes = spec.n_classes;
  const DatasetKind kind = spec.kind == DatasetKind::Shifted ? spec.base : spec.kind;
  auto tokens = generate_tokens(spec, kind, ds.labels);
  if (spec.kind == DatasetKind::Shifted && spec.shift != 0.0) {
    RngStream direction(spec.seed, streams::kDataset + 2);
    const auto u = unit_vector(direction, spec.d);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] += spec.shift * u[i % spec.d];
  }
  ds.tokens = Tensor({ds.labels.size(), spec.seq_len, spec.d}, std::move(tokens));
  return ds;
}

Dataset split(Dataset ds, std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
  const std::size_t N = ds.size(), C = ds.n_classes;
  if (n_train + n_val > N) {
    throw InputError("cannot split " + std::to_string(N) + " samples into " +
                     std::to_string(n_train) + " train + " + std::to_string(n_val) + " val");
  }
  std::vector<std::vector<std::size_t>> by_class(C);
  for (std::size_t i = 0; i < N; ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  for (std::size_t c = 0; c < C; ++c) {
    RngStream rng(seed, streams::kSplit + c);
    rng.shuffle(by_class[c]);
  }

  std::vector<std::size_t> taken(C, 0);
  std::size_t cursor = 0;
  auto deal = [&](std::size_t count) {
    std::vector<std::size_t> out;
    while (out.size() < count) {
      bool progressed = false;
      for (std::size_t step = 0; step < C && out.size() < count; ++step) {
        const std::size_t c = (cursor + step) % C;
        if (taken[c] < by_class[c].size()) {
          out.push_back(by_class[c][taken[c]++]);
          progressed = true;
          cursor = (c + 1) % C;
          break;
        }
      }
      if (!progressed) throw InputError("insufficient samples for the requested split");
    }
    return out;
  };
  ds.train = deal(n_train);
  ds.val = deal(n_val);
  ds.test.clear();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = taken[c]; k < by_class[c].size(); ++k) ds.test.push_back(by_class[c][k]);
  std::sort(ds.test.begin(), ds.test.end());
  RngStream order(seed, streams::kSplit + C);
  order.shuffle(ds.train);
  order.shuffle(ds.val);
  return ds;
}

std::pair<Tensor, std::vector<int>> gather(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t L = ds.seq_len(), d = ds.width(), stride = L * d;
  std::vector<double> values(indices.size() * stride);
  std::vector<int> labels(indices.size());
  const auto src = ds.tokens.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= ds.size()) throw IndexError("sample index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(src.begin() + indices[i] * stride, stride, values.begin() + i * stride);
    labels[i] = ds.labels[indices[i]];
  }
  return {Tensor({indices.size(), L, d}, std::move(values)), std::move(labels)};
}

namespace {

json spec_to_json(const SyntheticSpec& s) {
  return json{{"kind", to_string(s.kind)},   {"base", to_string(s.base)},
              {"n_classes", s.n_classes},    {"per_class", s.per_class},
              {"d", s.d},                    {"seq_len", s.seq_len},
              {"separation", s.separation},  {"shift", s.shift},
              {"noise", s.noise},            {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const json& j) {
  SyntheticSpec s;
  s.kind = parse_dataset_kind(j.at("kind").get<std::string>());
  s.base = parse_dataset_kind(j.at("base").get<std::string>());
  s.n_classes = j.at("n_classes").get<std::size_t>();
  s.per_class = j.at("per_class").get<std::size_t>();
  s.d = j.at("d").get<std::size_t>();
  s.seq_len = j.at("seq_len").get<std::size_t>();
  s.separation = j.at("separation").get<double>();
  s.shift = j.at("shift").get<double>();
  s.noise = j.at("noise").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_pvt(dir / "tokens.pvt", ds.tokens);
  {
    std::ofstream out(dir / "labels.csv", std::ios::trunc);
    out << "sample_id,label\n";
    for (std::size_t i = 0; i < ds.labels.size(); ++i) out << i << ',' << ds.labels[i] << '\n';
  }
  json manifest = {
      {"format_version", 1},
      {"spec", spec_to_json(ds.spec)},
      {"counts", {{"samples", ds.size()}, {"n_classes", ds.n_classes}, {"seq_len", ds.seq_len()},
                  {"d", ds.width()}}},
      {"seed", ds.spec.seed},
      {"splits", {{"train", ds.train}, {"val", ds.val}, {"test", ds.test}}},
  };
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {"tokens.pvt", "labels.csv", "manifest.json"}) {
    if (!std::filesystem::exists(dir / f))
      throw MissingInputError("dataset " + dir.string() + " has no " + f);
  }
  json manifest;
  try {
    std::ifstream in(dir / "manifest.json");
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  ds.tokens = read_pvt(dir / "tokens.pvt");
  try {
    ds.spec = spec_from_json(manifest.at("spec"));
    const auto& counts = manifest.at("counts");
    const auto n = counts.at("samples").get<std::size_t>();
    ds.n_classes = counts.at("n_classes").get<std::size_t>();
    const Shape expect = {n, counts.at("seq_len").get<std::size_t>(), counts.at("d").get<std::size_t>()};
    if (ds.tokens.shape() != expect) {
      throw ValidationError("tokens.pvt has extents " + shape_str(ds.tokens.shape()) +
                            " but the manifest declares " + shape_str(expect));
    }
    std::ifstream in(dir / "labels.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw FormatError("labels.csv: malformed line '" + line + "'");
      const long label = std::stol(line.substr(comma + 1));
      if (label < 0 || static_cast<std::size_t>(label) >= ds.n_classes) {
        throw IndexError("labels.csv: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(ds.n_classes) + ")");
      }
      ds.labels.push_back(static_cast<int>(label));
    }
    if (ds.labels.size() != n) {
      throw ValidationError("labels.csv has " + std::to_string(ds.labels.size()) +
                            " labels but the manifest declares " + std::to_string(n) + " samples");
    }
    const auto& splits = manifest.at("splits");
    ds.train = splits.at("train").get<std::vector<std::size_t>>();
    ds.val = splits.at("val").get<std::vector<std::size_t>>();
    ds.test = splits.at("test").get<std::vector<std::size_t>>();
    for (const auto* part : {&ds.train, &ds.val, &ds.test})
      for (auto i : *part)
        if (i >= n) throw ValidationError("split index " + std::to_string(i) + " exceeds " + std::to_string(n) + " samples");
  } catch (const json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError((dir / "labels.csv").string() + ": non-numeric label");
  }
  return ds;
}

}  // namespace pvera
