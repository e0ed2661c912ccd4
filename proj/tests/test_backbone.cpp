#include <doctest.h>

#include <filesystem>

#include "helpers.hpp"
#include "pvera/backbone.hpp"
#include "pvera/checkpoint.hpp"
#include "pvera/errors.hpp"
#include "pvera/training.hpp"

using namespace pvera;
using testing::random_tensor;
using testing::values;

namespace {

BackboneConfig small() {
  BackboneConfig b;
  b.d = 16;
  b.seq_len = 5;
  b.n_layers = 2;
  b.n_heads = 2;
  b.n_classes = 3;
  return b;
}

Model make(AdapterKind kind, std::uint64_t seed = 1) {
  AdapterConfig a;
  a.kind = kind;
  a.rank = 4;
  return Model::create(small(), a, seed, 7);
}

Tensor tokens(std::size_t batch, std::uint64_t seed) { return random_tensor({batch, 5, 16}, seed); }

}  // namespace

TEST_CASE("qkv projection without an active adapter is the frozen affine map") {
  const auto state = BackboneState::generate(small(), 3);
  const auto& layer = state.layers[0];
  const Tensor x = random_tensor({10, 16}, 4);
  const auto plain = qkv_project(x, layer, nullptr, 0, Mode::DetInfer, nullptr);
  CHECK(values(plain.q) == values(linear(x, layer.w_q, layer.b_q)));
  CHECK(values(plain.k) == values(linear(x, layer.w_k, layer.b_k)));
  CHECK(values(plain.v) == values(linear(x, layer.w_v, layer.b_v)));

  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    AdapterConfig a;
    a.kind = kind;
    a.rank = 4;
    const auto set = AdapterSet::create(a, small(), 5);
    RngStream rng(1, 2);
    const auto adapted = qkv_project(x, layer, &set, 0, Mode::Train, &rng);
    CHECK(values(adapted.q) == values(plain.q));
    CHECK(values(adapted.v) == values(plain.v));
  }
}

TEST_CASE("frozen weights follow the documented initialization") {
  const auto state = BackboneState::generate(small(), 3);
  for (double v : state.layers[1].b_mlp1.data()) CHECK(v == 0.0);
  for (double v : state.layers[0].ln2_gamma.data()) CHECK(v == 1.0);
  CHECK(state.layers[0].w_mlp1.shape() == Shape{64, 16});
  CHECK_FALSE(state.layers[0].w_q.requires_grad());
  const auto again = BackboneState::generate(small(), 3);
  CHECK(values(again.layers[1].w_o) == values(state.layers[1].w_o));
  // Sinusoidal table: even columns sin(pos / 10000^(2i/d)), odd columns cos.
  CHECK(state.positional.at(0, 0) == 0.0);
  CHECK(state.positional.at(0, 1) == 1.0);
  CHECK(state.positional.at(3, 2) == doctest::Approx(std::sin(3.0 / std::pow(10000.0, 2.0 / 16))).epsilon(1e-14));
}

TEST_CASE("adapters at initialization leave the logits bitwise unchanged") {
  const Tensor x = tokens(4, 11);
  const Model frozen = make(AdapterKind::LinearProbe);
  const auto reference = values(frozen.forward(x, Mode::DetInfer, nullptr).logits);
  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    const Model m = make(kind);
    RngStream rng(1, streams::kTrainSampling);
    CHECK(values(m.forward(x, Mode::DetInfer, nullptr).logits) == reference);
    CHECK(values(m.forward(x, Mode::Train, &rng).logits) == reference);
  }
}

TEST_CASE("deterministic inference is repeatable and draws nothing") {
  Model m = make(AdapterKind::Pvera);
  randomize_trainable(m, 3);
  const Tensor x = tokens(3, 12);
  RngStream rng(5, 6);
  const auto a = values(m.forward(x, Mode::DetInfer, &rng).logits);
  const auto b = values(m.forward(x, Mode::DetInfer, &rng).logits);
  CHECK(a == b);
  CHECK(rng.counter() == 0);

  RngStream s1(5, 100), s2(5, 101);
  CHECK(values(m.forward(x, Mode::ProbInfer, &s1).logits) != values(m.forward(x, Mode::ProbInfer, &s2).logits));
  CHECK_THROWS_AS(m.forward(x, Mode::ProbInfer, nullptr), ContractError);
}

TEST_CASE("permuting the probe's classes permutes the logits") {
  Model m = make(AdapterKind::LinearProbe);
  randomize_trainable(m, 4);
  const Tensor x = tokens(3, 13);
  const auto logits = m.forward(x, Mode::DetInfer, nullptr).logits;
  const std::array<std::size_t, 3> perm{2, 0, 1};
  Model p = m.clone();
  auto w = p.probe.w_head.mutable_data();
  auto bias = p.probe.b_head.mutable_data();
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t c = 0; c < 3; ++c) w[i * 3 + c] = m.probe.w_head.at(i, perm[c]);
  for (std::size_t c = 0; c < 3; ++c) bias[c] = m.probe.b_head.data()[perm[c]];
  const auto permuted = p.forward(x, Mode::DetInfer, nullptr).logits;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 3; ++c) CHECK(permuted.at(i, c) == logits.at(i, perm[c]));
}

TEST_CASE("merged models reproduce deterministic inference") {
  const Tensor x = tokens(6, 14);
  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    Model m = make(kind);
    randomize_trainable(m, 5);
    const Model merged = m.merged();
    CHECK(merged.adapters.merged());
    CHECK(testing::max_rel_diff(merged.forward(x, Mode::DetInfer, nullptr).logits.data(),
                                m.forward(x, Mode::DetInfer, nullptr).logits.data()) < 1e-10);
    CHECK_THROWS_AS(merged.merged(), StateError);
    // The original backbone is untouched.
    CHECK(values(m.backbone->layers[0].w_q) == values(make(kind).backbone->layers[0].w_q));
  }
  CHECK_THROWS_AS(make(AdapterKind::LinearProbe).merged(), ContractError);
}

TEST_CASE("checkpoints round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "pvera_ckpt_test";
  std::filesystem::remove_all(dir);
  const Tensor x = tokens(3, 15);
  for (AdapterKind kind : {AdapterKind::LinearProbe, AdapterKind::Lora, AdapterKind::Pvera}) {
    Model m = make(kind, 9);
    randomize_trainable(m, 6);
    if (kind == AdapterKind::Pvera) m = m.merged();
    save_checkpoint(dir, m);
    const Model back = load_checkpoint(dir);
    CHECK(back.adapters.kind() == kind);
    CHECK(back.adapters.merged() == m.adapters.merged());
    CHECK(values(back.forward(x, Mode::DetInfer, nullptr).logits) == values(m.forward(x, Mode::DetInfer, nullptr).logits));
    std::size_t adapter_files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
      adapter_files += is_adapter_tensor(entry.path().stem().string()) ? 1 : 0;
    CHECK((adapter_files == 0) == (kind == AdapterKind::LinearProbe));
    std::filesystem::remove_all(dir);
  }
  CHECK_THROWS_AS(load_checkpoint(dir), MissingInputError);
}
