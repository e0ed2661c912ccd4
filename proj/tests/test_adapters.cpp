#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "pvera/adapters.hpp"
#include "pvera/errors.hpp"

using namespace pvera;
using testing::random_tensor;
using testing::values;

namespace {

AdapterConfig config(AdapterKind kind, std::size_t rank, const char* placement = "qv") {
  AdapterConfig c;
  c.kind = kind;
  c.rank = rank;
  c.placement = Placement::parse(placement);
  return c;
}

BackboneConfig big_backbone() {
  BackboneConfig b;
  b.d = 768;
  b.n_layers = 12;
  b.n_heads = 12;
  return b;
}

// x · diag(v) as a dense product, for oracles.
std::vector<double> scale_cols(std::vector<double> m, std::size_t rows, std::size_t cols, std::span<const double> v) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i * cols + j] *= v[j];
  return m;
}

}  // namespace

TEST_CASE("trainable parameter counts at d=768, 12 layers") {
  const auto b = big_backbone();
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 64), b) == 21504);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 128), b) == 24576);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 256), b) == 30720);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 512), b) == 43008);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 256, "q"), b) == 15360);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 256, "v"), b) == 15360);
  CHECK(count_trainable_params(config(AdapterKind::Pvera, 256, "qkv"), b) == 46080);
  // VeRA: r + d per site; LoRA: 2·d·r per site.
  CHECK(count_trainable_params(config(AdapterKind::Vera, 256), b) == 12 * 2 * (256 + 768));
  CHECK(count_trainable_params(config(AdapterKind::Lora, 8), b) == 12 * 2 * 2 * 768 * 8);
  CHECK(count_trainable_params(config(AdapterKind::LinearProbe, 8), b) == 0);
  CHECK(count_probe_params(b) == 768 * 2 + 2);
}

TEST_CASE("lora forward") {
  const Tensor x = random_tensor({2, 4}, 1);
  LoraParams p{random_tensor({4, 3}, 2), Tensor::zeros({3, 4})};
  for (double v : values(lora_forward(x, p, 16.0, 3))) CHECK(v == 0.0);
  p.b = random_tensor({3, 4}, 3);
  for (double v : values(lora_forward(x, p, 0.0, 3))) CHECK(v == 0.0);

  // (α/r)·x·(A·B) with the dense product formed first.
  const auto ab = testing::naive_matmul(values(p.a), values(p.b), 4, 3, 4);
  auto expected = testing::naive_matmul(values(x), ab, 2, 4, 4);
  for (double& v : expected) v *= 16.0 / 3.0;
  CHECK(testing::max_abs_diff(lora_forward(x, p, 16.0, 3).data(), expected) < 1e-12);
}

TEST_CASE("vera forward") {
  const std::size_t d = 6, r = 3;
  const auto basis = SharedBasis::generate(d, r, AdapterKind::Vera, 5);
  CHECK(basis.a.shape() == Shape{d, r});
  CHECK(basis.b.shape() == Shape{r, d});
  const Tensor x = random_tensor({4, d}, 6);

  VeraParams p{random_tensor({r}, 7), Tensor::zeros({d})};
  for (double v : values(vera_forward(x, basis, p, 16.0))) CHECK(v == 0.0);

  // d_vec = 1: α·(x·A·B) ⊙ b.
  p.b_vec = random_tensor({d}, 8);
  VeraParams unit{Tensor::full({r}, 1.0), p.b_vec};
  auto xab = testing::naive_matmul(testing::naive_matmul(values(x), values(basis.a), 4, d, r), values(basis.b), 4, r, d);
  xab = scale_cols(xab, 4, d, p.b_vec.data());
  for (double& v : xab) v *= 16.0;
  CHECK(testing::max_abs_diff(vera_forward(x, basis, unit, 16.0).data(), xab) < 1e-12);

  // Merged path: x · (α · A·diag(d) · B ⊙ b).
  const auto ad = scale_cols(values(basis.a), d, r, p.d_vec.data());
  auto m = scale_cols(testing::naive_matmul(ad, values(basis.b), d, r, d), d, d, p.b_vec.data());
  for (double& v : m) v *= 16.0;
  CHECK(testing::max_abs_diff(vera_forward(x, basis, p, 16.0).data(), testing::naive_matmul(values(x), m, 4, d, d)) <
        1e-10);
}

TEST_CASE("pvera heads") {
  const std::size_t d = 5, r = 2;
  const auto basis = SharedBasis::generate(d, r, AdapterKind::Pvera, 9);
  CHECK(basis.a.shape() == Shape{d, 2 * r});
  const Tensor x = random_tensor({3, d}, 10);

  const auto zero = pvera_heads(x, basis, {Tensor::zeros({2 * r}), Tensor::zeros({d})});
  for (double v : values(zero.mu)) CHECK(v == 0.0);
  for (double v : values(zero.sigma)) CHECK(v == 1.0);

  // Brute-force slicing of x · A · diag(d).
  const PVeraParams p{random_tensor({2 * r}, 11), Tensor::zeros({d})};
  const auto h = scale_cols(testing::naive_matmul(values(x), values(basis.a), 3, d, 2 * r), 3, 2 * r, p.d_vec.data());
  const auto lat = pvera_heads(x, basis, p);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      CHECK(lat.mu.at(i, j) == doctest::Approx(h[i * 2 * r + j]).epsilon(1e-13));
      CHECK(lat.sigma.at(i, j) == doctest::Approx(std::exp(h[i * 2 * r + r + j])).epsilon(1e-13));
    }

  // Column r belongs to the sigma head only.
  SharedBasis perturbed = basis;
  perturbed.a = basis.a.clone();
  for (std::size_t row = 0; row < d; ++row) perturbed.a.mutable_data()[row * 2 * r + r] += 0.5;
  const auto lat2 = pvera_heads(x, perturbed, p);
  CHECK(values(lat2.mu) == values(lat.mu));
  CHECK(values(lat2.sigma) != values(lat.sigma));
}

TEST_CASE("reparameterization") {
  const GaussianLatent latent{Tensor({1, 3}, {0.5, -1.0, 2.0}), Tensor({1, 3}, {0.1, 1.0, 3.0})};
  RngStream untouched(1, 2);
  CHECK(values(reparameterize(latent, untouched, 0.0)) == values(latent.mu));
  CHECK(untouched.counter() == 0);

  RngStream a(1, 2), b(1, 2);
  CHECK(values(reparameterize(latent, a)) == values(reparameterize(latent, b)));

  RngStream rng(3, 4);
  const int n = 100000;
  std::vector<double> s(3, 0.0), sq(3, 0.0);
  for (int i = 0; i < n; ++i) {
    const auto z = reparameterize(latent, rng);
    for (std::size_t j = 0; j < 3; ++j) {
      s[j] += z.data()[j];
      sq[j] += z.data()[j] * z.data()[j];
    }
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const double mu = latent.mu.data()[j], sigma = latent.sigma.data()[j];
    const double mean = s[j] / n, sd = std::sqrt(sq[j] / n - mean * mean);
    CHECK(std::abs(mean - mu) < 4.0 * sigma / std::sqrt(n));
    // Standard error of a normal sample std is sigma / sqrt(2n).
    CHECK(std::abs(sd - sigma) < 4.0 * sigma / std::sqrt(2.0 * n));
  }
}

TEST_CASE("pvera forward") {
  const std::size_t d = 6, r = 3;
  const auto basis = SharedBasis::generate(d, r, AdapterKind::Pvera, 12);
  const Tensor x = random_tensor({4, d}, 13);
  PVeraParams p{random_tensor({2 * r}, 14), Tensor::zeros({d})};
  RngStream rng(1, 1);
  for (Mode mode : {Mode::Train, Mode::DetInfer, Mode::ProbInfer})
    for (double v : values(pvera_forward(x, basis, p, 16.0, mode, &rng).delta)) CHECK(v == 0.0);

  p.b_vec = random_tensor({d}, 15);
  // Deterministic inference is VeRA on the mean half.
  const VeraParams half_vec{Tensor({r}, {p.d_vec.data().begin(), p.d_vec.data().begin() + r}), p.b_vec};
  CHECK(testing::max_abs_diff(pvera_forward(x, basis, p, 16.0, Mode::DetInfer, nullptr).delta.data(),
                              vera_forward(x, basis.mu_half(), half_vec, 16.0).data()) < 1e-14);

  // Train mode with the stream replayed: hand-composed heads → sample → up-projection.
  RngStream run(7, 8), replay(7, 8);
  const auto out = pvera_forward(x, basis, p, 16.0, Mode::Train, &run);
  const auto h = scale_cols(testing::naive_matmul(values(x), values(basis.a), 4, d, 2 * r), 4, 2 * r, p.d_vec.data());
  std::vector<double> z(4 * r);
  const auto eps = replay.normals(4 * r);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < r; ++j) z[i * r + j] = h[i * 2 * r + j] + eps[i * r + j] * std::exp(h[i * 2 * r + r + j]);
  auto expected = scale_cols(testing::naive_matmul(z, values(basis.b), 4, r, d), 4, d, p.b_vec.data());
  for (double& v : expected) v *= 16.0;
  CHECK(testing::max_abs_diff(out.delta.data(), expected) < 1e-12);
  CHECK(run.counter() == replay.counter());

  CHECK_THROWS_AS(pvera_forward(x, basis, p, 16.0, Mode::Train, nullptr), ContractError);
}

TEST_CASE("kl layer") {
  const GaussianLatent prior{Tensor::zeros({4, 3}), Tensor::full({4, 3}, 1.0)};
  const std::vector<GaussianLatent> one_prior{prior};
  CHECK(kl_layer(one_prior).item() == 0.0);

  const GaussianLatent unit{Tensor({1, 1}, {1.0}), Tensor({1, 1}, {1.0})};
  const std::vector<GaussianLatent> single{unit};
  CHECK(kl_layer(single).item() == doctest::Approx(0.5).epsilon(1e-15));

  const GaussianLatent g{random_tensor({4, 3}, 16), exp(random_tensor({4, 3}, 17, 0.3))};
  const std::vector<GaussianLatent> once{g}, twice{g, g};
  CHECK(kl_layer(twice).item() == doctest::Approx(kl_layer(once).item()).epsilon(1e-15));
}

TEST_CASE("merge weights") {
  const std::size_t d = 6, r = 3;
  const Tensor w = random_tensor({d, d}, 18);
  const Tensor x = random_tensor({10, d}, 19);
  for (AdapterKind kind : {AdapterKind::Vera, AdapterKind::Pvera}) {
    auto cfg = config(kind, r);
    const auto basis = SharedBasis::generate(d, r, kind, 20);
    const std::size_t k = kind == AdapterKind::Pvera ? 2 : 1;
    ScalingParams zero{random_tensor({k * r}, 21), Tensor::zeros({d})};
    CHECK(values(merge_weights(w, zero, cfg, &basis)) == values(w));

    ScalingParams p{random_tensor({k * r}, 22), random_tensor({d}, 23)};
    const Tensor merged = merge_weights(w, p, cfg, &basis);
    const Tensor adapter = kind == AdapterKind::Pvera
                               ? pvera_forward(x, basis, p, cfg.alpha, Mode::DetInfer, nullptr).delta
                               : vera_forward(x, basis, p, cfg.alpha);
    const auto unmerged = add(linear(x, w, Tensor()), adapter);
    CHECK(testing::max_rel_diff(linear(x, merged, Tensor()).data(), unmerged.data()) < 1e-10);
  }
  auto lcfg = config(AdapterKind::Lora, r);
  LoraParams lp{random_tensor({d, r}, 24), random_tensor({r, d}, 25)};
  const auto lmerged = merge_weights(w, lp, lcfg, nullptr);
  const auto lunmerged = add(linear(x, w, Tensor()), lora_forward(x, lp, lcfg.alpha, r));
  CHECK(testing::max_rel_diff(linear(x, lmerged, Tensor()).data(), lunmerged.data()) < 1e-10);

  CHECK_THROWS_AS(merge_weights(w, lp, config(AdapterKind::LinearProbe, r), nullptr), ContractError);
}

TEST_CASE("adapter set initial state") {
  BackboneConfig b;
  b.d = 16;
  b.n_layers = 2;
  b.n_heads = 2;
  for (AdapterKind kind : {AdapterKind::Lora, AdapterKind::Vera, AdapterKind::Pvera}) {
    const auto set = AdapterSet::create(config(kind, 4), b, 3);
    CHECK(set.attached(0, Branch::Q));
    CHECK_FALSE(set.attached(0, Branch::K));
    CHECK(set.attached(1, Branch::V));
    if (kind == AdapterKind::Lora) {
      const auto& p = std::get<LoraParams>(set.params(0, Branch::Q));
      for (double v : p.b.data()) CHECK(v == 0.0);
    } else {
      const auto& p = std::get<ScalingParams>(set.params(1, Branch::V));
      for (double v : p.b_vec.data()) CHECK(v == 0.0);
      const double first = p.d_vec.data()[0];
      CHECK(first > 1e-5);
      CHECK(first < 1.0);
      for (double v : p.d_vec.data()) CHECK(v == first);
    }
    std::size_t n = 0;
    for (const auto& [name, t] : set.named_parameters()) n += t.numel();
    CHECK(n == count_trainable_params(set.config(), b));
  }
  auto bad = config(AdapterKind::Vera, 4);
  bad.beta = 0.1;
  CHECK_THROWS_AS(bad.validate(b), ConfigError);
  CHECK_THROWS_AS(parse_adapter_kind("dora"), ConfigError);
}
