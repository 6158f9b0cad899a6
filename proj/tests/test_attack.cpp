#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "afm/attack.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace afm;
using afm::testing::gradcheck;
using afm::testing::random_tensor;

namespace {

struct Stack {
  VictimModel victim{31};
  Vae vae{32};
  MeanVelocityNet net{33};
  NetworkField field{net};
  AttackModels models() const { return {victim, vae, field}; }
};

const Stack& stack() {
  static const Stack s;
  return s;
}

Tensor scene_image(std::uint64_t seed) {
  return render(sample_scene(seed, LightingRegime::Day, Command::Follow)).image;
}

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("spatial mask rounding and boundaries") {
  AttackConfig cfg;
  const SpatialMask m = build_spatial_mask(8, 8, cfg);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) CHECK(m.weights[r * 8 + c] == (r >= 4 ? 3.0 : 1.0));
  }

  cfg.road_fraction = 0.99;
  const SpatialMask hi = build_spatial_mask(8, 8, cfg);
  CHECK(hi.weights[0] == 1.0);
  CHECK(hi.weights[8] == 3.0);

  cfg.road_fraction = 0.01;
  const SpatialMask lo = build_spatial_mask(8, 8, cfg);
  CHECK(lo.weights[6 * 8] == 1.0);
  CHECK(lo.weights[7 * 8] == 3.0);

  cfg.road_fraction = 0.45;
  cfg.w_road = 1.0;
  for (double w : build_spatial_mask(8, 8, cfg).weights) CHECK(w == 1.0);
  CHECK_THROWS_AS(build_spatial_mask(0, 8, cfg), std::invalid_argument);
}

TEST_CASE("attention weights") {
  const Tensor uniform = attn_weights(Tensor::full({64}, 1.0 / 64), 4.5);
  for (double w : uniform.data()) CHECK(w == doctest::Approx(1.0 / 64).epsilon(1e-12));

  const Tensor two = attn_weights(Tensor::from({2}, {1.0, 0.0}), 1.0);
  const double e = std::numbers::e;
  CHECK(two[0] == doctest::Approx(e / (e + 1)).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-12));
  CHECK(two[0] == doctest::Approx(0.731).epsilon(1e-3));

  std::mt19937_64 rng(3);
  const Tensor sal = random_tensor(rng, {64}, 0.0, 1.0, false);
  const Tensor flat = attn_weights(sal, 1e6);
  const auto [lo, hi] = std::minmax_element(flat.data().begin(), flat.data().end());
  CHECK(*hi - *lo < 1e-6);
  double total = 0.0;
  const Tensor sharp = attn_weights(sal, 0.05);
  for (double w : sharp.data()) total += w;
  CHECK(std::abs(total - 1.0) < 1e-9);
  CHECK_THROWS_AS(attn_weights(Tensor::from({2}, {0.5, -0.1}), 1.0), std::invalid_argument);
}

TEST_CASE("feature loss") {
  std::mt19937_64 rng(4);
  const Tensor f = random_tensor(rng, {64, 64}, -1, 1, false);
  const Tensor ones = Tensor::full({64}, 1.0);
  CHECK(loss_feat(f, f, ones).item() == 0.0);
  CHECK(loss_feat(add_scalar(f, 1.0), f, ones).item() == doctest::Approx(1.0).epsilon(1e-12));

  const Tensor g = random_tensor(rng, {64, 64}, -1, 1, false);
  const Tensor m = random_tensor(rng, {64}, 0, 3, false);
  CHECK(loss_feat(g, f, mul_scalar(m, 2.0)).item() == doctest::Approx(2.0 * loss_feat(g, f, m).item()).epsilon(1e-12));
  CHECK_THROWS_AS(loss_feat(g, Tensor::zeros({64, 32}), m), std::invalid_argument);
  CHECK_THROWS_AS(loss_feat(g, f, Tensor::zeros({8})), std::invalid_argument);
}

TEST_CASE("attention loss") {
  std::mt19937_64 rng(5);
  const Tensor f = random_tensor(rng, {64, 64}, -1, 1, false);
  const Tensor g = random_tensor(rng, {64, 64}, -1, 1, false);
  CHECK(loss_attn(f, f, Tensor::full({64}, 1.0 / 64)).item() == 0.0);

  std::vector<double> d(64, 0.0);
  for (std::size_t k = 0; k < 64; ++k) {
    for (std::size_t j = 0; j < 64; ++j) d[k] += std::pow(g[k * 64 + j] - f[k * 64 + j], 2);
  }
  double mean_d = 0.0;
  for (double v : d) mean_d += v / 64;
  CHECK(loss_attn(g, f, Tensor::full({64}, 1.0 / 64)).item() == doctest::Approx(mean_d).epsilon(1e-12));

  std::vector<double> one_hot(64, 0.0);
  one_hot[17] = 1.0;
  CHECK(loss_attn(g, f, Tensor::from({64}, one_hot)).item() == doctest::Approx(d[17]).epsilon(1e-12));
}

TEST_CASE("latent anchor constraint") {
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor(rng, kLatentShape, -2, 2, false);
  CHECK(loss_constraint(z, z).item() == 0.0);
  CHECK(loss_constraint(add_scalar(z, 0.7), z).item() < 1e-12);
  CHECK(loss_constraint(mul_scalar(z, 2.0), z).item() == doctest::Approx(std_dev(z).item()).epsilon(1e-12));
}

TEST_CASE("total loss weighting and sign structure") {
  const AttackConfig cfg;
  auto total = [&](double f, double a, double c) {
    return loss_total({Tensor::scalar(f), Tensor::scalar(a), Tensor::scalar(c)}, cfg).item();
  };
  CHECK(total(0, 0, 0) == 0.0);
  CHECK(total(1, 1, 1) == doctest::Approx(-1.5).epsilon(1e-15));
  CHECK(total(1.1, 1, 1) < total(1, 1, 1));
  CHECK(total(1, 1.1, 1) < total(1, 1, 1));
  CHECK(total(1, 1, 1.1) > total(1, 1, 1));
  CHECK_THROWS_AS(total(std::nan(""), 1, 1), std::domain_error);
  CHECK_THROWS_AS(total(1, 1, std::numeric_limits<double>::infinity()), std::domain_error);
}

TEST_CASE("total loss gradient through the full pipeline") {
  const Stack& s = stack();
  const AttackConfig cfg;
  const Tensor x = scene_image(7);
  const LatentCode z_clean{s.vae.encode(x).z.detach()};
  const Tensor z_mid = invert_one_step(s.field, z_clean).z.detach();
  const BackboneOutput clean = s.victim.backbone(x);
  const Tensor mask = build_spatial_mask(8, 8, cfg).tensor();
  const Tensor w = attn_weights(clean.saliency, cfg.tau);
  auto f = [&](const std::vector<Tensor>& d) {
    const LatentCode z_adv = generate_one_step(s.field, {add(z_mid, d[0])}, d[1]);
    const Tensor feats = s.victim.backbone(s.vae.decode(z_adv)).features;
    return loss_total({loss_feat(feats, clean.features, mask), loss_attn(feats, clean.features, w),
                       loss_constraint(z_adv.z, z_clean.z)},
                      cfg);
  };
  std::mt19937_64 rng(8);
  const Tensor dz = random_tensor(rng, kLatentShape, -0.03, 0.03, true);
  const Tensor du = random_tensor(rng, kLatentShape, -0.03, 0.03, true);
  CHECK(gradcheck(f, {dz, du}, 1e-5) < 1e-3);
}

TEST_CASE("config text format") {
  AttackConfig cfg;
  CHECK(cfg.iterations == 50);
  CHECK(cfg.eps_z == 0.03);
  CHECK(cfg.tau == 4.5);
  cfg.iterations = 7;
  cfg.lambda_a = 1.25;
  cfg.seed = 99;
  const AttackConfig back = AttackConfig::parse(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());

  const AttackConfig c2 = AttackConfig::parse("# comment\n  eps_z = 0.05  # inline\n\niterations=3\n");
  CHECK(c2.eps_z == 0.05);
  CHECK(c2.iterations == 3);
  CHECK(c2.eps_u == 0.03);
  CHECK_THROWS_AS(AttackConfig::parse("epz_z = 0.1"), std::invalid_argument);
  CHECK_THROWS_AS(AttackConfig::parse("eps_z = abc"), std::invalid_argument);
  CHECK_THROWS_AS(AttackConfig::parse("eps_z"), std::invalid_argument);
  CHECK_THROWS_AS(AttackConfig::parse("iterations = -1"), std::invalid_argument);
  CHECK_THROWS_AS(AttackConfig::parse("eps_z = 0"), std::invalid_argument);
  CHECK_THROWS_AS(AttackConfig::parse("road_fraction = 1.0"), std::invalid_argument);
}

TEST_CASE("zero iterations return the unattacked reconstruction") {
  const Stack& s = stack();
  AttackConfig cfg;
  cfg.iterations = 0;
  const Tensor x = scene_image(9);
  const AttackResult r = afm_attack(x, s.models(), cfg);
  const Tensor expect = s.vae.decode(generate_one_step(s.field, invert_one_step(s.field, s.vae.encode(x))));
  CHECK(same_bits(r.image, expect));
  CHECK(r.loss_trace.empty());
  CHECK(r.nfe == 2);
}

TEST_CASE("attack invariants: budget, frozen attention, frozen models, NFE, determinism") {
  const Stack& s = stack();
  AttackConfig cfg;
  cfg.iterations = 12;
  const Tensor x = scene_image(10);
  const auto hashes = std::array{s.victim.params().hash(), s.vae.params().hash(), s.net.params().hash()};

  std::vector<Tensor> weights;
  double worst_z = 0.0, worst_u = 0.0;
  const AttackResult r = afm_attack(x, s.models(), cfg, [&](std::size_t, const PerturbationPair& d, const Tensor& w) {
    worst_z = std::max(worst_z, max_abs(d.delta_z));
    worst_u = std::max(worst_u, max_abs(d.delta_u));
    weights.push_back(w.clone());
  });
  CHECK(worst_z <= cfg.eps_z);
  CHECK(worst_u <= cfg.eps_u);
  CHECK(worst_z > 0.0);
  REQUIRE(weights.size() == cfg.iterations);
  for (const auto& w : weights) CHECK(same_bits(w, weights.front()));
  CHECK(same_bits(weights.front(), attn_weights(s.victim.backbone(x).saliency, cfg.tau)));

  CHECK(r.nfe == cfg.iterations + 2);
  CHECK(r.loss_trace.size() == cfg.iterations);
  CHECK_FALSE(r.aborted);
  for (double v : r.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(std::array{s.victim.params().hash(), s.vae.params().hash(), s.net.params().hash()} == hashes);

  const AttackResult again = afm_attack(x, s.models(), cfg);
  CHECK(same_bits(again.image, r.image));
  CHECK(same_bits(again.perturbation.delta_u, r.perturbation.delta_u));
  CHECK(again.loss_trace == r.loss_trace);
}

TEST_CASE("non-finite loss aborts the attack fail-soft") {
  const Stack& s = stack();
  FunctionField poisoned([](const Tensor& z, double, double) { return mul_scalar(z, std::nan("")); });
  AttackConfig cfg;
  cfg.iterations = 5;
  const AttackResult r = afm_attack(scene_image(11), {s.victim, s.vae, poisoned}, cfg);
  CHECK(r.aborted);
  CHECK(r.loss_trace.empty());
  CHECK(r.diagnostic.find("iteration 0") != std::string::npos);
  CHECK(max_abs(r.perturbation.delta_z) == 0.0);
}

TEST_CASE("pixel attacks respect the budget") {
  const Stack& s = stack();
  const Tensor x = scene_image(12);
  CHECK(same_bits(fgsm_attack(x, s.victim, 0.0), x));

  const Tensor f = fgsm_attack(x, s.victim, 0.03);
  PixelAttackConfig pc;
  const Tensor p = pgd_attack(x, s.victim, pc);
  for (const Tensor* adv : {&f, &p}) {
    CHECK(max_abs(sub(*adv, x)) <= 0.03 + 1e-15);
    CHECK(max_abs(sub(*adv, x)) > 0.0);
    for (double v : adv->data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  pc.iters = 1;
  pc.step = 0.03;
  CHECK(same_bits(pgd_attack(x, s.victim, pc), f));
}

TEST_CASE("random control respects budgets and is seeded") {
  const Stack& s = stack();
  AttackConfig cfg;
  cfg.seed = 5;
  const Tensor x = scene_image(13);
  const AttackResult a = random_control(x, s.vae, s.field, cfg);
  const AttackResult b = random_control(x, s.vae, s.field, cfg);
  CHECK(max_abs(a.perturbation.delta_z) <= cfg.eps_z);
  CHECK(max_abs(a.perturbation.delta_u) <= cfg.eps_u);
  CHECK(same_bits(a.image, b.image));
  CHECK(a.nfe == 2);
  cfg.seed = 6;
  CHECK_FALSE(same_bits(random_control(x, s.vae, s.field, cfg).perturbation.delta_z, a.perturbation.delta_z));
}
