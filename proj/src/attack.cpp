#include "afm/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

namespace afm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size()) throw std::invalid_argument("config key " + key + ": not a number: '" + value + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
    throw std::invalid_argument("config key " + key + ": not a non-negative integer: '" + value + "'");
  }
  return std::stoull(value);
}

void copy_into(Tensor& leaf, const Tensor& values) {
  std::copy(values.data().begin(), values.data().end(), leaf.mutable_data().begin());
}

Tensor uniform_ball(const Shape& shape, double eps, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-eps, eps);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(shape, std::move(v));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

// ------------------------------------------------------------------ config

void AttackConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  positive(eta_z, "eta_z");
  positive(eta_u, "eta_u");
  positive(eps_z, "eps_z");
  positive(eps_u, "eps_u");
  positive(lambda_f, "lambda_f");
  positive(lambda_a, "lambda_a");
  positive(lambda_c, "lambda_c");
  positive(tau, "tau");
  positive(w_road, "w_road");
  positive(adam_eps, "adam_eps");
  if (!(road_fraction > 0.0 && road_fraction < 1.0)) throw std::invalid_argument("road_fraction must be in (0,1)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must be in [0,1)");
  }
}

void AttackConfig::set(const std::string& key, const std::string& value) {
  const std::map<std::string, double*> reals{
      {"eta_z", &eta_z},           {"eta_u", &eta_u},           {"eps_z", &eps_z},       {"eps_u", &eps_u},
      {"lambda_f", &lambda_f},     {"lambda_a", &lambda_a},     {"lambda_c", &lambda_c}, {"tau", &tau},
      {"w_road", &w_road},         {"road_fraction", &road_fraction}, {"adam_beta1", &adam_beta1},
      {"adam_beta2", &adam_beta2}, {"adam_eps", &adam_eps}};
  if (auto it = reals.find(key); it != reals.end()) {
    *it->second = parse_double(key, value);
  } else if (key == "iterations") {
    iterations = parse_uint(key, value);
  } else if (key == "seed") {
    seed = parse_uint(key, value);
  } else {
    throw std::invalid_argument("unknown attack config key '" + key + "'");
  }
}

std::string AttackConfig::to_text() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "iterations = " << iterations << "\n"
     << "eta_z = " << eta_z << "\n"
     << "eta_u = " << eta_u << "\n"
     << "eps_z = " << eps_z << "\n"
     << "eps_u = " << eps_u << "\n"
     << "lambda_f = " << lambda_f << "\n"
     << "lambda_a = " << lambda_a << "\n"
     << "lambda_c = " << lambda_c << "\n"
     << "tau = " << tau << "\n"
     << "w_road = " << w_road << "\n"
     << "road_fraction = " << road_fraction << "\n"
     << "adam_beta1 = " << adam_beta1 << "\n"
     << "adam_beta2 = " << adam_beta2 << "\n"
     << "adam_eps = " << adam_eps << "\n"
     << "seed = " << seed << "\n";
  return os.str();
}

AttackConfig AttackConfig::parse(const std::string& text) {
  AttackConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("attack config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

AttackConfig AttackConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open attack config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

// ------------------------------------------------------------------ losses

SpatialMask build_spatial_mask(std::size_t rows, std::size_t cols, const AttackConfig& cfg) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("mask grid must be non-empty");
  std::size_t road = static_cast<std::size_t>(std::lround(cfg.road_fraction * static_cast<double>(rows)));
  road = std::clamp<std::size_t>(road, 1, rows > 1 ? rows - 1 : 1);
  SpatialMask m{rows, cols, std::vector<double>(rows * cols, 1.0)};
  for (std::size_t r = rows - road; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m.weights[r * cols + c] = cfg.w_road;
  }
  return m;
}

Tensor attn_weights(const Tensor& saliency, double tau) {
  for (double s : saliency.data()) {
    if (s < 0.0) throw std::invalid_argument("saliency must be non-negative");
  }
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  return reshape(softmax(reshape(saliency.detach(), {1, saliency.numel()}), tau), {saliency.numel()});
}

namespace {

Tensor token_deviation(const Tensor& f_adv, const Tensor& f_clean) {
  if (f_adv.shape() != f_clean.shape() || f_adv.ndim() != 2) {
    throw std::invalid_argument("feature shapes differ: " + shape_str(f_adv.shape()) + " vs " +
                                shape_str(f_clean.shape()));
  }
  return row_sum(square(sub(f_adv, f_clean)));
}

void require_token_weights(const Tensor& w, const Tensor& f) {
  if (w.shape() != Shape{f.dim(0)}) {
    throw std::invalid_argument("token weights " + shape_str(w.shape()) + " do not match " + shape_str(f.shape()));
  }
}

}  // namespace

Tensor loss_feat(const Tensor& f_adv, const Tensor& f_clean, const Tensor& mask) {
  Tensor d = token_deviation(f_adv, f_clean);
  require_token_weights(mask, f_adv);
  return mul_scalar(sum(mul(d, mask)), 1.0 / static_cast<double>(f_adv.numel()));
}

Tensor loss_attn(const Tensor& f_adv, const Tensor& f_clean, const Tensor& w_attn) {
  Tensor d = token_deviation(f_adv, f_clean);
  require_token_weights(w_attn, f_adv);
  return sum(mul(d, w_attn));
}

Tensor loss_constraint(const Tensor& z_adv, const Tensor& z_clean) {
  if (z_adv.shape() != z_clean.shape()) throw std::invalid_argument("latent shapes differ");
  return abs(sub(std_dev(z_adv), std_dev(z_clean)));
}

Tensor loss_total(const LossComponents& c, const AttackConfig& cfg) {
  for (const Tensor* t : {&c.feat, &c.attn, &c.constraint}) {
    if (!std::isfinite(t->item())) throw std::domain_error("non-finite loss component");
  }
  return add(sub(mul_scalar(c.constraint, cfg.lambda_c), mul_scalar(c.feat, cfg.lambda_f)),
             mul_scalar(c.attn, -cfg.lambda_a));
}

// ------------------------------------------------------------------ AFM

AttackResult afm_attack(const Tensor& x_clean, const AttackModels& models, const AttackConfig& cfg,
                        const AttackObserver& observer) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t nfe0 = NfeCounter::thread_count();

  // Initialization: encode, invert, clean forward, zero perturbations, mask, frozen weights.
  const LatentCode z_clean{models.vae.encode(x_clean).z.detach()};
  const LatentCode z_mid{invert_one_step(models.flow, z_clean).z.detach()};
  const BackboneOutput clean = models.victim.backbone(x_clean);
  const Tensor f_clean = clean.features.detach();
  const auto& vc = models.victim.config();
  const Tensor mask = build_spatial_mask(vc.grid(), vc.grid(), cfg).tensor();
  const Tensor w_attn = attn_weights(clean.saliency, cfg.tau);

  PerturbationPair delta{Tensor::zeros(kLatentShape, true), Tensor::zeros(kLatentShape, true)};
  AdamState adam_z(delta.delta_z.numel(), cfg.eta_z, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  AdamState adam_u(delta.delta_u.numel(), cfg.eta_u, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);

  AttackResult result;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    try {
      const LatentCode z_start{add(z_mid.z, delta.delta_z)};
      const LatentCode z_adv = generate_one_step(models.flow, z_start, delta.delta_u);
      const Tensor x_adv = models.vae.decode(z_adv);
      const Tensor f_adv = models.victim.backbone(x_adv).features;
      const LossComponents parts{loss_feat(f_adv, f_clean, mask), loss_attn(f_adv, f_clean, w_attn),
                                 loss_constraint(z_adv.z, z_clean.z)};
      const Tensor total = loss_total(parts, cfg);
      total.backward();
      result.loss_trace.push_back(total.item());
    } catch (const std::domain_error& e) {
      result.aborted = true;
      result.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
      delta.delta_z.zero_grad();
      delta.delta_u.zero_grad();
      break;
    }
    adam_step(delta.delta_z, adam_z);
    adam_step(delta.delta_u, adam_u);
    copy_into(delta.delta_z, clip_inf(delta.delta_z, cfg.eps_z));
    copy_into(delta.delta_u, clip_inf(delta.delta_u, cfg.eps_u));
    delta.delta_z.zero_grad();
    delta.delta_u.zero_grad();
    if (observer) observer(it, delta, w_attn);
  }

  // Final generation with the optimized perturbations.
  const PerturbationPair final_delta{delta.delta_z.detach(), delta.delta_u.detach()};
  const LatentCode z_final =
      generate_one_step(models.flow, {add(z_mid.z, final_delta.delta_z)}, final_delta.delta_u);
  result.image = models.vae.decode(z_final).detach();
  result.perturbation = final_delta;
  result.nfe = NfeCounter::thread_count() - nfe0;
  result.seconds = seconds_since(t0);
  return result;
}

AttackResult random_control(const Tensor& x_clean, const Vae& vae, const VelocityField& flow,
                            const AttackConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t nfe0 = NfeCounter::thread_count();
  std::mt19937_64 rng(cfg.seed);
  PerturbationPair delta;
  delta.delta_z = uniform_ball(kLatentShape, cfg.eps_z, rng);
  delta.delta_u = uniform_ball(kLatentShape, cfg.eps_u, rng);
  const LatentCode z_mid = invert_one_step(flow, {vae.encode(x_clean).z.detach()});
  const LatentCode z_adv = generate_one_step(flow, {add(z_mid.z, delta.delta_z)}, delta.delta_u);
  AttackResult result;
  result.image = vae.decode(z_adv).detach();
  result.perturbation = delta;
  result.nfe = NfeCounter::thread_count() - nfe0;
  result.seconds = seconds_since(t0);
  return result;
}

// ------------------------------------------------------------ pixel attacks

namespace {

Tensor feature_gradient_sign(const Tensor& at, const Tensor& f_clean, const VictimModel& victim) {
  Tensor x = at.clone().set_requires_grad(true);
  Tensor f = victim.backbone(x).features;
  sum(square(sub(f, f_clean))).backward();
  std::vector<double> s(x.numel());
  const auto g = x.grad();
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
  return Tensor::from(x.shape(), std::move(s));
}

Tensor project(const std::vector<double>& candidate, const Tensor& x_clean, double eps) {
  std::vector<double> out(candidate.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double lo = std::max(0.0, x_clean[i] - eps), hi = std::min(1.0, x_clean[i] + eps);
    out[i] = std::clamp(candidate[i], lo, hi);
  }
  return Tensor::from(x_clean.shape(), std::move(out));
}

Tensor probe_offset(const Shape& shape, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return uniform_ball(shape, scale, rng);
}

}  // namespace

Tensor pgd_attack(const Tensor& x_clean, const VictimModel& victim, const PixelAttackConfig& cfg,
                  const PixelObserver& observer) {
  if (cfg.eps < 0.0 || cfg.step < 0.0) throw std::invalid_argument("eps and step must be non-negative");
  const Tensor f_clean = victim.backbone(x_clean).features.detach();
  const Tensor probe = probe_offset(x_clean.shape(), cfg.probe_scale, cfg.seed);
  Tensor x = x_clean.detach();
  for (std::size_t k = 0; k < cfg.iters; ++k) {
    const Tensor sign = feature_gradient_sign(add(x, probe), f_clean, victim);
    std::vector<double> cand(x.numel());
    for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = x[i] + cfg.step * sign[i];
    x = project(cand, x_clean, cfg.eps);
    if (observer) observer(k, x);
  }
  return x;
}

Tensor fgsm_attack(const Tensor& x_clean, const VictimModel& victim, double eps, std::uint64_t seed,
                   double probe_scale) {
  return pgd_attack(x_clean, victim, {eps, eps, 1, probe_scale, seed});
}

}  // namespace afm
