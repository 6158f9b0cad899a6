#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "afm/flow.hpp"
#include "afm/models.hpp"

namespace afm {

struct AttackConfig {
  std::size_t iterations = 50;
  double eta_z = 0.05;
  double eta_u = 0.05;
  double eps_z = 0.03;
  double eps_u = 0.03;
  double lambda_f = 3.0;
  double lambda_a = 4.5;
  double lambda_c = 6.0;
  double tau = 4.5;
  double w_road = 3.0;
  double road_fraction = 0.45;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
  // "key = value" lines; '#' starts a comment. Unknown keys are errors.
  std::string to_text() const;
  static AttackConfig parse(const std::string& text);
  static AttackConfig load(const std::filesystem::path& path);
  // Applies one "key=value" override.
  void set(const std::string& key, const std::string& value);
};

struct PerturbationPair {
  Tensor delta_z;
  Tensor delta_u;
};

struct SpatialMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> weights;  // row-major over the token grid

  Tensor tensor() const { return Tensor::from({weights.size()}, weights); }
};

SpatialMask build_spatial_mask(std::size_t rows, std::size_t cols, const AttackConfig& cfg);

// Softmax of saliency / tau over tokens.
Tensor attn_weights(const Tensor& saliency, double tau);

// (1/|F|) sum_k M_k ||F_adv,k - F_clean,k||^2 with |F| the element count.
Tensor loss_feat(const Tensor& f_adv, const Tensor& f_clean, const Tensor& mask);
// sum_k W_k ||F_adv,k - F_clean,k||^2
Tensor loss_attn(const Tensor& f_adv, const Tensor& f_clean, const Tensor& w_attn);
// |sigma(z_adv) - sigma(z_clean)| over all elements of the sample.
Tensor loss_constraint(const Tensor& z_adv, const Tensor& z_clean);

struct LossComponents {
  Tensor feat;
  Tensor attn;
  Tensor constraint;
};

Tensor loss_total(const LossComponents& c, const AttackConfig& cfg);

struct AttackModels {
  const VictimModel& victim;
  const Vae& vae;
  const VelocityField& flow;
};

struct AttackResult {
  Tensor image;
  PerturbationPair perturbation;
  std::vector<double> loss_trace;
  double seconds = 0.0;
  std::uint64_t nfe = 0;
  bool aborted = false;  // non-finite loss; perturbation is the last valid one
  std::string diagnostic;
};

// Called after every clipped update with the iteration index, the current
// perturbation and the frozen attention weights.
using AttackObserver = std::function<void(std::size_t, const PerturbationPair&, const Tensor&)>;

AttackResult afm_attack(const Tensor& x_clean, const AttackModels& models, const AttackConfig& cfg,
                        const AttackObserver& observer = {});

// Sign-gradient attacks on the unweighted feature deviation. The gradient is
// taken at x + probe, a fixed seeded offset of size probe_scale, since the
// deviation has a zero gradient at x itself.
struct PixelAttackConfig {
  double eps = 0.03;
  double step = 0.0075;
  std::size_t iters = 10;
  double probe_scale = 1e-3;
  std::uint64_t seed = 0;
};

Tensor fgsm_attack(const Tensor& x_clean, const VictimModel& victim, double eps, std::uint64_t seed = 0,
                   double probe_scale = 1e-3);
// Called after every projected step with the iteration index and the current image.
using PixelObserver = std::function<void(std::size_t, const Tensor&)>;
Tensor pgd_attack(const Tensor& x_clean, const VictimModel& victim, const PixelAttackConfig& cfg,
                  const PixelObserver& observer = {});

// The AFM pipeline with perturbations drawn uniformly from the budget balls.
AttackResult random_control(const Tensor& x_clean, const Vae& vae, const VelocityField& flow,
                            const AttackConfig& cfg);

}  // namespace afm
