#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "afm/attack.hpp"
#include "afm/closedloop.hpp"
#include "afm/metrics.hpp"
#include "afm/models.hpp"
#include "json.hpp"

namespace afm {

std::string code_version();

struct DataSettings {
  std::size_t train_size = 1500;
  std::size_t eval_size = 128;
  LightingRegime lighting = LightingRegime::Mixed;
  // Optional pre-generated datasets; when empty the sets are rendered from the seed.
  std::filesystem::path train_path;
  std::filesystem::path eval_path;
};

struct BaselineSettings {
  double fgsm_eps = 0.03;
  double pgd_eps = 0.03;
  double pgd_step_fraction = 0.25;  // PGD step as a fraction of eps
  std::size_t pgd_iters = 10;
  double probe_scale = 1e-3;
};

struct GateThresholds {
  double vae_mse = 0.01;
  double flow_regression = 0.1;
  double victim_ade = 0.5;
};

struct ClosedLoopSettings {
  std::size_t routes = 10;
  std::uint64_t route_seed = 2024;
  std::size_t inject_every = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t jobs = 0;  // 0 = all cores
  std::filesystem::path checkpoints = "afm_stack";
  std::filesystem::path out = "afm_out";
  DataSettings data;
  VaeTrainConfig vae;
  FlowTrainConfig flow;
  VictimTrainConfig victim;
  AttackConfig attack;
  BaselineSettings baselines;
  double success_threshold = 1.0;
  GateThresholds gates;
  ClosedLoopSettings closedloop;
  std::vector<double> eps_grid{0.01, 0.03, 0.05, 0.1};

  // Unknown keys are errors. Seeds of the individual stages derive from `seed`.
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // "section.key=value"; value is parsed as JSON when possible.
  void set(const std::string& assignment);
  // Re-derives the per-stage seeds after `seed` changed.
  void derive_seeds();
  void set_eps(double eps);
  void validate() const;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Writes config.json and VERSION into dir (created if needed).
void echo_config(const ExperimentConfig& cfg, const std::filesystem::path& dir);

// -------------------------------------------------------------- stack

struct Stack {
  Vae vae;
  MeanVelocityNet flow;
  VictimModel victim_a;
  VictimModel victim_b;
};

struct GateResult {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

struct TrainReport {
  std::vector<GateResult> gates;
  std::vector<std::string> trained;  // components retrained (the rest were cached)
  bool all_pass() const;
};

Dataset train_set(const ExperimentConfig& cfg);
Dataset eval_set(const ExperimentConfig& cfg);

// Trains whatever is missing or stale in cfg.checkpoints, then measures the
// gates on the held-out set. Checkpoints carry a hash of the settings they
// were trained with.
TrainReport train_stack(const ExperimentConfig& cfg, std::ostream& log);
Stack load_stack(const ExperimentConfig& cfg);
std::vector<GateResult> measure_gates(const Stack& stack, const Dataset& eval, const ExperimentConfig& cfg);
void write_gates_json(const std::filesystem::path& path, const std::vector<GateResult>& gates);

// ------------------------------------------------------------- attacks

enum class Method { Clean, Afm, Fgsm, Pgd, Random };
const char* method_name(Method m);
Method parse_method(const std::string& name);

struct MethodParams {
  AttackConfig afm;
  double fgsm_eps = 0.03;
  PixelAttackConfig pgd;
};
MethodParams method_params(const ExperimentConfig& cfg);

struct AdversarialSet {
  Method method = Method::Clean;
  std::vector<Tensor> images;
  std::vector<double> seconds;
  std::vector<std::uint64_t> nfe;
  std::vector<std::vector<double>> loss_traces;  // AFM only
};

// One adversarial frame; `sample_seed` seeds the probe / random draws.
Tensor attack_frame(Method method, const Tensor& x, const Stack& stack, const VictimModel& source,
                    const MethodParams& params, std::uint64_t sample_seed, AttackResult* afm_out = nullptr);

AdversarialSet generate_set(Method method, const Dataset& eval, const Stack& stack, const VictimModel& source,
                            const MethodParams& params, std::uint64_t seed);

// Per-sample metrics of a set against `target`.
std::vector<SampleRecord> score_set(const AdversarialSet& set, const Dataset& eval, const VictimModel& target,
                                    double success_threshold, const std::string& label);
// pFID is NaN when the set is too small for the proxy.
MethodSummary summarize_set(const AdversarialSet& set, const Dataset& eval, const std::vector<SampleRecord>& rows,
                            const std::string& label);

void write_set(const std::filesystem::path& dir, const AdversarialSet& set, const std::vector<SampleRecord>& rows,
               const MethodSummary& summary);

struct MatchedPgd {
  double eps = 0.0;
  AdversarialSet set;
  std::vector<SampleRecord> rows;
};
// Smallest grid eps whose PGD SR lies within `tolerance` points of target_sr,
// or the closest one when none does.
MatchedPgd match_pgd_sr(double target_sr, const Dataset& eval, const Stack& stack, const MethodParams& params,
                        std::uint64_t seed, double success_threshold, double tolerance = 10.0);

// ---------------------------------------------------------- closed loop

struct ClosedLoopRun {
  std::vector<EpisodeLog> clean;
  std::vector<EpisodeLog> attacked;
};
// Clean episodes on every route, plus attacked ones when a method is given.
// The attacker uses victim A, which is also the driving policy.
ClosedLoopRun run_closedloop(const ExperimentConfig& cfg, const Stack& stack, std::optional<Method> method);

// ------------------------------------------------------------ ablation

struct AblationRow {
  double eps = 0.0;
  MethodSummary summary;
};
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Dataset& eval, const Stack& stack);
void write_ablation(const std::filesystem::path& dir, const std::vector<AblationRow>& rows);

}  // namespace afm
