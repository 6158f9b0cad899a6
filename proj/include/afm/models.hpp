#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afm/nn.hpp"
#include "afm/scene.hpp"
#include "afm/tensor.hpp"

namespace afm {

inline const Shape kLatentShape{4, 8, 8};

// VAE latent (scaled so the training corpus has unit standard deviation).
struct LatentCode {
  Tensor z;

  double sigma() const;
  const Shape& shape() const { return z.shape(); }
};

// Counts velocity-network evaluations. The per-thread tally is what the
// attack asserts on; the global one is a process-wide total.
class NfeCounter {
 public:
  static void increment();
  static std::uint64_t thread_count();
  static void reset_thread();
  static std::uint64_t global_count();

 private:
  static std::atomic<std::uint64_t> global_;
};

// ------------------------------------------------------------------ VAE

class Vae {
 public:
  explicit Vae(std::uint64_t seed = 0);

  // Deterministic latent mean, scaled by latent_scale.
  LatentCode encode(const Tensor& image) const;
  // Unscaled (mean, log-variance) pair used during training.
  std::pair<Tensor, Tensor> encode_stats(const Tensor& image) const;
  // Image in [0,1]^{3x64x64}.
  Tensor decode(const LatentCode& z) const;
  Tensor decode_unscaled(const Tensor& z) const;

  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void rebind();

 private:
  ParamSet params_;
  double latent_scale_ = 1.0;
  Conv e1_, e2_, e3_, e_head_;
  Conv d0_, d1_, d2_, d3_;
};

// ----------------------------------------------------------- velocity net

// Average velocity u(z, r, t) for a state z known at time r: the state at
// time t is z + (t - r) * u. With r == t it is the instantaneous velocity.
class MeanVelocityNet {
 public:
  explicit MeanVelocityNet(std::uint64_t seed = 0);

  // Network evaluation without range checks or NFE accounting (training use).
  Tensor forward(const Tensor& z, double r, double t) const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void rebind();

  static constexpr std::size_t kFrequencies = 8;
  static constexpr std::size_t kHidden = 512;

 private:
  ParamSet params_;
  Linear l1_, l2_, l3_;
};

// Checked, counted evaluation. r and t must lie in [0,1].
Tensor velocity(const MeanVelocityNet& net, const LatentCode& z, double r, double t);

// --------------------------------------------------------------- victim

struct VictimConfig {
  std::size_t embed = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ffn = 128;
  std::size_t patch = 8;
  std::size_t horizon = kHorizon;

  std::size_t grid() const { return kImageSize / patch; }
  std::size_t tokens() const { return grid() * grid(); }
};

// Backbone (the gray-box surface).
struct BackboneOutput {
  Tensor features;         // [tokens, embed]
  Tensor head_attention;   // [heads, tokens], rows sum to 1
  Tensor saliency;         // [tokens], head mean of head_attention
  Tensor pooled;           // [1, embed], attention-pooled summary
};

struct VictimOutput {
  Tensor features;    // [Hf*Wf, embed]
  Tensor saliency;    // [Hf*Wf], non-negative, sums to 1
  Tensor trajectory;  // [T, 2] meters, ego frame
};

class VictimModel {
 public:
  explicit VictimModel(std::uint64_t seed = 0, VictimConfig config = {});

  BackboneOutput backbone(const Tensor& image) const;
  Tensor head(const BackboneOutput& b, Command command) const;
  VictimOutput forward(const Tensor& image, Command command) const;

  const VictimConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  void rebind();

 private:
  struct Block {
    LayerNorm ln1, ln2;
    Linear qkv, proj, fc1, fc2;
  };
  VictimConfig config_;
  ParamSet params_;
  Linear patch_embed_;
  Tensor pos_embed_;
  std::vector<Block> blocks_;
  LayerNorm ln_final_;
  Tensor pool_query_;
  Linear pool_kv_;
  Linear pool_out_;
  Tensor command_embed_;
  Linear head1_, head2_;
};

VictimOutput victim_forward(const VictimModel& m, const Tensor& image, Command command);
Tensor extract_saliency(const VictimModel& m, const Tensor& image);
Trajectory to_trajectory(const Tensor& trajectory);

// --------------------------------------------------------------- training

struct VaeTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 1;
  double lr = 2e-3;
  double kl_weight = 1e-4;
  std::uint64_t seed = 11;
  bool verbose = false;
};

struct FlowTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch = 8;
  double lr = 1e-3;
  double equal_time_fraction = 0.5;  // share of r == t samples
  double jvp_step = 1e-4;
  // Weight of the one-step round-trip penalty |z - G(I(z))|^2 on data latents.
  double cycle_weight = 1.0;
  std::uint64_t seed = 12;
  bool verbose = false;
};

struct VictimTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::uint64_t seed = 13;
  bool verbose = false;
};

struct TrainingLog {
  std::vector<double> epoch_losses;
};

Vae train_vae(const Dataset& data, const VaeTrainConfig& cfg, TrainingLog* log = nullptr);
// Latent corpus the flow is fitted to; computed once from the trained VAE.
std::vector<Tensor> encode_corpus(const Vae& vae, const Dataset& data);
MeanVelocityNet train_flow(const Vae& vae, const Dataset& data, const FlowTrainConfig& cfg,
                           TrainingLog* log = nullptr);
VictimModel train_victim(const Dataset& data, const VictimTrainConfig& cfg, std::uint64_t init_seed,
                         TrainingLog* log = nullptr);

// ------------------------------------------------------------ checkpoints

struct Checkpoint {
  std::string kind;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  ParamSet params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_vae(const Vae& vae, const std::filesystem::path& path, std::uint64_t config_hash, std::uint64_t seed);
Vae load_vae(const std::filesystem::path& path);
void save_flow(const MeanVelocityNet& net, const std::filesystem::path& path, std::uint64_t config_hash,
               std::uint64_t seed);
MeanVelocityNet load_flow(const std::filesystem::path& path);
void save_victim(const VictimModel& m, const std::filesystem::path& path, std::uint64_t config_hash,
                 std::uint64_t seed);
VictimModel load_victim(const std::filesystem::path& path);

std::uint64_t file_hash(const std::filesystem::path& path);

}  // namespace afm
