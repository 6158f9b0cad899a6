#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afm/nn.hpp"
#include "afm/scene.hpp"
#include "afm/tensor.hpp"

namespace afm {

struct TrajectoryPair {
  Trajectory clean;
  Trajectory adversarial;
};

// Mean over samples of the mean waypoint displacement (m).
double shift(const std::vector<TrajectoryPair>& pairs);
double pair_shift(const TrajectoryPair& pair);
double max_lateral_deviation(const TrajectoryPair& pair);
// Open-loop success: max lateral waypoint deviation above the threshold.
bool open_loop_success(const TrajectoryPair& pair, double threshold = 1.0);
// Percentage of true outcomes.
double success_rate(const std::vector<bool>& outcomes);
double gen_time(const std::vector<double>& seconds);

// Gaussian-window SSIM (11x11, sigma 1.5) over valid windows, averaged over channels.
double ssim(const Tensor& x, const Tensor& y);

// Never-trained random conv net used by the perceptual and FID proxies.
class FeatureExtractor {
 public:
  static constexpr std::uint64_t kSeed = 0x5eed0f11dULL;
  static constexpr std::size_t kPooledDim = 64;

  explicit FeatureExtractor(std::uint64_t seed = kSeed);
  std::vector<Tensor> layers(const Tensor& image) const;  // [C_l, H_l, W_l]
  std::vector<double> pooled(const Tensor& image) const;
  const std::vector<std::vector<double>>& layer_weights() const { return layer_weights_; }

 private:
  ParamSet params_;
  std::vector<Conv> convs_;
  std::vector<std::vector<double>> layer_weights_;  // per-channel w_l
};

const FeatureExtractor& default_extractor();

double perceptual_distance(const Tensor& x, const Tensor& y, const FeatureExtractor& fe = default_extractor());

// Frechet distance between Gaussians fitted to two feature sets (rows = samples).
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);
double fid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b,
           const FeatureExtractor& fe = default_extractor());

// ------------------------------------------------------------- reporting

struct SampleRecord {
  std::size_t index = 0;
  std::string method;
  double shift = 0.0;
  double max_lateral = 0.0;
  bool success = false;
  double ssim = 1.0;
  double plpips = 0.0;
  double time = 0.0;
  std::uint64_t nfe = 0;
};

struct MethodSummary {
  std::string method;
  std::size_t count = 0;
  double shift = 0.0, shift_std = 0.0;
  double sr = 0.0;
  double ssim = 0.0, ssim_std = 0.0;
  double plpips = 0.0, plpips_std = 0.0;
  double pfid = 0.0;
  double time = 0.0, time_std = 0.0;
};

inline constexpr int kReportSchemaVersion = 1;

MethodSummary summarize(const std::string& method, const std::vector<SampleRecord>& rows, double pfid);
// Deterministic per-sample rows; wall-clock times go to write_timing_csv.
void write_samples_csv(const std::filesystem::path& path, const std::vector<SampleRecord>& rows);
void write_timing_csv(const std::filesystem::path& path, const std::vector<SampleRecord>& rows);
// Columns: method,SHIFT,SR,SSIM,pLPIPS,pFID,TIME
void write_summary_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows);
void write_summary_json(const std::filesystem::path& path, const std::vector<MethodSummary>& rows,
                        const std::string& title);

// Fixed-precision formatting so reruns produce identical bytes.
std::string fmt(double v, int digits = 6);

}  // namespace afm
