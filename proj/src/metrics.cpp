#include "afm/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace afm {

namespace {

void require_same(const TrajectoryPair& p) {
  if (p.clean.size() != p.adversarial.size() || p.clean.empty()) {
    throw std::invalid_argument("trajectory pair lengths differ or are empty");
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

void require_images(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape() || x.ndim() != 3) {
    throw std::invalid_argument("image shapes differ: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
}

}  // namespace

double pair_shift(const TrajectoryPair& pair) {
  require_same(pair);
  double s = 0.0;
  for (std::size_t t = 0; t < pair.clean.size(); ++t) s += (pair.clean[t] - pair.adversarial[t]).norm();
  return s / static_cast<double>(pair.clean.size());
}

double shift(const std::vector<TrajectoryPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("shift of an empty set");
  double s = 0.0;
  for (const auto& p : pairs) s += pair_shift(p);
  return s / static_cast<double>(pairs.size());
}

double max_lateral_deviation(const TrajectoryPair& pair) {
  require_same(pair);
  double m = 0.0;
  for (std::size_t t = 0; t < pair.clean.size(); ++t) m = std::max(m, std::abs(pair.clean[t].y - pair.adversarial[t].y));
  return m;
}

bool open_loop_success(const TrajectoryPair& pair, double threshold) { return max_lateral_deviation(pair) > threshold; }

double success_rate(const std::vector<bool>& outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("success rate of an empty set");
  const auto n = std::count(outcomes.begin(), outcomes.end(), true);
  return 100.0 * static_cast<double>(n) / static_cast<double>(outcomes.size());
}

double gen_time(const std::vector<double>& seconds) {
  if (seconds.empty()) throw std::invalid_argument("generation time of an empty set");
  return mean_of(seconds);
}

// ------------------------------------------------------------------ SSIM

double ssim(const Tensor& x_in, const Tensor& y_in) {
  require_images(x_in, y_in);
  // Fixed argument order so contracted floating-point ops cannot break symmetry.
  const bool swap = std::lexicographical_compare(y_in.data().begin(), y_in.data().end(), x_in.data().begin(),
                                                 x_in.data().end());
  const Tensor& x = swap ? y_in : x_in;
  const Tensor& y = swap ? x_in : y_in;
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  const std::size_t ch = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < kWin || w < kWin) throw std::invalid_argument("ssim needs images of at least 11x11");
  double g[kWin], gs = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - kWin / 2;
    g[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    gs += g[i];
  }
  for (double& v : g) v /= gs;

  const auto xd = x.data(), yd = y.data();
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t c = 0; c < ch; ++c) {
    const double* xp = xd.data() + c * h * w;
    const double* yp = yd.data() + c * h * w;
    for (std::size_t r = 0; r + kWin <= h; ++r) {
      for (std::size_t q = 0; q + kWin <= w; ++q) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int i = 0; i < kWin; ++i) {
          for (int j = 0; j < kWin; ++j) {
            const double wt = g[i] * g[j];
            const double a = xp[(r + i) * w + q + j], b = yp[(r + i) * w + q + j];
            mx += wt * a;
            my += wt * b;
            sxx += wt * a * a;
            syy += wt * b * b;
            sxy += wt * (a * b);
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
        total += ((2 * (mx * my) + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

// ------------------------------------------------------- feature extractor

FeatureExtractor::FeatureExtractor(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t chans[4] = {3, 16, 32, kPooledDim};
  for (int l = 0; l < 3; ++l) {
    convs_.push_back(Conv::make(params_, "fe" + std::to_string(l), chans[l], chans[l + 1], 3, 2, rng));
    layer_weights_.emplace_back(chans[l + 1], 1.0);
  }
}

std::vector<Tensor> FeatureExtractor::layers(const Tensor& image) const {
  std::vector<Tensor> out;
  Tensor h = image.detach();
  for (const auto& conv : convs_) {
    h = relu(conv(h));
    out.push_back(h);
  }
  return out;
}

std::vector<double> FeatureExtractor::pooled(const Tensor& image) const {
  const Tensor last = layers(image).back();
  const std::size_t c = last.dim(0), hw = last.numel() / c;
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < hw; ++k) out[i] += last[i * hw + k];
    out[i] /= static_cast<double>(hw);
  }
  return out;
}

const FeatureExtractor& default_extractor() {
  static const FeatureExtractor fe;
  return fe;
}

double perceptual_distance(const Tensor& x, const Tensor& y, const FeatureExtractor& fe) {
  require_images(x, y);
  const auto lx = fe.layers(x), ly = fe.layers(y);
  double total = 0.0;
  for (std::size_t l = 0; l < lx.size(); ++l) {
    const std::size_t c = lx[l].dim(0), hw = lx[l].numel() / c;
    const auto& wl = fe.layer_weights()[l];
    double layer = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      double nx = 0.0, ny = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        nx += lx[l][k * hw + p] * lx[l][k * hw + p];
        ny += ly[l][k * hw + p] * ly[l][k * hw + p];
      }
      nx = std::sqrt(nx) + 1e-10;
      ny = std::sqrt(ny) + 1e-10;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = wl[k] * (lx[l][k * hw + p] / nx - ly[l][k * hw + p] / ny);
        layer += d * d;
      }
    }
    total += layer / static_cast<double>(hw);
  }
  return total;
}

// ------------------------------------------------------------------ FID

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("feature sets must be non-empty");
  const std::size_t d = a.front().size();
  if (a.size() < 2 * d || b.size() < 2 * d) {
    throw std::invalid_argument("each set needs at least " + std::to_string(2 * d) + " samples for a " +
                                std::to_string(d) + "-dim FID");
  }
  auto fit = [d](const std::vector<std::vector<double>>& s, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].size() != d) throw std::invalid_argument("feature dimensions differ");
      for (std::size_t j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s[i][j];
    }
    mu = m.colwise().mean();
    const Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(s.size() - 1);
    cov += 1e-6 * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  };
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  fit(a, mu_a, cov_a);
  fit(b, mu_b, cov_b);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  if (ea.eigenvalues().minCoeff() < -1e-9) throw std::runtime_error("covariance is not positive semi-definite");
  const Eigen::VectorXd sa = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd root_a = ea.eigenvectors() * sa.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd prod = root_a * cov_b * root_a;
  prod = 0.5 * (prod + prod.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ep(prod);
  if (ep.eigenvalues().minCoeff() < -1e-6 * std::max(1.0, ep.eigenvalues().maxCoeff())) {
    throw std::runtime_error("covariance product is not positive semi-definite");
  }
  const double tr_root = ep.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
  return std::max(0.0, value);
}

double fid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b, const FeatureExtractor& fe) {
  std::vector<std::vector<double>> fa(set_a.size()), fb(set_b.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < set_a.size(); ++i) fa[i] = fe.pooled(set_a[i]);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < set_b.size(); ++i) fb[i] = fe.pooled(set_b[i]);
  return frechet_distance(fa, fb);
}

// ------------------------------------------------------------- reporting

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  std::string s(buf);
  if (s == "-0." + std::string(static_cast<std::size_t>(digits), '0')) s.erase(0, 1);
  return s;
}

MethodSummary summarize(const std::string& method, const std::vector<SampleRecord>& rows, double pfid) {
  if (rows.empty()) throw std::invalid_argument("no samples to summarize for " + method);
  std::vector<double> sh, ss, lp, tm;
  std::vector<bool> ok;
  for (const auto& r : rows) {
    sh.push_back(r.shift);
    ss.push_back(r.ssim);
    lp.push_back(r.plpips);
    tm.push_back(r.time);
    ok.push_back(r.success);
  }
  MethodSummary s;
  s.method = method;
  s.count = rows.size();
  s.shift = mean_of(sh);
  s.shift_std = std_of(sh);
  s.sr = success_rate(ok);
  s.ssim = mean_of(ss);
  s.ssim_std = std_of(ss);
  s.plpips = mean_of(lp);
  s.plpips_std = std_of(lp);
  s.pfid = pfid;
  s.time = mean_of(tm);
  s.time_std = std_of(tm);
  return s;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

}  // namespace

void write_samples_csv(const std::filesystem::path& path, const std::vector<SampleRecord>& rows) {
  auto os = open_out(path);
  os << "index,method,shift,max_lateral,success,ssim,plpips,nfe\n";
  for (const auto& r : rows) {
    os << r.index << ',' << r.method << ',' << fmt(r.shift) << ',' << fmt(r.max_lateral) << ',' << (r.success ? 1 : 0)
       << ',' << fmt(r.ssim) << ',' << fmt(r.plpips) << ',' << r.nfe << '\n';
  }
}

void write_timing_csv(const std::filesystem::path& path, const std::vector<SampleRecord>& rows) {
  auto os = open_out(path);
  os << "index,method,time\n";
  for (const auto& r : rows) os << r.index << ',' << r.method << ',' << fmt(r.time, 4) << '\n';
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<MethodSummary>& rows) {
  auto os = open_out(path);
  os << "method,SHIFT,SR,SSIM,pLPIPS,pFID,TIME\n";
  for (const auto& r : rows) {
    os << r.method << ',' << fmt(r.shift) << ',' << fmt(r.sr, 2) << ',' << fmt(r.ssim) << ',' << fmt(r.plpips) << ','
       << fmt(r.pfid) << ',' << fmt(r.time, 4) << '\n';
  }
}

void write_summary_json(const std::filesystem::path& path, const std::vector<MethodSummary>& rows,
                        const std::string& title) {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["report"] = title;
  j["notes"] = "pLPIPS and pFID are proxies computed with a fixed-seed random feature network; "
               "wall-clock TIME is reported in summary.csv and timing.csv only";
  auto& arr = j["methods"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json m;
    m["method"] = r.method;
    m["count"] = r.count;
    m["SHIFT"] = {{"mean", std::stod(fmt(r.shift))}, {"std", std::stod(fmt(r.shift_std))}};
    m["SR"] = std::stod(fmt(r.sr, 2));
    m["SSIM"] = {{"mean", std::stod(fmt(r.ssim))}, {"std", std::stod(fmt(r.ssim_std))}};
    m["pLPIPS"] = {{"mean", std::stod(fmt(r.plpips))}, {"std", std::stod(fmt(r.plpips_std))}};
    m["pFID"] = std::stod(fmt(r.pfid));
    arr.push_back(m);
  }
  auto os = open_out(path);
  os << j.dump(2) << '\n';
}

}  // namespace afm
