#include "afm/models.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include "afm/binary_io.hpp"

namespace afm {

namespace {

thread_local std::uint64_t tls_nfe = 0;

Tensor flatten_row(const Tensor& x) { return reshape(x, {1, x.numel()}); }

void require_image(const Tensor& image) {
  if (image.shape() != Shape{kImageChannels, kImageSize, kImageSize}) {
    throw std::invalid_argument("expected image of shape [3,64,64], got " + shape_str(image.shape()));
  }
}

void require_latent(const Tensor& z) {
  if (z.shape() != kLatentShape) {
    throw std::invalid_argument("expected latent of shape " + shape_str(kLatentShape) + ", got " +
                                shape_str(z.shape()));
  }
}

Tensor waypoint_target(const Trajectory& w) {
  std::vector<double> v;
  v.reserve(w.size() * 2);
  for (const auto& p : w) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return Tensor::from({w.size(), 2}, std::move(v));
}

}  // namespace

double LatentCode::sigma() const {
  const auto d = z.data();
  double m = 0.0;
  for (double x : d) m += x;
  m /= static_cast<double>(d.size());
  double v = 0.0;
  for (double x : d) v += (x - m) * (x - m);
  return std::sqrt(v / static_cast<double>(d.size()));
}

std::atomic<std::uint64_t> NfeCounter::global_{0};

void NfeCounter::increment() {
  ++tls_nfe;
  global_.fetch_add(1, std::memory_order_relaxed);
}
std::uint64_t NfeCounter::thread_count() { return tls_nfe; }
void NfeCounter::reset_thread() { tls_nfe = 0; }
std::uint64_t NfeCounter::global_count() { return global_.load(); }

// ------------------------------------------------------------------ VAE

Vae::Vae(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Conv::make(params_, "enc1", 3, 16, 3, 2, rng);
  Conv::make(params_, "enc2", 16, 32, 3, 2, rng);
  Conv::make(params_, "enc3", 32, 32, 3, 2, rng);
  Conv::make(params_, "enc_head", 32, 8, 3, 1, rng);
  Conv::make(params_, "dec0", 4, 48, 3, 1, rng);
  Conv::make(params_, "dec1", 48, 48, 3, 1, rng);
  Conv::make(params_, "dec2", 48, 48, 3, 1, rng);
  Conv::make(params_, "dec3", 48, 12, 3, 1, rng);
  rebind();
}

void Vae::rebind() {
  e1_ = Conv::bind(params_, "enc1", 2);
  e2_ = Conv::bind(params_, "enc2", 2);
  e3_ = Conv::bind(params_, "enc3", 2);
  e_head_ = Conv::bind(params_, "enc_head", 1);
  d0_ = Conv::bind(params_, "dec0", 1);
  d1_ = Conv::bind(params_, "dec1", 1);
  d2_ = Conv::bind(params_, "dec2", 1);
  d3_ = Conv::bind(params_, "dec3", 1);
}

std::pair<Tensor, Tensor> Vae::encode_stats(const Tensor& image) const {
  require_image(image);
  Tensor h = relu(e1_(image));
  h = relu(e2_(h));
  h = relu(e3_(h));
  Tensor stats = reshape(e_head_(h), {8, 64});
  Tensor mu = reshape(slice(stats, 0, 4), kLatentShape);
  Tensor logvar = reshape(slice(stats, 4, 8), kLatentShape);
  return {mu, logvar};
}

LatentCode Vae::encode(const Tensor& image) const {
  return {mul_scalar(encode_stats(image).first, latent_scale_)};
}

Tensor Vae::decode_unscaled(const Tensor& z) const {
  require_latent(z);
  Tensor h = relu(d0_(z));
  h = relu(d1_(upsample2x(h)));
  h = relu(d2_(upsample2x(h)));
  // 32x32x12 -> 64x64x3
  return sigmoid(pixel_shuffle(d3_(h), 2));
}

Tensor Vae::decode(const LatentCode& z) const {
  require_latent(z.z);
  return decode_unscaled(mul_scalar(z.z, 1.0 / latent_scale_));
}

// ----------------------------------------------------------- velocity net

namespace {

constexpr std::size_t kTimeFeatures = 2 + 4 * MeanVelocityNet::kFrequencies;
constexpr std::size_t kLatentDim = 256;

Tensor time_features(double r, double t) {
  std::vector<double> f;
  f.reserve(kTimeFeatures);
  const double gap = t - r;
  f.push_back(r);
  f.push_back(gap);
  for (std::size_t k = 0; k < MeanVelocityNet::kFrequencies; ++k) {
    const double w = std::numbers::pi * static_cast<double>(k + 1);
    f.push_back(std::sin(w * r));
    f.push_back(std::cos(w * r));
    f.push_back(std::sin(0.5 * w * gap));
    f.push_back(std::cos(0.5 * w * gap));
  }
  return Tensor::from({1, kTimeFeatures}, std::move(f));
}

}  // namespace

MeanVelocityNet::MeanVelocityNet(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Linear::make(params_, "l1", kLatentDim + kTimeFeatures, kHidden, rng);
  Linear::make(params_, "l2", kHidden, kHidden, rng);
  Linear::make(params_, "l3", kHidden, kLatentDim, rng);
  rebind();
}

void MeanVelocityNet::rebind() {
  l1_ = Linear::bind(params_, "l1");
  l2_ = Linear::bind(params_, "l2");
  l3_ = Linear::bind(params_, "l3");
}

Tensor MeanVelocityNet::forward(const Tensor& z, double r, double t) const {
  Tensor in = concat_cols({flatten_row(z), time_features(r, t)});
  Tensor h = gelu(l1_(in));
  h = gelu(l2_(h));
  return reshape(l3_(h), z.shape());
}

Tensor velocity(const MeanVelocityNet& net, const LatentCode& z, double r, double t) {
  require_latent(z.z);
  if (!(r >= 0.0 && r <= 1.0 && t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("flow times must lie in [0,1], got r=" + std::to_string(r) +
                                " t=" + std::to_string(t));
  }
  NfeCounter::increment();
  return net.forward(z.z, r, t);
}

// --------------------------------------------------------------- victim

VictimModel::VictimModel(std::uint64_t seed, VictimConfig config) : config_(config) {
  if (config_.embed % config_.heads != 0) throw std::invalid_argument("embed must divide evenly into heads");
  if (kImageSize % config_.patch != 0) throw std::invalid_argument("patch must divide the image size");
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.embed;
  Linear::make(params_, "patch", kImageChannels * config_.patch * config_.patch, d, rng);
  params_.add("pos", {config_.tokens(), d}, rng, 0.02);
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    LayerNorm::make(params_, p + ".ln1", d);
    Linear::make(params_, p + ".qkv", d, 3 * d, rng);
    Linear::make(params_, p + ".proj", d, d, rng);
    LayerNorm::make(params_, p + ".ln2", d);
    Linear::make(params_, p + ".fc1", d, config_.ffn, rng);
    Linear::make(params_, p + ".fc2", config_.ffn, d, rng);
  }
  LayerNorm::make(params_, "ln_final", d);
  params_.add("pool.query", {1, d}, rng, 1.0);
  Linear::make(params_, "pool.kv", d, 2 * d, rng);
  Linear::make(params_, "pool.out", d, d, rng);
  params_.add("cmd", {3, d}, rng, 1.0);
  Linear::make(params_, "head1", d, 2 * d, rng);
  Linear::make(params_, "head2", 2 * d, 2 * config_.horizon, rng);
  rebind();
}

void VictimModel::rebind() {
  patch_embed_ = Linear::bind(params_, "patch");
  pos_embed_ = params_.get("pos");
  blocks_.clear();
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    blocks_.push_back({LayerNorm::bind(params_, p + ".ln1"), LayerNorm::bind(params_, p + ".ln2"),
                       Linear::bind(params_, p + ".qkv"), Linear::bind(params_, p + ".proj"),
                       Linear::bind(params_, p + ".fc1"), Linear::bind(params_, p + ".fc2")});
  }
  ln_final_ = LayerNorm::bind(params_, "ln_final");
  pool_query_ = params_.get("pool.query");
  pool_kv_ = Linear::bind(params_, "pool.kv");
  pool_out_ = Linear::bind(params_, "pool.out");
  command_embed_ = params_.get("cmd");
  head1_ = Linear::bind(params_, "head1");
  head2_ = Linear::bind(params_, "head2");
}

BackboneOutput VictimModel::backbone(const Tensor& image) const {
  require_image(image);
  const std::size_t d = config_.embed, hd = d / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor h = add(patch_embed_(patchify(image, config_.patch)), pos_embed_);
  for (const auto& blk : blocks_) {
    Tensor qkv = blk.qkv(blk.ln1(h));
    std::vector<Tensor> heads;
    for (std::size_t i = 0; i < config_.heads; ++i) {
      Tensor q = slice_cols(qkv, i * hd, (i + 1) * hd);
      Tensor k = slice_cols(qkv, d + i * hd, d + (i + 1) * hd);
      Tensor v = slice_cols(qkv, 2 * d + i * hd, 2 * d + (i + 1) * hd);
      Tensor att = softmax(mul_scalar(matmul(q, transpose(k)), scale));
      heads.push_back(matmul(att, v));
    }
    h = add(h, blk.proj(concat_cols(heads)));
    h = add(h, blk.fc2(gelu(blk.fc1(blk.ln2(h)))));
  }
  BackboneOutput out;
  out.features = ln_final_(h);

  Tensor kv = pool_kv_(out.features);
  std::vector<Tensor> maps, pooled;
  for (std::size_t i = 0; i < config_.heads; ++i) {
    Tensor q = slice_cols(pool_query_, i * hd, (i + 1) * hd);
    Tensor k = slice_cols(kv, i * hd, (i + 1) * hd);
    Tensor v = slice_cols(kv, d + i * hd, d + (i + 1) * hd);
    Tensor a = softmax(mul_scalar(matmul(q, transpose(k)), scale));
    maps.push_back(a);
    pooled.push_back(matmul(a, v));
  }
  out.head_attention = concat(maps);
  out.saliency = col_mean(out.head_attention);
  out.pooled = pool_out_(concat_cols(pooled));
  return out;
}

Tensor VictimModel::head(const BackboneOutput& b, Command command) const {
  const auto c = static_cast<std::size_t>(command);
  if (c > 2) throw std::invalid_argument("unknown command " + std::to_string(c));
  Tensor h = add(b.pooled, slice(command_embed_, c, c + 1));
  h = gelu(head1_(h));
  return reshape(head2_(h), {config_.horizon, 2});
}

VictimOutput VictimModel::forward(const Tensor& image, Command command) const {
  BackboneOutput b = backbone(image);
  return {b.features, b.saliency, head(b, command)};
}

VictimOutput victim_forward(const VictimModel& m, const Tensor& image, Command command) {
  return m.forward(image, command);
}

Tensor extract_saliency(const VictimModel& m, const Tensor& image) { return m.backbone(image).saliency; }

Trajectory to_trajectory(const Tensor& trajectory) {
  if (trajectory.ndim() != 2 || trajectory.dim(1) != 2) {
    throw std::invalid_argument("trajectory must be [T,2], got " + shape_str(trajectory.shape()));
  }
  Trajectory out;
  for (std::size_t i = 0; i < trajectory.dim(0); ++i) out.push_back({trajectory[2 * i], trajectory[2 * i + 1]});
  return out;
}

// --------------------------------------------------------------- training

Vae train_vae(const Dataset& data, const VaeTrainConfig& cfg, TrainingLog* log) {
  Vae vae(cfg.seed);
  TrainOptions opts{cfg.epochs, cfg.batch, cfg.lr, 0.1, cfg.seed, cfg.verbose, "vae"};
  auto losses = train_minibatch(
      vae.params(), data.records.size(),
      [&](std::size_t i, std::mt19937_64& rng) {
        const Tensor& x = data.records[i].image;
        auto [mu, logvar] = vae.encode_stats(x);
        std::normal_distribution<double> n01;
        std::vector<double> eps(mu.numel());
        for (auto& e : eps) e = n01(rng);
        Tensor z = add(mu, mul(exp(mul_scalar(logvar, 0.5)), Tensor::from(mu.shape(), std::move(eps))));
        Tensor recon = mean(square(sub(vae.decode_unscaled(z), x)));
        Tensor kl = mul_scalar(mean(sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0))), 0.5);
        return add(recon, mul_scalar(kl, cfg.kl_weight));
      },
      opts);
  if (log) log->epoch_losses = losses;

  double sum = 0.0, sum_sq = 0.0;
  std::size_t count = 0;
  for (const auto& r : data.records) {
    const Tensor mu = vae.encode_stats(r.image).first;
    for (double v : mu.data()) {
      sum += v;
      sum_sq += v * v;
      ++count;
    }
  }
  const double m = sum / static_cast<double>(count);
  const double sd = std::sqrt(std::max(sum_sq / static_cast<double>(count) - m * m, 1e-12));
  vae.set_latent_scale(1.0 / sd);
  return vae;
}

std::vector<Tensor> encode_corpus(const Vae& vae, const Dataset& data) {
  std::vector<Tensor> out(data.records.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vae.encode(data.records[i].image).z.detach();
  return out;
}

MeanVelocityNet train_flow(const Vae& vae, const Dataset& data, const FlowTrainConfig& cfg, TrainingLog* log) {
  const std::vector<Tensor> corpus = encode_corpus(vae, data);
  MeanVelocityNet net(cfg.seed);
  TrainOptions opts{cfg.epochs, cfg.batch, cfg.lr, 0.05, cfg.seed, cfg.verbose, "flow"};
  const double h = cfg.jvp_step;
  auto losses = train_minibatch(
      net.params(), corpus.size(),
      [&](std::size_t i, std::mt19937_64& rng) {
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::normal_distribution<double> n01;
        const auto x = corpus[i].data();
        std::vector<double> noise(x.size()), zt(x.size()), v(x.size());
        const double tau = u01(rng);
        const double rho = u01(rng) < cfg.equal_time_fraction ? tau : u01(rng);
        for (std::size_t k = 0; k < x.size(); ++k) {
          noise[k] = n01(rng);
          zt[k] = (1.0 - tau) * x[k] + tau * noise[k];
          v[k] = noise[k] - x[k];
        }
        std::vector<double> target = v;
        if (rho != tau) {
          // Average velocity satisfies u = v + (rho - tau) d/dtau u along the path;
          // the total derivative is a central difference in (z, tau).
          std::vector<double> zp(x.size()), zm(x.size());
          for (std::size_t k = 0; k < x.size(); ++k) {
            zp[k] = zt[k] + h * v[k];
            zm[k] = zt[k] - h * v[k];
          }
          Tensor up = net.forward(Tensor::from(kLatentShape, std::move(zp)), tau + h, rho);
          Tensor um = net.forward(Tensor::from(kLatentShape, std::move(zm)), tau - h, rho);
          for (std::size_t k = 0; k < x.size(); ++k) target[k] += (rho - tau) * (up[k] - um[k]) / (2.0 * h);
        }
        Tensor pred = net.forward(Tensor::from(kLatentShape, std::move(zt)), tau, rho);
        Tensor loss = mean(square(sub(pred, Tensor::from(kLatentShape, std::move(target)))));
        if (cfg.cycle_weight > 0.0) {
          const Tensor z_mid = add(corpus[i], net.forward(corpus[i], 0.0, 1.0));
          const Tensor back = sub(z_mid, net.forward(z_mid, 1.0, 0.0));
          loss = add(loss, mul_scalar(mean(square(sub(back, corpus[i]))), cfg.cycle_weight));
        }
        return loss;
      },
      opts);
  if (log) log->epoch_losses = losses;
  return net;
}

VictimModel train_victim(const Dataset& data, const VictimTrainConfig& cfg, std::uint64_t init_seed,
                         TrainingLog* log) {
  VictimModel model(init_seed);
  std::vector<Tensor> targets;
  for (const auto& r : data.records) targets.push_back(waypoint_target(r.waypoints));
  TrainOptions opts{cfg.epochs, cfg.batch, cfg.lr, 0.05, cfg.seed, cfg.verbose, "victim"};
  auto losses = train_minibatch(
      model.params(), data.records.size(),
      [&](std::size_t i, std::mt19937_64&) {
        const auto& r = data.records[i];
        return mean(square(sub(model.forward(r.image, r.command).trajectory, targets[i])));
      },
      opts);
  if (log) log->epoch_losses = losses;
  return model;
}

// ------------------------------------------------------------ checkpoints

namespace {

constexpr char kCkptMagic[9] = "AFMCKPT1";
constexpr std::uint32_t kCkptVersion = 1;

template <typename Model>
Model load_into(Model model, const Checkpoint& ckpt, const std::string& kind) {
  if (ckpt.kind != kind) throw std::runtime_error("checkpoint holds a " + ckpt.kind + ", expected " + kind);
  for (const auto& [name, t] : model.params().entries()) {
    if (!ckpt.params.contains(name)) throw std::runtime_error("checkpoint is missing tensor " + name);
  }
  try {
    model.params().assign(ckpt.params);
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(e.what());
  }
  return model;
}

Checkpoint snapshot(const ParamSet& ps, const std::string& kind, std::uint64_t config_hash, std::uint64_t seed) {
  return {kind, config_hash, seed, ps.clone()};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  binio::put_magic(os, kCkptMagic);
  binio::put<std::uint32_t>(os, kCkptVersion);
  binio::put_string(os, ckpt.kind);
  binio::put<std::uint64_t>(os, ckpt.config_hash);
  binio::put<std::uint64_t>(os, ckpt.seed);
  const auto& entries = ckpt.params.entries();
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    binio::put_string(os, name);
    binio::put<std::uint8_t>(os, 0);  // f64
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) binio::put<std::uint64_t>(os, d);
  }
  for (const auto& [name, t] : entries) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  binio::expect_magic(is, kCkptMagic, "checkpoint");
  const auto version = binio::get<std::uint32_t>(is);
  if (version != kCkptVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.kind = binio::get_string(is);
  ckpt.config_hash = binio::get<std::uint64_t>(is);
  ckpt.seed = binio::get<std::uint64_t>(is);
  const auto count = binio::get<std::uint32_t>(is);
  std::vector<std::pair<std::string, Shape>> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = binio::get_string(is);
    if (binio::get<std::uint8_t>(is) != 0) throw std::runtime_error("unsupported dtype for tensor " + name);
    const auto ndim = binio::get<std::uint32_t>(is);
    if (ndim == 0 || ndim > 8) throw std::runtime_error("bad rank for tensor " + name);
    Shape shape(ndim);
    for (auto& d : shape) {
      d = binio::get<std::uint64_t>(is);
      if (d == 0 || d > (1u << 24)) throw std::runtime_error("bad dimension for tensor " + name);
    }
    headers.emplace_back(std::move(name), std::move(shape));
  }
  for (auto& [name, shape] : headers) {
    std::vector<double> v(shape_numel(shape));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated checkpoint " + path.string());
    Tensor t = ckpt.params.add_constant(name, shape, 0.0);
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  return ckpt;
}

void save_vae(const Vae& vae, const std::filesystem::path& path, std::uint64_t config_hash, std::uint64_t seed) {
  Checkpoint c = snapshot(vae.params(), "vae", config_hash, seed);
  c.params.add_constant("meta.latent_scale", {1}, vae.latent_scale());
  save_checkpoint(path, c);
}

Vae load_vae(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path);
  Vae vae = load_into(Vae(0), c, "vae");
  if (!c.params.contains("meta.latent_scale")) throw std::runtime_error("checkpoint is missing latent scale");
  vae.set_latent_scale(c.params.get("meta.latent_scale")[0]);
  return vae;
}

void save_flow(const MeanVelocityNet& net, const std::filesystem::path& path, std::uint64_t config_hash,
               std::uint64_t seed) {
  save_checkpoint(path, snapshot(net.params(), "flow", config_hash, seed));
}

MeanVelocityNet load_flow(const std::filesystem::path& path) {
  return load_into(MeanVelocityNet(0), load_checkpoint(path), "flow");
}

void save_victim(const VictimModel& m, const std::filesystem::path& path, std::uint64_t config_hash,
                 std::uint64_t seed) {
  Checkpoint c = snapshot(m.params(), "victim", config_hash, seed);
  const auto& k = m.config();
  Tensor meta = c.params.add_constant("meta.config", {6}, 0.0);
  const double vals[6] = {double(k.embed), double(k.heads), double(k.blocks),
                          double(k.ffn),   double(k.patch), double(k.horizon)};
  std::copy(std::begin(vals), std::end(vals), meta.mutable_data().begin());
  save_checkpoint(path, c);
}

VictimModel load_victim(const std::filesystem::path& path) {
  Checkpoint c = load_checkpoint(path);
  VictimConfig k;
  if (c.params.contains("meta.config")) {
    const Tensor& meta = c.params.get("meta.config");
    k = {std::size_t(meta[0]), std::size_t(meta[1]), std::size_t(meta[2]),
         std::size_t(meta[3]), std::size_t(meta[4]), std::size_t(meta[5])};
  }
  return load_into(VictimModel(0, k), c, "victim");
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ULL;
  char buf[1 << 14];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace afm
