#include "afm/nn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace afm {

Tensor ParamSet::add(const std::string& name, const Shape& shape, std::mt19937_64& rng, double stddev) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  entries_.emplace_back(name, Tensor::from(shape, std::move(v)));
  return entries_.back().second;
}

Tensor ParamSet::add_constant(const std::string& name, const Shape& shape, double value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  entries_.emplace_back(name, Tensor::full(shape, value));
  return entries_.back().second;
}

Tensor& ParamSet::get(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

void ParamSet::set_trainable(bool flag) {
  for (auto& [n, t] : entries_) {
    t.set_requires_grad(flag);
    t.zero_grad();
  }
}

void ParamSet::zero_grad() {
  for (auto& [n, t] : entries_) t.zero_grad();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

std::uint64_t ParamSet::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [n, t] : entries_) h = hash_values(t.data(), h);
  return h;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [n, t] : entries_) out.entries_.emplace_back(n, t.clone());
  return out;
}

void ParamSet::assign(const ParamSet& other) {
  for (auto& [n, t] : entries_) {
    const Tensor& src = other.get(n);
    if (src.shape() != t.shape()) throw std::invalid_argument("shape mismatch assigning parameter " + n);
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

Linear Linear::make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {ps.add(name + ".w", {in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))),
          ps.add_constant(name + ".b", {out}, 0.0)};
}

Linear Linear::bind(ParamSet& ps, const std::string& name) { return {ps.get(name + ".w"), ps.get(name + ".b")}; }

Conv Conv::make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                std::size_t stride, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  return {ps.add(name + ".w", {out, in, k, k}, rng, std::sqrt(2.0 / fan_in)), ps.add_constant(name + ".b", {out}, 0.0),
          stride, k / 2};
}

Conv Conv::bind(ParamSet& ps, const std::string& name, std::size_t stride) {
  Tensor w = ps.get(name + ".w");
  const std::size_t k = w.dim(2);
  return {w, ps.get(name + ".b"), stride, k / 2};
}

LayerNorm LayerNorm::make(ParamSet& ps, const std::string& name, std::size_t dim) {
  return {ps.add_constant(name + ".g", {dim}, 1.0), ps.add_constant(name + ".b", {dim}, 0.0)};
}

LayerNorm LayerNorm::bind(ParamSet& ps, const std::string& name) { return {ps.get(name + ".g"), ps.get(name + ".b")}; }

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  const std::size_t c = x.dim(0), hw = x.numel() / c;
  Tensor rows = transpose(reshape(x, {c, hw}));
  return reshape(transpose(add_bias(rows, b)), x.shape());
}

std::vector<double> train_minibatch(ParamSet& params, std::size_t n_samples,
                                    const std::function<Tensor(std::size_t, std::mt19937_64&)>& sample_loss,
                                    const TrainOptions& opts) {
  if (n_samples == 0) throw std::invalid_argument("training set is empty");
  params.set_trainable(true);
  std::vector<AdamState> states;
  for (const auto& e : params.entries()) states.emplace_back(e.second.numel(), opts.lr);

  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = (n_samples + opts.batch - 1) / opts.batch;
  const double total_steps = static_cast<double>(steps_per_epoch * opts.epochs);
  std::size_t step = 0;
  std::vector<double> epoch_losses;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < n_samples; begin += opts.batch) {
      const std::size_t end = std::min(n_samples, begin + opts.batch);
      const double scale = 1.0 / static_cast<double>(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        auto diverged = [&](const std::string& why) {
          return std::runtime_error(opts.tag + " training diverged at epoch " + std::to_string(epoch) + ": " + why);
        };
        try {
          Tensor loss = sample_loss(order[i], rng);
          const double value = loss.item();
          if (!std::isfinite(value)) throw diverged("loss is " + std::to_string(value));
          epoch_loss += value;
          mul_scalar(loss, scale).backward();
        } catch (const std::domain_error& e) {
          throw diverged(e.what());
        }
      }
      const double progress = static_cast<double>(step) / total_steps;
      const double lr_mult =
          opts.lr_final_fraction + (1.0 - opts.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      for (std::size_t k = 0; k < states.size(); ++k) {
        Tensor& p = params.entries()[k].second;
        if (!p.has_grad()) continue;
        states[k].lr = opts.lr * lr_mult;
        adam_step(p, states[k]);
        p.zero_grad();
      }
      ++step;
    }
    epoch_losses.push_back(epoch_loss / static_cast<double>(n_samples));
    if (opts.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "[" << opts.tag << "] epoch " << epoch + 1 << "/" << opts.epochs << " loss " << epoch_losses.back()
                << " (" << secs << " s)\n";
    }
  }
  params.set_trainable(false);
  return epoch_losses;
}

}  // namespace afm
