#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "afm/tensor.hpp"

namespace afm {

// Ordered, named collection of leaf tensors owned by one network.
class ParamSet {
 public:
  Tensor add(const std::string& name, const Shape& shape, std::mt19937_64& rng, double stddev);
  Tensor add_constant(const std::string& name, const Shape& shape, double value);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  void set_trainable(bool flag);
  void zero_grad();
  std::size_t scalar_count() const;
  std::uint64_t hash() const;
  // Deep copy with fresh, frozen leaves.
  ParamSet clone() const;
  // Copies values from another set with identical names and shapes.
  void assign(const ParamSet& other);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  static Linear make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
  static Linear bind(ParamSet& ps, const std::string& name);
  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct Conv {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 1;
  static Conv make(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                   std::size_t stride, std::mt19937_64& rng);
  static Conv bind(ParamSet& ps, const std::string& name, std::size_t stride);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

struct LayerNorm {
  Tensor gain;
  Tensor shift;
  static LayerNorm make(ParamSet& ps, const std::string& name, std::size_t dim);
  static LayerNorm bind(ParamSet& ps, const std::string& name);
  Tensor operator()(const Tensor& x) const { return add_bias(mul_bias(layer_norm(x), gain), shift); }
};

// [C,H,W] + b[C]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

// Minibatch Adam over a ParamSet. sample_loss(i) builds the graph for one
// sample and returns its scalar loss; gradients are averaged over the batch.
struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 1e-3;
  double lr_final_fraction = 0.1;  // cosine decay floor
  std::uint64_t seed = 0;
  bool verbose = false;
  std::string tag;
};

std::vector<double> train_minibatch(ParamSet& params, std::size_t n_samples,
                                    const std::function<Tensor(std::size_t index, std::mt19937_64& rng)>& sample_loss,
                                    const TrainOptions& opts);

}  // namespace afm
