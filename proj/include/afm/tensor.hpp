#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace afm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

// Reference-counted handle to a node in a define-by-run graph. Copies share
// storage, the way framework tensors do; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t i) const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the graph; only meaningful on leaves.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Populates grad on every reachable requires_grad tensor. Root must be scalar.
  void backward() const;

  // New leaf sharing nothing with this tensor.
  Tensor clone() const;
  // Same values, cut from the graph.
  Tensor detach() const { return clone(); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into inputs

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// x[..., n] + b[n] / x[..., n] * g[n]: broadcast over leading dimensions only.
Tensor add_bias(const Tensor& x, const Tensor& b);
Tensor mul_bias(const Tensor& x, const Tensor& g);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Population standard deviation over all elements.
Tensor std_dev(const Tensor& a);
// [m, n] -> [m]
Tensor row_sum(const Tensor& a);
// [m, n] -> [n]
Tensor col_mean(const Tensor& a);

// ---- linear algebra / layout ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
// Concatenate along dimension 0 (other dims must agree).
Tensor concat(const std::vector<Tensor>& parts);
// Concatenate 2-D tensors along columns.
Tensor concat_cols(const std::vector<Tensor>& parts);
// Rows [begin, end) along dimension 0.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
// Columns [begin, end) of a 2-D tensor.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);

// ---- neural primitives ----
// Row-wise softmax of a 2-D (or 1-D) tensor after dividing by temperature.
Tensor softmax(const Tensor& a, double temperature = 1.0);
// Row-wise normalization to zero mean / unit variance (no affine).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);
// x[C,H,W] * w[O,C,k,k] + b[O]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);
// Nearest-neighbour 2x upsampling of [C,H,W].
Tensor upsample2x(const Tensor& x);
// [C*r*r, H, W] -> [C, H*r, W*r]
Tensor pixel_shuffle(const Tensor& x, std::size_t r);
// [C,H,W] image -> [(H/p)*(W/p), C*p*p] patch rows, channel-major inside a patch.
Tensor patchify(const Tensor& x, std::size_t patch);

// ---- optimization ----
struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t step_count = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(std::size_t n, double lr_, double b1 = 0.9, double b2 = 0.999, double e = 1e-8)
      : first_moment(n, 0.0), second_moment(n, 0.0), lr(lr_), beta1(b1), beta2(b2), eps(e) {}
};

// In-place bias-corrected Adam update of a leaf tensor.
void adam_step(Tensor& param, AdamState& state);

// Elementwise saturation into [-eps, eps]. Returns a fresh leaf.
Tensor clip_inf(const Tensor& delta, double eps);

// Central-difference gradient of a scalar function. Test oracle.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-4);

// ||a - b||_inf / max(||a||_inf, ||b||_inf, floor).
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-8);

std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace afm
