#include "afm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstring>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace afm {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using BackFn = std::function<void(Node&)>;

#ifdef __GLIBC__
// Conv scratch buffers are a few MB and short lived. Left to the default
// dynamic threshold, each one becomes a fresh mmap and pays its page faults.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
#endif

void check_finite(std::span<const double> values, const char* where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("non-finite value in ") + where);
  }
}

Tensor make(Shape shape, std::vector<double> value, std::vector<Tensor> inputs, BackFn fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Accumulation target for input i, or nullptr when that input is constant.
double* grad_of(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.grad_buffer().data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_2d(const Tensor& a, const char* op) {
  if (a.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor");
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  const auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make(a.shape(), std::move(out), {a}, [dfdx](Node& self) {
    double* ga = grad_of(self, 0);
    if (!ga) return;
    const auto& x = self.inputs[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return from(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  check_finite(values, "tensor construction");
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::dim(std::size_t i) const { return node_->shape.at(i); }
std::size_t Tensor::numel() const { return node_->value.size(); }
std::span<const double> Tensor::data() const { return node_->value; }
std::span<double> Tensor::mutable_data() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }
void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar root, got " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.empty()) continue;
    check_finite(n->grad, "backward propagation");
    n->backward(*n);
  }
  for (Node* n : order) {
    if (!n->grad.empty()) check_finite(n->grad, "backward propagation");
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  check_finite(out, "div");
  return make(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& bv = self.inputs[1]->value;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bv[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] -= self.grad[i] * self.value[i] / bv[i];
      }
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  auto out = unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
  check_finite(out.data(), "exp");
  return out;
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw std::domain_error("log of non-positive value");
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t n = b.numel();
  if (x.shape().back() != n || b.ndim() != 1) {
    throw std::invalid_argument("add_bias: trailing dim mismatch " + shape_str(x.shape()) + " + " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
  return make(x.shape(), std::move(out), {x, b}, [n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

Tensor mul_bias(const Tensor& x, const Tensor& gain) {
  const std::size_t n = gain.numel();
  if (x.shape().back() != n || gain.ndim() != 1) {
    throw std::invalid_argument("mul_bias: trailing dim mismatch");
  }
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * gain[i % n];
  return make(x.shape(), std::move(out), {x, gain}, [n](Node& self) {
    const auto& xv = self.inputs[0]->value;
    const auto& gv = self.inputs[1]->value;
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * gv[i % n];
    }
    if (double* g = grad_of(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i] * xv[i];
    }
  });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make({1}, {s}, {a}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor std_dev(const Tensor& a) {
  const auto x = a.data();
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  const double s = std::sqrt(var);
  return make({1}, {s}, {a}, [mu, n](Node& self) {
    double* g = grad_of(self, 0);
    const double s = self.value[0];
    if (!g || s == 0.0) return;
    const auto& xv = self.inputs[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) g[i] += self.grad[0] * (xv[i] - mu) / (n * s);
  });
}

Tensor row_sum(const Tensor& a) {
  require_2d(a, "row_sum");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i] += a[i * n + j];
  }
  return make({m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
      }
    }
  });
}

Tensor col_mean(const Tensor& a) {
  require_2d(a, "col_mean");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  }
  for (auto& v : out) v /= static_cast<double>(m);
  return make({n}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      const double inv = 1.0 / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
      }
    }
  });
}

// ---------------------------------------------------------------- layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) *
                                       ConstMatMap(b.data().data(), k, n);
  return make({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    ConstMatMap go(self.grad.data(), m, n);
    if (double* g = grad_of(self, 0)) {
      MatMap(g, m, k).noalias() += go * ConstMatMap(self.inputs[1]->value.data(), k, n).transpose();
    }
    if (double* g = grad_of(self, 1)) {
      MatMap(g, k, n).noalias() += ConstMatMap(self.inputs[0]->value.data(), m, k).transpose() * go;
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MatMap(out.data(), n, m) = ConstMatMap(a.data().data(), m, n).transpose();
  return make({n, m}, std::move(out), {a}, [m, n](Node& self) {
    if (double* g = grad_of(self, 0)) {
      MatMap(g, m, n) += ConstMatMap(self.grad.data(), n, m).transpose();
    }
  });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make(shape, std::move(out), {a}, [](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape shape = parts[0].shape();
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.ndim() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
      throw std::invalid_argument("concat: trailing dims differ");
    }
    offsets.push_back(out.size());
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = rows;
  return make(shape, std::move(out), parts, [offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      if (double* g = grad_of(self, k)) {
        const std::size_t len = self.inputs[k]->value.size();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[k] + i];
      }
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.dim(0) != m) throw std::invalid_argument("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<double> out(m * total);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + col + j] = parts[k][i * widths[k] + j];
    }
    col += widths[k];
  }
  return make({m, total}, std::move(out), parts, [m, total, widths](Node& self) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (double* g = grad_of(self, k)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + col + j];
        }
      }
      col += widths[k];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) throw std::out_of_range("slice: bad row range");
  const std::size_t inner = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * inner, a.data().begin() + end * inner);
  return make(shape, std::move(out), {a}, [offset = begin * inner](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_2d(a, "slice_cols");
  const std::size_t m = a.dim(0), n = a.dim(1), w = end - begin;
  if (begin >= end || end > n) throw std::out_of_range("slice_cols: bad column range");
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a[i * n + begin + j];
  }
  return make({m, w}, std::move(out), {a}, [m, n, w, begin](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
      }
    }
  });
}

// ---------------------------------------------------------------- neural

Tensor softmax(const Tensor& a, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax: temperature must be positive");
  const std::size_t n = a.shape().back();
  const std::size_t m = a.numel() / n;
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = a.data().data() + r * n;
    double* y = out.data() + r * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp((x[j] - mx) / temperature);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make(a.shape(), std::move(out), {a}, [m, n, temperature](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot) / temperature;
    }
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  const std::size_t n = a.shape().back();
  const std::size_t m = a.numel() / n;
  std::vector<double> out(a.numel());
  std::vector<double> inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = a.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (x[j] - mu) * inv_std[r];
  }
  return make(a.shape(), std::move(out), {a}, [m, n, inv_std](Node& self) {
    double* g = grad_of(self, 0);
    if (!g) return;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double mean_g = 0.0, mean_gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mean_g += gy[j];
        mean_gy += gy[j] * y[j];
      }
      mean_g *= inv_n;
      mean_gy *= inv_n;
      for (std::size_t j = 0; j < n; ++j) {
        g[r * n + j] += inv_std[r] * (gy[j] - mean_g - y[j] * mean_gy);
      }
    }
  });
}

namespace {

struct ConvGeom {
  std::size_t c, h, w, o, k, stride, pad, oh, ow;
};

// cols[(ci*k + ky)*k + kx, oy*ow + ox]
void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? x[(ci * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* x) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            x[(ci * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
    }
  }
}

// Stride-1 convolution as shifted plane updates, for layers whose im2col
// buffer would dwarf the arithmetic.
struct RowSpan {
  std::size_t lo, hi;  // valid output range along one axis for a tap
};

RowSpan valid_range(std::size_t out, std::size_t in, std::size_t tap, std::size_t pad) {
  const long lo = std::max<long>(0, static_cast<long>(pad) - static_cast<long>(tap));
  const long hi = std::min<long>(static_cast<long>(out), static_cast<long>(in + pad) - static_cast<long>(tap));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// f(out_row, in_row, n) for every overlapping row pair of tap (ky, kx).
template <class F>
void for_tap_rows(const ConvGeom& g, std::size_t ky, std::size_t kx, F&& f) {
  const RowSpan ry = valid_range(g.oh, g.h, ky, g.pad), rx = valid_range(g.ow, g.w, kx, g.pad);
  if (rx.hi <= rx.lo) return;
  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
    const std::size_t iy = oy + ky - g.pad;
    f(oy * g.ow + rx.lo, iy * g.w + rx.lo + kx - g.pad, rx.hi - rx.lo);
  }
}

bool use_direct(const ConvGeom& g) { return g.stride == 1 && g.o * g.c <= 64; }

// Sequential on purpose: Eigen's vectorized sum peels by pointer alignment,
// which makes the rounding depend on where the allocator put the buffer.
void add_row_sums(const double* m, std::size_t rows, std::size_t cols, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += m[r * cols + j];
    out[r] += s;
  }
}

void direct_forward(const double* x, const double* w, const ConvGeom& g, double* y) {
  const std::size_t kk = g.k * g.k, plane = g.oh * g.ow;
  for (std::size_t o = 0; o < g.o; ++o) {
    double* yo = y + o * plane;
    for (std::size_t c = 0; c < g.c; ++c) {
      const double* xc = x + c * g.h * g.w;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const double wv = w[(o * g.c + c) * kk + ky * g.k + kx];
          for_tap_rows(g, ky, kx, [&](std::size_t yo_off, std::size_t xi_off, std::size_t n) {
            double* __restrict dst = yo + yo_off;
            const double* __restrict src = xc + xi_off;
            for (std::size_t i = 0; i < n; ++i) dst[i] += wv * src[i];
          });
        }
      }
    }
  }
}

void direct_backward(const double* x, const double* w, const double* gy, const ConvGeom& g, double* gx,
                     double* gw) {
  const std::size_t kk = g.k * g.k, plane = g.oh * g.ow;
  for (std::size_t o = 0; o < g.o; ++o) {
    const double* go = gy + o * plane;
    for (std::size_t c = 0; c < g.c; ++c) {
      const double* xc = x + c * g.h * g.w;
      double* gxc = gx ? gx + c * g.h * g.w : nullptr;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::size_t wi = (o * g.c + c) * kk + ky * g.k + kx;
          const double wv = w[wi];
          double acc = 0.0;
          for_tap_rows(g, ky, kx, [&](std::size_t yo_off, std::size_t xi_off, std::size_t n) {
            const double* __restrict src = go + yo_off;
            if (gxc) {
              double* __restrict dst = gxc + xi_off;
              for (std::size_t i = 0; i < n; ++i) dst[i] += wv * src[i];
            }
            if (gw) {
              const double* __restrict xs = xc + xi_off;
              double a = 0.0;
              for (std::size_t i = 0; i < n; ++i) a += src[i] * xs[i];
              acc += a;
            }
          });
          if (gw) gw[wi] += acc;
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  if (x.ndim() != 3 || w.ndim() != 4 || b.ndim() != 1) {
    throw std::invalid_argument("conv2d: expected x[C,H,W], w[O,C,k,k], b[O]");
  }
  if (stride < 1 || stride > 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), stride, padding, 0, 0};
  if (w.dim(1) != g.c || w.dim(3) != g.k || b.dim(0) != g.o) {
    throw std::invalid_argument("conv2d: weight shape " + shape_str(w.shape()) +
                                " incompatible with input " + shape_str(x.shape()));
  }
  if (g.h + 2 * padding < g.k || g.w + 2 * padding < g.k) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  g.oh = (g.h + 2 * padding - g.k) / stride + 1;
  g.ow = (g.w + 2 * padding - g.k) / stride + 1;
  const std::size_t patch = g.c * g.k * g.k, plane = g.oh * g.ow;

  std::vector<double> out(g.o * plane);
  MatMap y(out.data(), g.o, plane);
  if (use_direct(g)) {
    for (std::size_t oc = 0; oc < g.o; ++oc) y.row(oc).setConstant(b[oc]);
    direct_forward(x.data().data(), w.data().data(), g, out.data());
    return make({g.o, g.oh, g.ow}, std::move(out), {x, w, b}, [g, plane](Node& self) {
      double* gx = grad_of(self, 0);
      double* gw = grad_of(self, 1);
      if (gx || gw) {
        direct_backward(self.inputs[0]->value.data(), self.inputs[1]->value.data(), self.grad.data(), g, gx, gw);
      }
      if (double* gb = grad_of(self, 2)) {
        add_row_sums(self.grad.data(), g.o, plane, gb);
      }
    });
  }
  auto cols = std::make_shared<std::vector<double>>(patch * plane);
  im2col(x.data().data(), g, cols->data());
  y.noalias() = ConstMatMap(w.data().data(), g.o, patch) * ConstMatMap(cols->data(), patch, plane);
  for (std::size_t oc = 0; oc < g.o; ++oc) y.row(oc).array() += b[oc];

  return make({g.o, g.oh, g.ow}, std::move(out), {x, w, b}, [g, cols, patch, plane](Node& self) {
    ConstMatMap gy(self.grad.data(), g.o, plane);
    if (double* gx = grad_of(self, 0)) {
      std::vector<double> gcols(patch * plane);
      MatMap(gcols.data(), patch, plane).noalias() =
          ConstMatMap(self.inputs[1]->value.data(), g.o, patch).transpose() * gy;
      col2im(gcols.data(), g, gx);
    }
    if (double* gw = grad_of(self, 1)) {
      MatMap(gw, g.o, patch).noalias() += gy * ConstMatMap(cols->data(), patch, plane).transpose();
    }
    if (double* gb = grad_of(self, 2)) {
      add_row_sums(self.grad.data(), g.o, plane, gb);
    }
  });
}

Tensor upsample2x(const Tensor& x) {
  if (x.ndim() != 3) throw std::invalid_argument("upsample2x: expected [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(c * 4 * h * w);
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t y = 0; y < 2 * h; ++y) {
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        out[(ci * 2 * h + y) * 2 * w + xx] = x[(ci * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t y = 0; y < 2 * h; ++y) {
          for (std::size_t xx = 0; xx < 2 * w; ++xx) {
            g[(ci * h + y / 2) * w + xx / 2] += self.grad[(ci * 2 * h + y) * 2 * w + xx];
          }
        }
      }
    }
  });
}

Tensor pixel_shuffle(const Tensor& x, std::size_t r) {
  if (x.ndim() != 3 || r == 0 || x.dim(0) % (r * r)) {
    throw std::invalid_argument("pixel_shuffle: expected [C*r*r,H,W]");
  }
  const std::size_t c = x.dim(0) / (r * r), h = x.dim(1), w = x.dim(2);
  // out[c, y*r+i, x*r+j] = in[(c*r + i)*r + j, y, x]
  auto index = std::make_shared<std::vector<std::size_t>>(x.numel());
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t xx = 0; xx < w; ++xx) {
            const std::size_t src = (((ci * r + i) * r + j) * h + y) * w + xx;
            (*index)[(ci * h * r + y * r + i) * w * r + xx * r + j] = src;
          }
        }
      }
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = x[(*index)[k]];
  return make({c, h * r, w * r}, std::move(out), {x}, [index](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < index->size(); ++k) g[(*index)[k]] += self.grad[k];
    }
  });
}

Tensor patchify(const Tensor& x, std::size_t p) {
  if (x.ndim() != 3 || x.dim(1) % p || x.dim(2) % p) {
    throw std::invalid_argument("patchify: image dims must be divisible by patch size");
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t gh = h / p, gw = w / p, width = c * p * p;
  // index map shared by forward and backward
  auto index = std::make_shared<std::vector<std::size_t>>(gh * gw * width);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            const std::size_t row = py * gw + px, col = (ci * p + dy) * p + dx;
            (*index)[row * width + col] = (ci * h + py * p + dy) * w + px * p + dx;
          }
        }
      }
    }
  }
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*index)[i]];
  return make({gh * gw, width}, std::move(out), {x}, [index](Node& self) {
    if (double* g = grad_of(self, 0)) {
      for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------- optimization

void adam_step(Tensor& param, AdamState& state) {
  const std::size_t n = param.numel();
  if (state.first_moment.size() != n || state.second_moment.size() != n) {
    throw std::invalid_argument("adam_step: state size " + std::to_string(state.first_moment.size()) +
                                " does not match parameter size " + std::to_string(n));
  }
  if (!param.has_grad()) throw std::invalid_argument("adam_step: parameter has no gradient");
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  auto p = param.mutable_data();
  auto g = param.grad();
  for (std::size_t i = 0; i < n; ++i) {
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * g[i];
    v = state.beta2 * v + (1.0 - state.beta2) * g[i] * g[i];
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    p[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

Tensor clip_inf(const Tensor& delta, double eps) {
  std::vector<double> out(delta.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(delta[i], -eps, eps);
  return Tensor::from(delta.shape(), std::move(out));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.clone();
  auto values = probe.mutable_data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f(probe);
    values[i] = orig - h;
    const double fm = f(probe);
    values[i] = orig;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(out));
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("relative_error: size mismatch");
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / scale;
}

std::uint64_t hash_values(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace afm
