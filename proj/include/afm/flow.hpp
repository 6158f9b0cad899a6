#pragma once

#include <functional>

#include "afm/models.hpp"

namespace afm {

struct FlowSchedule {
  double t_start = 1.0;
  double t_end = 0.0;
  void validate() const;
};

// Anything that can be evaluated as an average velocity u(z, r, t), z known
// at time r. Every evaluation goes through operator(), which checks the times
// and bumps the NFE counter.
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  Tensor operator()(const LatentCode& z, double r, double t) const;

 protected:
  virtual Tensor eval(const Tensor& z, double r, double t) const = 0;
};

class NetworkField final : public VelocityField {
 public:
  explicit NetworkField(const MeanVelocityNet& net) : net_(net) {}

 protected:
  Tensor eval(const Tensor& z, double r, double t) const override { return net_.forward(z, r, t); }

 private:
  const MeanVelocityNet& net_;
};

// Closed-form fields for tests and oracles.
class FunctionField final : public VelocityField {
 public:
  using Fn = std::function<Tensor(const Tensor& z, double r, double t)>;
  explicit FunctionField(Fn fn) : fn_(std::move(fn)) {}

 protected:
  Tensor eval(const Tensor& z, double r, double t) const override { return fn_(z, r, t); }

 private:
  Fn fn_;
};

// z_mid = z_clean + (t_start - t_end) * u(z_clean, t_end, t_start)
LatentCode invert_one_step(const VelocityField& field, const LatentCode& z_clean, const FlowSchedule& schedule = {});

// z_adv = z_start - (t_start - t_end) * (u(z_start, t_start, t_end) + delta_u). One evaluation.
// delta_u may be undefined, meaning zero.
LatentCode generate_one_step(const VelocityField& field, const LatentCode& z_start, const Tensor& delta_u = {},
                             const FlowSchedule& schedule = {});

// Explicit Euler over [t_start, t_end] in equal substeps; each substep uses the
// field's velocity for that substep, so steps == 1 is the one-step jump.
LatentCode euler_reference(const VelocityField& field, const LatentCode& z_start, const FlowSchedule& schedule,
                           std::size_t steps);

// Mean absolute violation of u = v - (t - r) du/dt with z known at time t,
// v = u(z, t, t) and du/dt the total derivative along v by central differences.
double mean_flow_residual(const VelocityField& field, const LatentCode& z, double r, double t, double h = 1e-3);

}  // namespace afm
