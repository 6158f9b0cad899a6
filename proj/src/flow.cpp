#include "afm/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace afm {

void FlowSchedule::validate() const {
  if (!(t_start >= 0.0 && t_start <= 1.0 && t_end >= 0.0 && t_end <= 1.0)) {
    throw std::invalid_argument("schedule times must lie in [0,1]");
  }
  if (t_start == t_end) throw std::invalid_argument("schedule needs t_start != t_end");
}

Tensor VelocityField::operator()(const LatentCode& z, double r, double t) const {
  if (!(r >= 0.0 && r <= 1.0 && t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("flow times must lie in [0,1], got r=" + std::to_string(r) +
                                " t=" + std::to_string(t));
  }
  NfeCounter::increment();
  Tensor u = eval(z.z, r, t);
  if (u.shape() != z.z.shape()) throw std::logic_error("velocity field changed the latent shape");
  return u;
}

LatentCode invert_one_step(const VelocityField& field, const LatentCode& z_clean, const FlowSchedule& schedule) {
  schedule.validate();
  const double dt = schedule.t_start - schedule.t_end;
  return {add(z_clean.z, mul_scalar(field(z_clean, schedule.t_end, schedule.t_start), dt))};
}

LatentCode generate_one_step(const VelocityField& field, const LatentCode& z_start, const Tensor& delta_u,
                             const FlowSchedule& schedule) {
  schedule.validate();
  if (delta_u.defined() && delta_u.shape() != z_start.shape()) {
    throw std::invalid_argument("delta_u shape " + shape_str(delta_u.shape()) + " does not match latent " +
                                shape_str(z_start.shape()));
  }
  Tensor u = field(z_start, schedule.t_start, schedule.t_end);
  if (delta_u.defined()) u = add(u, delta_u);
  return {add(z_start.z, mul_scalar(u, schedule.t_end - schedule.t_start))};
}

LatentCode euler_reference(const VelocityField& field, const LatentCode& z_start, const FlowSchedule& schedule,
                           std::size_t steps) {
  schedule.validate();
  if (steps == 0) throw std::invalid_argument("euler_reference needs at least one step");
  LatentCode z = z_start;
  const double span = schedule.t_end - schedule.t_start;
  double t0 = schedule.t_start;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t1 = k + 1 == steps ? schedule.t_end
                                     : schedule.t_start + span * static_cast<double>(k + 1) / static_cast<double>(steps);
    z = {add(z.z, mul_scalar(field(z, t0, t1), t1 - t0))};
    t0 = t1;
  }
  return z;
}

double mean_flow_residual(const VelocityField& field, const LatentCode& z, double r, double t, double h) {
  if (!(t - h >= 0.0 && t + h <= 1.0)) throw std::invalid_argument("t +- h must stay inside [0,1]");
  const Tensor u = field(z, t, r);
  const Tensor v = field(z, t, t);
  const Tensor up = field({add(z.z, mul_scalar(v, h))}, t + h, r);
  const Tensor um = field({sub(z.z, mul_scalar(v, h))}, t - h, r);
  double total = 0.0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    const double dudt = (up[i] - um[i]) / (2.0 * h);
    total += std::abs(u[i] - (v[i] - (t - r) * dudt));
  }
  return total / static_cast<double>(u.numel());
}

}  // namespace afm
