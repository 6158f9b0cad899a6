#include "afm/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <limits>
#include <stdexcept>

namespace afm {

Polyline::Polyline(std::vector<Vec2> points) : points_(std::move(points)) {
  if (points_.size() < 2) throw std::invalid_argument("polyline needs at least two points");
  cumulative_.resize(points_.size());
  cumulative_[0] = 0.0;
  for (std::size_t i = 1; i < points_.size(); ++i) {
    cumulative_[i] = cumulative_[i - 1] + (points_[i] - points_[i - 1]).norm();
  }
}

PolylineProjection Polyline::project(Vec2 p, std::size_t first, std::size_t last) const {
  last = std::min(last, points_.size() - 1);
  PolylineProjection best;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = first; i < last; ++i) {
    const Vec2 a = points_[i];
    const Vec2 ab = points_[i + 1] - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec2 foot = a + ab * t;
    const Vec2 d = p - foot;
    const double d2 = d.dot(d);
    if (d2 < best_d2) {
      best_d2 = d2;
      best.segment = i;
      best.foot = foot;
      best.arc_length = cumulative_[i] + t * std::sqrt(len2);
      const double side = ab.cross(p - a);
      best.signed_lateral = side >= 0.0 ? std::sqrt(d2) : -std::sqrt(d2);
    }
  }
  return best;
}

std::size_t Polyline::segment_at(double s) const {
  auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
  std::size_t idx = it == cumulative_.begin() ? 0 : static_cast<std::size_t>(it - cumulative_.begin()) - 1;
  return std::min(idx, points_.size() - 2);
}

Vec2 Polyline::point_at(double s) const {
  const std::size_t i = segment_at(s);
  const double seg = cumulative_[i + 1] - cumulative_[i];
  const double t = seg > 0.0 ? (s - cumulative_[i]) / seg : 0.0;
  return points_[i] + (points_[i + 1] - points_[i]) * t;
}

double Polyline::heading_at(double s) const {
  const std::size_t i = segment_at(s);
  const Vec2 d = points_[i + 1] - points_[i];
  return std::atan2(d.y, d.x);
}

bool footprints_overlap(const Pose2& a, double al, double aw, const Pose2& b, double bl, double bw) {
  // Separating axis test on two rectangles.
  auto corners = [](const Pose2& p, double l, double w) {
    std::array<Vec2, 4> out;
    const double hx = l / 2, hy = w / 2;
    const std::array<Vec2, 4> local{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
    for (int i = 0; i < 4; ++i) out[i] = p.to_world(local[i]);
    return out;
  };
  const auto ca = corners(a, al, aw), cb = corners(b, bl, bw);
  for (const Pose2* p : {&a, &b}) {
    for (double ang : {p->heading, p->heading + std::numbers::pi / 2}) {
      const Vec2 axis{std::cos(ang), std::sin(ang)};
      double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
      for (const auto& v : ca) {
        amin = std::min(amin, v.dot(axis));
        amax = std::max(amax, v.dot(axis));
      }
      for (const auto& v : cb) {
        bmin = std::min(bmin, v.dot(axis));
        bmax = std::max(bmax, v.dot(axis));
      }
      if (amax < bmin || bmax < amin) return false;
    }
  }
  return true;
}

}  // namespace afm
