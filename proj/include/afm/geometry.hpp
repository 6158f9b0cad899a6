#pragma once

#include <cmath>
#include <numbers>
#include <vector>

namespace afm {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
};

// Planar pose; heading in radians, counter-clockwise from +x.
struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  Vec2 position() const { return {x, y}; }
  // World point expressed in this pose's frame (x forward, y left).
  Vec2 to_local(Vec2 p) const {
    const double c = std::cos(heading), s = std::sin(heading);
    const Vec2 d = p - position();
    return {c * d.x + s * d.y, -s * d.x + c * d.y};
  }
  Vec2 to_world(Vec2 p) const {
    const double c = std::cos(heading), s = std::sin(heading);
    return {x + c * p.x - s * p.y, y + s * p.x + c * p.y};
  }
};

inline double wrap_angle(double a) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

// Closest-point query on an open polyline.
struct PolylineProjection {
  double arc_length = 0.0;      // along the polyline to the foot point
  double signed_lateral = 0.0;  // positive to the left of travel direction
  Vec2 foot;
  std::size_t segment = 0;
};

class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Vec2> points);

  const std::vector<Vec2>& points() const { return points_; }
  const std::vector<double>& cumulative() const { return cumulative_; }
  double length() const { return cumulative_.empty() ? 0.0 : cumulative_.back(); }

  // Searches segments [first, last). Defaults cover the whole line.
  PolylineProjection project(Vec2 p, std::size_t first = 0, std::size_t last = static_cast<std::size_t>(-1)) const;
  Vec2 point_at(double arc_length) const;
  double heading_at(double arc_length) const;
  std::size_t segment_at(double arc_length) const;

 private:
  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
};

// Separating-axis test on two oriented rectangles (length along heading).
bool footprints_overlap(const Pose2& a, double a_length, double a_width, const Pose2& b, double b_length,
                        double b_width);

}  // namespace afm
