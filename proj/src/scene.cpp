#include "afm/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

#include "afm/binary_io.hpp"

namespace afm {

namespace {

struct Rgb {
  double r, g, b;
  Rgb operator*(double s) const { return {r * s, g * s, b * s}; }
  Rgb operator+(Rgb o) const { return {r + o.r, g + o.g, b + o.b}; }
};

Rgb mix(Rgb a, Rgb b, double t) { return a * (1.0 - t) + b * t; }

constexpr Rgb kZenith{0.30, 0.48, 0.85};
constexpr Rgb kSkyHorizon{0.72, 0.80, 0.92};
constexpr Rgb kGrass{0.28, 0.52, 0.22};
constexpr Rgb kRoad{0.36, 0.36, 0.38};
constexpr Rgb kMarking{0.95, 0.94, 0.86};
constexpr Rgb kHaze{0.62, 0.68, 0.74};
constexpr std::array<Rgb, 4> kBoxColors{{{0.80, 0.18, 0.15}, {0.15, 0.30, 0.80}, {0.90, 0.75, 0.10}, {0.55, 0.55, 0.55}}};

constexpr double kPolylineStep = 0.5;

struct Ray {
  double ox, oy, oz;
  double dx, dy, dz;
};

// Slab test against an oriented box; returns entry distance and shading factor.
bool hit_box(const Ray& ray, const WorldBox& box, double& t_hit, double& shade) {
  const double c = std::cos(box.pose.heading), s = std::sin(box.pose.heading);
  const double rx = ray.ox - box.pose.x, ry = ray.oy - box.pose.y;
  const double o[3] = {c * rx + s * ry, -s * rx + c * ry, ray.oz};
  const double d[3] = {c * ray.dx + s * ray.dy, -s * ray.dx + c * ray.dy, ray.dz};
  const double lo[3] = {-box.length / 2, -box.width / 2, 0.0};
  const double hi[3] = {box.length / 2, box.width / 2, box.height};
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-12) {
      if (o[k] < lo[k] || o[k] > hi[k]) return false;
      continue;
    }
    double a = (lo[k] - o[k]) / d[k], b = (hi[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    if (a > t0) {
      t0 = a;
      axis = k;
    }
    t1 = std::min(t1, b);
    if (t0 > t1) return false;
  }
  if (axis < 0) return false;
  t_hit = t0;
  shade = axis == 2 ? 1.0 : (axis == 0 ? 0.8 : 0.62);
  return true;
}

Polyline arc_centerline(double curvature, double s_begin, double s_end) {
  std::vector<Vec2> pts;
  for (double s = s_begin; s <= s_end + 1e-9; s += kPolylineStep) {
    if (std::abs(curvature) < 1e-9) {
      pts.push_back({s, 0.0});
    } else {
      pts.push_back({std::sin(curvature * s) / curvature, (1.0 - std::cos(curvature * s)) / curvature});
    }
  }
  return Polyline(std::move(pts));
}


}  // namespace

const char* command_name(Command c) {
  switch (c) {
    case Command::Follow: return "follow";
    case Command::Left: return "left";
    case Command::Right: return "right";
  }
  return "?";
}

Command parse_command(const std::string& name) {
  if (name == "follow") return Command::Follow;
  if (name == "left") return Command::Left;
  if (name == "right") return Command::Right;
  throw std::invalid_argument("unknown navigation command '" + name + "'");
}

LightingRegime parse_lighting(const std::string& name) {
  if (name == "mixed") return LightingRegime::Mixed;
  if (name == "day") return LightingRegime::Day;
  if (name == "night") return LightingRegime::Night;
  throw std::invalid_argument("unknown lighting regime '" + name + "'");
}

Tensor render_view(const RoadScene& scene, const Pose2& ego, const Camera& cam) {
  const std::size_t n = kImageSize;
  const double center = static_cast<double>(n) / 2.0;
  const double cp = std::cos(cam.pitch), sp = std::sin(cam.pitch);
  const double ch = std::cos(ego.heading), sh = std::sin(ego.heading);

  // Only segments near the camera can be the closest centerline point.
  const auto& line = scene.centerline;
  const double s_ego = line.project(ego.position()).arc_length;
  const std::size_t seg_lo = line.segment_at(std::max(0.0, s_ego - 15.0));
  const std::size_t seg_hi = line.segment_at(s_ego + cam.far_clip + 15.0) + 1;

  std::vector<double> out(3 * n * n);
  const int ss = cam.supersample;
  const double inv_samples = 1.0 / (ss * ss);
  for (std::size_t py = 0; py < n; ++py) {
    for (std::size_t px = 0; px < n; ++px) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double u = static_cast<double>(px) + (sx + 0.5) / ss - center;
          const double v = static_cast<double>(py) + (sy + 0.5) / ss - center;
          const double left = -u / cam.focal, up = -v / cam.focal;
          // camera frame (x fwd, y left, z up) after pitching down
          const double fx = cp + up * sp;
          const double fz = -sp + up * cp;
          Ray ray{ego.x, ego.y, cam.height, ch * fx - sh * left, sh * fx + ch * left, fz};

          double t_best = std::numeric_limits<double>::infinity();
          Rgb color = mix(kSkyHorizon, kZenith,
                          std::clamp(3.0 * ray.dz / std::sqrt(fx * fx + left * left + fz * fz), 0.0, 1.0));
          if (ray.dz < 0.0) {
            const double t = cam.height / -ray.dz;
            const Vec2 g{ray.ox + t * ray.dx, ray.oy + t * ray.dy};
            const double dist = std::hypot(g.x - ego.x, g.y - ego.y);
            t_best = t;
            Rgb ground = kGrass;
            const auto proj = line.project(g, seg_lo, seg_hi);
            const double lat = std::abs(proj.signed_lateral);
            if (lat <= scene.half_width) {
              ground = kRoad;
              const bool edge = scene.half_width - lat < 0.14;
              const bool dash = lat < 0.08 && std::fmod(proj.arc_length, 3.0) < 1.5;
              if (edge || dash) ground = kMarking;
            }
            const double fog = 0.6 * std::pow(std::min(1.0, dist / cam.far_clip), 1.5);
            color = mix(ground, kHaze, fog);
          }
          for (const auto& box : scene.boxes) {
            double t = 0.0, shade = 1.0;
            if (hit_box(ray, box, t, shade) && t < t_best) {
              t_best = t;
              color = kBoxColors[box.color % kBoxColors.size()] * shade;
            }
          }
          acc = acc + color * inv_samples;
        }
      }
      acc = acc * scene.lighting;
      const double ch3[3] = {acc.r, acc.g, acc.b};
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * n + py) * n + px] = std::round(std::clamp(ch3[c], 0.0, 1.0) * 255.0) / 255.0;
      }
    }
  }
  return Tensor::from({3, n, n}, std::move(out));
}

Trajectory centerline_waypoints(const Polyline& line, const Pose2& ego, std::size_t count, double spacing) {
  const auto proj = line.project(ego.position());
  const auto& pts = line.points();
  Trajectory out;
  Vec2 prev = proj.foot;
  std::size_t seg = proj.segment;
  Vec2 seg_start = proj.foot;  // walking position within current segment
  while (out.size() < count) {
    if (seg + 1 >= pts.size()) throw std::runtime_error("centerline too short for waypoint horizon");
    const Vec2 b = pts[seg + 1];
    // Smallest t in [0,1] with |seg_start + t (b - seg_start) - prev| = spacing.
    const Vec2 d = b - seg_start;
    const Vec2 f = seg_start - prev;
    const double A = d.dot(d), B = 2.0 * f.dot(d), C = f.dot(f) - spacing * spacing;
    const double disc = B * B - 4.0 * A * C;
    bool found = false;
    if (A > 0.0 && disc >= 0.0) {
      const double t = (-B + std::sqrt(disc)) / (2.0 * A);
      if (t >= 0.0 && t <= 1.0) {
        prev = seg_start + d * t;
        seg_start = prev;
        out.push_back(ego.to_local(prev));
        found = true;
      }
    }
    if (!found) {
      ++seg;
      seg_start = pts[seg];
    }
  }
  return out;
}

RenderedScene render(const SceneSpec& spec) {
  if (!(spec.lighting >= 0.3 && spec.lighting <= 1.0)) throw std::invalid_argument("lighting must be in [0.3, 1.0]");
  if (!(spec.lane_width > 0.0)) throw std::invalid_argument("lane width must be positive");
  // Tight arcs stop at a half turn so projection never wraps back to the ego.
  const double s_end = std::abs(spec.curvature) > 1e-9 ? std::min(80.0, 3.1 / std::abs(spec.curvature)) : 80.0;
  RoadScene scene{arc_centerline(spec.curvature, -10.0, s_end), spec.lane_width / 2.0, spec.lighting, {}};
  const Pose2 ego{0.0, spec.ego_offset, spec.ego_heading};
  const auto& line = scene.centerline;
  const double s0 = line.project({0.0, 0.0}).arc_length;
  for (const auto& ob : spec.obstacles) {
    const double s = s0 + ob.s;
    const double yaw = line.heading_at(s);
    const Vec2 c = line.point_at(s) + Vec2{-std::sin(yaw), std::cos(yaw)} * ob.lateral;
    WorldBox box{{c.x, c.y, yaw}, ob.length, ob.width, ob.height, ob.color};
    if (footprints_overlap(ego, kEgoLength, kEgoWidth, box.pose, box.length, box.width)) {
      throw std::invalid_argument("obstacle overlaps the ego spawn footprint");
    }
    scene.boxes.push_back(box);
  }
  return {render_view(scene, ego), centerline_waypoints(line, ego)};
}

std::uint64_t scene_seed(std::uint64_t global_seed, Split split, std::uint32_t index) {
  return (global_seed << 33) | (static_cast<std::uint64_t>(split) << 32) | index;
}

SceneSpec sample_scene(std::uint64_t seed, LightingRegime regime, Command command) {
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  SceneSpec spec;
  spec.seed = seed;
  spec.command = command;
  switch (command) {
    case Command::Follow: spec.curvature = uni(-0.01, 0.01); break;
    case Command::Left: spec.curvature = uni(0.02, 0.08); break;
    case Command::Right: spec.curvature = uni(-0.08, -0.02); break;
  }
  spec.lane_width = uni(2.6, 3.6);
  const bool night = regime == LightingRegime::Night || (regime == LightingRegime::Mixed && uni(0.0, 1.0) < 0.5);
  spec.lighting = night ? uni(0.3, 0.45) : uni(0.75, 1.0);
  spec.ego_offset = uni(-0.9, 0.9);
  spec.ego_heading = uni(-0.2, 0.2);
  const int count = std::uniform_int_distribution<int>(0, 3)(rng);
  for (int i = 0; i < count; ++i) {
    Obstacle ob;
    ob.s = uni(8.0, 45.0);
    const double side = uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    ob.length = uni(1.5, 4.0);
    ob.width = uni(0.8, 2.0);
    ob.height = uni(0.8, 2.5);
    ob.lateral = side * (spec.lane_width / 2.0 + 0.6 + ob.width / 2.0 + uni(0.0, 2.5));
    ob.color = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 3)(rng));
    spec.obstacles.push_back(ob);
  }
  return spec;
}

Dataset generate_dataset(std::size_t n, Split split, LightingRegime regime, std::uint64_t global_seed) {
  if (n < 1) throw std::invalid_argument("dataset size must be at least 1");
  Dataset data;
  data.records.resize(n);
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    const auto seed = scene_seed(global_seed, split, static_cast<std::uint32_t>(i));
    const auto spec = sample_scene(seed, regime, static_cast<Command>(i % kNumCommands));
    auto r = render(spec);
    data.records[i] = {std::move(r.image), std::move(r.waypoints), spec.command, spec.lighting, seed};
  }
  return data;
}

namespace {
constexpr char kDatasetMagic[9] = "AFMDSET1";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  binio::put_magic(os, kDatasetMagic);
  binio::put<std::uint32_t>(os, kDatasetVersion);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.records.size()));
  binio::put<std::uint32_t>(os, kImageChannels);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.height));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.width));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.horizon));
  for (const auto& r : data.records) {
    for (double v : r.image.data()) {
      if (v < 0.0 || v > 1.0) throw std::invalid_argument("dataset image value outside [0,1]");
      binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    for (const auto& w : r.waypoints) {
      binio::put<double>(os, w.x);
      binio::put<double>(os, w.y);
    }
    binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(r.command));
    binio::put<double>(os, r.lighting);
    binio::put<std::uint64_t>(os, r.seed);
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  binio::expect_magic(is, kDatasetMagic, "dataset");
  const auto version = binio::get<std::uint32_t>(is);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  const auto count = binio::get<std::uint32_t>(is);
  const auto channels = binio::get<std::uint32_t>(is);
  Dataset data;
  data.height = binio::get<std::uint32_t>(is);
  data.width = binio::get<std::uint32_t>(is);
  data.horizon = binio::get<std::uint32_t>(is);
  if (channels != kImageChannels) throw std::runtime_error("dataset must have 3 channels");
  const std::size_t pixels = channels * data.height * data.width;
  data.records.resize(count);
  std::vector<std::uint8_t> raw(pixels);
  for (auto& r : data.records) {
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
    if (!is) throw std::runtime_error("dataset truncated");
    std::vector<double> img(pixels);
    for (std::size_t i = 0; i < pixels; ++i) img[i] = raw[i] / 255.0;
    r.image = Tensor::from({channels, data.height, data.width}, std::move(img));
    r.waypoints.resize(data.horizon);
    for (auto& w : r.waypoints) {
      w.x = binio::get<double>(is);
      w.y = binio::get<double>(is);
    }
    const auto cmd = binio::get<std::uint8_t>(is);
    if (cmd >= kNumCommands) throw std::runtime_error("dataset record has invalid command");
    r.command = static_cast<Command>(cmd);
    r.lighting = binio::get<double>(is);
    r.seed = binio::get<std::uint64_t>(is);
  }
  return data;
}

}  // namespace afm
