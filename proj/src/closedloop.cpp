#include "afm/closedloop.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "afm/metrics.hpp"
#include "json.hpp"

namespace afm {

VehicleState bicycle_step(const VehicleState& s, double steer, double accel, double dt, double wheelbase,
                          double steer_max) {
  if (!(dt > 0.0)) throw std::invalid_argument("dt must be positive");
  if (std::abs(steer) > steer_max + 1e-12) throw std::invalid_argument("steer exceeds steer_max");
  VehicleState n = s;
  const double omega = s.speed * std::tan(steer) / wheelbase;
  if (std::abs(omega) < 1e-12) {
    n.x += s.speed * dt * std::cos(s.heading);
    n.y += s.speed * dt * std::sin(s.heading);
  } else {
    const double r = s.speed / omega, h1 = s.heading + omega * dt;
    n.x += r * (std::sin(h1) - std::sin(s.heading));
    n.y += r * (std::cos(s.heading) - std::cos(h1));
    n.heading = wrap_angle(h1);
  }
  n.speed = std::max(0.0, s.speed + accel * dt);
  return n;
}

// ------------------------------------------------------------------ routes

RoadScene RouteSpec::scene() const { return {centerline, half_width, lighting, obstacles}; }

namespace {

constexpr double kRouteStep = 0.5;
constexpr double kRouteTail = 35.0;

Polyline integrate_route(const std::vector<std::pair<double, double>>& segments) {
  std::vector<Vec2> pts{{0.0, 0.0}};
  double h = 0.0;
  Vec2 p{0.0, 0.0};
  for (const auto& [len, kappa] : segments) {
    const int n = static_cast<int>(std::lround(len / kRouteStep));
    for (int i = 0; i < n; ++i) {
      // midpoint heading keeps arcs accurate at this step size
      const double hm = h + 0.5 * kappa * kRouteStep;
      p = p + Vec2{std::cos(hm), std::sin(hm)} * kRouteStep;
      h += kappa * kRouteStep;
      pts.push_back(p);
    }
  }
  return Polyline(std::move(pts));
}

}  // namespace

RouteSpec straight_route(double length, double half_width) {
  RouteSpec r;
  r.centerline = integrate_route({{length + kRouteTail, 0.0}});
  r.length = length;
  r.half_width = half_width;
  r.max_steps = static_cast<std::size_t>(std::ceil(1.6 * length / 0.5)) + 20;
  return r;
}

std::vector<RouteSpec> make_routes(std::size_t count, std::uint64_t seed) {
  std::vector<RouteSpec> routes;
  for (std::size_t i = 0; i < count; ++i) {
    if (i == 0) {
      RouteSpec r = straight_route(80.0, 1.5);
      r.seed = seed;
      routes.push_back(std::move(r));
      continue;
    }
    std::mt19937_64 rng(seed * 1000003ULL + i);
    auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    std::vector<std::pair<double, double>> segs{{15.0, 0.0}};
    double length = 15.0;
    for (int k = 0; k < 3; ++k) {
      const double len = uni(20.0, 30.0);
      const double kappa = (uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * uni(0.0, 0.04);
      segs.emplace_back(len, kappa);
      length += len;
    }
    segs.emplace_back(kRouteTail, segs.back().second);

    RouteSpec r;
    r.seed = seed * 1000003ULL + i;
    r.centerline = integrate_route(segs);
    r.length = r.centerline.cumulative()[static_cast<std::size_t>(std::lround(length / kRouteStep))];
    r.half_width = uni(1.3, 1.8);
    r.lighting = i % 3 == 2 ? uni(0.3, 0.45) : uni(0.75, 1.0);
    r.max_steps = static_cast<std::size_t>(std::ceil(1.6 * r.length / 0.5)) + 20;
    for (int k = 0; k < 2; ++k) {
      const double s = uni(25.0, r.length - 15.0);
      const double side = uni(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
      WorldBox box;
      box.length = uni(2.0, 3.5);
      box.width = uni(1.0, 1.6);
      box.height = uni(1.2, 2.0);
      box.color = static_cast<std::uint8_t>(k + i);
      const double heading = r.centerline.heading_at(s);
      const Vec2 normal{-std::sin(heading), std::cos(heading)};
      const Vec2 c = r.centerline.point_at(s) + normal * (side * (r.half_width + 0.8 + box.width / 2));
      box.pose = {c.x, c.y, heading};
      r.obstacles.push_back(box);
      r.scenarios.push_back({s - 10.0, s + 10.0, 80});
    }
    routes.push_back(std::move(r));
  }
  return routes;
}

const char* terminal_name(Terminal t) {
  switch (t) {
    case Terminal::Completed: return "completed";
    case Terminal::OffRoad: return "off_road";
    case Terminal::Collision: return "collision";
    case Terminal::Blocked: return "blocked";
    case Terminal::RouteDeviation: return "route_deviation";
    case Terminal::ScenarioTimeout: return "scenario_timeout";
    case Terminal::RouteTimeout: return "route_timeout";
  }
  return "unknown";
}

Planner victim_planner(const VictimModel& victim) {
  return [&victim](const Tensor& frame, Command command) {
    return to_trajectory(victim.forward(frame, command).trajectory);
  };
}

Command route_command(const RouteSpec& route, double s) {
  const double ahead = std::min(s + 10.0, route.centerline.length());
  const double turn = wrap_angle(route.centerline.heading_at(ahead) - route.centerline.heading_at(s));
  const double kappa = turn / std::max(ahead - s, 1e-6);
  if (kappa > 0.015) return Command::Left;
  if (kappa < -0.015) return Command::Right;
  return Command::Follow;
}

// ----------------------------------------------------------------- episode

EpisodeLog run_episode(const RouteSpec& route, const Planner& planner, const FrameAttack& attack,
                       const EpisodeOptions& opts) {
  if (!planner) throw std::invalid_argument("episode needs a trained planner");
  if (attack && opts.inject_every == 0) throw std::invalid_argument("inject_every must be at least 1");
  const auto& vp = opts.vehicle;
  const RoadScene scene = route.scene();
  const auto& line = route.centerline;
  const std::size_t nseg = line.points().size() - 1;

  EpisodeLog log;
  log.route_seed = route.seed;
  const Vec2 start = line.point_at(0.0);
  VehicleState state{start.x, start.y, line.heading_at(0.0), vp.target_speed};
  std::vector<Vec2> history;
  std::vector<std::size_t> entered(route.scenarios.size(), 0);
  std::vector<bool> inside(route.scenarios.size(), false), cleared(route.scenarios.size(), false);
  std::size_t off_count = 0, hint = 0;
  double s_max = 0.0;
  bool done = false;

  for (std::size_t step = 0; step < route.max_steps && !done; ++step) {
    const Vec2 pos{state.x, state.y};
    const std::size_t first = hint > 20 ? hint - 20 : 0;
    const auto proj = line.project(pos, first, std::min(nseg, hint + 40));
    hint = proj.segment;
    const double s = proj.arc_length, lateral = std::abs(proj.signed_lateral);
    s_max = std::max(s_max, std::min(s, route.length));
    log.final_lateral = lateral;
    log.max_lateral = std::max(log.max_lateral, lateral);
    history.push_back(pos);

    auto finish = [&](Terminal t) {
      log.terminal = t;
      done = true;
    };
    if (s >= route.length) {
      finish(Terminal::Completed);
      break;
    }
    bool hit = false;
    for (const auto& box : route.obstacles) {
      hit = hit || footprints_overlap(state.pose(), kEgoLength, kEgoWidth, box.pose, box.length, box.width);
    }
    if (hit) {
      log.collisions = 1;
      finish(Terminal::Collision);
      break;
    }
    off_count = lateral > route.half_width ? off_count + 1 : 0;
    if (lateral > route.deviation_factor * route.half_width) {
      finish(Terminal::RouteDeviation);
      break;
    }
    if (off_count >= std::max<std::size_t>(route.offroad_patience, 1)) {
      finish(Terminal::OffRoad);
      break;
    }
    if (step >= route.blocked_window && (pos - history[step - route.blocked_window]).norm() < route.blocked_distance) {
      finish(Terminal::Blocked);
      break;
    }
    for (std::size_t k = 0; k < route.scenarios.size(); ++k) {
      const auto& sc = route.scenarios[k];
      if (!inside[k] && s >= sc.s_begin) {
        inside[k] = true;
        entered[k] = step;
      }
      if (inside[k] && !cleared[k] && s >= sc.s_end) cleared[k] = true;
      if (inside[k] && !cleared[k] && step - entered[k] > sc.step_budget) finish(Terminal::ScenarioTimeout);
    }
    if (done) break;

    StepRecord rec;
    rec.step = step;
    rec.state = state;
    Tensor frame = render_view(scene, state.pose(), opts.camera);
    if (attack && step > 0 && step % opts.inject_every == 0) {
      frame = attack(frame, step);
      rec.attacked = true;
      ++log.attacks;
    }
    rec.frame_hash = hash_values(frame.data());
    rec.waypoints = planner(frame, route_command(route, s));
    if (rec.waypoints.empty()) throw std::runtime_error("planner returned no waypoints");

    const Vec2 target = rec.waypoints[std::min(opts.lookahead_index, rec.waypoints.size() - 1)];
    const double ld = std::max(target.norm(), 1e-3);
    const double alpha = std::atan2(target.y, target.x);
    rec.steer = std::clamp(std::atan(2.0 * vp.wheelbase * std::sin(alpha) / ld), -vp.steer_max, vp.steer_max);
    const double nominal = static_cast<double>(rec.waypoints.size()) * kWaypointSpacing;
    const double desired = vp.target_speed * std::clamp(rec.waypoints.back().norm() / nominal, 0.0, 1.0);
    const double accel = std::clamp(vp.speed_gain * (desired - state.speed), -vp.accel_limit, vp.accel_limit);
    log.steps.push_back(rec);
    state = bicycle_step(state, rec.steer, accel, vp.dt, vp.wheelbase, vp.steer_max);
  }
  if (!done) log.terminal = Terminal::RouteTimeout;
  log.route_completion = log.terminal == Terminal::Completed ? 100.0 : 100.0 * s_max / route.length;
  return log;
}

InfractionSummary infraction_summary(const std::vector<EpisodeLog>& logs) {
  if (logs.empty()) throw std::invalid_argument("no episodes to summarize");
  InfractionSummary s;
  s.episodes = logs.size();
  std::size_t counts[kTerminalCount] = {};
  double collisions = 0.0;
  for (const auto& l : logs) {
    s.route_completion += l.route_completion;
    ++counts[static_cast<std::size_t>(l.terminal)];
    collisions += static_cast<double>(l.collisions);
  }
  const double n = static_cast<double>(logs.size());
  s.route_completion /= n;
  for (std::size_t k = 0; k < kTerminalCount; ++k) s.rates[k] = 100.0 * static_cast<double>(counts[k]) / n;
  s.mean_collisions = collisions / n;
  return s;
}

void write_episode_log(const std::filesystem::path& path, const EpisodeLog& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  char hash[32];
  for (const auto& r : log.steps) {
    nlohmann::ordered_json j;
    std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(r.frame_hash));
    j["step"] = r.step;
    j["x"] = std::stod(fmt(r.state.x));
    j["y"] = std::stod(fmt(r.state.y));
    j["heading"] = std::stod(fmt(r.state.heading));
    j["speed"] = std::stod(fmt(r.state.speed));
    j["frame_hash"] = hash;
    j["attacked"] = r.attacked;
    j["steer"] = std::stod(fmt(r.steer));
    auto& w = j["waypoints"] = nlohmann::ordered_json::array();
    for (const auto& p : r.waypoints) w.push_back({std::stod(fmt(p.x, 4)), std::stod(fmt(p.y, 4))});
    os << j.dump() << '\n';
  }
  nlohmann::ordered_json t;
  t["terminal"] = terminal_name(log.terminal);
  t["route_seed"] = log.route_seed;
  t["route_completion"] = std::stod(fmt(log.route_completion, 4));
  t["final_lateral"] = std::stod(fmt(log.final_lateral));
  t["max_lateral"] = std::stod(fmt(log.max_lateral));
  t["collisions"] = log.collisions;
  t["attacks"] = log.attacks;
  os << t.dump() << '\n';
}

void write_closedloop_csv(const std::filesystem::path& path,
                          const std::vector<std::pair<std::string, InfractionSummary>>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "method,RC,OffRoad,Collisions,RouteDev,Blocked,ScenarioTimeout,RouteTimeout\n";
  for (const auto& [name, s] : rows) {
    os << name << ',' << fmt(s.route_completion, 2) << ',' << fmt(s.rate(Terminal::OffRoad), 2) << ','
       << fmt(s.mean_collisions, 2) << ',' << fmt(s.rate(Terminal::RouteDeviation), 2) << ','
       << fmt(s.rate(Terminal::Blocked), 2) << ',' << fmt(s.rate(Terminal::ScenarioTimeout), 2) << ','
       << fmt(s.rate(Terminal::RouteTimeout), 2) << '\n';
  }
}

}  // namespace afm
