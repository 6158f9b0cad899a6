#include "afm/experiment.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "afm/flow.hpp"
#include "afm/image_io.hpp"

#ifndef AFM_VERSION
#define AFM_VERSION "unknown"
#endif

namespace afm {

using nlohmann::json;

namespace {

// Bumped whenever a change invalidates cached checkpoints.
constexpr int kStackFormat = 3;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

const char* lighting_name(LightingRegime r) {
  switch (r) {
    case LightingRegime::Mixed: return "mixed";
    case LightingRegime::Day: return "day";
    case LightingRegime::Night: return "night";
  }
  return "mixed";
}

// Strict reader: every key of the object must be consumed.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument("config: " + where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw std::invalid_argument("config: bad value for " + where_ + key);
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw std::invalid_argument("config: unknown key " + where_ + k);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json attack_to_json(const AttackConfig& a) {
  json j = json::object();
  std::istringstream is(a.to_text());
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "seed") continue;
    j[key] = json::parse(value);
  }
  return j;
}

template <typename F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr error;
  std::mutex m;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(m);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

void ensure_writable(std::ofstream& os, const std::filesystem::path& path) {
  if (!os) throw std::runtime_error("cannot write " + path.string());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::string code_version() { return AFM_VERSION; }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ------------------------------------------------------------- config

void ExperimentConfig::derive_seeds() {
  vae.seed = mix_seed(seed, 1);
  flow.seed = mix_seed(seed, 2);
  victim.seed = mix_seed(seed, 3);
  attack.seed = mix_seed(seed, 6);
}

void ExperimentConfig::set_eps(double eps) {
  attack.eps_z = attack.eps_u = eps;
  baselines.fgsm_eps = baselines.pgd_eps = eps;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("jobs", c.jobs);
  if (const json* p = top.child("paths")) {
    Section s(*p, "paths.");
    std::string ck = c.checkpoints.string(), out = c.out.string(), tr, ev;
    s.get("checkpoints", ck);
    s.get("out", out);
    s.get("train_data", tr);
    s.get("eval_data", ev);
    s.finish();
    c.checkpoints = ck;
    c.out = out;
    c.data.train_path = tr;
    c.data.eval_path = ev;
  }
  if (const json* p = top.child("data")) {
    Section s(*p, "data.");
    std::string lighting = lighting_name(c.data.lighting);
    s.get("train_size", c.data.train_size);
    s.get("eval_size", c.data.eval_size);
    s.get("lighting", lighting);
    s.finish();
    c.data.lighting = parse_lighting(lighting);
  }
  if (const json* p = top.child("vae")) {
    Section s(*p, "vae.");
    s.get("epochs", c.vae.epochs);
    s.get("batch", c.vae.batch);
    s.get("lr", c.vae.lr);
    s.get("kl_weight", c.vae.kl_weight);
    s.finish();
  }
  if (const json* p = top.child("flow")) {
    Section s(*p, "flow.");
    s.get("epochs", c.flow.epochs);
    s.get("batch", c.flow.batch);
    s.get("lr", c.flow.lr);
    s.get("equal_time_fraction", c.flow.equal_time_fraction);
    s.get("jvp_step", c.flow.jvp_step);
    s.get("cycle_weight", c.flow.cycle_weight);
    s.finish();
  }
  if (const json* p = top.child("victim")) {
    Section s(*p, "victim.");
    s.get("epochs", c.victim.epochs);
    s.get("batch", c.victim.batch);
    s.get("lr", c.victim.lr);
    s.finish();
  }
  if (const json* p = top.child("attack")) {
    if (!p->is_object()) throw std::invalid_argument("config: attack must be an object");
    for (const auto& [k, v] : p->items()) {
      if (k == "seed") throw std::invalid_argument("config: attack.seed derives from the global seed");
      c.attack.set(k, v.is_string() ? v.get<std::string>() : v.dump());
    }
  }
  if (const json* p = top.child("baselines")) {
    Section s(*p, "baselines.");
    s.get("fgsm_eps", c.baselines.fgsm_eps);
    s.get("pgd_eps", c.baselines.pgd_eps);
    s.get("pgd_step_fraction", c.baselines.pgd_step_fraction);
    s.get("pgd_iters", c.baselines.pgd_iters);
    s.get("probe_scale", c.baselines.probe_scale);
    s.finish();
  }
  if (const json* p = top.child("metrics")) {
    Section s(*p, "metrics.");
    s.get("success_threshold", c.success_threshold);
    s.finish();
  }
  if (const json* p = top.child("gates")) {
    Section s(*p, "gates.");
    s.get("vae_mse", c.gates.vae_mse);
    s.get("flow_regression", c.gates.flow_regression);
    s.get("victim_ade", c.gates.victim_ade);
    s.finish();
  }
  if (const json* p = top.child("closedloop")) {
    Section s(*p, "closedloop.");
    s.get("routes", c.closedloop.routes);
    s.get("route_seed", c.closedloop.route_seed);
    s.get("inject_every", c.closedloop.inject_every);
    s.finish();
  }
  if (const json* p = top.child("ablation")) {
    Section s(*p, "ablation.");
    s.get("eps_grid", c.eps_grid);
    s.finish();
  }
  top.finish();
  c.derive_seeds();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["jobs"] = jobs;
  j["paths"] = {{"checkpoints", checkpoints.string()},
                {"out", out.string()},
                {"train_data", data.train_path.string()},
                {"eval_data", data.eval_path.string()}};
  j["data"] = {{"train_size", data.train_size}, {"eval_size", data.eval_size}, {"lighting", lighting_name(data.lighting)}};
  j["vae"] = {{"epochs", vae.epochs}, {"batch", vae.batch}, {"lr", vae.lr}, {"kl_weight", vae.kl_weight}};
  j["flow"] = {{"epochs", flow.epochs},
               {"batch", flow.batch},
               {"lr", flow.lr},
               {"equal_time_fraction", flow.equal_time_fraction},
               {"jvp_step", flow.jvp_step},
               {"cycle_weight", flow.cycle_weight}};
  j["victim"] = {{"epochs", victim.epochs}, {"batch", victim.batch}, {"lr", victim.lr}};
  j["attack"] = attack_to_json(attack);
  j["baselines"] = {{"fgsm_eps", baselines.fgsm_eps},
                    {"pgd_eps", baselines.pgd_eps},
                    {"pgd_step_fraction", baselines.pgd_step_fraction},
                    {"pgd_iters", baselines.pgd_iters},
                    {"probe_scale", baselines.probe_scale}};
  j["metrics"] = {{"success_threshold", success_threshold}};
  j["gates"] = {{"vae_mse", gates.vae_mse}, {"flow_regression", gates.flow_regression}, {"victim_ade", gates.victim_ade}};
  j["closedloop"] = {{"routes", closedloop.routes},
                     {"route_seed", closedloop.route_seed},
                     {"inject_every", closedloop.inject_every}};
  j["ablation"] = {{"eps_grid", eps_grid}};
  return j;
}

void ExperimentConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json j = to_json();
  if (dot == std::string::npos || dot > eq) {
    j[key] = value;
  } else {
    j[key.substr(0, dot)][key.substr(dot + 1)] = value;
  }
  *this = from_json(j);
}

void ExperimentConfig::validate() const {
  if (data.train_size == 0 || data.eval_size == 0) throw std::invalid_argument("config: dataset sizes must be positive");
  if (vae.epochs == 0 || vae.batch == 0 || flow.epochs == 0 || flow.batch == 0 || victim.epochs == 0 ||
      victim.batch == 0) {
    throw std::invalid_argument("config: epochs and batch sizes must be positive");
  }
  attack.validate();
  if (!(baselines.fgsm_eps > 0.0) || !(baselines.pgd_eps > 0.0) || !(baselines.pgd_step_fraction > 0.0) ||
      baselines.pgd_iters == 0) {
    throw std::invalid_argument("config: baseline eps, step and iterations must be positive");
  }
  if (!(success_threshold > 0.0)) throw std::invalid_argument("config: success_threshold must be positive");
  if (closedloop.routes == 0 || closedloop.inject_every == 0) {
    throw std::invalid_argument("config: closedloop routes and inject_every must be positive");
  }
  if (eps_grid.empty()) throw std::invalid_argument("config: ablation.eps_grid is empty");
  for (double e : eps_grid) {
    if (!(e > 0.0)) throw std::invalid_argument("config: ablation eps must be positive");
  }
}

void echo_config(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "config.json");
    ensure_writable(os, dir / "config.json");
    os << cfg.to_json().dump(2) << '\n';
  }
  std::ofstream os(dir / "VERSION");
  ensure_writable(os, dir / "VERSION");
  os << "afm " << code_version() << '\n';
}

// -------------------------------------------------------------- stack

bool TrainReport::all_pass() const {
  for (const auto& g : gates) {
    if (!g.pass) return false;
  }
  return true;
}

namespace {

Dataset load_or_generate(const std::filesystem::path& path, std::size_t n, Split split, const ExperimentConfig& cfg) {
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("dataset not found: " + path.string());
    return read_dataset(path);
  }
  return generate_dataset(n, split, cfg.data.lighting, cfg.seed);
}

std::string data_key(const ExperimentConfig& cfg) {
  json j = {{"seed", cfg.seed},
            {"train_size", cfg.data.train_size},
            {"lighting", lighting_name(cfg.data.lighting)},
            {"train_data", cfg.data.train_path.string()},
            {"format", kStackFormat}};
  return j.dump();
}

struct StackHashes {
  std::uint64_t vae, flow, victim_a, victim_b;
};

StackHashes stack_hashes(const ExperimentConfig& cfg) {
  const json j = cfg.to_json();
  StackHashes h{};
  h.vae = fnv1a(data_key(cfg) + j["vae"].dump());
  h.flow = fnv1a(std::to_string(h.vae) + j["flow"].dump());
  h.victim_a = fnv1a(data_key(cfg) + j["victim"].dump() + "a");
  h.victim_b = fnv1a(data_key(cfg) + j["victim"].dump() + "b");
  return h;
}

std::uint64_t victim_init_seed(const ExperimentConfig& cfg, char which) { return mix_seed(cfg.seed, which == 'a' ? 4 : 5); }

VictimTrainConfig victim_cfg(const ExperimentConfig& cfg, char which) {
  VictimTrainConfig v = cfg.victim;
  if (which == 'b') v.seed = mix_seed(cfg.seed, 7);
  return v;
}

bool cached(const std::filesystem::path& path, std::uint64_t hash) {
  if (!std::filesystem::exists(path)) return false;
  try {
    return load_checkpoint(path).config_hash == hash;
  } catch (const std::exception&) {
    return false;
  }
}

// Write next to the target and rename, so an interrupted run never leaves a
// truncated checkpoint behind.
template <typename Save>
void save_atomically(const std::filesystem::path& path, Save&& save) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  save(tmp);
  std::filesystem::rename(tmp, path);
}

}  // namespace

Dataset train_set(const ExperimentConfig& cfg) {
  return load_or_generate(cfg.data.train_path, cfg.data.train_size, Split::Train, cfg);
}

Dataset eval_set(const ExperimentConfig& cfg) {
  return load_or_generate(cfg.data.eval_path, cfg.data.eval_size, Split::Eval, cfg);
}

TrainReport train_stack(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  // Validate inputs before anything is written.
  for (const auto& p : {cfg.data.train_path, cfg.data.eval_path}) {
    if (!p.empty() && !std::filesystem::exists(p)) throw std::runtime_error("dataset not found: " + p.string());
  }
  const Dataset train = train_set(cfg);
  const Dataset eval = eval_set(cfg);
  std::filesystem::create_directories(cfg.checkpoints);
  echo_config(cfg, cfg.checkpoints);

  const StackHashes h = stack_hashes(cfg);
  const auto dir = cfg.checkpoints;
  TrainReport report;
  auto stage = [&](const char* name, const std::filesystem::path& path, std::uint64_t hash, auto&& train_and_save) {
    if (cached(path, hash)) {
      log << "[train] " << name << ": cached " << path.string() << '\n';
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    train_and_save(path);
    report.trained.push_back(name);
    log << "[train] " << name << ": trained in " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s\n";
    log.unsetf(std::ios::fixed);
  };

  stage("vae", dir / "vae.ckpt", h.vae, [&](const std::filesystem::path& p) {
    const Vae vae = train_vae(train, cfg.vae);
    save_atomically(p, [&](const auto& tmp) { save_vae(vae, tmp, h.vae, cfg.vae.seed); });
  });
  stage("flow", dir / "flow.ckpt", h.flow, [&](const std::filesystem::path& p) {
    const Vae vae = load_vae(dir / "vae.ckpt");
    const MeanVelocityNet net = train_flow(vae, train, cfg.flow);
    save_atomically(p, [&](const auto& tmp) { save_flow(net, tmp, h.flow, cfg.flow.seed); });
  });
  for (char which : {'a', 'b'}) {
    const std::string name = std::string("victim_") + which;
    const std::uint64_t hash = which == 'a' ? h.victim_a : h.victim_b;
    stage(name.c_str(), dir / (name + ".ckpt"), hash, [&](const std::filesystem::path& p) {
      const VictimModel m = train_victim(train, victim_cfg(cfg, which), victim_init_seed(cfg, which));
      save_atomically(p, [&](const auto& tmp) { save_victim(m, tmp, hash, victim_init_seed(cfg, which)); });
    });
  }

  const Stack stack = load_stack(cfg);
  report.gates = measure_gates(stack, eval, cfg);
  write_gates_json(dir / "gates.json", report.gates);
  return report;
}

Stack load_stack(const ExperimentConfig& cfg) {
  const auto dir = cfg.checkpoints;
  for (const char* f : {"vae.ckpt", "flow.ckpt", "victim_a.ckpt", "victim_b.ckpt"}) {
    if (!std::filesystem::exists(dir / f)) {
      throw std::runtime_error("missing checkpoint " + (dir / f).string() + "; run `afm train` first");
    }
  }
  return {load_vae(dir / "vae.ckpt"), load_flow(dir / "flow.ckpt"), load_victim(dir / "victim_a.ckpt"),
          load_victim(dir / "victim_b.ckpt")};
}

std::vector<GateResult> measure_gates(const Stack& stack, const Dataset& eval, const ExperimentConfig& cfg) {
  const std::size_t n = eval.records.size();
  std::vector<double> mse(n), reg(n), ade_a(n), ade_b(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& r = eval.records[i];
    const LatentCode z = stack.vae.encode(r.image);
    mse[i] = mean(square(sub(stack.vae.decode(z), r.image))).item();

    // Linear path z_t = (1 - t) z + t eps with target eps - z, at r = t.
    std::mt19937_64 rng(mix_seed(cfg.seed, 1000 + i));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> g;
    const double t = u(rng);
    std::vector<double> zt(z.z.numel()), target(z.z.numel());
    for (std::size_t k = 0; k < zt.size(); ++k) {
      const double e = g(rng);
      zt[k] = (1.0 - t) * z.z[k] + t * e;
      target[k] = e - z.z[k];
    }
    const Tensor pred = stack.flow.forward(Tensor::from(kLatentShape, std::move(zt)), t, t);
    reg[i] = mean(square(sub(pred, Tensor::from(kLatentShape, std::move(target))))).item();

    auto ade = [&](const VictimModel& m) {
      const Trajectory p = to_trajectory(m.forward(r.image, r.command).trajectory);
      double s = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - r.waypoints[k]).norm();
      return s / static_cast<double>(p.size());
    };
    ade_a[i] = ade(stack.victim_a);
    ade_b[i] = ade(stack.victim_b);
  });
  auto avg = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  std::vector<GateResult> gates;
  auto below = [&](const char* name, double v, double thr) { gates.push_back({name, v, thr, v < thr}); };
  below("vae_reconstruction_mse", avg(mse), cfg.gates.vae_mse);
  below("flow_regression_loss", avg(reg), cfg.gates.flow_regression);
  below("victim_a_waypoint_error_m", avg(ade_a), cfg.gates.victim_ade);
  below("victim_b_waypoint_error_m", avg(ade_b), cfg.gates.victim_ade);
  for (const auto* m : {&stack.victim_a, &stack.victim_b}) {
    const EpisodeLog log = run_episode(straight_route(), victim_planner(*m));
    gates.push_back({m == &stack.victim_a ? "victim_a_straight_route_rc" : "victim_b_straight_route_rc",
                     log.route_completion, 100.0, log.terminal == Terminal::Completed});
  }
  return gates;
}

void write_gates_json(const std::filesystem::path& path, const std::vector<GateResult>& gates) {
  json arr = json::array();
  for (const auto& g : gates) {
    arr.push_back({{"name", g.name}, {"value", std::stod(fmt(g.value))}, {"threshold", g.threshold}, {"pass", g.pass}});
  }
  std::ofstream os(path);
  ensure_writable(os, path);
  os << json{{"schema_version", kReportSchemaVersion}, {"gates", arr}}.dump(2) << '\n';
}

// ------------------------------------------------------------- attacks

const char* method_name(Method m) {
  switch (m) {
    case Method::Clean: return "clean";
    case Method::Afm: return "afm";
    case Method::Fgsm: return "fgsm";
    case Method::Pgd: return "pgd";
    case Method::Random: return "random";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::Clean, Method::Afm, Method::Fgsm, Method::Pgd, Method::Random}) {
    if (name == method_name(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + name + "' (expected clean, afm, fgsm, pgd or random)");
}

MethodParams method_params(const ExperimentConfig& cfg) {
  MethodParams p;
  p.afm = cfg.attack;
  p.fgsm_eps = cfg.baselines.fgsm_eps;
  p.pgd.eps = cfg.baselines.pgd_eps;
  p.pgd.step = cfg.baselines.pgd_eps * cfg.baselines.pgd_step_fraction;
  p.pgd.iters = cfg.baselines.pgd_iters;
  p.pgd.probe_scale = cfg.baselines.probe_scale;
  return p;
}

Tensor attack_frame(Method method, const Tensor& x, const Stack& stack, const VictimModel& source,
                    const MethodParams& params, std::uint64_t sample_seed, AttackResult* afm_out) {
  switch (method) {
    case Method::Clean: return x;
    case Method::Afm:
    case Method::Random: {
      AttackConfig c = params.afm;
      c.seed = sample_seed;
      const NetworkField field(stack.flow);
      AttackResult r = method == Method::Afm ? afm_attack(x, {source, stack.vae, field}, c)
                                             : random_control(x, stack.vae, field, c);
      Tensor img = r.image;
      if (afm_out) *afm_out = std::move(r);
      return img;
    }
    case Method::Fgsm: return fgsm_attack(x, source, params.fgsm_eps, sample_seed, params.pgd.probe_scale);
    case Method::Pgd: {
      PixelAttackConfig p = params.pgd;
      p.seed = sample_seed;
      return pgd_attack(x, source, p);
    }
  }
  throw std::invalid_argument("unknown method");
}

AdversarialSet generate_set(Method method, const Dataset& eval, const Stack& stack, const VictimModel& source,
                            const MethodParams& params, std::uint64_t seed) {
  const std::size_t n = eval.records.size();
  AdversarialSet set;
  set.method = method;
  set.images.resize(n);
  set.seconds.assign(n, 0.0);
  set.nfe.assign(n, 0);
  if (method == Method::Afm) set.loss_traces.resize(n);
  parallel_for(n, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    AttackResult r;
    set.images[i] = attack_frame(method, eval.records[i].image, stack, source, params, mix_seed(seed, i), &r);
    set.seconds[i] = seconds_since(t0);
    if (method == Method::Afm || method == Method::Random) {
      set.nfe[i] = r.nfe;
      set.seconds[i] = r.seconds;
    }
    if (method == Method::Afm) set.loss_traces[i] = r.loss_trace;
  });
  return set;
}

std::vector<SampleRecord> score_set(const AdversarialSet& set, const Dataset& eval, const VictimModel& target,
                                    double success_threshold, const std::string& label) {
  const std::size_t n = eval.records.size();
  if (set.images.size() != n) throw std::invalid_argument("adversarial set does not match the evaluation set");
  std::vector<SampleRecord> rows(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& r = eval.records[i];
    const TrajectoryPair pair{to_trajectory(target.forward(r.image, r.command).trajectory),
                              to_trajectory(target.forward(set.images[i], r.command).trajectory)};
    SampleRecord& s = rows[i];
    s.index = i;
    s.method = label;
    s.shift = pair_shift(pair);
    s.max_lateral = max_lateral_deviation(pair);
    s.success = open_loop_success(pair, success_threshold);
    s.ssim = ssim(r.image, set.images[i]);
    s.plpips = perceptual_distance(r.image, set.images[i]);
    s.time = set.seconds[i];
    s.nfe = set.nfe[i];
  });
  return rows;
}

MethodSummary summarize_set(const AdversarialSet& set, const Dataset& eval, const std::vector<SampleRecord>& rows,
                            const std::string& label) {
  double pfid = std::numeric_limits<double>::quiet_NaN();
  if (eval.records.size() >= 2 * FeatureExtractor::kPooledDim) {
    std::vector<Tensor> clean;
    for (const auto& r : eval.records) clean.push_back(r.image);
    pfid = fid(clean, set.images);
  }
  return summarize(label, rows, pfid);
}

void write_set(const std::filesystem::path& dir, const AdversarialSet& set, const std::vector<SampleRecord>& rows,
               const MethodSummary& summary) {
  std::filesystem::create_directories(dir / "images");
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    std::ostringstream name;
    name << "adv_" << std::setw(4) << std::setfill('0') << i << ".png";
    write_png(set.images[i], dir / "images" / name.str());
  }
  write_samples_csv(dir / "samples.csv", rows);
  write_timing_csv(dir / "timing.csv", rows);
  write_summary_csv(dir / "summary.csv", {summary});
  write_summary_json(dir / "summary.json", {summary}, std::string("open-loop ") + method_name(set.method));
  if (!set.loss_traces.empty()) {
    std::ofstream os(dir / "loss_traces.csv");
    ensure_writable(os, dir / "loss_traces.csv");
    os << "index,iteration,loss\n";
    for (std::size_t i = 0; i < set.loss_traces.size(); ++i) {
      for (std::size_t k = 0; k < set.loss_traces[i].size(); ++k) {
        os << i << ',' << k << ',' << fmt(set.loss_traces[i][k], 8) << '\n';
      }
    }
  }
}

MatchedPgd match_pgd_sr(double target_sr, const Dataset& eval, const Stack& stack, const MethodParams& params,
                        std::uint64_t seed, double success_threshold, double tolerance) {
  static const double grid[] = {0.001, 0.002, 0.003, 0.004, 0.006, 0.008, 0.01, 0.015, 0.02, 0.03, 0.05, 0.1};
  MatchedPgd best;
  double best_gap = std::numeric_limits<double>::infinity();
  const double ratio = params.pgd.step / params.pgd.eps;
  for (double eps : grid) {
    MethodParams p = params;
    p.pgd.eps = eps;
    p.pgd.step = eps * ratio;
    AdversarialSet set = generate_set(Method::Pgd, eval, stack, stack.victim_a, p, seed);
    auto rows = score_set(set, eval, stack.victim_a, success_threshold, "pgd");
    std::vector<bool> ok;
    for (const auto& r : rows) ok.push_back(r.success);
    const double gap = std::abs(success_rate(ok) - target_sr);
    if (gap < best_gap) {
      best_gap = gap;
      best = {eps, std::move(set), std::move(rows)};
    }
    if (gap <= tolerance) break;
  }
  return best;
}

// ---------------------------------------------------------- closed loop

ClosedLoopRun run_closedloop(const ExperimentConfig& cfg, const Stack& stack, std::optional<Method> method) {
  const auto routes = make_routes(cfg.closedloop.routes, cfg.closedloop.route_seed);
  const MethodParams params = method_params(cfg);
  EpisodeOptions opts;
  opts.inject_every = cfg.closedloop.inject_every;
  ClosedLoopRun run;
  run.clean.resize(routes.size());
  if (method) run.attacked.resize(routes.size());
  const Planner planner = victim_planner(stack.victim_a);
  parallel_for(routes.size(), [&](std::size_t i) {
    run.clean[i] = run_episode(routes[i], planner, {}, opts);
    if (!method) return;
    const std::uint64_t route_seed = mix_seed(cfg.attack.seed, routes[i].seed);
    const FrameAttack attack = [&](const Tensor& frame, std::size_t step) {
      return attack_frame(*method, frame, stack, stack.victim_a, params, mix_seed(route_seed, step));
    };
    run.attacked[i] = run_episode(routes[i], planner, attack, opts);
  });
  return run;
}

// ------------------------------------------------------------ ablation

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const Dataset& eval, const Stack& stack) {
  std::vector<AblationRow> rows;
  for (double eps : cfg.eps_grid) {
    MethodParams p = method_params(cfg);
    p.afm.eps_z = p.afm.eps_u = eps;
    const AdversarialSet set = generate_set(Method::Afm, eval, stack, stack.victim_a, p, cfg.attack.seed);
    const auto scored = score_set(set, eval, stack.victim_a, cfg.success_threshold, "afm");
    rows.push_back({eps, summarize_set(set, eval, scored, "afm")});
  }
  return rows;
}

void write_ablation(const std::filesystem::path& dir, const std::vector<AblationRow>& rows) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "ablation.csv");
  ensure_writable(os, dir / "ablation.csv");
  os << "eps,SHIFT,SR,SSIM,pLPIPS\n";
  json arr = json::array();
  for (const auto& r : rows) {
    os << fmt(r.eps, 4) << ',' << fmt(r.summary.shift) << ',' << fmt(r.summary.sr) << ',' << fmt(r.summary.ssim)
       << ',' << fmt(r.summary.plpips) << '\n';
    arr.push_back({{"eps", std::stod(fmt(r.eps, 4))},
                   {"SHIFT", std::stod(fmt(r.summary.shift))},
                   {"SR", std::stod(fmt(r.summary.sr))},
                   {"SSIM", std::stod(fmt(r.summary.ssim))},
                   {"pLPIPS", std::stod(fmt(r.summary.plpips))}});
  }
  std::ofstream js(dir / "ablation.json");
  ensure_writable(js, dir / "ablation.json");
  js << json{{"schema_version", kReportSchemaVersion}, {"title", "eps ablation (afm)"}, {"rows", arr}}.dump(2) << '\n';
}

}  // namespace afm
