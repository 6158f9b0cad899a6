#include <omp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "afm/experiment.hpp"
#include "json.hpp"

using namespace afm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kGateFailure = 3;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string out;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--jobs", f.jobs, "worker threads (default: all cores)");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.sets, "override, e.g. attack.iterations=20");
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(f.config);
  if (f.config.empty()) cfg.derive_seeds();
  for (const auto& s : f.sets) cfg.set(s);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.derive_seeds();
  }
  if (f.jobs) cfg.jobs = *f.jobs;
  if (!f.out.empty()) cfg.out = f.out;
  cfg.validate();
  if (cfg.jobs > 0) omp_set_num_threads(static_cast<int>(cfg.jobs));
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void print_summary(const MethodSummary& s) {
  std::cout << "  " << s.method << ": SHIFT " << fmt(s.shift, 3) << " m, SR " << fmt(s.sr, 1) << " %, SSIM "
            << fmt(s.ssim, 4) << ", pLPIPS " << fmt(s.plpips, 4) << ", pFID " << fmt(s.pfid, 3) << ", TIME "
            << fmt(s.time, 3) << " s\n";
}

// ------------------------------------------------------------ commands

int cmd_train(const ExperimentConfig& cfg) {
  const TrainReport report = train_stack(cfg, std::cerr);
  const fs::path dir = cfg.out / "train";
  echo_config(cfg, dir);
  write_gates_json(dir / "gates.json", report.gates);
  json hashes;
  for (const char* f : {"vae.ckpt", "flow.ckpt", "victim_a.ckpt", "victim_b.ckpt"}) {
    hashes[f] = file_hash(cfg.checkpoints / f);
  }
  write_text(dir / "checkpoints.json", hashes.dump(2) + "\n");
  for (const auto& g : report.gates) {
    std::cout << (g.pass ? "gate PASS " : "gate FAIL ") << g.name << " = " << fmt(g.value, 4) << " (threshold "
              << fmt(g.threshold, 4) << ")\n";
  }
  if (!report.all_pass()) {
    std::cerr << "afm train: one or more acceptance gates failed; checkpoints are kept in " << cfg.checkpoints.string()
              << "\n";
    return kGateFailure;
  }
  return 0;
}

int cmd_attack(const ExperimentConfig& cfg, Method method) {
  const Stack stack = load_stack(cfg);
  const Dataset eval = eval_set(cfg);
  const fs::path dir = cfg.out / "attack" / method_name(method);
  echo_config(cfg, dir);
  const AdversarialSet set = generate_set(method, eval, stack, stack.victim_a, method_params(cfg), cfg.attack.seed);
  const auto rows = score_set(set, eval, stack.victim_a, cfg.success_threshold, method_name(method));
  const MethodSummary s = summarize_set(set, eval, rows, method_name(method));
  write_set(dir, set, rows, s);
  print_summary(s);
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg) {
  const Stack stack = load_stack(cfg);
  const Dataset eval = eval_set(cfg);
  const fs::path dir = cfg.out / "eval";
  echo_config(cfg, dir);
  const MethodParams params = method_params(cfg);
  std::vector<MethodSummary> summaries;
  double afm_sr = 0.0;
  for (Method m : {Method::Clean, Method::Afm, Method::Fgsm, Method::Pgd, Method::Random}) {
    const AdversarialSet set = generate_set(m, eval, stack, stack.victim_a, params, cfg.attack.seed);
    const auto rows = score_set(set, eval, stack.victim_a, cfg.success_threshold, method_name(m));
    summaries.push_back(summarize_set(set, eval, rows, method_name(m)));
    write_set(dir / method_name(m), set, rows, summaries.back());
    if (m == Method::Afm) afm_sr = summaries.back().sr;
    print_summary(summaries.back());
  }
  // PGD at the budget whose SR matches AFM's, for the imperceptibility comparison.
  MatchedPgd matched = match_pgd_sr(afm_sr, eval, stack, params, cfg.attack.seed, cfg.success_threshold);
  const std::string label = "pgd@" + fmt(matched.eps, 4);
  for (auto& r : matched.rows) r.method = label;
  summaries.push_back(summarize_set(matched.set, eval, matched.rows, label));
  print_summary(summaries.back());
  write_summary_csv(dir / "summary.csv", summaries);
  write_summary_json(dir / "summary.json", summaries, "open-loop evaluation");
  return 0;
}

int cmd_transfer(const ExperimentConfig& cfg, const std::vector<std::string>& directions) {
  const Stack stack = load_stack(cfg);
  const Dataset eval = eval_set(cfg);
  const fs::path dir = cfg.out / "transfer";
  echo_config(cfg, dir);
  const MethodParams params = method_params(cfg);
  auto victim = [&](char c) -> const VictimModel& { return c == 'a' ? stack.victim_a : stack.victim_b; };

  std::vector<MethodSummary> rows;
  std::map<char, AdversarialSet> afm_sets;
  const AdversarialSet random = generate_set(Method::Random, eval, stack, stack.victim_a, params, cfg.attack.seed);
  for (const auto& d : directions) {
    if (d.size() != 4 || d.substr(1, 2) != "->" || (d[0] != 'a' && d[0] != 'b') || (d[3] != 'a' && d[3] != 'b')) {
      throw std::invalid_argument("transfer direction must look like a->b, got " + d);
    }
    const char src = d[0], dst = d[3];
    if (!afm_sets.count(src)) {
      afm_sets[src] = generate_set(Method::Afm, eval, stack, victim(src), params, cfg.attack.seed);
    }
    const std::string label = std::string("afm_") + src + "_to_" + dst;
    const auto scored = score_set(afm_sets[src], eval, victim(dst), cfg.success_threshold, label);
    rows.push_back(summarize_set(afm_sets[src], eval, scored, label));
    write_set(dir / label, afm_sets[src], scored, rows.back());
    print_summary(rows.back());

    const std::string rlabel = std::string("random_on_") + dst;
    bool have = false;
    for (const auto& r : rows) have = have || r.method == rlabel;
    if (!have) {
      const auto rs = score_set(random, eval, victim(dst), cfg.success_threshold, rlabel);
      rows.push_back(summarize_set(random, eval, rs, rlabel));
      print_summary(rows.back());
    }
  }
  write_summary_csv(dir / "summary.csv", rows);
  write_summary_json(dir / "summary.json", rows, "transfer");
  return 0;
}

int cmd_closedloop(const ExperimentConfig& cfg, Method method) {
  const Stack stack = load_stack(cfg);
  const fs::path dir = cfg.out / "closedloop" / method_name(method);
  echo_config(cfg, dir);
  const ClosedLoopRun run =
      run_closedloop(cfg, stack, method == Method::Clean ? std::nullopt : std::optional<Method>(method));
  auto dump = [&](const std::vector<EpisodeLog>& logs, const std::string& tag) {
    for (std::size_t i = 0; i < logs.size(); ++i) {
      std::ostringstream name;
      name << tag << "_route_" << (i < 10 ? "0" : "") << i << ".jsonl";
      write_episode_log(dir / "episodes" / name.str(), logs[i]);
    }
  };
  dump(run.clean, "clean");
  std::vector<std::pair<std::string, InfractionSummary>> rows{{"clean", infraction_summary(run.clean)}};
  if (!run.attacked.empty()) {
    dump(run.attacked, method_name(method));
    rows.emplace_back(method_name(method), infraction_summary(run.attacked));
  }
  write_closedloop_csv(dir / "closedloop.csv", rows);
  std::cout << slurp(dir / "closedloop.csv");
  return 0;
}

int cmd_ablate(ExperimentConfig cfg, const std::vector<double>& grid) {
  if (!grid.empty()) cfg.eps_grid = grid;
  cfg.validate();
  const Stack stack = load_stack(cfg);
  const Dataset eval = eval_set(cfg);
  const fs::path dir = cfg.out / "ablate";
  echo_config(cfg, dir);
  const auto rows = run_ablation(cfg, eval, stack);
  write_ablation(dir, rows);
  std::cout << slurp(dir / "ablation.csv");
  return 0;
}

// Collects whatever reports exist under the output directory into one page.
int cmd_report(const ExperimentConfig& cfg) {
  std::ostringstream md;
  md << "# AFM experiment report\n\ncode version: " << code_version() << "\n";
  auto table_from_csv = [&](const fs::path& csv, const std::string& title) {
    if (!fs::exists(csv)) return;
    std::ifstream is(csv);
    std::string line;
    bool header = true;
    md << "\n## " << title << "\n\n";
    while (std::getline(is, line)) {
      std::string cells;
      std::size_t cols = 0;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) {
        cells += "| " + c + " ";
        ++cols;
      }
      md << cells << "|\n";
      if (header) {
        for (std::size_t k = 0; k < cols; ++k) md << "|---";
        md << "|\n";
        header = false;
      }
    }
  };
  if (fs::exists(cfg.out / "train" / "gates.json")) {
    md << "\n## Training gates\n\n| gate | value | threshold | pass |\n|---|---|---|---|\n";
    const json g = json::parse(slurp(cfg.out / "train" / "gates.json"));
    for (const auto& r : g["gates"]) {
      md << "| " << r["name"].get<std::string>() << " | " << fmt(r["value"].get<double>(), 4) << " | "
         << fmt(r["threshold"].get<double>(), 4) << " | " << (r["pass"].get<bool>() ? "yes" : "no") << " |\n";
    }
  }
  table_from_csv(cfg.out / "eval" / "summary.csv", "Open-loop evaluation");
  table_from_csv(cfg.out / "transfer" / "summary.csv", "Transfer");
  table_from_csv(cfg.out / "ablate" / "ablation.csv", "Budget ablation (AFM)");
  if (fs::exists(cfg.out / "closedloop")) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(cfg.out / "closedloop")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) table_from_csv(d / "closedloop.csv", "Closed loop (" + d.filename().string() + ")");
  }
  write_text(cfg.out / "report.md", md.str());
  std::cout << md.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial flow matching experiments on a toy driving stack"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "afm " + code_version());

  CommonFlags train_f, attack_f, eval_f, transfer_f, loop_f, ablate_f, report_f;
  auto* train = app.add_subcommand("train", "render data, train VAE / flow / victims, check the gates");
  add_common(train, train_f);

  auto* attack = app.add_subcommand("attack", "build an adversarial set with one method");
  add_common(attack, attack_f);
  std::string attack_method;
  std::optional<double> attack_eps;
  attack->add_option("--method", attack_method, "afm, fgsm, pgd, random or clean")->required();
  attack->add_option("--eps", attack_eps, "L-inf budget for every method");

  auto* eval = app.add_subcommand("eval", "open-loop table: SHIFT, SR, SSIM, pLPIPS, pFID, TIME per method");
  add_common(eval, eval_f);
  std::optional<double> eval_eps;
  eval->add_option("--eps", eval_eps, "L-inf budget for every method");

  auto* transfer = app.add_subcommand("transfer", "attack one victim, evaluate on the other");
  add_common(transfer, transfer_f);
  std::vector<std::string> directions{"a->b", "b->a"};
  transfer->add_option("--direction", directions, "source->target pairs (default a->b b->a)");

  auto* loop = app.add_subcommand("closedloop", "route-following runs with periodic attack injection");
  add_common(loop, loop_f);
  std::string loop_method = "afm";
  std::optional<double> loop_eps;
  loop->add_option("--method", loop_method, "attack injected every closedloop.inject_every frames");
  loop->add_option("--eps", loop_eps, "L-inf budget");

  auto* ablate = app.add_subcommand("ablate", "AFM budget sweep");
  add_common(ablate, ablate_f);
  std::vector<double> grid;
  ablate->add_option("--eps", grid, "budgets to sweep (default from config)");

  auto* report = app.add_subcommand("report", "collect existing reports into report.md");
  add_common(report, report_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(resolve(train_f));
    if (*attack) {
      ExperimentConfig cfg = resolve(attack_f);
      if (attack_eps) cfg.set_eps(*attack_eps);
      cfg.validate();
      return cmd_attack(cfg, parse_method(attack_method));
    }
    if (*eval) {
      ExperimentConfig cfg = resolve(eval_f);
      if (eval_eps) cfg.set_eps(*eval_eps);
      cfg.validate();
      return cmd_eval(cfg);
    }
    if (*transfer) return cmd_transfer(resolve(transfer_f), directions);
    if (*loop) {
      ExperimentConfig cfg = resolve(loop_f);
      if (loop_eps) cfg.set_eps(*loop_eps);
      cfg.validate();
      return cmd_closedloop(cfg, parse_method(loop_method));
    }
    if (*ablate) return cmd_ablate(resolve(ablate_f), grid);
    if (*report) return cmd_report(resolve(report_f));
  } catch (const std::exception& e) {
    std::cerr << "afm: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
