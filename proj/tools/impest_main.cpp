#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "impest/measurement.hpp"
#include "impest/network.hpp"
#include "impest/powerflow.hpp"
#include "impest/problem.hpp"
#include "impest/solver.hpp"
#include "impest/validation.hpp"

using nlohmann::json;
using namespace impest;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitData = 2;
constexpr int kExitSolver = 3;
constexpr int kExitUsage = 64;

struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CliError(kExitData, "cannot open '" + path + "'");
  json j;
  in >> j;
  return j;
}

void apply_override(json& config, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw CliError(kExitUsage, "--set expects key=value, got '" + kv + "'");
  std::string path = kv.substr(0, eq);
  std::string value = kv.substr(eq + 1);
  json* node = &config;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw CliError(kExitUsage, "--set key may not be empty");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]]);
  try {
    (*node)[parts.back()] = json::parse(value);
  } catch (const json::parse_error&) {
    (*node)[parts.back()] = value;  // plain string
  }
}

Feeder load_and_validate_feeder(const std::string& path) {
  Feeder f = load_feeder_json(path);
  auto violations = errors_only(validate(f));
  if (!violations.empty()) {
    for (const auto& v : violations)
      std::cerr << "feeder validation: " << v.entity << ": " << v.message << "\n";
    throw CliError(kExitData, "feeder '" + path + "' failed validation");
  }
  return f;
}

SolverOptions solver_options(const json& config, const std::string& out_dir) {
  SolverOptions so;
  if (config.contains("solver")) {
    const auto& s = config["solver"];
    so.tol = s.value("tol", 1e-7);
    so.max_iter = s.value("max_iter", 3000);
    double lim = s.value("time_limit_s", 0.0);
    if (lim > 0) so.time_limit_s = lim;
    so.verbosity = s.value("verbosity", 0);
  }
  if (so.verbosity >= 1 && !out_dir.empty()) so.log_path = out_dir + "/iterations.csv";
  return so;
}

BuildOptions build_options(const json& config) {
  BuildOptions opt;
  opt.mode = estimation_mode_from_str(config.value("mode", "lle"));
  if (config.contains("estimate")) {
    const auto& e = config["estimate"];
    opt.z_entry_ub_pu = e.value("z_entry_ub_pu", opt.z_entry_ub_pu);
    opt.z_entry_lb_pu = e.value("z_entry_lb_pu", opt.z_entry_lb_pu);
    opt.length_lb_rel = e.value("length_lb_rel", opt.length_lb_rel);
    opt.length_ub_rel = e.value("length_ub_rel", opt.length_ub_rel);
    opt.lle_use_length_residuals = e.value("length_residuals", true);
    opt.lle_single_residual = e.value("single_length_residual", false);
    if (e.contains("pinned_branches"))
      for (const auto& b : e["pinned_branches"]) opt.pinned_branches.insert(b.get<std::string>());
    if (e.contains("alphas")) {
      if (e["alphas"].is_string()) {
        opt.alphas = default_alphas(e["alphas"] == "loose" ? AlphaScope::LooseUntransposed
                                                           : AlphaScope::TransposedDefaults);
      } else {
        AlphaBounds a = default_alphas(AlphaScope::TransposedDefaults);
        const auto& j = e["alphas"];
        a.a1_service = j.value("a1_service", a.a1_service);
        a.a2_service = j.value("a2_service", a.a2_service);
        a.a1_diag = j.value("a1_diag", a.a1_diag);
        a.a2_diag = j.value("a2_diag", a.a2_diag);
        a.a1_offdiag = j.value("a1_offdiag", a.a1_offdiag);
        a.a2_offdiag = j.value("a2_offdiag", a.a2_offdiag);
        a.a3_r = j.value("a3_r", a.a3_r);
        a.a4_r = j.value("a4_r", a.a4_r);
        a.a3_x = j.value("a3_x", a.a3_x);
        a.a4_x = j.value("a4_x", a.a4_x);
        opt.alphas = a;
      }
    }
  }
  return opt;
}

// Duty-cycle household profiles, deterministic in (seed, user index).
std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double uniform(std::uint64_t& state, double lo, double hi) {
  state = mix(state);
  return lo + (static_cast<double>(state >> 11) * (1.0 / 9007199254740992.0)) * (hi - lo);
}

std::map<std::string, std::vector<double>> synthetic_profiles(const Feeder& f, int steps,
                                                              std::uint64_t seed, double peak_w) {
  std::map<std::string, std::vector<double>> profiles;
  int idx = 0;
  for (const auto& u : f.users) {
    std::uint64_t st = seed ^ mix(0x5151 + idx++);
    auto& p = profiles[u.id];
    p.resize(steps);
    const double base = uniform(st, 0.04, 0.12) * peak_w;
    const double block = uniform(st, 0.7, 1.0) * peak_w;
    bool on = uniform(st, 0.0, 1.0) < 0.5;
    int remaining = static_cast<int>(uniform(st, 6.0, 18.0));
    for (int t = 0; t < steps; ++t) {
      if (remaining-- <= 0) {
        on = !on;
        remaining = static_cast<int>(on ? uniform(st, 6.0, 18.0) : uniform(st, 4.0, 24.0));
      }
      p[t] = std::max(30.0, (base + (on ? block : 0.0)) * uniform(st, 0.85, 1.15));
    }
  }
  return profiles;
}

std::map<std::string, std::vector<double>> profiles_from_csv(const std::string& path, int& steps) {
  std::ifstream in(path);
  if (!in) throw CliError(kExitData, "cannot open profiles '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "user_id,timestep,p_w")
    throw CliError(kExitData, path + ": expected header user_id,timestep,p_w");
  std::map<std::string, std::vector<double>> profiles;
  int lineno = 1;
  steps = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string user, t_str, p_str;
    if (!std::getline(ss, user, ',') || !std::getline(ss, t_str, ',') || !std::getline(ss, p_str))
      throw CliError(kExitData, path + ":" + std::to_string(lineno) + ": bad row");
    int t = std::stoi(t_str);
    auto& p = profiles[user];
    if (static_cast<int>(p.size()) <= t) p.resize(t + 1, 0.0);
    p[t] = std::stod(p_str);
    steps = std::max(steps, t + 1);
  }
  return profiles;
}

InjectionSpec injections_from_profiles(const Feeder& f,
                                       const std::map<std::string, std::vector<double>>& profiles,
                                       int steps, double cos_phi, double load_scale) {
  InjectionSpec inj;
  int idx = 0;
  for (const auto& u : f.users) {
    auto it = profiles.find(u.id);
    if (it == profiles.end()) throw CliError(kExitData, "no profile for user '" + u.id + "'");
    const double split[3] = {0.50, 0.33, 0.17};
    int k = 0;
    for (Phase ph : u.phases) {
      double w = u.phases.size() == 1 ? 1.0 : split[(k++ + idx) % 3];
      for (int t = 0; t < steps; ++t) {
        double p = load_scale * it->second.at(t) * w;
        inj.set(u.id, ph, t, p, derive_reactive(p, cos_phi));
      }
    }
    ++idx;
  }
  return inj;
}

MeasurementSet measurements_from_state(const Feeder& f, const InjectionSpec& inj,
                                       const StateSolution& sol, int steps) {
  MeasurementSet ms;
  ms.timestep_minutes = 5.0;
  for (const auto& u : f.users) {
    if (!u.metered) continue;
    const Bus* bus = f.find_bus(u.bus);
    for (Phase ph : u.phases) {
      const auto* e = inj.find(u.id, ph);
      for (int t = 0; t < steps; ++t) {
        const auto& v = sol.steps[t].bus_voltage_v.at(u.bus);
        ms.samples.push_back({u.id, t, MeasKind::P, ph, e->p_w[t], 0.0});
        ms.samples.push_back({u.id, t, MeasKind::Q, ph, e->q_var[t], 0.0});
        ms.samples.push_back(
            {u.id, t, MeasKind::Vmag, ph, std::abs(v.at(bus->phases.index_of(ph))), 0.0});
      }
    }
  }
  return ms;
}

InjectionSpec injections_from_set(const MeasurementSet& ms, const Feeder& f) {
  (void)f;
  InjectionSpec inj;
  std::map<int, int> t_map;
  for (int t : ms.timesteps()) {
    int idx = static_cast<int>(t_map.size());
    t_map[t] = idx;
  }
  for (const auto& s : ms.samples) {
    if (s.kind == MeasKind::Vmag) continue;
    const auto* e = inj.find(s.user_id, s.phase);
    int t = t_map.at(s.timestep);
    double p = 0, q = 0;
    if (e) {
      p = t < static_cast<int>(e->p_w.size()) ? e->p_w[t] : 0;
      q = t < static_cast<int>(e->q_var.size()) ? e->q_var[t] : 0;
    }
    if (s.kind == MeasKind::P) p = s.value;
    else q = s.value;
    inj.set(s.user_id, s.phase, t, p, q);
  }
  return inj;
}

int cmd_reduce(const std::string& in_path, const std::string& out_path) {
  Feeder f = load_and_validate_feeder(in_path);
  Feeder g = reduce(f);
  save_feeder_json(g, out_path);
  std::printf("buses: %zu -> %zu\nbranches: %zu -> %zu\n", f.buses.size(), g.buses.size(),
              f.branches.size(), g.branches.size());
  return kExitOk;
}

int cmd_simulate(const json& config, const std::string& out_dir) {
  if (!config.contains("seed")) throw CliError(kExitData, "synthetic runs require a seed");
  const std::uint64_t seed = config["seed"].get<std::uint64_t>();
  const json sim = config.value("simulate", json::object());

  std::string true_path = config.value("feeder_true", config.value("feeder", ""));
  if (true_path.empty()) throw CliError(kExitData, "config needs feeder_true (or feeder)");
  Feeder f = load_and_validate_feeder(true_path);

  int five_min_steps = sim.value("five_min_steps", 630);
  const double cos_phi = sim.value("cos_phi", 0.97);
  const double load_scale = sim.value("load_scale", 1.0);
  std::map<std::string, std::vector<double>> profiles;
  if (sim.contains("profiles_csv")) {
    profiles = profiles_from_csv(sim["profiles_csv"].get<std::string>(), five_min_steps);
  } else {
    profiles = synthetic_profiles(f, five_min_steps, seed, sim.value("peak_w", 3000.0));
  }

  InjectionSpec inj = injections_from_profiles(f, profiles, five_min_steps, cos_phi, load_scale);
  StateSolution sol;
  try {
    sol = solve(f, inj, balanced_source(f.base_voltage_v));
  } catch (const PowerFlowError& e) {
    throw CliError(kExitSolver, std::string("power flow failed: ") + e.what());
  }
  MeasurementSet clean5 = measurements_from_state(f, inj, sol, five_min_steps);

  NoiseModel noise;
  noise.seed = seed;
  if (config.contains("noise")) {
    noise.accuracy_class = config["noise"].value("accuracy_class", 0.005);
    noise.basis = config["noise"].value("basis", "reference") == std::string("reading")
                      ? NoiseBasis::RelativeToReading
                      : NoiseBasis::RelativeToReference;
  }
  noise.vmag_reference_v = f.base_voltage_v;
  MeasurementSet noisy5 = add_noise(clean5, noise);
  MeasurementSet agg = aggregate(noisy5).set;
  MeasurementSet clean15 = aggregate(clean5).set;

  const int n_train = sim.value("select_steps", 50);
  const int n_val = sim.value("validation_steps", 10);
  SelectResult picked =
      select_steps(agg, f, std::min<int>(n_train + n_val, agg.timesteps().size()));
  for (int t : picked.excluded_timesteps)
    std::fprintf(stderr, "simulate: timestep %d excluded (missing Vmag)\n", t);

  // Highest-drop block trains; the next block validates.
  SelectResult train_sel = select_steps(picked.set, f, n_train);
  std::set<int> train_steps = train_sel.set.timesteps();
  std::set<int> val_steps;
  for (int t : picked.set.timesteps())
    if (!train_steps.count(t)) val_steps.insert(t);
  auto [train, validation] = split(picked.set, train_steps, val_steps);

  std::filesystem::create_directories(out_dir);
  save_csv(train, out_dir + "/train.csv");
  save_csv(validation, out_dir + "/validation.csv");
  // Pre-noise P/Q/V of the validation steps, for PF validation injections.
  MeasurementSet val_clean;
  val_clean.timestep_minutes = 15.0;
  for (const auto& s : clean15.samples)
    if (val_steps.count(s.timestep)) {
      auto c = s;
      c.sigma = 1.0;  // exact values; sigma unused downstream
      val_clean.samples.push_back(c);
    }
  save_csv(val_clean, out_dir + "/validation_clean.csv");
  std::printf("train: %zu samples over %zu steps\nvalidation: %zu samples over %zu steps\n",
              train.samples.size(), train.timesteps().size(), validation.samples.size(),
              validation.timesteps().size());
  return kExitOk;
}

int cmd_estimate(const json& config, const std::string& out_dir) {
  std::string feeder_path = config.value("feeder", "");
  if (feeder_path.empty()) throw CliError(kExitData, "config needs feeder");
  Feeder f = load_and_validate_feeder(feeder_path);

  std::string train_path = out_dir + "/train.csv";
  if (config.contains("measurements") && config["measurements"].contains("train"))
    train_path = config["measurements"]["train"].get<std::string>();
  MeasurementSet train = load_csv(train_path);

  BuildOptions opt = build_options(config);
  std::filesystem::create_directories(out_dir);
  SolverOptions so = solver_options(config, out_dir);

  NlpProblem problem;
  try {
    problem = build(f, train, opt);
  } catch (const std::exception& e) {
    throw CliError(kExitData, std::string("problem assembly failed: ") + e.what());
  }
  if (config.value("dump_problem", false)) {
    std::ofstream dump(out_dir + "/problem.json");
    dump << problem.to_json_string() << "\n";
  }

  SolveOutcome out = solve(problem, so);
  if (out.status == SolveStatus::NumericalFailure || out.status == SolveStatus::InfeasibleDetected)
    throw CliError(kExitSolver, "solver failed with status " + solve_status_str(out.status));

  EstimationResult res = recover_solution(problem, out.point);
  res.solver_status = solve_status_str(out.status);
  save_feeder_json(res.feeder_est, out_dir + "/feeder_est.json");

  json summary;
  summary["mode"] = estimation_mode_str(opt.mode);
  summary["status"] = res.solver_status;
  summary["objective"] = out.objective;
  summary["max_violation"] = out.max_violation;
  summary["iterations"] = out.iterations;
  summary["wall_time_s"] = out.wall_time_s;
  summary["flagged"] = res.flagged;
  if (res.flagged) summary["flag_message"] = res.flag_message;
  if (!res.lengths_m.empty()) summary["lengths_m"] = res.lengths_m;
  {
    std::vector<double> r = res.residuals;
    auto q = Quantiles::of(r);
    summary["residual_quantiles"] = {
        {"min", q.min}, {"p25", q.p25}, {"median", q.median}, {"p75", q.p75}, {"max", q.max}};
  }
  std::ofstream sf(out_dir + "/estimate_summary.json");
  sf << summary.dump(2) << "\n";
  std::printf("status: %s\nobjective: %.9g\niterations: %d\nwall_time_s: %.1f\n",
              res.solver_status.c_str(), out.objective, out.iterations, out.wall_time_s);
  return kExitOk;
}

int cmd_validate(const json& config, const std::string& out_dir) {
  std::string true_path = config.value("feeder_true", "");
  if (true_path.empty()) throw CliError(kExitData, "config needs feeder_true");
  Feeder f_true = load_and_validate_feeder(true_path);
  std::string est_path = config.value("feeder_est", out_dir + "/feeder_est.json");
  Feeder f_est = load_and_validate_feeder(est_path);

  std::string val_path = out_dir + "/validation.csv";
  if (config.contains("measurements") && config["measurements"].contains("validation"))
    val_path = config["measurements"]["validation"].get<std::string>();
  MeasurementSet validation = load_csv(val_path);

  ValidationReport report;
  // Prefer the clean pre-noise injections when the simulation stored them.
  std::string clean_path = out_dir + "/validation_clean.csv";
  InjectionSpec inj;
  if (std::filesystem::exists(clean_path) && config.value("use_clean_injections", true)) {
    inj = injections_from_set(load_csv(clean_path), f_true);
    report.injections_source = "clean";
  } else {
    inj = injections_from_set(validation, f_true);
    report.injections_source = "noisy";
  }
  report.pf = pf_validate(f_est, f_true, inj, balanced_source(f_true.base_voltage_v));
  report.cumulative = cumulative_error(f_true, f_est);
  SeObjectiveOptions se_opts;
  se_opts.solver = solver_options(config, "");
  report.se_objective = se_objective_validate(f_est, validation, se_opts);

  std::filesystem::create_directories(out_dir);
  save_report_json(report, out_dir + "/report.json");
  std::printf("pf |dV| p.u.: median %.6g  p75 %.6g  max %.6g\n", report.pf.quantiles.median,
              report.pf.quantiles.p75, report.pf.quantiles.max);
  std::printf("cumulative R%%: median %.4g  X%%: median %.4g\n",
              report.cumulative.r_quantiles.median, report.cumulative.x_quantiles.median);
  return kExitOk;
}

int cmd_report(const std::string& dir) {
  ValidationReport report = load_report_json(dir + "/report.json");
  write_report_tables(report, dir + "/tables");
  write_report_figures(report, dir + "/figures");
  std::printf("tables and figures written under %s\n", dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"impest: joint state and line impedance estimation for LV feeders"};
  app.require_subcommand(1);

  std::string in_path, out_path, config_path, out_dir = "out", report_dir;
  std::vector<std::string> overrides;

  auto* reduce_cmd = app.add_subcommand("reduce", "Eliminate superfluous nodes");
  reduce_cmd->add_option("--in", in_path, "input feeder JSON")->required();
  reduce_cmd->add_option("--out", out_path, "output feeder JSON")->required();

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run configuration JSON")->required();
    cmd->add_option("--out", out_dir, "artifact directory");
    cmd->add_option("--set", overrides, "config override key=value (dot path)");
  };
  auto* simulate_cmd = app.add_subcommand("simulate", "Generate measurement time series");
  add_config_opts(simulate_cmd);
  auto* estimate_cmd = app.add_subcommand("estimate", "Build and solve the estimation problem");
  add_config_opts(estimate_cmd);
  auto* validate_cmd = app.add_subcommand("validate", "Compare estimated against reference feeder");
  add_config_opts(validate_cmd);
  auto* report_cmd = app.add_subcommand("report", "Render tables and figures from report.json");
  report_cmd->add_option("--dir", report_dir, "artifact directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (reduce_cmd->parsed()) return cmd_reduce(in_path, out_path);
    json config;
    if (!config_path.empty()) {
      config = load_json(config_path);
      for (const auto& kv : overrides) apply_override(config, kv);
      if (config.contains("out_dir") && out_dir == "out")
        out_dir = config["out_dir"].get<std::string>();
    }
    if (simulate_cmd->parsed()) return cmd_simulate(config, out_dir);
    if (estimate_cmd->parsed()) return cmd_estimate(config, out_dir);
    if (validate_cmd->parsed()) return cmd_validate(config, out_dir);
    if (report_cmd->parsed()) return cmd_report(report_dir);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
