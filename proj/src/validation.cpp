#include "impest/validation.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace impest {

using nlohmann::json;

Quantiles Quantiles::of(std::vector<double> v) {
  Quantiles q;
  if (v.empty()) return q;
  std::sort(v.begin(), v.end());
  auto at = [&](double frac) {
    double pos = frac * (v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double w = pos - lo;
    return (1 - w) * v[lo] + w * v[hi];
  };
  q.min = v.front();
  q.p25 = at(0.25);
  q.median = at(0.5);
  q.p75 = at(0.75);
  q.max = v.back();
  return q;
}

PfValidationReport pf_validate(const Feeder& feeder_est, const Feeder& feeder_ref,
                               const InjectionSpec& validation_injections,
                               const std::array<std::complex<double>, 3>& source_voltage) {
  if (feeder_est.buses.size() != feeder_ref.buses.size() ||
      feeder_est.branches.size() != feeder_ref.branches.size())
    throw std::invalid_argument("pf_validate expects the same topology in both feeders");

  PfValidationReport report;
  const int T = std::max(1, validation_injections.n_timesteps);
  PowerFlowOptions pf_opts;

  // Solve per timestep so a failure only flags that step.
  for (int t = 0; t < T; ++t) {
    InjectionSpec one;
    one.n_timesteps = 1;
    for (const auto& [user, entries] : validation_injections.by_user)
      for (const auto& e : entries) {
        double p = t < static_cast<int>(e.p_w.size()) ? e.p_w[t] : 0.0;
        double q = t < static_cast<int>(e.q_var.size()) ? e.q_var[t] : 0.0;
        one.set(user, e.phase, 0, p, q, e.model);
      }
    StateSolution est, ref;
    try {
      est = solve(feeder_est, one, source_voltage, pf_opts);
      ref = solve(feeder_ref, one, source_voltage, pf_opts);
    } catch (const PowerFlowError&) {
      report.failed_timesteps.push_back(t);
      continue;
    }
    const double v_base = feeder_ref.base_voltage_v;
    for (const auto& bus : feeder_ref.buses) {
      const auto& ve = est.steps[0].bus_voltage_v.at(bus.id);
      const auto& vr = ref.steps[0].bus_voltage_v.at(bus.id);
      for (Phase p : bus.phases) {
        int i = bus.phases.index_of(p);
        double dv = std::abs(std::abs(ve[i]) - std::abs(vr[i])) / v_base;
        report.entries.push_back({bus.id, p, t, dv});
      }
    }
  }
  std::vector<double> all;
  all.reserve(report.entries.size());
  for (const auto& e : report.entries) all.push_back(e.dv_pu);
  report.quantiles = Quantiles::of(std::move(all));
  return report;
}

CumulativeErrorReport cumulative_error(const Feeder& feeder_true, const Feeder& feeder_est) {
  CumulativeErrorReport report;
  std::vector<double> r_pct, x_pct;
  for (const auto& u : feeder_true.users) {
    const User* ue = feeder_est.find_user(u.id);
    if (!ue) throw std::invalid_argument("user " + u.id + " missing from estimated feeder");
    auto ct = cumulative_impedance(feeder_true, u);
    auto ce = cumulative_impedance(feeder_est, *ue);
    int k = 0;
    for (Phase p : u.phases) {
      CumulativeErrorEntry e;
      e.user = u.id;
      e.phase = p;
      if (ct.r_ohm[k] != 0.0) {
        e.r_err = 100.0 * (ce.r_ohm[k] - ct.r_ohm[k]) / ct.r_ohm[k];
        r_pct.push_back(e.r_err);
      } else {
        e.r_err = ce.r_ohm[k] - ct.r_ohm[k];
        e.r_absolute = true;
      }
      if (ct.x_ohm[k] != 0.0) {
        e.x_err = 100.0 * (ce.x_ohm[k] - ct.x_ohm[k]) / ct.x_ohm[k];
        x_pct.push_back(e.x_err);
      } else {
        e.x_err = ce.x_ohm[k] - ct.x_ohm[k];
        e.x_absolute = true;
      }
      report.entries.push_back(e);
      ++k;
    }
  }
  report.r_quantiles = Quantiles::of(std::move(r_pct));
  report.x_quantiles = Quantiles::of(std::move(x_pct));
  return report;
}

std::vector<SeObjectiveEntry> se_objective_validate(const Feeder& feeder_est,
                                                    const MeasurementSet& validation,
                                                    const SeObjectiveOptions& opts) {
  std::vector<SeObjectiveEntry> out;
  BuildOptions build_opts = opts.build;
  build_opts.mode = EstimationMode::SeFixedZ;
  for (int t : validation.timesteps()) {
    MeasurementSet one;
    one.timestep_minutes = validation.timestep_minutes;
    for (const auto& s : validation.samples)
      if (s.timestep == t) one.samples.push_back(s);
    SeObjectiveEntry entry{t, 0.0, false, ""};
    try {
      NlpProblem problem = build(feeder_est, one, build_opts);
      SolveOutcome sol = solve(problem, opts.solver);
      entry.objective = sol.objective;
      entry.status = solve_status_str(sol.status);
      entry.solved = sol.status == SolveStatus::OptimalLocal;
    } catch (const std::exception& e) {
      entry.status = std::string("error: ") + e.what();
    }
    out.push_back(entry);
  }
  return out;
}

namespace {

json quantiles_to_json(const Quantiles& q) {
  return {{"min", q.min}, {"p25", q.p25}, {"median", q.median}, {"p75", q.p75}, {"max", q.max}};
}

Quantiles quantiles_from_json(const json& j) {
  Quantiles q;
  q.min = j.at("min");
  q.p25 = j.at("p25");
  q.median = j.at("median");
  q.p75 = j.at("p75");
  q.max = j.at("max");
  return q;
}

}  // namespace

std::string report_to_json_string(const ValidationReport& report) {
  json j;
  j["injections_source"] = report.injections_source;
  json pf;
  pf["quantiles"] = quantiles_to_json(report.pf.quantiles);
  pf["failed_timesteps"] = report.pf.failed_timesteps;
  json entries = json::array();
  for (const auto& e : report.pf.entries)
    entries.push_back({{"bus", e.bus},
                       {"phase", std::string(1, phase_char(e.phase))},
                       {"timestep", e.timestep},
                       {"dv_pu", e.dv_pu}});
  pf["entries"] = entries;
  j["pf_validation"] = pf;

  json cum;
  cum["r_quantiles"] = quantiles_to_json(report.cumulative.r_quantiles);
  cum["x_quantiles"] = quantiles_to_json(report.cumulative.x_quantiles);
  json centries = json::array();
  for (const auto& e : report.cumulative.entries)
    centries.push_back({{"user", e.user},
                        {"phase", std::string(1, phase_char(e.phase))},
                        {"r_err", e.r_err},
                        {"x_err", e.x_err},
                        {"r_absolute", e.r_absolute},
                        {"x_absolute", e.x_absolute}});
  cum["entries"] = centries;
  j["cumulative_impedance"] = cum;

  json se = json::array();
  for (const auto& e : report.se_objective)
    se.push_back({{"timestep", e.timestep},
                  {"objective", e.objective},
                  {"solved", e.solved},
                  {"status", e.status}});
  j["se_objective"] = se;
  return j.dump(2);
}

ValidationReport report_from_json_string(const std::string& text) {
  json j = json::parse(text);
  ValidationReport r;
  r.injections_source = j.value("injections_source", "");
  const auto& pf = j.at("pf_validation");
  r.pf.quantiles = quantiles_from_json(pf.at("quantiles"));
  r.pf.failed_timesteps = pf.at("failed_timesteps").get<std::vector<int>>();
  for (const auto& e : pf.at("entries"))
    r.pf.entries.push_back({e.at("bus").get<std::string>(),
                            phase_from_char(e.at("phase").get<std::string>()[0]),
                            e.at("timestep").get<int>(), e.at("dv_pu").get<double>()});
  const auto& cum = j.at("cumulative_impedance");
  r.cumulative.r_quantiles = quantiles_from_json(cum.at("r_quantiles"));
  r.cumulative.x_quantiles = quantiles_from_json(cum.at("x_quantiles"));
  for (const auto& e : cum.at("entries")) {
    CumulativeErrorEntry c;
    c.user = e.at("user").get<std::string>();
    c.phase = phase_from_char(e.at("phase").get<std::string>()[0]);
    c.r_err = e.at("r_err");
    c.x_err = e.at("x_err");
    c.r_absolute = e.at("r_absolute");
    c.x_absolute = e.at("x_absolute");
    r.cumulative.entries.push_back(c);
  }
  for (const auto& e : j.at("se_objective"))
    r.se_objective.push_back({e.at("timestep").get<int>(), e.at("objective").get<double>(),
                              e.at("solved").get<bool>(), e.at("status").get<std::string>()});
  return r;
}

void save_report_json(const ValidationReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report '" + path + "'");
  out << report_to_json_string(report) << "\n";
}

ValidationReport load_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json_string(ss.str());
}

void write_report_tables(const ValidationReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir + "/pf_validation.csv");
    out << "bus,phase,timestep,dv_pu\n";
    out.precision(17);
    for (const auto& e : report.pf.entries)
      out << e.bus << ',' << phase_char(e.phase) << ',' << e.timestep << ',' << e.dv_pu << "\n";
  }
  {
    std::ofstream out(dir + "/cumulative.csv");
    out << "user,phase,r_err,r_absolute,x_err,x_absolute\n";
    out.precision(17);
    for (const auto& e : report.cumulative.entries)
      out << e.user << ',' << phase_char(e.phase) << ',' << e.r_err << ',' << (e.r_absolute ? 1 : 0)
          << ',' << e.x_err << ',' << (e.x_absolute ? 1 : 0) << "\n";
  }
  {
    std::ofstream out(dir + "/se_objective.csv");
    out << "timestep,objective,solved,status\n";
    out.precision(17);
    for (const auto& e : report.se_objective)
      out << e.timestep << ',' << e.objective << ',' << (e.solved ? 1 : 0) << ',' << e.status
          << "\n";
  }
  {
    std::ofstream out(dir + "/quantiles.csv");
    out << "metric,min,p25,median,p75,max\n";
    out.precision(17);
    auto line = [&](const char* name, const Quantiles& q) {
      out << name << ',' << q.min << ',' << q.p25 << ',' << q.median << ',' << q.p75 << ',' << q.max
          << "\n";
    };
    line("pf_dv_pu", report.pf.quantiles);
    line("cumulative_r_pct", report.cumulative.r_quantiles);
    line("cumulative_x_pct", report.cumulative.x_quantiles);
  }
}

namespace {

void write_boxplot_svg(const std::string& path, const std::string& title, const Quantiles& q,
                       const std::string& unit) {
  // Single-box SVG from the stored quantiles.
  const double w = 420, h = 220, left = 70, right = w - 30, mid = 110;
  double lo = q.min, hi = q.max;
  if (hi <= lo) hi = lo + 1e-12;
  auto xmap = [&](double v) { return left + (v - lo) / (hi - lo) * (right - left); };
  std::ofstream out(path);
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  out << "<text x='" << w / 2 << "' y='24' text-anchor='middle' font-size='14'>" << title
      << "</text>\n";
  out << "<line x1='" << xmap(q.min) << "' y1='" << mid << "' x2='" << xmap(q.p25) << "' y2='"
      << mid << "' stroke='black'/>\n";
  out << "<line x1='" << xmap(q.p75) << "' y1='" << mid << "' x2='" << xmap(q.max) << "' y2='"
      << mid << "' stroke='black'/>\n";
  out << "<rect x='" << xmap(q.p25) << "' y='" << mid - 30 << "' width='"
      << std::max(1.0, xmap(q.p75) - xmap(q.p25)) << "' height='60' fill='#9ecae1' stroke='black'/>\n";
  out << "<line x1='" << xmap(q.median) << "' y1='" << mid - 30 << "' x2='" << xmap(q.median)
      << "' y2='" << mid + 30 << "' stroke='black' stroke-width='2'/>\n";
  for (double v : {q.min, q.max}) {
    out << "<line x1='" << xmap(v) << "' y1='" << mid - 12 << "' x2='" << xmap(v) << "' y2='"
        << mid + 12 << "' stroke='black'/>\n";
  }
  out.precision(6);
  out << "<text x='" << left << "' y='" << h - 24 << "' font-size='11'>" << q.min << "</text>\n";
  out << "<text x='" << right << "' y='" << h - 24 << "' text-anchor='end' font-size='11'>" << q.max
      << " " << unit << "</text>\n";
  out << "</svg>\n";
}

}  // namespace

void write_report_figures(const ValidationReport& report, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_boxplot_svg(dir + "/pf_validation.svg", "PF validation |dV|", report.pf.quantiles, "p.u.");
  write_boxplot_svg(dir + "/cumulative_r.svg", "Cumulative R error", report.cumulative.r_quantiles,
                    "%");
  write_boxplot_svg(dir + "/cumulative_x.svg", "Cumulative X error", report.cumulative.x_quantiles,
                    "%");
  if (!report.se_objective.empty()) {
    std::vector<double> obj;
    for (const auto& e : report.se_objective)
      if (e.solved) obj.push_back(e.objective);
    write_boxplot_svg(dir + "/se_objective.svg", "SE objective per validation step",
                      Quantiles::of(std::move(obj)), "");
  }
}

TrainingSelection select_training_set(const std::vector<std::set<int>>& candidates,
                                      const Feeder& feeder, const MeasurementSet& pool,
                                      const MeasurementSet& validation,
                                      const BuildOptions& build_opts,
                                      const SolverOptions& solver_opts) {
  if (candidates.empty()) throw std::invalid_argument("select_training_set needs >= 1 candidate");
  auto val_steps = validation.timesteps();
  for (const auto& cand : candidates)
    for (int t : cand)
      if (val_steps.count(t))
        throw std::invalid_argument("candidate overlaps validation timestep " + std::to_string(t));

  TrainingSelection sel;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    CandidateTrace trace;
    trace.name = "top-" + std::to_string(candidates[i].size());
    trace.steps = candidates[i];
    MeasurementSet train;
    train.timestep_minutes = pool.timestep_minutes;
    for (const auto& s : pool.samples)
      if (candidates[i].count(s.timestep)) train.samples.push_back(s);
    try {
      NlpProblem problem = build(feeder, train, build_opts);
      SolveOutcome sol = solve(problem, solver_opts);
      if (sol.status != SolveStatus::OptimalLocal)
        throw std::runtime_error("solver status " + solve_status_str(sol.status));
      EstimationResult est = recover_solution(problem, sol.point);
      SeObjectiveOptions se_opts;
      se_opts.solver = solver_opts;
      trace.per_timestep = se_objective_validate(est.feeder_est, validation, se_opts);
      double sum = 0;
      int n = 0;
      for (const auto& e : trace.per_timestep)
        if (e.solved) {
          sum += e.objective;
          ++n;
        }
      if (n == 0) throw std::runtime_error("no validation timestep solved");
      trace.mean_validation_objective = sum / n;
      trace.estimated = true;
      if (trace.mean_validation_objective < best) {
        best = trace.mean_validation_objective;
        sel.best_index = static_cast<int>(i);
      }
    } catch (const std::exception& e) {
      trace.error = e.what();
    }
    sel.trace.push_back(std::move(trace));
  }
  if (sel.best_index < 0) throw std::runtime_error("no candidate produced a usable estimate");
  return sel;
}

std::vector<std::set<int>> most_loaded_ladder(const MeasurementSet& ms, int step, int count) {
  std::map<int, double> loading;
  for (const auto& s : ms.samples)
    if (s.kind == MeasKind::P) loading[s.timestep] += std::abs(s.value);
  std::vector<std::pair<double, int>> order;
  order.reserve(loading.size());
  for (const auto& [t, load] : loading) order.emplace_back(-load, t);
  std::sort(order.begin(), order.end());

  std::vector<std::set<int>> ladder;
  for (int k = 1; k <= count; ++k) {
    std::size_t take = static_cast<std::size_t>(k) * step;
    if (take > order.size()) break;
    std::set<int> cand;
    for (std::size_t i = 0; i < take; ++i) cand.insert(order[i].second);
    ladder.push_back(std::move(cand));
  }
  if (ladder.empty() && !order.empty()) {
    std::set<int> all;
    for (auto& [load, t] : order) all.insert(t);
    ladder.push_back(all);
  }
  return ladder;
}

}  // namespace impest
