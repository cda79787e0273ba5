#pragma once

#include <array>
#include <complex>
#include <set>
#include <string>
#include <vector>

#include "impest/measurement.hpp"
#include "impest/network.hpp"
#include "impest/powerflow.hpp"
#include "impest/problem.hpp"
#include "impest/solver.hpp"

namespace impest {

struct Quantiles {
  double min = 0, p25 = 0, median = 0, p75 = 0, max = 0;
  static Quantiles of(std::vector<double> values);
};

struct PfValidationEntry {
  std::string bus;
  Phase phase;
  int timestep;
  double dv_pu;  // |Vmag_est - Vmag_ref| in p.u.
};

struct PfValidationReport {
  std::vector<PfValidationEntry> entries;
  Quantiles quantiles;
  std::vector<int> failed_timesteps;  // PF non-convergence on either feeder
};

/// Power-flow validation: solve both feeders for every timestep of the
/// injections and compare voltage magnitudes bus by bus.
PfValidationReport pf_validate(const Feeder& feeder_est, const Feeder& feeder_ref,
                               const InjectionSpec& validation_injections,
                               const std::array<std::complex<double>, 3>& source_voltage);

struct CumulativeErrorEntry {
  std::string user;
  Phase phase;
  double r_err;  // percent, or ohm when the true value is zero
  double x_err;
  bool r_absolute = false;
  bool x_absolute = false;
};

struct CumulativeErrorReport {
  std::vector<CumulativeErrorEntry> entries;
  Quantiles r_quantiles;  // over percent entries
  Quantiles x_quantiles;
};

/// Per-user per-phase error of cumulative path impedance: 100*(est-true)/true.
CumulativeErrorReport cumulative_error(const Feeder& feeder_true, const Feeder& feeder_est);

struct SeObjectiveEntry {
  int timestep;
  double objective;
  bool solved;
  std::string status;
};

struct SeObjectiveOptions {
  SolverOptions solver;
  BuildOptions build;  // mode forced to SeFixedZ
};

/// Runs single-timestep state estimation with the feeder's impedances fixed
/// and reports the WLAV objective per validation timestep.
std::vector<SeObjectiveEntry> se_objective_validate(const Feeder& feeder_est,
                                                    const MeasurementSet& validation,
                                                    const SeObjectiveOptions& opts = {});

struct ValidationReport {
  PfValidationReport pf;
  CumulativeErrorReport cumulative;
  std::vector<SeObjectiveEntry> se_objective;
  std::string injections_source;  // "clean" or "noisy" P/Q used for PF validation
};

std::string report_to_json_string(const ValidationReport& report);
ValidationReport report_from_json_string(const std::string& text);
void save_report_json(const ValidationReport& report, const std::string& path);
ValidationReport load_report_json(const std::string& path);

/// Figure-equivalent CSV tables (pf_validation.csv, cumulative.csv,
/// se_objective.csv) under dir.
void write_report_tables(const ValidationReport& report, const std::string& dir);

/// Boxplot SVGs generated from the stored quantiles under dir.
void write_report_figures(const ValidationReport& report, const std::string& dir);

struct CandidateTrace {
  std::string name;
  std::set<int> steps;
  bool estimated = false;
  std::string error;
  double mean_validation_objective = 0.0;
  std::vector<SeObjectiveEntry> per_timestep;
};

struct TrainingSelection {
  int best_index = -1;  // into trace
  std::vector<CandidateTrace> trace;
};

/// Estimate on each candidate subset, rebuild the feeder, score it by the
/// mean SE objective on the validation set, and return the best candidate.
TrainingSelection select_training_set(const std::vector<std::set<int>>& candidates,
                                      const Feeder& feeder, const MeasurementSet& pool,
                                      const MeasurementSet& validation,
                                      const BuildOptions& build_opts,
                                      const SolverOptions& solver_opts);

/// Default candidate ladder: prefixes of the most-loaded timesteps (by total
/// measured |P|), sizes step, 2*step, ... up to count*step entries.
std::vector<std::set<int>> most_loaded_ladder(const MeasurementSet& ms, int step = 10,
                                              int count = 13);

}  // namespace impest
