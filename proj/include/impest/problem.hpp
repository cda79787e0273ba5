#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "impest/measurement.hpp"
#include "impest/network.hpp"
#include "impest/parameterization.hpp"
#include "impest/powerflow.hpp"

namespace impest {

enum class VarRole {
  Ure,
  Uim,
  IreBranch,
  IimBranch,
  IreUser,
  IimUser,
  Umag,
  Rho,
  Length,
  REntry,
  XEntry,
};

struct DecisionVariable {
  VarRole role;
  std::string owner;       // bus / branch / user id
  Phase phase = Phase::A;  // matrix row for R/X entries
  Phase phase2 = Phase::A; // matrix column for R/X entries
  int timestep = -1;       // -1: time-invariant
  double lb = -std::numeric_limits<double>::infinity();
  double ub = std::numeric_limits<double>::infinity();
  double init = 0.0;

  bool fixed() const { return lb == ub; }
  std::string name() const;
};

enum class ConstraintKind { Equality, LessEqual };  // lhs == rhs | lhs <= rhs

enum class ConstraintTag {
  Kcl,
  Ohm,
  VmagMapping,
  Epigraph,
  LengthResidual,
  XrRatio,
  DiagonalDominance,
  SelfMutualRatio,
  Custom,
};

struct LinTerm {
  int var;
  double coef;
};

struct QuadTerm {
  int var_i;
  int var_j;
  double coef;  // coef * x_i * x_j
};

struct Constraint {
  ConstraintKind kind = ConstraintKind::Equality;
  ConstraintTag tag = ConstraintTag::Custom;
  std::string label;
  std::vector<LinTerm> lin;
  std::vector<QuadTerm> quad;
  double rhs = 0.0;
};

/// Links one measurement sample to its rho variable and the model expression
/// x_m it is compared against (per-unit).
struct MeasurementBinding {
  MeasurementSample sample;  // SI, as provided
  double z_pu = 0.0;
  double sigma_pu = 0.0;
  int rho_var = -1;
  std::vector<LinTerm> expr_lin;
  std::vector<QuadTerm> expr_quad;
};

/// How a branch's impedance entries map back from the solution vector.
/// var < 0 means the entry is the stored constant.
struct BranchImpedanceMap {
  std::string branch_id;
  int dim = 0;
  Eigen::MatrixXi r_var, x_var;
  Eigen::MatrixXd r_fixed, x_fixed;  // p.u.
  int length_var = -1;               // LLE; entries are length * nominal
  Eigen::MatrixXd r_nom, x_nom;      // p.u. per km, LLE only
};

enum class EstimationMode { SeFixedZ, Lle, ImeTransposed, ImeUntransposed, ImeDiagonal };

std::string estimation_mode_str(EstimationMode m);
EstimationMode estimation_mode_from_str(const std::string& s);

struct NlpProblem {
  std::vector<DecisionVariable> variables;
  std::vector<Constraint> constraints;
  std::vector<LinTerm> objective;  // minimized; linear by construction
  std::vector<MeasurementBinding> bindings;
  std::vector<BranchImpedanceMap> impedance_maps;
  std::vector<int> rho_length_vars;  // LLE likelihood rho variables

  EstimationMode mode = EstimationMode::SeFixedZ;
  Feeder feeder_si;   // feeder as given (SI), for recovery
  double v_base = 0;  // line-to-neutral volt
  double s_base_1ph = 0;
  double i_base = 0;
  std::vector<int> timesteps;  // sorted measurement timesteps

  int n() const { return static_cast<int>(variables.size()); }
  int free_variable_count() const;
  int count_constraints(ConstraintTag tag) const;

  /// Initial point from the declared variable inits.
  std::vector<double> initial_point() const;

  struct Evaluation {
    double objective = 0.0;
    double max_violation = 0.0;  // constraints and variable bounds
  };
  Evaluation evaluate(const std::vector<double>& point) const;

  /// Value of a binding's model expression x_m at a point (per-unit).
  double binding_value(const MeasurementBinding& b, const std::vector<double>& point) const;

  std::string to_json_string() const;  // debug dump for cross-implementation diffing
};

/// Incremental problem assembly; used by build() and by the impedance
/// parameterization routines.
class ProblemBuilder {
 public:
  explicit ProblemBuilder(NlpProblem& p) : p_(p) {}

  int add_variable(DecisionVariable v);
  Constraint& add_constraint(ConstraintKind kind, ConstraintTag tag, std::string label);
  void add_objective_term(int var, double coef) { p_.objective.push_back({var, coef}); }
  NlpProblem& problem() { return p_; }

 private:
  NlpProblem& p_;
};

struct BuildOptions {
  EstimationMode mode = EstimationMode::SeFixedZ;
  std::set<std::string> pinned_branches;  // keep given impedance fixed

  // bounds, per-unit
  double v_box_pu = 1.5;
  double umag_lb_pu = 0.5;
  double umag_ub_pu = 1.5;
  double i_max_pu = 1e3;
  double z_entry_ub_pu = 0.5;
  double z_entry_lb_pu = 0.0;  // Eq. 17; strictly positive lower bound is an option

  // LLE
  double length_lb_rel = 0.01;  // bounds relative to the feeder's listed length
  double length_ub_rel = 2.0;
  bool lle_use_length_residuals = true;
  bool lle_single_residual = false;  // one residual per branch instead of per timestep
  std::map<std::string, LleBranchParams> lle_overrides;

  // IME
  std::optional<AlphaBounds> alphas;  // default depends on the variant
};

/// Assembles the multi-period combined SE+IE program. The feeder and the
/// measurements are taken in SI units; the emitted problem is per-unit.
NlpProblem build(const Feeder& feeder, const MeasurementSet& train, const BuildOptions& options);

struct EstimationResult {
  Feeder feeder_est;                       // SI
  StateSolution states;                    // SI, one entry per problem timestep
  std::vector<double> residuals;           // per binding, |x-z|/sigma
  std::map<std::string, double> lengths_m; // LLE only
  double objective = 0.0;
  double max_violation = 0.0;
  std::string solver_status;
  bool flagged = false;
  std::string flag_message;
};

/// Maps a solution point back to ohm-valued impedances and per-timestep
/// states. Points violating feasibility beyond 1e-6 are flagged, not dropped.
EstimationResult recover_solution(const NlpProblem& problem, const std::vector<double>& x_star);

}  // namespace impest
