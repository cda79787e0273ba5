#pragma once

#include <string>
#include <vector>

#include "impest/problem.hpp"

namespace impest {

struct SolverOptions {
  double tol = 1e-7;
  int max_iter = 3000;
  double time_limit_s = std::numeric_limits<double>::infinity();
  double mu_init = 0.1;
  int verbosity = 0;       // >= 1 writes the iteration log
  std::string log_path;    // CSV: iter,objective,primal_inf,dual_inf,mu,alpha,step
};

enum class SolveStatus { OptimalLocal, MaxIter, TimeLimit, InfeasibleDetected, NumericalFailure };

std::string solve_status_str(SolveStatus s);

struct SolveOutcome {
  SolveStatus status = SolveStatus::NumericalFailure;
  std::vector<double> point;   // full problem space, fixed variables included
  double objective = 0.0;
  double max_violation = 0.0;  // unscaled, per NlpProblem::evaluate
  int iterations = 0;
  double wall_time_s = 0.0;
};

/// Primal-dual interior point with a filter line search on sparse structures.
/// Deterministic for identical problem and options.
SolveOutcome solve(const NlpProblem& problem, const SolverOptions& opts = {});

/// Max relative error between the analytic constraint Jacobian / objective
/// gradient used by the solver and central finite differences at the point.
double check_derivatives(const NlpProblem& problem, const std::vector<double>& point,
                         double fd_step = 1e-6);

/// Fault-injection variant for testing the checker itself: adds delta to the
/// analytic Jacobian entry (constraint_row, variable) before comparing.
double check_derivatives_corrupted(const NlpProblem& problem, const std::vector<double>& point,
                                   double fd_step, int constraint_row, int variable, double delta);

}  // namespace impest
