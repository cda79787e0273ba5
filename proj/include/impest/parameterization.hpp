#pragma once

#include <Eigen/Dense>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "impest/network.hpp"

namespace impest {

class ProblemBuilder;
struct BranchImpedanceMap;

/// Length-parameterized branch: Z = length * nominal per-km matrices. The
/// length guess feeds the likelihood residuals; without a guess no residual
/// rows are emitted and only the box bounds act.
struct LleBranchParams {
  Eigen::MatrixXd r_nom_per_km;  // same units as the problem (p.u. inside build)
  Eigen::MatrixXd x_nom_per_km;
  std::optional<double> length_guess_m;
  double length_lb_m = 0.0;
  double length_ub_m = 0.0;
};

/// Ratio bounds for the IME structural constraints.
///   X/R coupling:   a2 * X_pq <= R_pq <= a1 * X_pq      (a1 >= a2 >= 1)
///   self/mutual:    lo * Z_pq <= Z_pp <= hi * Z_pq      (hi >= lo >= 1)
/// The self/mutual pair is kept as (upper, lower) per matrix kind; in the
/// source notation these are alpha3 (upper) and alpha4 (lower).
struct AlphaBounds {
  double a1_service = 0, a2_service = 0;  // single-phase branches
  double a1_diag = 0, a2_diag = 0;        // three-phase diagonal entries
  double a1_offdiag = 0, a2_offdiag = 0;  // three-phase off-diagonal entries
  double a3_r = 0, a4_r = 0;              // self/mutual upper, lower for R
  double a3_x = 0, a4_x = 0;              // self/mutual upper, lower for X

  void check() const;  // ordering invariants; throws on violation
  bool envelops(const AlphaBounds& tighter) const;
};

enum class AlphaScope { TransposedDefaults, LooseUntransposed };

AlphaBounds default_alphas(AlphaScope scope);

struct ImeVariant {
  enum Tag { Transposed, Untransposed, Diagonal } tag = Transposed;

  int free_scalars_per_three_phase() const {
    switch (tag) {
      case Transposed: return 4;
      case Untransposed: return 12;
      case Diagonal: return 6;
    }
    return 0;
  }
};

struct ImeToggles {
  bool dominance_on_r = true;
  bool dominance_on_x = true;
  double entry_lb = 0.0;  // strictly positive replaces nonnegativity when > 0
  double entry_ub = std::numeric_limits<double>::infinity();
};

/// Emits the length variable, substitution metadata and (when a guess is
/// given) the per-timestep likelihood residual rows. Lengths are in km inside
/// the problem. Returns the BranchImpedanceMap describing the substitution.
BranchImpedanceMap parameterize_lle(const Branch& branch, const LleBranchParams& params,
                                    ProblemBuilder& builder, const std::vector<int>& timesteps,
                                    bool use_residuals, bool single_residual);

/// Emits impedance entry variables plus the structural constraint rows for the
/// requested variant. Symmetry and the equal-diagonal/off-diagonal rules are
/// realized by variable aliasing, never by extra equations. Single-phase
/// branches always get two scalars R, X with the service-cable ratio bounds.
BranchImpedanceMap parameterize_ime(const Branch& branch, const ImeVariant& variant,
                                    const AlphaBounds& alphas, const ImeToggles& toggles,
                                    ProblemBuilder& builder);

}  // namespace impest
