#include "impest/parameterization.hpp"

#include <algorithm>
#include <stdexcept>

#include "impest/problem.hpp"

namespace impest {

void AlphaBounds::check() const {
  auto ordered = [](double hi, double lo, const char* what) {
    if (!(hi >= lo && lo >= 1.0))
      throw std::invalid_argument(std::string("alpha bounds must satisfy hi >= lo >= 1 for ") + what);
  };
  ordered(a1_service, a2_service, "service X/R ratio");
  ordered(a1_diag, a2_diag, "diagonal X/R ratio");
  ordered(a1_offdiag, a2_offdiag, "off-diagonal X/R ratio");
  ordered(a3_r, a4_r, "R self/mutual ratio");
  ordered(a3_x, a4_x, "X self/mutual ratio");
}

bool AlphaBounds::envelops(const AlphaBounds& t) const {
  return a1_service >= t.a1_service && a2_service <= t.a2_service && a1_diag >= t.a1_diag &&
         a2_diag <= t.a2_diag && a1_offdiag >= t.a1_offdiag && a2_offdiag <= t.a2_offdiag &&
         a3_r >= t.a3_r && a4_r <= t.a4_r && a3_x >= t.a3_x && a4_x <= t.a4_x;
}

AlphaBounds default_alphas(AlphaScope scope) {
  // ENWL-derived transposed bounds. The self/mutual pairs are stored as
  // (upper, lower): R self/mutual lies in [2, 70], X in [14, 50].
  AlphaBounds t;
  t.a1_service = 16.0;
  t.a2_service = 8.96;
  t.a1_diag = 35.0;
  t.a2_diag = 1.1;
  t.a1_offdiag = 130.0;
  t.a2_offdiag = 2.0;
  t.a3_r = 70.0;
  t.a4_r = 2.0;
  t.a3_x = 50.0;
  t.a4_x = 14.0;
  if (scope == AlphaScope::TransposedDefaults) {
    t.check();
    return t;
  }
  // Loose variant: upper ratios x100, lower ratios x0.01 floored at 1.
  AlphaBounds l;
  l.a1_service = 100.0 * t.a1_service;
  l.a1_diag = 100.0 * t.a1_diag;
  l.a1_offdiag = 100.0 * t.a1_offdiag;
  l.a2_service = std::max(1.0, 0.01 * t.a2_service);
  l.a2_diag = std::max(1.0, 0.01 * t.a2_diag);
  l.a2_offdiag = std::max(1.0, 0.01 * t.a2_offdiag);
  l.a3_r = 100.0 * t.a3_r;
  l.a3_x = 100.0 * t.a3_x;
  l.a4_r = std::max(1.0, 0.01 * t.a4_r);
  l.a4_x = std::max(1.0, 0.01 * t.a4_x);
  l.check();
  return l;
}

BranchImpedanceMap parameterize_lle(const Branch& branch, const LleBranchParams& params,
                                    ProblemBuilder& builder, const std::vector<int>& timesteps,
                                    bool use_residuals, bool single_residual) {
  const int n = branch.phases.size();
  if (params.r_nom_per_km.rows() != n || params.x_nom_per_km.rows() != n)
    throw std::invalid_argument("branch " + branch.id + ": nominal matrix dimension mismatch");
  const double lb_km = params.length_lb_m / 1000.0;
  const double ub_km = params.length_ub_m / 1000.0;
  if (!(ub_km >= lb_km) || lb_km < 0)
    throw std::invalid_argument("branch " + branch.id + ": bad length bounds");
  double guess_km = params.length_guess_m ? *params.length_guess_m / 1000.0 : 0.5 * (lb_km + ub_km);
  if (guess_km < lb_km || guess_km > ub_km) {
    if (ub_km == lb_km)
      throw std::invalid_argument("branch " + branch.id + ": zero-width bounds exclude the guess");
    guess_km = std::clamp(guess_km, lb_km, ub_km);
  }

  DecisionVariable len;
  len.role = VarRole::Length;
  len.owner = branch.id;
  len.lb = lb_km;
  len.ub = ub_km;
  len.init = guess_km;
  const int len_var = builder.add_variable(len);

  BranchImpedanceMap map;
  map.branch_id = branch.id;
  map.dim = n;
  map.length_var = len_var;
  map.r_nom = params.r_nom_per_km;
  map.x_nom = params.x_nom_per_km;
  map.r_var = Eigen::MatrixXi::Constant(n, n, -1);
  map.x_var = Eigen::MatrixXi::Constant(n, n, -1);
  map.r_fixed = Eigen::MatrixXd::Zero(n, n);
  map.x_fixed = Eigen::MatrixXd::Zero(n, n);

  if (use_residuals && params.length_guess_m && ub_km > lb_km) {
    // rho >= +-3(l - guess)/(ub - lb), one pair per timestep as written,
    // optionally collapsed to a single pair.
    const double w = 3.0 / (ub_km - lb_km);
    const int pairs = single_residual ? 1 : static_cast<int>(timesteps.size());
    for (int k = 0; k < pairs; ++k) {
      DecisionVariable rho;
      rho.role = VarRole::Rho;
      rho.owner = branch.id;
      rho.timestep = single_residual ? -1 : timesteps[k];
      rho.lb = 0.0;
      rho.init = 1.0;
      const int rho_var = builder.add_variable(rho);
      builder.problem().rho_length_vars.push_back(rho_var);
      builder.add_objective_term(rho_var, 1.0);

      auto& plus = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::LengthResidual,
                                          "len+ " + branch.id);
      plus.lin = {{len_var, w}, {rho_var, -1.0}};
      plus.rhs = w * guess_km;
      auto& minus = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::LengthResidual,
                                           "len- " + branch.id);
      minus.lin = {{len_var, -w}, {rho_var, -1.0}};
      minus.rhs = -w * guess_km;
    }
  }
  return map;
}

namespace {

int new_entry_var(ProblemBuilder& builder, VarRole role, const Branch& branch, Phase p, Phase q,
                  const ImeToggles& tog) {
  DecisionVariable v;
  v.role = role;
  v.owner = branch.id;
  v.phase = p;
  v.phase2 = q;
  v.lb = tog.entry_lb;
  v.ub = tog.entry_ub;
  // Midpoint of the box, nudged off the complementary zero solution.
  double hi = std::isfinite(tog.entry_ub) ? tog.entry_ub : 1.0;
  v.init = 0.5 * (tog.entry_lb + hi) + 1e-4 * (hi - tog.entry_lb);
  return builder.add_variable(v);
}

void emit_xr_ratio(ProblemBuilder& builder, const std::string& label, int r_var, int x_var,
                   double a1, double a2) {
  // a2 * X <= R <= a1 * X
  auto& up = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::XrRatio, label + " hi");
  up.lin = {{r_var, 1.0}, {x_var, -a1}};
  auto& lo = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::XrRatio, label + " lo");
  lo.lin = {{x_var, a2}, {r_var, -1.0}};
}

}  // namespace

BranchImpedanceMap parameterize_ime(const Branch& branch, const ImeVariant& variant,
                                    const AlphaBounds& alphas, const ImeToggles& toggles,
                                    ProblemBuilder& builder) {
  alphas.check();
  const int n = branch.phases.size();
  BranchImpedanceMap map;
  map.branch_id = branch.id;
  map.dim = n;
  map.r_var = Eigen::MatrixXi::Constant(n, n, -1);
  map.x_var = Eigen::MatrixXi::Constant(n, n, -1);
  map.r_fixed = Eigen::MatrixXd::Zero(n, n);
  map.x_fixed = Eigen::MatrixXd::Zero(n, n);

  auto phases = branch.phases.phases();

  if (n == 1) {
    const int r = new_entry_var(builder, VarRole::REntry, branch, phases[0], phases[0], toggles);
    const int x = new_entry_var(builder, VarRole::XEntry, branch, phases[0], phases[0], toggles);
    map.r_var(0, 0) = r;
    map.x_var(0, 0) = x;
    emit_xr_ratio(builder, "xr " + branch.id, r, x, alphas.a1_service, alphas.a2_service);
    return map;
  }
  if (n != 3) throw std::invalid_argument("branch " + branch.id + ": IME needs 1 or 3 phases");

  switch (variant.tag) {
    case ImeVariant::Transposed: {
      // One diagonal and one off-diagonal scalar per matrix; equal-diagonal,
      // equal-off-diagonal and symmetry all follow from the aliasing.
      const int rd = new_entry_var(builder, VarRole::REntry, branch, phases[0], phases[0], toggles);
      const int ro = new_entry_var(builder, VarRole::REntry, branch, phases[0], phases[1], toggles);
      const int xd = new_entry_var(builder, VarRole::XEntry, branch, phases[0], phases[0], toggles);
      const int xo = new_entry_var(builder, VarRole::XEntry, branch, phases[0], phases[1], toggles);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          map.r_var(i, j) = (i == j) ? rd : ro;
          map.x_var(i, j) = (i == j) ? xd : xo;
        }
      emit_xr_ratio(builder, "xr diag " + branch.id, rd, xd, alphas.a1_diag, alphas.a2_diag);
      emit_xr_ratio(builder, "xr off " + branch.id, ro, xo, alphas.a1_offdiag, alphas.a2_offdiag);
      if (toggles.dominance_on_r) {
        auto& c = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::DiagonalDominance,
                                         "dom R " + branch.id);
        c.lin = {{ro, 2.0}, {rd, -1.0}};
      }
      if (toggles.dominance_on_x) {
        auto& c = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::DiagonalDominance,
                                         "dom X " + branch.id);
        c.lin = {{xo, 2.0}, {xd, -1.0}};
      }
      // self/mutual: lo * Z_off <= Z_diag <= hi * Z_off
      auto& r_hi = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::SelfMutualRatio,
                                          "sm R hi " + branch.id);
      r_hi.lin = {{rd, 1.0}, {ro, -alphas.a3_r}};
      auto& r_lo = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::SelfMutualRatio,
                                          "sm R lo " + branch.id);
      r_lo.lin = {{ro, alphas.a4_r}, {rd, -1.0}};
      auto& x_hi = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::SelfMutualRatio,
                                          "sm X hi " + branch.id);
      x_hi.lin = {{xd, 1.0}, {xo, -alphas.a3_x}};
      auto& x_lo = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::SelfMutualRatio,
                                          "sm X lo " + branch.id);
      x_lo.lin = {{xo, alphas.a4_x}, {xd, -1.0}};
      break;
    }
    case ImeVariant::Untransposed: {
      // Upper-triangle entries only; the lower triangle aliases them.
      for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) {
          const int r = new_entry_var(builder, VarRole::REntry, branch, phases[i], phases[j], toggles);
          const int x = new_entry_var(builder, VarRole::XEntry, branch, phases[i], phases[j], toggles);
          map.r_var(i, j) = map.r_var(j, i) = r;
          map.x_var(i, j) = map.x_var(j, i) = x;
          const char* kind = (i == j) ? "diag" : "off";
          emit_xr_ratio(builder, std::string("xr ") + kind + " " + branch.id, r, x,
                        (i == j) ? alphas.a1_diag : alphas.a1_offdiag,
                        (i == j) ? alphas.a2_diag : alphas.a2_offdiag);
        }
      // Row diagonal dominance per matrix: Z_pp >= sum_{q != p} Z_pq.
      for (int i = 0; i < 3; ++i) {
        if (toggles.dominance_on_r) {
          auto& c = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::DiagonalDominance,
                                           "dom R " + branch.id + " row " + std::to_string(i));
          c.lin.push_back({map.r_var(i, i), -1.0});
          for (int j = 0; j < 3; ++j)
            if (j != i) c.lin.push_back({map.r_var(i, j), 1.0});
        }
        if (toggles.dominance_on_x) {
          auto& c = builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::DiagonalDominance,
                                           "dom X " + branch.id + " row " + std::to_string(i));
          c.lin.push_back({map.x_var(i, i), -1.0});
          for (int j = 0; j < 3; ++j)
            if (j != i) c.lin.push_back({map.x_var(i, j), 1.0});
        }
      }
      // Self/mutual ratio for every (row, off-diagonal) pair.
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          if (i == j) continue;
          auto tagled = branch.id + " " + std::to_string(i) + std::to_string(j);
          auto& r_hi = builder.add_constraint(ConstraintKind::LessEqual,
                                              ConstraintTag::SelfMutualRatio, "sm R hi " + tagled);
          r_hi.lin = {{map.r_var(i, i), 1.0}, {map.r_var(i, j), -alphas.a3_r}};
          auto& r_lo = builder.add_constraint(ConstraintKind::LessEqual,
                                              ConstraintTag::SelfMutualRatio, "sm R lo " + tagled);
          r_lo.lin = {{map.r_var(i, j), alphas.a4_r}, {map.r_var(i, i), -1.0}};
          auto& x_hi = builder.add_constraint(ConstraintKind::LessEqual,
                                              ConstraintTag::SelfMutualRatio, "sm X hi " + tagled);
          x_hi.lin = {{map.x_var(i, i), 1.0}, {map.x_var(i, j), -alphas.a3_x}};
          auto& x_lo = builder.add_constraint(ConstraintKind::LessEqual,
                                              ConstraintTag::SelfMutualRatio, "sm X lo " + tagled);
          x_lo.lin = {{map.x_var(i, j), alphas.a4_x}, {map.x_var(i, i), -1.0}};
        }
      break;
    }
    case ImeVariant::Diagonal: {
      // Mutual entries are constants (exact zero), not variables.
      for (int i = 0; i < 3; ++i) {
        const int r = new_entry_var(builder, VarRole::REntry, branch, phases[i], phases[i], toggles);
        const int x = new_entry_var(builder, VarRole::XEntry, branch, phases[i], phases[i], toggles);
        map.r_var(i, i) = r;
        map.x_var(i, i) = x;
        emit_xr_ratio(builder, "xr diag " + branch.id + " " + std::to_string(i), r, x, alphas.a1_diag,
                      alphas.a2_diag);
      }
      break;
    }
  }
  return map;
}

}  // namespace impest
