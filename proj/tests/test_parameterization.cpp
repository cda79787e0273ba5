#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "impest/parameterization.hpp"
#include "impest/problem.hpp"

using namespace impest;

namespace {

Branch three_phase_branch() {
  Branch br;
  br.id = "b";
  br.from_bus = "x";
  br.to_bus = "y";
  br.phases = PhaseSet::abc();
  br.impedance = ImpedanceMatrix(Eigen::MatrixXd::Identity(3, 3) * 0.1,
                                 Eigen::MatrixXd::Identity(3, 3) * 0.05, true);
  return br;
}

Branch service_branch() {
  Branch br = three_phase_branch();
  br.phases = PhaseSet::parse("b");
  br.impedance = ImpedanceMatrix::scalar(0.1, 0.01);
  return br;
}

}  // namespace

TEST_CASE("default alphas: transposed values and ordering invariants") {
  AlphaBounds t = default_alphas(AlphaScope::TransposedDefaults);
  CHECK(t.a2_service == doctest::Approx(8.96));
  CHECK(t.a1_service == 16.0);
  CHECK(t.a1_diag == 35.0);
  CHECK(t.a2_diag == doctest::Approx(1.1));
  CHECK(t.a1_offdiag == 130.0);
  CHECK(t.a2_offdiag == 2.0);
  // Self/mutual windows: R in [2, 70], X in [14, 50].
  CHECK(t.a4_r == 2.0);
  CHECK(t.a3_r == 70.0);
  CHECK(t.a4_x == 14.0);
  CHECK(t.a3_x == 50.0);
  CHECK_NOTHROW(t.check());
}

TEST_CASE("loose bounds envelop the transposed defaults") {
  AlphaBounds t = default_alphas(AlphaScope::TransposedDefaults);
  AlphaBounds l = default_alphas(AlphaScope::LooseUntransposed);
  CHECK(l.envelops(t));
  CHECK_FALSE(t.envelops(l));
}

TEST_CASE("random matrices satisfying transposed defaults satisfy loose bounds") {
  AlphaBounds t = default_alphas(AlphaScope::TransposedDefaults);
  AlphaBounds l = default_alphas(AlphaScope::LooseUntransposed);
  std::uint64_t st = 17;
  for (int trial = 0; trial < 200; ++trial) {
    // Sample a transposed-feasible pair of (diag, off) scalars per matrix.
    double rd = fixtures::uniform(st, 0.01, 1.0);
    double ro = rd / fixtures::uniform(st, t.a4_r, t.a3_r);
    double xd = rd / fixtures::uniform(st, t.a2_diag, t.a1_diag);
    double xo = ro / fixtures::uniform(st, t.a2_offdiag, t.a1_offdiag);
    // may violate the X self/mutual window; clamp into it
    xo = std::min(std::max(xo, xd / t.a3_x), xd / t.a4_x);
    auto in_window = [](double self, double mutual, double lo, double hi) {
      return self >= lo * mutual - 1e-12 && self <= hi * mutual + 1e-12;
    };
    REQUIRE(in_window(rd, ro, t.a4_r, t.a3_r));
    CHECK(in_window(rd, ro, l.a4_r, l.a3_r));
    CHECK(in_window(xd, xo, l.a4_x, l.a3_x));
    CHECK(rd <= l.a1_diag * xd);
    CHECK(rd >= l.a2_diag * xd);
  }
}

TEST_CASE("alpha ordering violations are rejected") {
  AlphaBounds bad = default_alphas(AlphaScope::TransposedDefaults);
  bad.a2_service = 20.0;  // above a1_service
  CHECK_THROWS(bad.check());
  AlphaBounds below_one = default_alphas(AlphaScope::TransposedDefaults);
  below_one.a2_diag = 0.5;
  CHECK_THROWS(below_one.check());
}

TEST_CASE("LLE parameterization: substitution scales the nominal matrices") {
  // 2 km of 0.1 ohm/km gives 0.2 ohm through the stored substitution map.
  Branch br = service_branch();
  LleBranchParams params;
  params.r_nom_per_km = Eigen::MatrixXd::Constant(1, 1, 0.1);
  params.x_nom_per_km = Eigen::MatrixXd::Constant(1, 1, 0.01);
  params.length_lb_m = 500.0;
  params.length_ub_m = 4000.0;
  params.length_guess_m = 2250.0;
  NlpProblem p;
  ProblemBuilder builder(p);
  auto map = parameterize_lle(br, params, builder, {0}, true, false);
  REQUIRE(map.length_var >= 0);
  std::vector<double> x(p.n(), 0.0);
  x[map.length_var] = 2.0;  // km
  CHECK(2.0 * map.r_nom(0, 0) == doctest::Approx(0.2));

  SUBCASE("residual is zero at the guess") {
    x[map.length_var] = 2.25;
    double worst = 0.0;
    for (const auto& c : p.constraints) {
      if (c.tag != ConstraintTag::LengthResidual) continue;
      double lhs = 0.0;
      for (const auto& t : c.lin)
        if (p.variables[t.var].role == VarRole::Length) lhs += t.coef * x[t.var];
      worst = std::max(worst, lhs - c.rhs);  // rho at zero
    }
    CHECK(worst == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("residual at the upper bound from a midpoint guess is 1.5") {
    // rho >= 3*(ub - mid)/(ub - lb) = 1.5
    x[map.length_var] = 4.0;
    double needed = 0.0;
    for (const auto& c : p.constraints) {
      if (c.tag != ConstraintTag::LengthResidual) continue;
      double lhs = 0.0;
      for (const auto& t : c.lin)
        if (p.variables[t.var].role == VarRole::Length) lhs += t.coef * x[t.var];
      needed = std::max(needed, lhs - c.rhs);
    }
    CHECK(needed == doctest::Approx(1.5).epsilon(1e-12));
  }
}

TEST_CASE("LLE zero-width bounds excluding the guess are rejected") {
  Branch br = service_branch();
  LleBranchParams params;
  params.r_nom_per_km = Eigen::MatrixXd::Constant(1, 1, 0.1);
  params.x_nom_per_km = Eigen::MatrixXd::Constant(1, 1, 0.01);
  params.length_lb_m = 1000.0;
  params.length_ub_m = 1000.0;
  params.length_guess_m = 1500.0;
  NlpProblem p;
  ProblemBuilder builder(p);
  CHECK_THROWS(parameterize_lle(br, params, builder, {0}, true, false));
}

TEST_CASE("transposed variant emits 4 free scalars, diagonal 6, untransposed 12") {
  CHECK(ImeVariant{ImeVariant::Transposed}.free_scalars_per_three_phase() == 4);
  CHECK(ImeVariant{ImeVariant::Untransposed}.free_scalars_per_three_phase() == 12);
  CHECK(ImeVariant{ImeVariant::Diagonal}.free_scalars_per_three_phase() == 6);

  Branch br = three_phase_branch();
  AlphaBounds alphas = default_alphas(AlphaScope::TransposedDefaults);
  ImeToggles tog;
  tog.entry_ub = 1.0;
  for (auto tag : {ImeVariant::Transposed, ImeVariant::Untransposed, ImeVariant::Diagonal}) {
    NlpProblem p;
    ProblemBuilder builder(p);
    ImeVariant variant{tag};
    parameterize_ime(br, variant, alphas, tog, builder);
    CHECK(p.n() == variant.free_scalars_per_three_phase());
  }
}

TEST_CASE("diagonal variant pins mutual entries to exact zero") {
  Branch br = three_phase_branch();
  NlpProblem p;
  ProblemBuilder builder(p);
  ImeToggles tog;
  tog.entry_ub = 1.0;
  auto map = parameterize_ime(br, ImeVariant{ImeVariant::Diagonal},
                              default_alphas(AlphaScope::TransposedDefaults), tog, builder);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i == j) {
        CHECK(map.r_var(i, j) >= 0);
      } else {
        CHECK(map.r_var(i, j) == -1);
        CHECK(map.r_fixed(i, j) == 0.0);
        CHECK(map.x_fixed(i, j) == 0.0);
      }
    }
}

TEST_CASE("untransposed constraint count matches a hand enumeration") {
  // Per 3x3 branch: X/R ratio two rows per upper-triangle entry pair (6
  // entries -> 12), dominance 3 rows for R and 3 for X, self/mutual two rows
  // per ordered (p, q != p) pair for R and X (6 pairs x 2 x 2 = 24).
  Branch br = three_phase_branch();
  NlpProblem p;
  ProblemBuilder builder(p);
  ImeToggles tog;
  tog.entry_ub = 1.0;
  parameterize_ime(br, ImeVariant{ImeVariant::Untransposed},
                   default_alphas(AlphaScope::LooseUntransposed), tog, builder);
  CHECK(p.count_constraints(ConstraintTag::XrRatio) == 12);
  CHECK(p.count_constraints(ConstraintTag::DiagonalDominance) == 6);
  CHECK(p.count_constraints(ConstraintTag::SelfMutualRatio) == 24);
  CHECK(p.constraints.size() == 12 + 6 + 24);
}

TEST_CASE("structural constraint set implies PSD for feasible transposed matrices") {
  // Nonnegativity + symmetry + diagonal dominance give eigenvalues >= 0.
  std::uint64_t st = 5;
  for (int trial = 0; trial < 100; ++trial) {
    double rd = fixtures::uniform(st, 0.01, 1.0);
    double ro = rd / fixtures::uniform(st, 2.0, 70.0);
    Eigen::MatrixXd R = Eigen::MatrixXd::Constant(3, 3, ro);
    R.diagonal().setConstant(rd);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(R);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-8);
  }
}

TEST_CASE("single-phase branches always get two scalars with service ratios") {
  Branch br = service_branch();
  NlpProblem p;
  ProblemBuilder builder(p);
  ImeToggles tog;
  tog.entry_ub = 1.0;
  parameterize_ime(br, ImeVariant{ImeVariant::Untransposed},
                   default_alphas(AlphaScope::TransposedDefaults), tog, builder);
  CHECK(p.n() == 2);
  CHECK(p.count_constraints(ConstraintTag::XrRatio) == 2);
}
