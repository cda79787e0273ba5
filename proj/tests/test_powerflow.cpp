#include <doctest.h>

#include <cmath>
#include <complex>

#include "fixtures.hpp"
#include "impest/powerflow.hpp"

using namespace impest;

TEST_CASE("zero injections give a flat profile at the source phasor") {
  Feeder f = fixtures::synthetic_lv({});
  InjectionSpec inj;
  for (const auto& u : f.users)
    for (Phase p : u.phases) inj.set(u.id, p, 0, 0.0, 0.0);
  auto src = balanced_source(230.0);
  auto sol = solve(f, inj, src);
  for (const auto& bus : f.buses) {
    const auto& v = sol.steps[0].bus_voltage_v.at(bus.id);
    for (Phase p : bus.phases) {
      auto expect = src[static_cast<int>(p)];
      CHECK(std::abs(v[bus.phases.index_of(p)] - expect) < 1e-9);
    }
  }
}

TEST_CASE("two-bus constant-current load drops exactly IR") {
  Feeder f = fixtures::two_bus(1.0, 0.0);
  InjectionSpec inj;
  inj.set("u1", Phase::A, 0, 230.0, 0.0, LoadModel::ConstantCurrent);  // 1 A at 230 V nominal
  auto sol = solve(f, inj, balanced_source(230.0));
  auto v = sol.steps[0].bus_voltage_v.at("b1")[0];
  CHECK(std::abs(v) == doctest::Approx(229.0).epsilon(1e-10));
}

TEST_CASE("two-bus constant-power load satisfies the power equations") {
  Feeder f = fixtures::two_bus(0.5, 0.2);
  InjectionSpec inj;
  inj.set("u1", Phase::A, 0, 2000.0, 500.0);
  auto sol = solve(f, inj, balanced_source(230.0));
  auto v = sol.steps[0].bus_voltage_v.at("b1")[0];
  auto i = sol.steps[0].user_current_a.at("u1")[0];
  std::complex<double> s = v * std::conj(i);
  CHECK(s.real() == doctest::Approx(2000.0).epsilon(1e-8));
  CHECK(s.imag() == doctest::Approx(500.0).epsilon(1e-8));
}

TEST_CASE("DC trunk fixture reproduces the published meter readings") {
  Feeder f = fixtures::dc_trunk();
  InjectionSpec inj;
  inj.set("u1", Phase::A, 0, 230.0, 0.0, LoadModel::ConstantCurrent);  // 1 A
  inj.set("u2", Phase::A, 0, 460.0, 0.0, LoadModel::ConstantCurrent);  // 2 A
  // Source level chosen so the meters read 230 V and 228 V with unit lengths.
  auto src = balanced_source(238.0);
  auto sol = solve(f, inj, src);
  CHECK(std::abs(sol.steps[0].bus_voltage_v.at("m1")[0]) == doctest::Approx(230.0).epsilon(1e-9));
  CHECK(std::abs(sol.steps[0].bus_voltage_v.at("m2")[0]) == doctest::Approx(228.0).epsilon(1e-9));
}

TEST_CASE("complex power balances source = loads + losses each timestep") {
  fixtures::SyntheticSpec spec;
  spec.n_trunk = 6;
  spec.n_users = 9;
  spec.seed = 11;
  Feeder f = fixtures::synthetic_lv(spec);
  auto profiles = fixtures::load_profiles(f, 4, 13);
  InjectionSpec inj;
  for (std::size_t u = 0; u < f.users.size(); ++u)
    for (Phase p : f.users[u].phases)
      for (int t = 0; t < 4; ++t)
        inj.set(f.users[u].id, p, t, profiles[u][t], derive_reactive(profiles[u][t], 0.97));
  auto sol = solve(f, inj, balanced_source(230.0));
  const double s_scale = f.base_power_va;
  for (const auto& step : sol.steps) {
    auto gap = power_balance_va(f, step);
    CHECK(std::abs(gap) / s_scale < 1e-8);
  }
}

TEST_CASE("phase permutation equivariance on a balanced feeder") {
  // Balanced three-phase feeder, identical load per phase: rotating the
  // source angles by one phase rotates the solution identically.
  fixtures::SyntheticSpec spec;
  spec.n_trunk = 4;
  spec.n_users = 3;
  spec.seed = 21;
  Feeder f = fixtures::synthetic_lv(spec);
  // Make all users identical three-phase loads.
  for (auto& u : f.users) u.phases = PhaseSet::abc();
  for (auto& b : f.buses)
    if (b.id.rfind("u", 0) == 0) b.phases = PhaseSet::abc();
  for (auto& br : f.branches)
    if (br.id.rfind("svc", 0) == 0) {
      br.phases = PhaseSet::abc();
      double r = br.impedance.R(0, 0), x = br.impedance.X(0, 0);
      br.impedance = ImpedanceMatrix(r * Eigen::MatrixXd::Identity(3, 3),
                                     x * Eigen::MatrixXd::Identity(3, 3), true);
      br.linecode.reset();
      br.length_m.reset();
    }
  InjectionSpec inj;
  for (const auto& u : f.users)
    for (Phase p : u.phases) inj.set(u.id, p, 0, 1500.0, 300.0);

  auto src = balanced_source(230.0);
  auto sol = solve(f, inj, src);
  // Rotate source phases a->b->c->a.
  std::array<std::complex<double>, 3> rotated{src[2], src[0], src[1]};
  auto sol_rot = solve(f, inj, rotated);
  for (const auto& bus : f.buses) {
    if (bus.phases.size() != 3) continue;
    const auto& v = sol.steps[0].bus_voltage_v.at(bus.id);
    const auto& w = sol_rot.steps[0].bus_voltage_v.at(bus.id);
    CHECK(std::abs(w[1] - v[0]) < 1e-7);
    CHECK(std::abs(w[2] - v[1]) < 1e-7);
    CHECK(std::abs(w[0] - v[2]) < 1e-7);
  }
}

TEST_CASE("residual norm reflects solution quality") {
  Feeder f = fixtures::two_bus(1.0, 0.0);
  InjectionSpec inj;
  inj.set("u1", Phase::A, 0, 230.0, 0.0, LoadModel::ConstantCurrent);
  auto src = balanced_source(230.0);
  auto sol = solve(f, inj, src);
  CHECK(residual_norm(f, sol, inj, src) <= 1e-8);

  SUBCASE("perturbing one voltage by 1e-3 pu lifts the residual above 1e-4") {
    auto bad = sol;
    bad.steps[0].bus_voltage_v["b1"][0] += 230.0 * 1e-3;
    CHECK(residual_norm(f, bad, inj, src) >= 1e-4);
  }
  SUBCASE("zero currents with a nonzero load violate by the load current") {
    auto zero = sol;
    zero.steps[0].branch_current_a["l1"][0] = 0.0;
    zero.steps[0].user_current_a["u1"][0] = 0.0;
    for (auto& [bus, v] : zero.steps[0].bus_voltage_v) v[0] = src[0];
    const double i_pu = 1.0 / f.i_base_a();
    CHECK(residual_norm(f, zero, inj, src) == doctest::Approx(i_pu).epsilon(1e-9));
  }
}

TEST_CASE("non-convergence raises a PowerFlowError") {
  Feeder f = fixtures::two_bus(8.0, 0.0);  // load beyond maximum power transfer
  InjectionSpec inj;
  inj.set("u1", Phase::A, 0, 4000.0, 0.0);
  PowerFlowOptions opts;
  opts.max_iter = 40;
  CHECK_THROWS_AS(solve(f, inj, balanced_source(230.0), opts), PowerFlowError);
}
