#pragma once

#include <complex>
#include <map>
#include <string>
#include <vector>

#include "impest/network.hpp"

namespace impest {

enum class LoadModel { ConstantPower, ConstantCurrent };

/// Per-user per-phase P/Q series over timesteps. Constant-current entries are
/// interpreted at nominal voltage: I = conj((P+jQ)/V_nom) with the source
/// phasor angle of that phase.
struct InjectionSpec {
  struct Entry {
    Phase phase;
    LoadModel model = LoadModel::ConstantPower;
    std::vector<double> p_w;
    std::vector<double> q_var;
  };

  int n_timesteps = 0;
  std::map<std::string, std::vector<Entry>> by_user;

  void set(const std::string& user_id, Phase phase, int t, double p_w, double q_var,
           LoadModel model = LoadModel::ConstantPower);
  const Entry* find(const std::string& user_id, Phase phase) const;
};

/// Balanced per-phase source phasors with angles {0, -120, +120} degrees.
std::array<std::complex<double>, 3> balanced_source(double v_mag);

struct TimestepState {
  std::map<std::string, std::vector<std::complex<double>>> bus_voltage_v;     // per bus PhaseSet order
  std::map<std::string, std::vector<std::complex<double>>> branch_current_a;  // from->to direction
  std::map<std::string, std::vector<std::complex<double>>> user_current_a;    // bus->user direction
  bool converged = false;
  int iterations = 0;
};

struct StateSolution {
  std::vector<TimestepState> steps;
};

struct PowerFlowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PowerFlowOptions {
  double tol = 1e-8;  // p.u., infinity norm of all residuals
  int max_iter = 50;
  bool parallel = true;  // independent timesteps may solve concurrently
};

/// Newton-Raphson on the rectangular current-voltage residual system. Throws
/// PowerFlowError on non-convergence or a singular Jacobian (message names the
/// iteration and the worst-residual bus).
StateSolution solve(const Feeder& feeder, const InjectionSpec& injections,
                    const std::array<std::complex<double>, 3>& source_voltage,
                    const PowerFlowOptions& opts = {});

/// Infinity norm over all KCL / Ohm / load-model residuals, in per-unit.
double residual_norm(const Feeder& feeder, const StateSolution& state, const InjectionSpec& injections,
                     const std::array<std::complex<double>, 3>& source_voltage);

/// Complex power balance for one timestep: source injection minus loads minus
/// series losses, in VA. Near zero for exact solutions.
std::complex<double> power_balance_va(const Feeder& feeder, const TimestepState& state);

}  // namespace impest
