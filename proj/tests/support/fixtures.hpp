#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "impest/measurement.hpp"
#include "impest/network.hpp"
#include "impest/powerflow.hpp"

namespace impest::fixtures {

/// Deterministic uniform double in [lo, hi) from a splitmix-style stream.
double uniform(std::uint64_t& state, double lo, double hi);

/// Two-bus single-phase feeder: source --(r + jx)-- user bus with one user.
Feeder two_bus(double r_ohm = 1.0, double x_ohm = 0.0, double base_power_va = 3000.0,
               double base_voltage_v = 230.0);

/// Radial chain of n buses on phase a with per-branch impedances drawn from
/// the seed; one metered user at the far end, optional mid-chain users.
Feeder chain(int n_buses, std::uint64_t seed, bool users_mid_chain = false);

/// DC trunk fixture for the multiple-solutions demonstration: the two trunk
/// segments carry unknown lengths; both users tap the trunk end through known
/// service cables. Unit resistance per km, zero reactance.
Feeder dc_trunk();

/// Tee-shaped DC fixture matching the cumulative-impedance walkthrough:
/// source -R0- n1 (user u1 via R1p), n1 -R2- n2 (user u2 via R2p).
Feeder dc_tee(double r0 = 1.0, double r2 = 1.0, double r1p = 1.0, double r2p = 1.0);

struct SyntheticSpec {
  int n_trunk = 8;                 // three-phase trunk buses after the source
  int n_users = 8;                 // users hanging off the trunk
  int three_phase_every = 0;       // every k-th user is three-phase (0: none)
  std::uint64_t seed = 1;
  bool transposed = true;          // trunk matrices transposed-structured
  double base_power_va = 10000.0;
  double base_voltage_v = 230.0;
  bool with_linecodes = true;      // lengths + linecodes for LLE
};

/// Synthetic LV feeder: three-phase trunk with single-phase service drops,
/// impedances consistent with the default structural bounds.
Feeder synthetic_lv(const SyntheticSpec& spec);

/// ELTF-shaped fixture: skeleton with `reduced_buses` retained buses expanded
/// with superfluous junctions to exactly `total_buses`.
Feeder eltf_like(int total_buses = 906, int reduced_buses = 109, int n_users = 55,
                 std::uint64_t seed = 7);

/// Copy with every branch length scaled by a random factor in [lo, hi] and
/// the impedance rescaled consistently (a wrong GIS record of a true feeder).
Feeder with_perturbed_lengths(const Feeder& feeder, double lo, double hi, std::uint64_t seed);

/// Smooth household-style load profiles (W) per user and 5-min timestep.
std::vector<std::vector<double>> load_profiles(const Feeder& feeder, int n_steps,
                                               std::uint64_t seed, double peak_w = 2000.0);

/// Runs power flow over the profiles (cos_phi reactive) and emits the exact
/// P/Q/Vmag samples per metered user phase, SI units, sigma zero.
MeasurementSet exact_measurements(const Feeder& feeder,
                                  const std::vector<std::vector<double>>& profiles_w,
                                  double cos_phi = 0.97, double load_scale = 1.0);

/// Injections reconstructed from P/Q samples of a measurement set.
InjectionSpec injections_from_measurements(const MeasurementSet& ms, const Feeder& feeder);

}  // namespace impest::fixtures
