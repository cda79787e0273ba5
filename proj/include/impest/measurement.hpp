#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "impest/network.hpp"

namespace impest {

enum class MeasKind { P, Q, Vmag };

std::string meas_kind_str(MeasKind k);
MeasKind meas_kind_from_str(const std::string& s);

struct MeasurementSample {
  std::string user_id;
  int timestep = 0;
  MeasKind kind = MeasKind::P;
  Phase phase = Phase::A;
  double value = 0.0;  // W / var / V
  double sigma = 0.0;  // same unit
};

struct MeasurementSet {
  std::vector<MeasurementSample> samples;
  double timestep_minutes = 15.0;
  std::string provenance = "synthetic";  // or "imported"

  std::set<int> timesteps() const;
  const MeasurementSample* find(const std::string& user, int t, MeasKind kind, Phase phase) const;
};

enum class NoiseBasis { RelativeToReading, RelativeToReference };

struct NoiseModel {
  double accuracy_class = 0.005;
  NoiseBasis basis = NoiseBasis::RelativeToReference;
  // Reference values per kind (used with RelativeToReference). Vmag reference
  // is the nominal voltage; P/Q reference defaults to the per-user maximum |P|
  // unless overridden here.
  double vmag_reference_v = 230.0;
  std::optional<double> pq_reference_va;
  std::uint64_t seed = 0;

  /// sigma = accuracy_class / 3 * basis value ("one third of the maximum error").
  double sigma_for(MeasKind kind, double reading, double pq_reference) const;
};

/// Q = P * tan(acos(cos_phi)); cos_phi in (0, 1].
double derive_reactive(double p_w, double cos_phi);

/// Adds independent N(0, sigma^2) noise to every sample and stores sigma on
/// it. The RNG stream is split per (user, timestep, kind, phase), so the
/// output is independent of iteration order and bit-reproducible per seed.
MeasurementSet add_noise(const MeasurementSet& clean, const NoiseModel& model);

struct AggregateResult {
  MeasurementSet set;
  std::vector<int> dropped_groups;  // 15-min output indices lost to incomplete input
};

/// Averages groups of 3 consecutive 5-minute samples into 15-minute values;
/// sigma_out = sqrt(sum sigma_i^2) / 3 (= sigma/sqrt(3) for equal sigmas).
AggregateResult aggregate(const MeasurementSet& five_min);

struct SelectResult {
  MeasurementSet set;
  std::vector<int> excluded_timesteps;  // missing a Vmag sample
};

/// Keeps the n timesteps maximizing the worst metered-user voltage drop
/// (nominal minus measured Vmag); ties break toward the lower timestep index.
SelectResult select_steps(const MeasurementSet& ms, const Feeder& feeder, int n);

/// Partition by explicit timestep index sets; the sets must be disjoint.
std::pair<MeasurementSet, MeasurementSet> split(const MeasurementSet& ms,
                                                const std::set<int>& train_steps,
                                                const std::set<int>& validation_steps);

/// CSV schema: user_id,timestep,kind,phase,value,sigma with kind in {P,Q,VM}.
MeasurementSet load_csv(const std::string& path);
void save_csv(const MeasurementSet& ms, const std::string& path);

}  // namespace impest
