#include "impest/measurement.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <tuple>

namespace impest {

std::string meas_kind_str(MeasKind k) {
  switch (k) {
    case MeasKind::P: return "P";
    case MeasKind::Q: return "Q";
    case MeasKind::Vmag: return "VM";
  }
  return "?";
}

MeasKind meas_kind_from_str(const std::string& s) {
  if (s == "P") return MeasKind::P;
  if (s == "Q") return MeasKind::Q;
  if (s == "VM") return MeasKind::Vmag;
  throw std::invalid_argument("unknown measurement kind '" + s + "'");
}

std::set<int> MeasurementSet::timesteps() const {
  std::set<int> out;
  for (const auto& s : samples) out.insert(s.timestep);
  return out;
}

const MeasurementSample* MeasurementSet::find(const std::string& user, int t, MeasKind kind,
                                              Phase phase) const {
  for (const auto& s : samples)
    if (s.user_id == user && s.timestep == t && s.kind == kind && s.phase == phase) return &s;
  return nullptr;
}

double NoiseModel::sigma_for(MeasKind kind, double reading, double pq_reference) const {
  double basis_value = 0.0;
  if (basis == NoiseBasis::RelativeToReading) {
    basis_value = std::abs(reading);
  } else {
    basis_value = (kind == MeasKind::Vmag) ? vmag_reference_v
                                           : pq_reference_va.value_or(pq_reference);
  }
  return accuracy_class / 3.0 * basis_value;
}

double derive_reactive(double p_w, double cos_phi) {
  if (!(cos_phi > 0.0) || cos_phi > 1.0)
    throw std::invalid_argument("cos_phi must be in (0, 1]");
  return p_w * std::tan(std::acos(cos_phi));
}

namespace {

// splitmix64; stable across platforms unlike std::normal_distribution.
std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// One standard normal draw from a counter-based stream keyed by the sample.
double normal_draw(std::uint64_t seed, const MeasurementSample& s) {
  std::uint64_t key = seed;
  key = mix64(key ^ fnv1a(s.user_id));
  key = mix64(key ^ static_cast<std::uint64_t>(s.timestep));
  key = mix64(key ^ (static_cast<std::uint64_t>(s.kind) << 8 | static_cast<std::uint64_t>(s.phase)));
  // Box-Muller on two uniforms derived from the key.
  std::uint64_t a = mix64(key);
  std::uint64_t b = mix64(a);
  double u1 = (static_cast<double>(a >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  double u2 = static_cast<double>(b >> 11) * (1.0 / 9007199254740992.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

MeasurementSet add_noise(const MeasurementSet& clean, const NoiseModel& model) {
  if (model.accuracy_class < 0) throw std::invalid_argument("accuracy_class must be >= 0");

  // Per-user max |P| as the default P/Q reference.
  std::map<std::string, double> pmax;
  for (const auto& s : clean.samples)
    if (s.kind == MeasKind::P) pmax[s.user_id] = std::max(pmax[s.user_id], std::abs(s.value));

  MeasurementSet out = clean;
  for (auto& s : out.samples) {
    double ref = pmax.count(s.user_id) ? pmax[s.user_id] : 0.0;
    double sigma = model.sigma_for(s.kind, s.value, ref);
    if (sigma > 0) s.value += sigma * normal_draw(model.seed, s);
    s.sigma = sigma;
  }
  return out;
}

AggregateResult aggregate(const MeasurementSet& five_min) {
  // Bucket samples by (user, kind, phase), then group timesteps 3 at a time.
  struct Key {
    std::string user;
    MeasKind kind;
    Phase phase;
    bool operator<(const Key& o) const {
      return std::tie(user, kind, phase) < std::tie(o.user, o.kind, o.phase);
    }
  };
  std::map<Key, std::map<int, const MeasurementSample*>> series;
  for (const auto& s : five_min.samples) series[{s.user_id, s.kind, s.phase}][s.timestep] = &s;

  AggregateResult result;
  result.set.timestep_minutes = 15.0;
  result.set.provenance = five_min.provenance;
  std::set<int> dropped;
  for (const auto& [key, by_t] : series) {
    if (by_t.empty()) continue;
    int t_max = by_t.rbegin()->first;
    for (int g = 0; g <= t_max / 3; ++g) {
      const MeasurementSample* in[3] = {nullptr, nullptr, nullptr};
      int have = 0;
      for (int k = 0; k < 3; ++k) {
        auto it = by_t.find(3 * g + k);
        if (it != by_t.end()) in[have++] = it->second;
      }
      if (have == 0) continue;
      if (have < 3) {
        dropped.insert(g);
        continue;
      }
      MeasurementSample s = *in[0];
      s.timestep = g;
      s.value = (in[0]->value + in[1]->value + in[2]->value) / 3.0;
      s.sigma = std::sqrt(in[0]->sigma * in[0]->sigma + in[1]->sigma * in[1]->sigma +
                          in[2]->sigma * in[2]->sigma) /
                3.0;
      result.set.samples.push_back(s);
    }
  }
  result.dropped_groups.assign(dropped.begin(), dropped.end());
  return result;
}

SelectResult select_steps(const MeasurementSet& ms, const Feeder& feeder, int n) {
  auto steps = ms.timesteps();
  if (n > static_cast<int>(steps.size()))
    throw std::invalid_argument("cannot select more timesteps than available");

  // Metered user phases that must carry a Vmag sample for a step to count.
  std::vector<std::pair<std::string, Phase>> required;
  for (const auto& u : feeder.users)
    if (u.metered)
      for (Phase p : u.phases) required.emplace_back(u.id, p);

  // Vmag index: (user, phase, t) -> value.
  std::map<std::tuple<std::string, int, int>, double> vmag;
  for (const auto& s : ms.samples)
    if (s.kind == MeasKind::Vmag)
      vmag[{s.user_id, static_cast<int>(s.phase), s.timestep}] = s.value;

  const double v_nom = feeder.base_voltage_v;
  SelectResult result;
  std::vector<std::pair<double, int>> drops;  // (-drop, t) for stable ordering
  for (int t : steps) {
    double drop = -std::numeric_limits<double>::infinity();
    bool missing = false;
    for (const auto& [user, phase] : required) {
      auto it = vmag.find({user, static_cast<int>(phase), t});
      if (it == vmag.end()) {
        missing = true;
        break;
      }
      drop = std::max(drop, v_nom - it->second);
    }
    if (missing) {
      result.excluded_timesteps.push_back(t);
      continue;
    }
    drops.emplace_back(-drop, t);
  }
  if (n > static_cast<int>(drops.size()))
    throw std::invalid_argument("not enough complete timesteps after exclusions");
  std::sort(drops.begin(), drops.end());
  std::set<int> keep;
  for (int i = 0; i < n; ++i) keep.insert(drops[i].second);

  result.set.timestep_minutes = ms.timestep_minutes;
  result.set.provenance = ms.provenance;
  for (const auto& s : ms.samples)
    if (keep.count(s.timestep)) result.set.samples.push_back(s);
  return result;
}

std::pair<MeasurementSet, MeasurementSet> split(const MeasurementSet& ms,
                                                const std::set<int>& train_steps,
                                                const std::set<int>& validation_steps) {
  for (int t : train_steps)
    if (validation_steps.count(t))
      throw std::invalid_argument("train and validation step sets overlap at timestep " +
                                  std::to_string(t));
  MeasurementSet train, val;
  train.timestep_minutes = val.timestep_minutes = ms.timestep_minutes;
  train.provenance = val.provenance = ms.provenance;
  for (const auto& s : ms.samples) {
    if (train_steps.count(s.timestep)) train.samples.push_back(s);
    else if (validation_steps.count(s.timestep)) val.samples.push_back(s);
  }
  return {train, val};
}

MeasurementSet load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open measurement file '" + path + "'");
  MeasurementSet out;
  std::string line;
  int lineno = 0;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  ++lineno;
  if (line != "user_id,timestep,kind,phase,value,sigma")
    throw std::runtime_error(path + ":1: bad header, expected user_id,timestep,kind,phase,value,sigma");
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 6)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 6 fields, got " +
                               std::to_string(fields.size()));
    try {
      MeasurementSample s;
      s.user_id = fields[0];
      s.timestep = std::stoi(fields[1]);
      s.kind = meas_kind_from_str(fields[2]);
      if (fields[3].size() != 1) throw std::invalid_argument("phase");
      s.phase = phase_from_char(fields[3][0]);
      s.value = std::stod(fields[4]);
      s.sigma = std::stod(fields[5]);
      out.samples.push_back(s);
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_csv(const MeasurementSet& ms, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write measurement file '" + path + "'");
  out << "user_id,timestep,kind,phase,value,sigma\n";
  out.precision(17);
  for (const auto& s : ms.samples)
    out << s.user_id << ',' << s.timestep << ',' << meas_kind_str(s.kind) << ','
        << phase_char(s.phase) << ',' << s.value << ',' << s.sigma << "\n";
}

}  // namespace impest
