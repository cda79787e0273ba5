#include "impest/network.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace impest {

using nlohmann::json;

const Bus* Feeder::find_bus(const std::string& id) const {
  for (const auto& b : buses)
    if (b.id == id) return &b;
  return nullptr;
}

const Branch* Feeder::find_branch(const std::string& id) const {
  for (const auto& b : branches)
    if (b.id == id) return &b;
  return nullptr;
}

const User* Feeder::find_user(const std::string& id) const {
  for (const auto& u : users)
    if (u.id == id) return &u;
  return nullptr;
}

int Feeder::bus_index(const std::string& id) const {
  for (std::size_t i = 0; i < buses.size(); ++i)
    if (buses[i].id == id) return static_cast<int>(i);
  return -1;
}

const Bus& Feeder::source_bus() const {
  const Bus* src = nullptr;
  for (const auto& b : buses) {
    if (b.kind == BusKind::Source) {
      if (src) throw std::runtime_error("feeder has multiple source buses");
      src = &b;
    }
  }
  if (!src) throw std::runtime_error("feeder has no source bus");
  return *src;
}

bool Feeder::has_user_at(const std::string& bus_id) const {
  for (const auto& u : users)
    if (u.bus == bus_id) return true;
  return false;
}

int Feeder::degree(const std::string& bus_id) const {
  int d = 0;
  for (const auto& b : branches)
    if (b.from_bus == bus_id || b.to_bus == bus_id) ++d;
  return d;
}

namespace {

bool matrix_finite(const Eigen::MatrixXd& m) {
  return m.allFinite();
}

bool connected(const Feeder& f) {
  if (f.buses.empty()) return false;
  std::unordered_map<std::string, std::vector<std::string>> adj;
  for (const auto& br : f.branches) {
    adj[br.from_bus].push_back(br.to_bus);
    adj[br.to_bus].push_back(br.from_bus);
  }
  std::set<std::string> seen{f.buses.front().id};
  std::deque<std::string> queue{f.buses.front().id};
  while (!queue.empty()) {
    auto cur = queue.front();
    queue.pop_front();
    for (const auto& nxt : adj[cur])
      if (seen.insert(nxt).second) queue.push_back(nxt);
  }
  return seen.size() == f.buses.size();
}

}  // namespace

ValidationOutcome validate(const Feeder& feeder) {
  ValidationOutcome out;
  auto add = [&](const std::string& entity, const std::string& msg) {
    out.push_back({entity, msg});
  };

  if (feeder.base_power_va <= 0) add("feeder", "base_power_va must be positive");
  if (feeder.base_voltage_v <= 0) add("feeder", "base_voltage_v must be positive");

  std::set<std::string> bus_ids, branch_ids, user_ids;
  int sources = 0;
  for (const auto& b : feeder.buses) {
    if (!bus_ids.insert(b.id).second) add(b.id, "duplicate bus id");
    if (b.phases.empty()) add(b.id, "empty phase set");
    if (b.kind == BusKind::Source) ++sources;
  }
  if (sources == 0) add("feeder", "no source bus");
  if (sources > 1) add("feeder", "multiple sources");

  for (const auto& br : feeder.branches) {
    if (!branch_ids.insert(br.id).second) add(br.id, "duplicate branch id");
    if (br.from_bus == br.to_bus) add(br.id, "from_bus equals to_bus");
    const Bus* from = feeder.find_bus(br.from_bus);
    const Bus* to = feeder.find_bus(br.to_bus);
    if (!from) add(br.id, "unknown from_bus '" + br.from_bus + "'");
    if (!to) add(br.id, "unknown to_bus '" + br.to_bus + "'");
    if (from && !from->phases.contains_all(br.phases)) add(br.id, "phase mismatch with bus " + from->id);
    if (to && !to->phases.contains_all(br.phases)) add(br.id, "phase mismatch with bus " + to->id);

    const int n = br.phases.size();
    if (br.impedance.dim() != n) add(br.id, "impedance dimension does not match phase count");
    if (n != 1 && n != 3) add(br.id, "branch phase count must be 1 or 3");
    if (!matrix_finite(br.impedance.R) || !matrix_finite(br.impedance.X)) add(br.id, "non-finite impedance entry");
    if (br.impedance.symmetric) {
      if (br.impedance.R != br.impedance.R.transpose() || br.impedance.X != br.impedance.X.transpose())
        add(br.id, "impedance tagged symmetric but entries differ");
    }
    if (br.linecode && br.length_m) {
      auto it = feeder.linecodes.find(*br.linecode);
      if (it == feeder.linecodes.end()) {
        add(br.id, "unknown linecode '" + *br.linecode + "'");
      } else if (br.impedance.dim() == it->second.r_ohm_per_km.rows()) {
        const double km = *br.length_m / 1000.0;
        const double scale = std::max(1.0, km * it->second.r_ohm_per_km.cwiseAbs().maxCoeff());
        if ((br.impedance.R - km * it->second.r_ohm_per_km).cwiseAbs().maxCoeff() > 1e-9 * scale ||
            (br.impedance.X - km * it->second.x_ohm_per_km).cwiseAbs().maxCoeff() > 1e-9 * scale)
          add(br.id, "impedance does not equal length times linecode matrices");
      } else {
        add(br.id, "linecode dimension does not match branch phases");
      }
    }
  }

  for (const auto& u : feeder.users) {
    if (!user_ids.insert(u.id).second) add(u.id, "duplicate user id");
    const Bus* bus = feeder.find_bus(u.bus);
    if (!bus) {
      add(u.id, "unknown bus '" + u.bus + "'");
      continue;
    }
    if (!bus->phases.contains_all(u.phases)) add(u.id, "phase mismatch with bus " + bus->id);
    // Metered users are expected at leaves of the reduced graph; warn only.
    if (u.metered && feeder.degree(u.bus) > 1)
      add(u.id, "warning: metered user bus '" + u.bus + "' is not a leaf");
  }

  if (!feeder.buses.empty() && !connected(feeder)) add("feeder", "graph not connected");
  return out;
}

bool is_warning(const Violation& v) { return v.message.rfind("warning:", 0) == 0; }

ValidationOutcome errors_only(const ValidationOutcome& outcome) {
  ValidationOutcome out;
  for (const auto& v : outcome)
    if (!is_warning(v)) out.push_back(v);
  return out;
}

Feeder reduce(const Feeder& feeder) {
  Feeder f = feeder;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& bus : f.buses) {
      if (bus.kind != BusKind::Junction) continue;
      if (f.has_user_at(bus.id)) continue;
      std::vector<std::size_t> incident;
      for (std::size_t i = 0; i < f.branches.size(); ++i)
        if (f.branches[i].from_bus == bus.id || f.branches[i].to_bus == bus.id) incident.push_back(i);
      if (incident.size() != 2) continue;
      Branch& a = f.branches[incident[0]];
      Branch& b = f.branches[incident[1]];
      if (a.phases != b.phases) continue;  // only identical PhaseSets merge

      // Orient a as (x -> bus), b as (bus -> y). Series impedance is direction
      // independent for this branch model, so flipping only renames endpoints.
      std::string x = (a.to_bus == bus.id) ? a.from_bus : a.to_bus;
      std::string y = (b.from_bus == bus.id) ? b.to_bus : b.from_bus;
      if (x == y) continue;  // parallel pair; not a series chain

      Branch merged;
      merged.id = a.id;
      merged.from_bus = x;
      merged.to_bus = y;
      merged.phases = a.phases;
      merged.impedance = a.impedance + b.impedance;
      if (a.length_m && b.length_m) merged.length_m = *a.length_m + *b.length_m;
      if (a.linecode && b.linecode && *a.linecode == *b.linecode && merged.length_m)
        merged.linecode = a.linecode;

      const std::string bus_id = bus.id;
      std::size_t hi = std::max(incident[0], incident[1]);
      std::size_t lo = std::min(incident[0], incident[1]);
      f.branches.erase(f.branches.begin() + hi);
      f.branches.erase(f.branches.begin() + lo);
      f.branches.insert(f.branches.begin() + lo, merged);
      f.buses.erase(std::find_if(f.buses.begin(), f.buses.end(),
                                 [&](const Bus& bb) { return bb.id == bus_id; }));
      changed = true;
      break;
    }
  }
  return f;
}

namespace {

// Parent pointers of the tree rooted at the source; errors if meshed.
struct Tree {
  std::unordered_map<std::string, std::string> parent;       // bus -> parent bus
  std::unordered_map<std::string, const Branch*> up_branch;  // bus -> branch toward source
};

Tree spanning_tree(const Feeder& f) {
  if (f.branches.size() + 1 != f.buses.size())
    throw std::runtime_error("feeder is meshed: path to source is not unique");
  Tree tree;
  std::unordered_map<std::string, std::vector<const Branch*>> adj;
  for (const auto& br : f.branches) {
    adj[br.from_bus].push_back(&br);
    adj[br.to_bus].push_back(&br);
  }
  const std::string root = f.source_bus().id;
  std::set<std::string> seen{root};
  std::deque<std::string> queue{root};
  while (!queue.empty()) {
    auto cur = queue.front();
    queue.pop_front();
    for (const Branch* br : adj[cur]) {
      const std::string& other = (br->from_bus == cur) ? br->to_bus : br->from_bus;
      if (seen.insert(other).second) {
        tree.parent[other] = cur;
        tree.up_branch[other] = br;
        queue.push_back(other);
      }
    }
  }
  return tree;
}

}  // namespace

CumulativeImpedance cumulative_impedance(const Feeder& feeder, const User& user) {
  Tree tree = spanning_tree(feeder);
  const std::string root = feeder.source_bus().id;
  if (!tree.parent.count(user.bus) && user.bus != root)
    throw std::runtime_error("user bus '" + user.bus + "' not reachable from source");

  CumulativeImpedance cum;
  auto user_phases = user.phases;
  cum.r_ohm.assign(user_phases.size(), 0.0);
  cum.x_ohm.assign(user_phases.size(), 0.0);

  std::string cur = user.bus;
  while (cur != root) {
    const Branch* br = tree.up_branch.at(cur);
    int k = 0;
    for (Phase p : user_phases) {
      if (br->phases.contains(p)) {
        int i = br->phases.index_of(p);
        cum.r_ohm[k] += br->impedance.R(i, i);
        cum.x_ohm[k] += br->impedance.X(i, i);
      }
      ++k;
    }
    cur = tree.parent.at(cur);
  }
  return cum;
}

namespace {

Feeder scale_impedances(const Feeder& feeder, double k) {
  Feeder f = feeder;
  for (auto& br : f.branches) br.impedance = br.impedance.scaled(k);
  for (auto& [name, lc] : f.linecodes) {
    lc.r_ohm_per_km *= k;
    lc.x_ohm_per_km *= k;
  }
  return f;
}

}  // namespace

Feeder to_per_unit(const Feeder& feeder) {
  if (feeder.base_power_va <= 0 || feeder.base_voltage_v <= 0)
    throw std::invalid_argument("per-unit conversion requires positive bases");
  return scale_impedances(feeder, 1.0 / feeder.z_base_ohm());
}

Feeder from_per_unit(const Feeder& feeder) {
  if (feeder.base_power_va <= 0 || feeder.base_voltage_v <= 0)
    throw std::invalid_argument("per-unit conversion requires positive bases");
  return scale_impedances(feeder, feeder.z_base_ohm());
}

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw std::runtime_error(what + ": expected array of arrays");
  const auto rows = j.size();
  const auto cols = j[0].size();
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    if (j[i].size() != cols) throw std::runtime_error(what + ": ragged matrix");
    for (std::size_t k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

std::string kind_str(BusKind k) {
  switch (k) {
    case BusKind::Source: return "source";
    case BusKind::Junction: return "junction";
    case BusKind::UserConnection: return "user_connection";
  }
  return "junction";
}

BusKind kind_from_str(const std::string& s) {
  if (s == "source") return BusKind::Source;
  if (s == "junction") return BusKind::Junction;
  if (s == "user_connection") return BusKind::UserConnection;
  throw std::runtime_error("unknown bus kind '" + s + "'");
}

}  // namespace

std::string feeder_to_json_string(const Feeder& feeder) {
  json j;
  j["base_power_va"] = feeder.base_power_va;
  j["base_voltage_v"] = feeder.base_voltage_v;
  json buses = json::array();
  for (const auto& b : feeder.buses) {
    json jb{{"id", b.id}, {"phases", b.phases.str()}, {"kind", kind_str(b.kind)}};
    if (b.base_voltage_v > 0) jb["base_voltage_v"] = b.base_voltage_v;
    buses.push_back(jb);
  }
  j["buses"] = buses;
  json branches = json::array();
  for (const auto& br : feeder.branches) {
    json jb{{"id", br.id},
            {"from", br.from_bus},
            {"to", br.to_bus},
            {"phases", br.phases.str()},
            {"r_ohm", matrix_to_json(br.impedance.R)},
            {"x_ohm", matrix_to_json(br.impedance.X)}};
    if (br.impedance.symmetric) jb["symmetric"] = true;
    if (br.length_m) jb["length_m"] = *br.length_m;
    if (br.linecode) jb["linecode"] = *br.linecode;
    branches.push_back(jb);
  }
  j["branches"] = branches;
  json users = json::array();
  for (const auto& u : feeder.users)
    users.push_back({{"id", u.id}, {"bus", u.bus}, {"phases", u.phases.str()}, {"metered", u.metered}});
  j["users"] = users;
  if (!feeder.linecodes.empty()) {
    json lcs;
    for (const auto& [name, lc] : feeder.linecodes)
      lcs[name] = {{"r_ohm_per_km", matrix_to_json(lc.r_ohm_per_km)},
                   {"x_ohm_per_km", matrix_to_json(lc.x_ohm_per_km)}};
    j["linecodes"] = lcs;
  }
  return j.dump(2);
}

Feeder feeder_from_json_string(const std::string& text) {
  json j = json::parse(text);
  Feeder f;
  f.base_power_va = j.at("base_power_va").get<double>();
  f.base_voltage_v = j.at("base_voltage_v").get<double>();
  for (const auto& jb : j.at("buses")) {
    Bus b;
    b.id = jb.at("id").get<std::string>();
    b.phases = PhaseSet::parse(jb.at("phases").get<std::string>());
    b.kind = kind_from_str(jb.value("kind", "junction"));
    b.base_voltage_v = jb.value("base_voltage_v", 0.0);
    f.buses.push_back(b);
  }
  for (const auto& jb : j.at("branches")) {
    Branch br;
    br.id = jb.at("id").get<std::string>();
    br.from_bus = jb.at("from").get<std::string>();
    br.to_bus = jb.at("to").get<std::string>();
    br.phases = PhaseSet::parse(jb.at("phases").get<std::string>());
    br.impedance.R = matrix_from_json(jb.at("r_ohm"), "branch " + br.id + " r_ohm");
    br.impedance.X = matrix_from_json(jb.at("x_ohm"), "branch " + br.id + " x_ohm");
    br.impedance.symmetric = jb.value("symmetric", false);
    if (jb.contains("length_m")) br.length_m = jb.at("length_m").get<double>();
    if (jb.contains("linecode")) br.linecode = jb.at("linecode").get<std::string>();
    f.branches.push_back(br);
  }
  for (const auto& ju : j.at("users")) {
    User u;
    u.id = ju.at("id").get<std::string>();
    u.bus = ju.at("bus").get<std::string>();
    u.phases = PhaseSet::parse(ju.at("phases").get<std::string>());
    u.metered = ju.value("metered", true);
    f.users.push_back(u);
  }
  if (j.contains("linecodes")) {
    for (auto it = j["linecodes"].begin(); it != j["linecodes"].end(); ++it) {
      Linecode lc;
      lc.r_ohm_per_km = matrix_from_json(it.value().at("r_ohm_per_km"), "linecode " + it.key());
      lc.x_ohm_per_km = matrix_from_json(it.value().at("x_ohm_per_km"), "linecode " + it.key());
      f.linecodes[it.key()] = lc;
    }
  }
  return f;
}

Feeder load_feeder_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open feeder file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return feeder_from_json_string(ss.str());
}

void save_feeder_json(const Feeder& feeder, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write feeder file '" + path + "'");
  out << feeder_to_json_string(feeder) << "\n";
}

}  // namespace impest
