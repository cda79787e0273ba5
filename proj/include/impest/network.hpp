#pragma once

#include <Eigen/Dense>
#include <complex>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "impest/phase.hpp"

namespace impest {

/// Series impedance of a branch, R + jX in ohm, n x n with n in {1,3}.
/// Rows/columns follow the owning branch's PhaseSet order.
struct ImpedanceMatrix {
  Eigen::MatrixXd R;
  Eigen::MatrixXd X;
  bool symmetric = false;

  ImpedanceMatrix() = default;
  ImpedanceMatrix(Eigen::MatrixXd r, Eigen::MatrixXd x, bool sym = false)
      : R(std::move(r)), X(std::move(x)), symmetric(sym) {}

  static ImpedanceMatrix scalar(double r, double x) {
    Eigen::MatrixXd R(1, 1), X(1, 1);
    R(0, 0) = r;
    X(0, 0) = x;
    return ImpedanceMatrix(R, X, true);
  }

  int dim() const { return static_cast<int>(R.rows()); }

  ImpedanceMatrix operator+(const ImpedanceMatrix& other) const {
    return ImpedanceMatrix(R + other.R, X + other.X, symmetric && other.symmetric);
  }
  ImpedanceMatrix scaled(double k) const { return ImpedanceMatrix(k * R, k * X, symmetric); }
};

enum class BusKind { Source, Junction, UserConnection };

struct Bus {
  std::string id;
  PhaseSet phases;
  BusKind kind = BusKind::Junction;
  double base_voltage_v = 0.0;  // line-to-neutral; 0 means "use feeder base"
};

struct Branch {
  std::string id;
  std::string from_bus;
  std::string to_bus;
  PhaseSet phases;
  ImpedanceMatrix impedance;            // ohm
  std::optional<double> length_m;
  std::optional<std::string> linecode;  // per-unit-length matrices, keyed in Feeder::linecodes
};

struct User {
  std::string id;
  std::string bus;
  PhaseSet phases;
  bool metered = true;
};

/// Per-km R/X matrices for a cable type.
struct Linecode {
  Eigen::MatrixXd r_ohm_per_km;
  Eigen::MatrixXd x_ohm_per_km;
};

struct Feeder {
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<User> users;
  std::map<std::string, Linecode> linecodes;
  double base_power_va = 0.0;
  double base_voltage_v = 0.0;

  const Bus* find_bus(const std::string& id) const;
  const Branch* find_branch(const std::string& id) const;
  const User* find_user(const std::string& id) const;
  int bus_index(const std::string& id) const;  // -1 if absent
  const Bus& source_bus() const;               // throws if not exactly one

  bool has_user_at(const std::string& bus_id) const;
  int degree(const std::string& bus_id) const;

  /// Per-phase impedance base: V_ln^2 / (S/3).
  double z_base_ohm() const { return base_voltage_v * base_voltage_v / (base_power_va / 3.0); }
  double i_base_a() const { return (base_power_va / 3.0) / base_voltage_v; }
};

struct Violation {
  std::string entity;
  std::string message;
};

using ValidationOutcome = std::vector<Violation>;

/// Checks all structural invariants; violations are returned, never thrown.
/// Soft findings carry a "warning:" prefix (e.g. metered user not at a leaf).
ValidationOutcome validate(const Feeder& feeder);
bool is_warning(const Violation& v);
ValidationOutcome errors_only(const ValidationOutcome& outcome);

/// Eliminates zero-injection degree-2 buses by merging their incident branches
/// in series (R and X add, lengths add when both known, linecode kept only if
/// identical). Repeats to fixpoint. Source, user-bearing, user_connection and
/// branching buses are retained.
Feeder reduce(const Feeder& feeder);

struct CumulativeImpedance {
  // aligned with the user's PhaseSet order
  std::vector<double> r_ohm;
  std::vector<double> x_ohm;
};

/// Sum of self (diagonal) R/X entries along the user's unique path to the
/// source. Mutual terms are excluded. Errors on meshed feeders.
CumulativeImpedance cumulative_impedance(const Feeder& feeder, const User& user);

/// Divides all impedances (and linecodes) by z_base; bases kept so the inverse
/// is exact. File I/O always stores SI units.
Feeder to_per_unit(const Feeder& feeder);
Feeder from_per_unit(const Feeder& feeder);

Feeder load_feeder_json(const std::string& path);
void save_feeder_json(const Feeder& feeder, const std::string& path);
std::string feeder_to_json_string(const Feeder& feeder);
Feeder feeder_from_json_string(const std::string& text);

}  // namespace impest
