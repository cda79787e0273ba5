#include "impest/powerflow.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <atomic>
#include <cmath>
#include <future>
#include <numbers>
#include <thread>

namespace impest {

void InjectionSpec::set(const std::string& user_id, Phase phase, int t, double p_w, double q_var,
                        LoadModel model) {
  auto& entries = by_user[user_id];
  Entry* e = nullptr;
  for (auto& cand : entries)
    if (cand.phase == phase) e = &cand;
  if (!e) {
    entries.push_back(Entry{phase, model, {}, {}});
    e = &entries.back();
  }
  e->model = model;
  if (t >= n_timesteps) n_timesteps = t + 1;
  if (static_cast<int>(e->p_w.size()) <= t) {
    e->p_w.resize(t + 1, 0.0);
    e->q_var.resize(t + 1, 0.0);
  }
  e->p_w[t] = p_w;
  e->q_var[t] = q_var;
}

const InjectionSpec::Entry* InjectionSpec::find(const std::string& user_id, Phase phase) const {
  auto it = by_user.find(user_id);
  if (it == by_user.end()) return nullptr;
  for (const auto& e : it->second)
    if (e.phase == phase) return &e;
  return nullptr;
}

std::array<std::complex<double>, 3> balanced_source(double v_mag) {
  const double rad = 2.0 * std::numbers::pi / 3.0;
  return {std::polar(v_mag, 0.0), std::polar(v_mag, -rad), std::polar(v_mag, rad)};
}

namespace {

// Index layout for one timestep, feeder already in per-unit.
struct PfIndex {
  const Feeder* f = nullptr;
  std::map<std::string, int> bus_voltage_start;  // non-source buses; 2 vars per phase (re, im)
  std::map<std::string, int> branch_current_start;
  std::map<std::string, int> user_current_start;
  int n_vars = 0;
  int source_bus = -1;

  explicit PfIndex(const Feeder& feeder) : f(&feeder) {
    const std::string src = feeder.source_bus().id;
    int k = 0;
    for (const auto& b : feeder.buses) {
      if (b.id == src) continue;
      bus_voltage_start[b.id] = k;
      k += 2 * b.phases.size();
    }
    for (const auto& br : feeder.branches) {
      branch_current_start[br.id] = k;
      k += 2 * br.phases.size();
    }
    for (const auto& u : feeder.users) {
      user_current_start[u.id] = k;
      k += 2 * u.phases.size();
    }
    n_vars = k;
  }

  // re index; im is +1
  int v(const std::string& bus, const PhaseSet& ps, Phase p) const {
    return bus_voltage_start.at(bus) + 2 * ps.index_of(p);
  }
  bool is_source(const std::string& bus) const { return !bus_voltage_start.count(bus); }
};

struct PfSystem {
  const Feeder& f;
  const PfIndex& idx;
  const InjectionSpec& inj;
  std::array<std::complex<double>, 3> vsrc_pu;
  double s_base_1ph;
  int t;

  std::complex<double> bus_voltage(const Eigen::VectorXd& x, const std::string& bus, Phase p) const {
    const Bus* b = f.find_bus(bus);
    if (idx.is_source(bus)) return vsrc_pu[static_cast<int>(p)];
    int k = idx.v(bus, b->phases, p);
    return {x[k], x[k + 1]};
  }

  // Residuals and (optionally) Jacobian triplets.
  void eval(const Eigen::VectorXd& x, Eigen::VectorXd& r,
            std::vector<Eigen::Triplet<double>>* jac) const {
    r.setZero();
    int row = 0;

    // KCL at every non-source bus, per phase, re and im.
    for (const auto& b : f.buses) {
      if (idx.is_source(b.id)) continue;
      for (Phase p : b.phases) {
        for (const auto& br : f.branches) {
          if (!br.phases.contains(p)) continue;
          double sign = 0.0;
          if (br.to_bus == b.id) sign = 1.0;
          else if (br.from_bus == b.id) sign = -1.0;
          else continue;
          int k = idx.branch_current_start.at(br.id) + 2 * br.phases.index_of(p);
          r[row] += sign * x[k];
          r[row + 1] += sign * x[k + 1];
          if (jac) {
            jac->emplace_back(row, k, sign);
            jac->emplace_back(row + 1, k + 1, sign);
          }
        }
        for (const auto& u : f.users) {
          if (u.bus != b.id || !u.phases.contains(p)) continue;
          int k = idx.user_current_start.at(u.id) + 2 * u.phases.index_of(p);
          r[row] -= x[k];
          r[row + 1] -= x[k + 1];
          if (jac) {
            jac->emplace_back(row, k, -1.0);
            jac->emplace_back(row + 1, k + 1, -1.0);
          }
        }
        row += 2;
      }
    }

    // Ohm's law per branch row.
    for (const auto& br : f.branches) {
      const auto& Z = br.impedance;
      int ib = idx.branch_current_start.at(br.id);
      for (Phase p : br.phases) {
        int pi = br.phases.index_of(p);
        auto ui = bus_voltage(x, br.from_bus, p);
        auto uj = bus_voltage(x, br.to_bus, p);
        double re = ui.real() - uj.real();
        double im = ui.imag() - uj.imag();
        for (Phase q : br.phases) {
          int qi = br.phases.index_of(q);
          re -= Z.R(pi, qi) * x[ib + 2 * qi] - Z.X(pi, qi) * x[ib + 2 * qi + 1];
          im -= Z.R(pi, qi) * x[ib + 2 * qi + 1] + Z.X(pi, qi) * x[ib + 2 * qi];
        }
        r[row] = re;
        r[row + 1] = im;
        if (jac) {
          if (!idx.is_source(br.from_bus)) {
            int k = idx.v(br.from_bus, f.find_bus(br.from_bus)->phases, p);
            jac->emplace_back(row, k, 1.0);
            jac->emplace_back(row + 1, k + 1, 1.0);
          }
          if (!idx.is_source(br.to_bus)) {
            int k = idx.v(br.to_bus, f.find_bus(br.to_bus)->phases, p);
            jac->emplace_back(row, k, -1.0);
            jac->emplace_back(row + 1, k + 1, -1.0);
          }
          for (Phase q : br.phases) {
            int qi = br.phases.index_of(q);
            jac->emplace_back(row, ib + 2 * qi, -Z.R(pi, qi));
            jac->emplace_back(row, ib + 2 * qi + 1, Z.X(pi, qi));
            jac->emplace_back(row + 1, ib + 2 * qi, -Z.X(pi, qi));
            jac->emplace_back(row + 1, ib + 2 * qi + 1, -Z.R(pi, qi));
          }
        }
        row += 2;
      }
    }

    // Load model rows.
    for (const auto& u : f.users) {
      int iu = idx.user_current_start.at(u.id);
      for (Phase p : u.phases) {
        int k = iu + 2 * u.phases.index_of(p);
        const auto* e = inj.find(u.id, p);
        double pw = 0.0, qv = 0.0;
        LoadModel model = LoadModel::ConstantPower;
        if (e) {
          model = e->model;
          if (t < static_cast<int>(e->p_w.size())) {
            pw = e->p_w[t] / s_base_1ph;
            qv = e->q_var[t] / s_base_1ph;
          }
        }
        if (model == LoadModel::ConstantCurrent) {
          // Fixed phasor at nominal magnitude; the source phasor sets the angle.
          auto u = vsrc_pu[static_cast<int>(p)] / std::abs(vsrc_pu[static_cast<int>(p)]);
          auto ispec = std::conj(std::complex<double>(pw, qv) / u);
          r[row] = x[k] - ispec.real();
          r[row + 1] = x[k + 1] - ispec.imag();
          if (jac) {
            jac->emplace_back(row, k, 1.0);
            jac->emplace_back(row + 1, k + 1, 1.0);
          }
        } else {
          auto v = bus_voltage(x, u.bus, p);
          r[row] = v.real() * x[k] + v.imag() * x[k + 1] - pw;
          r[row + 1] = v.imag() * x[k] - v.real() * x[k + 1] - qv;
          if (jac) {
            jac->emplace_back(row, k, v.real());
            jac->emplace_back(row, k + 1, v.imag());
            jac->emplace_back(row + 1, k, v.imag());
            jac->emplace_back(row + 1, k + 1, -v.real());
            if (!idx.is_source(u.bus)) {
              int kv = idx.v(u.bus, f.find_bus(u.bus)->phases, p);
              jac->emplace_back(row, kv, x[k]);
              jac->emplace_back(row, kv + 1, x[k + 1]);
              jac->emplace_back(row + 1, kv, -x[k + 1]);
              jac->emplace_back(row + 1, kv + 1, x[k]);
            }
          }
        }
        row += 2;
      }
    }
  }

  std::string worst_bus(const Eigen::VectorXd& r) const {
    // KCL rows lead; map the worst row back to its bus when possible.
    int row = 0;
    double worst = -1.0;
    std::string bus = "(none)";
    for (const auto& b : f.buses) {
      if (idx.is_source(b.id)) continue;
      for (Phase p : b.phases) {
        (void)p;
        double v = std::max(std::abs(r[row]), std::abs(r[row + 1]));
        if (v > worst) {
          worst = v;
          bus = b.id;
        }
        row += 2;
      }
    }
    return bus;
  }
};

TimestepState solve_one(const Feeder& fpu, const PfIndex& idx, const InjectionSpec& inj, int t,
                        const std::array<std::complex<double>, 3>& vsrc_pu, double s_base_1ph,
                        const PowerFlowOptions& opts, const Feeder& original) {
  PfSystem sys{fpu, idx, inj, vsrc_pu, s_base_1ph, t};
  Eigen::VectorXd x(idx.n_vars);
  x.setZero();
  // Flat start: all voltages at the source phasor, currents zero.
  for (const auto& b : fpu.buses) {
    if (idx.is_source(b.id)) continue;
    for (Phase p : b.phases) {
      int k = idx.v(b.id, b.phases, p);
      x[k] = vsrc_pu[static_cast<int>(p)].real();
      x[k + 1] = vsrc_pu[static_cast<int>(p)].imag();
    }
  }

  Eigen::VectorXd r(idx.n_vars);
  std::vector<Eigen::Triplet<double>> trip;
  Eigen::SparseMatrix<double> J(idx.n_vars, idx.n_vars);
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;

  int iter = 0;
  double norm = 0.0;
  for (; iter < opts.max_iter; ++iter) {
    trip.clear();
    sys.eval(x, r, &trip);
    norm = r.lpNorm<Eigen::Infinity>();
    if (norm <= opts.tol) break;
    J.setFromTriplets(trip.begin(), trip.end());
    lu.compute(J);
    if (lu.info() != Eigen::Success)
      throw PowerFlowError("power flow: singular Jacobian at iteration " + std::to_string(iter) +
                           ", worst-conditioned bus " + sys.worst_bus(r));
    Eigen::VectorXd dx = lu.solve(-r);
    // Damped update: halve the step while the residual grows.
    double alpha = 1.0;
    for (int cut = 0; cut < 6; ++cut) {
      Eigen::VectorXd x_new = x + alpha * dx;
      Eigen::VectorXd r_new(idx.n_vars);
      sys.eval(x_new, r_new, nullptr);
      if (r_new.lpNorm<Eigen::Infinity>() < norm || cut == 5) {
        x = x_new;
        break;
      }
      alpha *= 0.5;
    }
  }
  if (norm > opts.tol) {
    sys.eval(x, r, nullptr);
    if (r.lpNorm<Eigen::Infinity>() > opts.tol)
      throw PowerFlowError("power flow did not converge in " + std::to_string(opts.max_iter) +
                           " iterations (residual " + std::to_string(norm) + ", worst bus " +
                           sys.worst_bus(r) + ")");
  }

  // Unpack to SI using the original feeder bases.
  TimestepState out;
  out.converged = true;
  out.iterations = iter;
  const double v_base = original.base_voltage_v;
  const double i_base = original.i_base_a();
  for (const auto& b : fpu.buses) {
    auto& vec = out.bus_voltage_v[b.id];
    for (Phase p : b.phases) vec.push_back(sys.bus_voltage(x, b.id, p) * v_base);
  }
  for (const auto& br : fpu.branches) {
    auto& vec = out.branch_current_a[br.id];
    int k = idx.branch_current_start.at(br.id);
    for (int i = 0; i < br.phases.size(); ++i)
      vec.push_back(std::complex<double>(x[k + 2 * i], x[k + 2 * i + 1]) * i_base);
  }
  for (const auto& u : fpu.users) {
    auto& vec = out.user_current_a[u.id];
    int k = idx.user_current_start.at(u.id);
    for (int i = 0; i < u.phases.size(); ++i)
      vec.push_back(std::complex<double>(x[k + 2 * i], x[k + 2 * i + 1]) * i_base);
  }
  return out;
}

}  // namespace

StateSolution solve(const Feeder& feeder, const InjectionSpec& injections,
                    const std::array<std::complex<double>, 3>& source_voltage,
                    const PowerFlowOptions& opts) {
  for (const auto& v : source_voltage)
    if (!(std::abs(v) > 0)) throw std::invalid_argument("source voltage magnitudes must be positive");
  Feeder fpu = to_per_unit(feeder);
  PfIndex idx(fpu);
  const double v_base = feeder.base_voltage_v;
  const double s1 = feeder.base_power_va / 3.0;
  std::array<std::complex<double>, 3> vsrc_pu{source_voltage[0] / v_base, source_voltage[1] / v_base,
                                              source_voltage[2] / v_base};

  const int T = std::max(1, injections.n_timesteps);
  StateSolution sol;
  sol.steps.resize(T);

  auto run = [&](int t) { sol.steps[t] = solve_one(fpu, idx, injections, t, vsrc_pu, s1, opts, feeder); };

  if (opts.parallel && T > 1) {
    const int workers = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::future<void>> futs;
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w) {
      futs.push_back(std::async(std::launch::async, [&] {
        for (int t = next.fetch_add(1); t < T; t = next.fetch_add(1)) run(t);
      }));
    }
    for (auto& fut : futs) fut.get();
  } else {
    for (int t = 0; t < T; ++t) run(t);
  }
  return sol;
}

double residual_norm(const Feeder& feeder, const StateSolution& state, const InjectionSpec& injections,
                     const std::array<std::complex<double>, 3>& source_voltage) {
  Feeder fpu = to_per_unit(feeder);
  PfIndex idx(fpu);
  const double v_base = feeder.base_voltage_v;
  const double i_base = feeder.i_base_a();
  const double s1 = feeder.base_power_va / 3.0;
  std::array<std::complex<double>, 3> vsrc_pu{source_voltage[0] / v_base, source_voltage[1] / v_base,
                                              source_voltage[2] / v_base};
  double worst = 0.0;
  for (std::size_t t = 0; t < state.steps.size(); ++t) {
    const auto& st = state.steps[t];
    Eigen::VectorXd x(idx.n_vars);
    for (const auto& b : fpu.buses) {
      if (idx.is_source(b.id)) continue;
      const auto& vs = st.bus_voltage_v.at(b.id);
      for (Phase p : b.phases) {
        int k = idx.v(b.id, b.phases, p);
        auto v = vs.at(b.phases.index_of(p)) / v_base;
        x[k] = v.real();
        x[k + 1] = v.imag();
      }
    }
    for (const auto& br : fpu.branches) {
      const auto& is = st.branch_current_a.at(br.id);
      int k = idx.branch_current_start.at(br.id);
      for (int i = 0; i < br.phases.size(); ++i) {
        x[k + 2 * i] = is.at(i).real() / i_base;
        x[k + 2 * i + 1] = is.at(i).imag() / i_base;
      }
    }
    for (const auto& u : fpu.users) {
      const auto& is = st.user_current_a.at(u.id);
      int k = idx.user_current_start.at(u.id);
      for (int i = 0; i < u.phases.size(); ++i) {
        x[k + 2 * i] = is.at(i).real() / i_base;
        x[k + 2 * i + 1] = is.at(i).imag() / i_base;
      }
    }
    PfSystem sys{fpu, idx, injections, vsrc_pu, s1, static_cast<int>(t)};
    Eigen::VectorXd r(idx.n_vars);
    sys.eval(x, r, nullptr);
    worst = std::max(worst, r.lpNorm<Eigen::Infinity>());
  }
  return worst;
}

std::complex<double> power_balance_va(const Feeder& feeder, const TimestepState& state) {
  // Source injection: sum over branches incident to the source of V_src * conj(I into feeder).
  const std::string src = feeder.source_bus().id;
  std::complex<double> source{0, 0}, loads{0, 0}, losses{0, 0};
  for (const auto& br : feeder.branches) {
    const auto& cur = state.branch_current_a.at(br.id);
    double sign = 0.0;
    if (br.from_bus == src) sign = 1.0;
    else if (br.to_bus == src) sign = -1.0;
    if (sign != 0.0) {
      const auto& vs = state.bus_voltage_v.at(src);
      const Bus* bus = feeder.find_bus(src);
      for (Phase p : br.phases) {
        auto v = vs.at(bus->phases.index_of(p));
        source += v * std::conj(sign * cur.at(br.phases.index_of(p)));
      }
    }
    // Series loss: (U_from - U_to) * conj(I) per phase.
    const auto& vf = state.bus_voltage_v.at(br.from_bus);
    const auto& vt = state.bus_voltage_v.at(br.to_bus);
    const Bus* bf = feeder.find_bus(br.from_bus);
    const Bus* bt = feeder.find_bus(br.to_bus);
    for (Phase p : br.phases) {
      auto drop = vf.at(bf->phases.index_of(p)) - vt.at(bt->phases.index_of(p));
      losses += drop * std::conj(cur.at(br.phases.index_of(p)));
    }
  }
  for (const auto& u : feeder.users) {
    const auto& vs = state.bus_voltage_v.at(u.bus);
    const auto& is = state.user_current_a.at(u.id);
    const Bus* bus = feeder.find_bus(u.bus);
    for (Phase p : u.phases)
      loads += vs.at(bus->phases.index_of(p)) * std::conj(is.at(u.phases.index_of(p)));
  }
  return source - loads - losses;
}

}  // namespace impest
