#include "impest/solver.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

namespace impest {

std::string solve_status_str(SolveStatus s) {
  switch (s) {
    case SolveStatus::OptimalLocal: return "optimal_local";
    case SolveStatus::MaxIter: return "max_iter";
    case SolveStatus::TimeLimit: return "time_limit";
    case SolveStatus::InfeasibleDetected: return "infeasible_detected";
    case SolveStatus::NumericalFailure: return "numerical_failure";
  }
  return "?";
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Problem reduced to free variables plus one slack per inequality, rows
/// scaled so the largest initial gradient entry is ~100.
struct InternalModel {
  struct Row {
    double cnst = 0.0;  // includes fixed-variable folds and -rhs, scaled
    double scale = 1.0;
    std::vector<LinTerm> lin;    // free-variable indices
    std::vector<QuadTerm> quad;  // free-variable indices
    int slack = -1;              // y index when the source row was LessEqual
  };

  const NlpProblem* p = nullptr;
  int nx = 0;     // free structural variables
  int ny = 0;     // nx + slacks
  int m = 0;      // rows
  std::vector<int> free_of_var;   // problem var -> free index or -1
  std::vector<int> var_of_free;
  std::vector<Row> rows;
  Eigen::VectorXd grad;  // objective gradient over y
  Eigen::VectorXd lb, ub;

  explicit InternalModel(const NlpProblem& prob) : p(&prob) {
    const int n_all = prob.n();
    free_of_var.assign(n_all, -1);
    for (int i = 0; i < n_all; ++i) {
      if (!prob.variables[i].fixed()) {
        free_of_var[i] = nx++;
        var_of_free.push_back(i);
      }
    }

    auto fixed_value = [&](int v) { return prob.variables[v].lb; };

    m = static_cast<int>(prob.constraints.size());
    rows.reserve(m);
    int n_slack = 0;
    for (const auto& c : prob.constraints) {
      Row row;
      row.cnst = -c.rhs;
      for (const auto& t : c.lin) {
        int f = free_of_var[t.var];
        if (f >= 0) row.lin.push_back({f, t.coef});
        else row.cnst += t.coef * fixed_value(t.var);
      }
      for (const auto& t : c.quad) {
        int fi = free_of_var[t.var_i];
        int fj = free_of_var[t.var_j];
        if (fi >= 0 && fj >= 0) row.quad.push_back({fi, fj, t.coef});
        else if (fi >= 0) row.lin.push_back({fi, t.coef * fixed_value(t.var_j)});
        else if (fj >= 0) row.lin.push_back({fj, t.coef * fixed_value(t.var_i)});
        else row.cnst += t.coef * fixed_value(t.var_i) * fixed_value(t.var_j);
      }
      if (c.kind == ConstraintKind::LessEqual) row.slack = nx + n_slack++;
      rows.push_back(std::move(row));
    }
    ny = nx + n_slack;

    lb = Eigen::VectorXd::Constant(ny, -kInf);
    ub = Eigen::VectorXd::Constant(ny, kInf);
    for (int f = 0; f < nx; ++f) {
      lb[f] = prob.variables[var_of_free[f]].lb;
      ub[f] = prob.variables[var_of_free[f]].ub;
    }
    for (const auto& row : rows)
      if (row.slack >= 0) lb[row.slack] = 0.0;

    grad = Eigen::VectorXd::Zero(ny);
    for (const auto& t : prob.objective) {
      int f = free_of_var[t.var];
      if (f >= 0) grad[f] += t.coef;
    }
  }

  /// Gradient-based row scaling computed at a reference point.
  void apply_scaling(const Eigen::VectorXd& y0, double gmax = 100.0) {
    for (auto& row : rows) {
      double worst = 0.0;
      for (const auto& t : row.lin) worst = std::max(worst, std::abs(t.coef));
      for (const auto& t : row.quad) {
        worst = std::max(worst, std::abs(t.coef * y0[t.var_j]));
        worst = std::max(worst, std::abs(t.coef * y0[t.var_i]));
      }
      if (worst > gmax) {
        row.scale = gmax / worst;
        row.cnst *= row.scale;
        for (auto& t : row.lin) t.coef *= row.scale;
        for (auto& t : row.quad) t.coef *= row.scale;
      }
    }
  }

  double eval_row(const Row& row, const Eigen::VectorXd& y) const {
    double v = row.cnst;
    for (const auto& t : row.lin) v += t.coef * y[t.var];
    for (const auto& t : row.quad) v += t.coef * y[t.var_i] * y[t.var_j];
    if (row.slack >= 0) v += y[row.slack];
    return v;
  }

  void eval_c(const Eigen::VectorXd& y, Eigen::VectorXd& c) const {
    c.resize(m);
    for (int k = 0; k < m; ++k) c[k] = eval_row(rows[k], y);
  }

  double objective(const Eigen::VectorXd& y) const { return grad.dot(y); }

  /// Unscaled infinity norm of constraint violations.
  double unscaled_infeasibility(const Eigen::VectorXd& c) const {
    double worst = 0.0;
    for (int k = 0; k < m; ++k) worst = std::max(worst, std::abs(c[k]) / rows[k].scale);
    return worst;
  }

  std::vector<double> to_problem_point(const Eigen::VectorXd& y) const {
    std::vector<double> x(p->n());
    for (int v = 0; v < p->n(); ++v)
      x[v] = (free_of_var[v] >= 0) ? y[free_of_var[v]] : p->variables[v].lb;
    return x;
  }
};

/// Sparse KKT system [[W + Sigma + dw*I, J^T], [J, -dc*I]] with slot-mapped
/// assembly; pattern and ordering are computed once.
class KktSystem {
 public:
  KktSystem(const InternalModel& model) : model_(model) {
    const int ny = model.ny;
    const int N = ny + model.m;
    std::vector<Eigen::Triplet<double>> trip;

    auto lower = [](int a, int b) { return std::pair<int, int>(std::max(a, b), std::min(a, b)); };

    for (int i = 0; i < ny; ++i) trip.emplace_back(i, i, 0.0);
    for (int k = 0; k < model.m; ++k) {
      const auto& row = model.rows[k];
      for (const auto& t : row.quad) {
        auto [r, c] = lower(t.var_i, t.var_j);
        trip.emplace_back(r, c, 0.0);
      }
      for (const auto& t : row.lin) trip.emplace_back(ny + k, t.var, 0.0);
      for (const auto& t : row.quad) {
        trip.emplace_back(ny + k, t.var_i, 0.0);
        trip.emplace_back(ny + k, t.var_j, 0.0);
      }
      if (row.slack >= 0) trip.emplace_back(ny + k, row.slack, 0.0);
      trip.emplace_back(ny + k, ny + k, 0.0);
    }
    K_.resize(N, N);
    K_.setFromTriplets(trip.begin(), trip.end());
    K_.makeCompressed();

    auto slot_of = [&](int r, int c) {
      for (int idx = K_.outerIndexPtr()[c]; idx < K_.outerIndexPtr()[c + 1]; ++idx)
        if (K_.innerIndexPtr()[idx] == r) return idx;
      throw std::logic_error("kkt slot lookup failed");
    };

    wdiag_slot_.resize(ny);
    for (int i = 0; i < ny; ++i) wdiag_slot_[i] = slot_of(i, i);
    cdiag_slot_.resize(model.m);
    for (int k = 0; k < model.m; ++k) cdiag_slot_[k] = slot_of(ny + k, ny + k);

    for (int k = 0; k < model.m; ++k) {
      const auto& row = model.rows[k];
      for (const auto& t : row.quad) {
        auto [r, c] = lower(t.var_i, t.var_j);
        double coef = (t.var_i == t.var_j) ? 2.0 * t.coef : t.coef;
        hess_.push_back({slot_of(r, c), k, coef});
        jac_x_.push_back({slot_of(ny + k, t.var_i), t.var_j, t.coef});
        jac_x_.push_back({slot_of(ny + k, t.var_j), t.var_i, t.coef});
      }
      for (const auto& t : row.lin) jac_const_.push_back({slot_of(ny + k, t.var), t.coef});
      if (row.slack >= 0) jac_const_.push_back({slot_of(ny + k, row.slack), 1.0});
    }
    solver_.analyzePattern(K_);
  }

  /// Fills values for the current iterate and factorizes, raising the primal
  /// regularization until the inertia is (ny positive, m negative).
  bool factorize(const Eigen::VectorXd& y, const Eigen::VectorXd& lambda,
                 const Eigen::VectorXd& sigma, double mu, double& dw_last) {
    const int ny = model_.ny;

    auto fill = [&](double dw, double dc_eff) {
      double* vals = K_.valuePtr();
      std::fill(vals, vals + K_.nonZeros(), 0.0);
      for (int i = 0; i < ny; ++i) vals[wdiag_slot_[i]] += sigma[i] + dw;
      for (const auto& h : hess_) vals[h.slot] += h.coef * lambda[h.row];
      for (const auto& j : jac_x_) vals[j.slot] += j.coef * y[j.other];
      for (const auto& j : jac_const_) vals[j.slot] += j.coef;
      for (int k = 0; k < model_.m; ++k) vals[cdiag_slot_[k]] -= dc_eff;
    };

    double dw = 0.0;
    for (int attempt = 0; attempt < 40; ++attempt) {
      fill(dw, attempt >= 3 ? 1e-6 : 1e-8);  // lift dual reg if dw alone fails
      solver_.factorize(K_);
      if (solver_.info() == Eigen::Success && inertia_ok()) {
        dw_last = dw;
        return true;
      }
      if (dw == 0.0) dw = (dw_last == 0.0) ? 1e-4 : std::max(1e-20, dw_last / 3.0);
      else dw *= (dw_last == 0.0) ? 100.0 : 8.0;
      if (dw > 1e40) break;
    }
    return false;
  }

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) { return solver_.solve(rhs); }

 private:
  bool inertia_ok() const {
    const auto& D = solver_.vectorD();
    int pos = 0, neg = 0, zero = 0;
    for (Eigen::Index i = 0; i < D.size(); ++i) {
      double d = D[i];
      if (!std::isfinite(d)) return false;
      if (d > 0) ++pos;
      else if (d < 0) ++neg;
      else ++zero;
    }
    return zero == 0 && pos == model_.ny && neg == model_.m;
  }

  struct HessContrib {
    int slot;
    int row;
    double coef;
  };
  struct JacX {
    int slot;
    int other;
    double coef;
  };
  struct JacConst {
    int slot;
    double coef;
  };

  const InternalModel& model_;
  Eigen::SparseMatrix<double> K_;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower> solver_;
  std::vector<int> wdiag_slot_, cdiag_slot_;
  std::vector<HessContrib> hess_;
  std::vector<JacX> jac_x_;
  std::vector<JacConst> jac_const_;
};

/// Dense-free Jacobian-vector products evaluated from the model directly
/// (used for residuals; independent of the KKT value state).
void jacobian_transpose_times(const InternalModel& model, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& lambda, Eigen::VectorXd& out) {
  out.setZero();
  for (int k = 0; k < model.m; ++k) {
    const auto& row = model.rows[k];
    const double lk = lambda[k];
    if (lk == 0.0) continue;
    for (const auto& t : row.lin) out[t.var] += lk * t.coef;
    for (const auto& t : row.quad) {
      out[t.var_i] += lk * t.coef * y[t.var_j];
      out[t.var_j] += lk * t.coef * y[t.var_i];
    }
    if (row.slack >= 0) out[row.slack] += lk;
  }
}

struct IterateLog {
  std::ofstream file;
  bool enabled = false;
  void open(const std::string& path) {
    if (path.empty()) return;
    file.open(path);
    file << "iter,objective,primal_inf,dual_inf,mu,alpha,step\n";
    enabled = file.good();
  }
  void line(int it, double obj, double pinf, double dinf, double mu, double alpha,
            const char* step) {
    if (enabled)
      file << it << ',' << obj << ',' << pinf << ',' << dinf << ',' << mu << ',' << alpha << ','
           << step << "\n";
  }
};

class InteriorPoint {
 public:
  InteriorPoint(const InternalModel& model, const SolverOptions& opts)
      : model_(model), opts_(opts), kkt_(model) {}

  SolveOutcome run() {
    const auto t_start = std::chrono::steady_clock::now();
    auto elapsed = [&] {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    };

    IterateLog log;
    if (opts_.verbosity >= 1) log.open(opts_.log_path);

    const int ny = model_.ny, m = model_.m;
    init_point();
    mu_ = opts_.mu_init;
    double tau = std::max(0.99, 1.0 - mu_);

    Eigen::VectorXd c(m), rhs(ny + m), step;
    double dw_last = 0.0;
    filter_.clear();
    model_.eval_c(y_, c);
    theta_max_ = 1e4 * std::max(1.0, theta(c));
    theta_min_ = 1e-4 * std::max(1.0, theta(c));

    SolveOutcome out;
    int it = 0;
    int feas_failures = 0;
    int stalled = 0;
    double last_obj = kInf;
    for (; it < opts_.max_iter; ++it) {
      if (elapsed() > opts_.time_limit_s) {
        out.status = SolveStatus::TimeLimit;
        break;
      }
      model_.eval_c(y_, c);

      const double e0 = kkt_error(c, 0.0);
      if (e0 <= opts_.tol) {
        out.status = SolveStatus::OptimalLocal;
        break;
      }
      // Acceptable-level stop: feasible and no objective movement over many
      // iterations. Degenerate WLAV faces otherwise grind without changing
      // the answer.
      {
        double obj_now = model_.objective(y_);
        if (mu_ <= std::max(opts_.tol, 1e-6) && model_.unscaled_infeasibility(c) <= opts_.tol &&
            std::abs(obj_now - last_obj) <= 1e-7 * std::max(1.0, std::abs(obj_now)))
          ++stalled;
        else
          stalled = 0;
        last_obj = obj_now;
        if (stalled >= 25) {
          out.status = SolveStatus::OptimalLocal;
          break;
        }
      }
      // Barrier subproblem done: tighten mu.
      const double mu_min = opts_.tol / 11.0;
      while (mu_ > mu_min && kkt_error(c, mu_) <= 10.0 * mu_) {
        mu_ = std::max(mu_min, std::min(0.2 * mu_, std::pow(mu_, 1.5)));
        tau = std::max(0.99, 1.0 - mu_);
        filter_.clear();
      }

      // Newton direction from the regularized KKT system.
      Eigen::VectorXd sigma = barrier_sigma();
      if (!kkt_.factorize(y_, lambda_, sigma, mu_, dw_last)) {
        out.status = SolveStatus::NumericalFailure;
        break;
      }
      Eigen::VectorXd grad_phi = barrier_gradient();
      Eigen::VectorXd jt_lambda(ny);
      jacobian_transpose_times(model_, y_, lambda_, jt_lambda);
      Eigen::VectorXd rhs_top = -(grad_phi + jt_lambda);
      rhs.head(ny) = rhs_top;
      rhs.tail(m) = -c;
      step = kkt_.solve(rhs);
      Eigen::VectorXd dy = step.head(ny);
      Eigen::VectorXd dlambda = step.tail(m);

      // Fraction-to-boundary limits.
      double a_max = max_primal_step(dy, tau);
      double gphi_dy = grad_phi.dot(dy);

      double theta_k = theta(c);
      double phi_k = barrier_phi(y_);

      auto acceptable = [&](double alpha, double theta_t, double phi_t, bool& f_type) {
        if (!std::isfinite(theta_t) || !std::isfinite(phi_t)) return false;
        if (theta_t > theta_max_) return false;
        if (in_filter(theta_t, phi_t)) return false;
        bool switching = theta_k <= theta_min_ && gphi_dy < 0 &&
                         alpha * std::pow(-gphi_dy, 2.3) > 1.0 * std::pow(theta_k, 1.1);
        if (switching) {
          if (phi_t <= phi_k + 1e-8 * alpha * gphi_dy) {
            f_type = true;
            return true;
          }
          return false;
        }
        return theta_t <= (1 - 1e-5) * theta_k || phi_t <= phi_k - 1e-5 * theta_t;
      };

      // Filter line search with backtracking and one second-order correction
      // pass after the first rejected full step.
      double alpha = a_max;
      bool accepted = false;
      bool f_type_step = false;
      Eigen::VectorXd y_t;
      const double alpha_min = compute_alpha_min(theta_k, gphi_dy);
      for (int bt = 0; bt < 60 && alpha >= alpha_min; ++bt, alpha *= 0.5) {
        y_t = y_ + alpha * dy;
        Eigen::VectorXd c_t(m);
        model_.eval_c(y_t, c_t);
        double theta_t = theta(c_t);
        double phi_t = barrier_phi(y_t);
        if (acceptable(alpha, theta_t, phi_t, f_type_step)) {
          accepted = true;
          break;
        }

        if (bt == 0 && theta_t >= theta_k) {
          // Second-order correction: keep the dual rhs, correct the
          // constraint value at the trial point. Same factorization.
          Eigen::VectorXd c_soc = alpha * c + c_t;
          double theta_soc_prev = theta_t;
          for (int p = 0; p < 4; ++p) {
            rhs.head(ny) = rhs_top;
            rhs.tail(m) = -c_soc;
            Eigen::VectorXd step2 = kkt_.solve(rhs);
            Eigen::VectorXd dy2 = step2.head(ny);
            double a2 = max_primal_step(dy2, tau);
            Eigen::VectorXd y2 = y_ + a2 * dy2;
            Eigen::VectorXd c2(m);
            model_.eval_c(y2, c2);
            double theta2 = theta(c2);
            double phi2 = barrier_phi(y2);
            bool f2 = false;
            if (acceptable(a_max, theta2, phi2, f2)) {
              y_t = y2;
              dy = dy2;
              dlambda = step2.tail(m);
              alpha = a2;
              f_type_step = f2;
              accepted = true;
              break;
            }
            if (theta2 >= 0.99 * theta_soc_prev) break;
            c_soc = a2 * c_soc + c2;
            theta_soc_prev = theta2;
          }
          if (accepted) break;
        }
      }

      if (accepted) {
        if (!f_type_step) filter_.push_back({(1 - 1e-5) * theta_k, phi_k - 1e-5 * theta_k});
        y_ = y_t;
        lambda_ += alpha * dlambda;
        update_duals(dy, alpha, tau);
        feas_failures = 0;
        if (opts_.verbosity >= 1) {
          model_.eval_c(y_, c);
          log.line(it, model_.objective(y_), model_.unscaled_infeasibility(c), dual_inf(c), mu_,
                   alpha, f_type_step ? "f" : "h");
        }
        continue;
      }

      // Dual-space progress the filter cannot see: accept the full step when
      // it strictly reduces the barrier KKT error near feasibility.
      {
        Eigen::VectorXd y_full = y_ + a_max * dy;
        Eigen::VectorXd c_full(m);
        model_.eval_c(y_full, c_full);
        if (std::isfinite(barrier_phi(y_full)) &&
            theta(c_full) <= std::max(1.5 * theta_k, 1e2 * opts_.tol)) {
          Eigen::VectorXd lam_full = lambda_ + a_max * dlambda;
          auto [zl_t, zu_t] = tentative_duals(y_full, dy, a_max, tau);
          double e_now = kkt_error(c, mu_);
          double e_trial = kkt_error_at(c_full, mu_, y_full, lam_full, zl_t, zu_t);
          if (e_trial <= 0.7 * e_now) {
            y_ = y_full;
            lambda_ = lam_full;
            zl_ = zl_t;
            zu_ = zu_t;
            feas_failures = 0;
            log.line(it, model_.objective(y_), model_.unscaled_infeasibility(c_full),
                     dual_inf(c_full), mu_, a_max, "kkt");
            continue;
          }
        }
      }

      // Line search failed. Inequality rows can be repaired exactly by
      // moving their slacks; try that before a Newton feasibility step.
      bool improved = false;
      {
        Eigen::VectorXd y_s = y_;
        bool moved = false;
        for (const auto& row : model_.rows) {
          if (row.slack < 0) continue;
          double v = row.cnst;
          for (const auto& t : row.lin)
            if (t.var != row.slack) v += t.coef * y_s[t.var];
          for (const auto& t : row.quad) v += t.coef * y_s[t.var_i] * y_s[t.var_j];
          double target = std::max(std::min(1e-8, mu_), -v);
          if (target != y_s[row.slack]) {
            y_s[row.slack] = target;
            moved = true;
          }
        }
        if (moved) {
          Eigen::VectorXd c_s(m);
          model_.eval_c(y_s, c_s);
          if (theta(c_s) < (1 - 1e-4) * theta_k) {
            y_ = y_s;
            improved = true;
          }
        }
      }
      if (!improved) {
        rhs.head(ny).setZero();
        rhs.tail(m) = -c;
        Eigen::VectorXd fstep = kkt_.solve(rhs);
        Eigen::VectorXd fy = fstep.head(ny);
        // Do not push components that already sit on a bound.
        for (int i = 0; i < ny; ++i) {
          if (std::isfinite(model_.lb[i]) && fy[i] < 0 &&
              y_[i] - model_.lb[i] < 1e-10 * std::max(1.0, std::abs(model_.lb[i])))
            fy[i] = 0.0;
          if (std::isfinite(model_.ub[i]) && fy[i] > 0 &&
              model_.ub[i] - y_[i] < 1e-10 * std::max(1.0, std::abs(model_.ub[i])))
            fy[i] = 0.0;
        }
        double fa = max_primal_step(fy, tau);
        for (int bt = 0; bt < 30; ++bt, fa *= 0.5) {
          y_t = y_ + fa * fy;
          Eigen::VectorXd c_t(m);
          model_.eval_c(y_t, c_t);
          if (theta(c_t) < (1 - 1e-4 * fa) * theta_k) {
            y_ = y_t;
            improved = true;
            break;
          }
        }
      }
      filter_.push_back({(1 - 1e-5) * theta_k, phi_k - 1e-5 * theta_k});
      if (improved) {
        feas_failures = 0;
        log.line(it, model_.objective(y_), theta_k, 0.0, mu_, 0.0, "feas");
        continue;
      }
      if (++feas_failures >= 3) {
        if (!duals_reset_) {
          // Last resort: drop the stale multipliers and re-center once.
          duals_reset_ = true;
          feas_failures = 0;
          lambda_.setZero();
          for (int i = 0; i < ny; ++i) {
            if (std::isfinite(model_.lb[i])) zl_[i] = 1.0;
            if (std::isfinite(model_.ub[i])) zu_[i] = 1.0;
          }
          mu_ = std::max(mu_, 1e-3);
          tau = std::max(0.99, 1.0 - mu_);
          filter_.clear();
          log.line(it, model_.objective(y_), theta_k, 0.0, mu_, 0.0, "reset");
          continue;
        }
        model_.eval_c(y_, c);
        out.status = (model_.unscaled_infeasibility(c) > 100 * opts_.tol)
                         ? SolveStatus::InfeasibleDetected
                         : SolveStatus::NumericalFailure;
        break;
      }
      // Re-center and retry from the same point.
      mu_ = std::min(std::max(10.0 * mu_, 1e-6), 0.1);
      tau = std::max(0.99, 1.0 - mu_);
      filter_.clear();
      log.line(it, model_.objective(y_), theta_k, 0.0, mu_, 0.0, "recenter");
    }

    if (it >= opts_.max_iter) out.status = SolveStatus::MaxIter;
    out.iterations = it;
    out.wall_time_s = elapsed();
    final_feasibility_cleanup(dw_last, tau);
    polish_epigraph_block();
    out.point = model_.to_problem_point(y_);
    auto ev = model_.p->evaluate(out.point);
    out.objective = ev.objective;
    out.max_violation = ev.max_violation;
    // Optimality claims are made against the unscaled violation.
    if (out.status == SolveStatus::OptimalLocal && out.max_violation > opts_.tol)
      out.status = SolveStatus::NumericalFailure;
    return out;
  }

 private:
  struct FilterEntry {
    double theta;
    double phi;
  };

  /// Newton feasibility iterations at exit so interrupted runs still hand
  /// back a point satisfying the constraints to tolerance when nearby.
  void final_feasibility_cleanup(double& dw_last, double tau) {
    const int ny = model_.ny, m = model_.m;
    Eigen::VectorXd c(m), rhs(ny + m);
    for (int k = 0; k < 20; ++k) {
      model_.eval_c(y_, c);
      if (model_.unscaled_infeasibility(c) <= opts_.tol) return;
      Eigen::VectorXd sigma = barrier_sigma();
      if (!kkt_.factorize(y_, lambda_, sigma, mu_, dw_last)) return;
      rhs.head(ny).setZero();
      rhs.tail(m) = -c;
      Eigen::VectorXd fy = kkt_.solve(rhs).head(ny);
      for (int i = 0; i < ny; ++i) {
        if (std::isfinite(model_.lb[i]) && fy[i] < 0 &&
            y_[i] - model_.lb[i] < 1e-10 * std::max(1.0, std::abs(model_.lb[i])))
          fy[i] = 0.0;
        if (std::isfinite(model_.ub[i]) && fy[i] > 0 &&
            model_.ub[i] - y_[i] < 1e-10 * std::max(1.0, std::abs(model_.ub[i])))
          fy[i] = 0.0;
      }
      double fa = max_primal_step(fy, tau);
      double theta_k = theta(c);
      bool improved = false;
      Eigen::VectorXd c_t(m);
      for (int bt = 0; bt < 20; ++bt, fa *= 0.5) {
        Eigen::VectorXd y_t = y_ + fa * fy;
        model_.eval_c(y_t, c_t);
        if (theta(c_t) < (1 - 1e-6) * theta_k) {
          y_ = y_t;
          improved = true;
          break;
        }
      }
      if (!improved) return;
    }
  }

  /// Exact minimization over variables that appear only in inequality rows
  /// with negative coefficient and carry positive objective weight (the WLAV
  /// epigraph rho block): given the rest of the point, the optimum is the
  /// smallest feasible value. Removes the sqrt(mu) complementarity floor that
  /// interior iterates leave on degenerate corners.
  void polish_epigraph_block() {
    const int nx = model_.nx;
    // Eligible: positive objective weight, no equality or quadratic
    // appearance, only negative coefficients in inequality rows. Decreasing
    // such a variable can violate nothing except those rows, which give
    // exact lower limits.
    std::vector<char> eligible(nx, 0);
    for (int f = 0; f < nx; ++f)
      if (model_.grad[f] > 0) eligible[f] = 1;
    for (const auto& row : model_.rows) {
      for (const auto& t : row.quad) {
        if (t.var_i < nx) eligible[t.var_i] = 0;
        if (t.var_j < nx) eligible[t.var_j] = 0;
      }
      for (const auto& t : row.lin)
        if (t.var < nx && (row.slack < 0 || t.coef > 0)) eligible[t.var] = 0;
    }

    bool any = false;
    for (int f = 0; f < nx; ++f) {
      if (!eligible[f]) continue;
      double needed = std::isfinite(model_.lb[f]) ? model_.lb[f] : -kInf;
      for (const auto& row : model_.rows) {
        double coef = 0.0;
        for (const auto& t : row.lin)
          if (t.var == f) coef += t.coef;
        if (coef >= 0.0) continue;
        // rest + coef * y_f <= 0  =>  y_f >= rest / (-coef)
        double rest = row.cnst;
        for (const auto& t : row.lin)
          if (t.var != f && t.var != row.slack) rest += t.coef * y_[t.var];
        for (const auto& t : row.quad) rest += t.coef * y_[t.var_i] * y_[t.var_j];
        needed = std::max(needed, rest / (-coef));
      }
      if (std::isfinite(model_.ub[f])) needed = std::min(needed, model_.ub[f]);
      // Exact block optimum in either direction: lowering improves the
      // objective, raising repairs a not-yet-tight epigraph row.
      if (std::isfinite(needed) && needed != y_[f]) {
        y_[f] = needed;
        any = true;
      }
    }
    if (!any) return;
    // Restore exact slack values on the inequality rows.
    for (const auto& row : model_.rows) {
      if (row.slack < 0) continue;
      double v = row.cnst;
      for (const auto& t : row.lin)
        if (t.var != row.slack) v += t.coef * y_[t.var];
      for (const auto& t : row.quad) v += t.coef * y_[t.var_i] * y_[t.var_j];
      y_[row.slack] = std::max(0.0, -v);
    }
  }

  void init_point() {
    const int ny = model_.ny;
    y_.resize(ny);
    // Structural variables from their declared inits, slacks from the rows.
    for (int f = 0; f < model_.nx; ++f) y_[f] = model_.p->variables[model_.var_of_free[f]].init;
    for (int k = 0; k < model_.m; ++k) {
      const auto& row = model_.rows[k];
      if (row.slack < 0) continue;
      double v = row.cnst;
      for (const auto& t : row.lin)
        if (t.var < model_.nx) v += t.coef * y_[t.var];
      for (const auto& t : row.quad) v += t.coef * y_[t.var_i] * y_[t.var_j];
      y_[row.slack] = std::max(1e-6, -v);
    }
    // Push strictly inside the bounds.
    const double k1 = 0.01, k2 = 0.01;
    for (int i = 0; i < ny; ++i) {
      const double lo = model_.lb[i], hi = model_.ub[i];
      if (std::isfinite(lo) && std::isfinite(hi)) {
        double pl = std::min(k1 * std::max(1.0, std::abs(lo)), k2 * (hi - lo));
        double pu = std::min(k1 * std::max(1.0, std::abs(hi)), k2 * (hi - lo));
        y_[i] = std::clamp(y_[i], lo + pl, hi - pu);
      } else if (std::isfinite(lo)) {
        y_[i] = std::max(y_[i], lo + k1 * std::max(1.0, std::abs(lo)));
      } else if (std::isfinite(hi)) {
        y_[i] = std::min(y_[i], hi - k1 * std::max(1.0, std::abs(hi)));
      }
    }
    lambda_ = Eigen::VectorXd::Zero(model_.m);
    zl_ = Eigen::VectorXd::Zero(ny);
    zu_ = Eigen::VectorXd::Zero(ny);
    for (int i = 0; i < ny; ++i) {
      if (std::isfinite(model_.lb[i])) zl_[i] = 1.0;
      if (std::isfinite(model_.ub[i])) zu_[i] = 1.0;
    }
  }

  double theta(const Eigen::VectorXd& c) const { return c.lpNorm<1>(); }

  double barrier_phi(const Eigen::VectorXd& y) const {
    double phi = model_.objective(y);
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) {
        double d = y[i] - model_.lb[i];
        if (d <= 0) return kInf;
        phi -= mu_ * std::log(d);
      }
      if (std::isfinite(model_.ub[i])) {
        double d = model_.ub[i] - y[i];
        if (d <= 0) return kInf;
        phi -= mu_ * std::log(d);
      }
    }
    return phi;
  }

  Eigen::VectorXd barrier_gradient() const {
    Eigen::VectorXd g = model_.grad;
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) g[i] -= mu_ / (y_[i] - model_.lb[i]);
      if (std::isfinite(model_.ub[i])) g[i] += mu_ / (model_.ub[i] - y_[i]);
    }
    return g;
  }

  Eigen::VectorXd barrier_sigma() const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(model_.ny);
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) s[i] += zl_[i] / (y_[i] - model_.lb[i]);
      if (std::isfinite(model_.ub[i])) s[i] += zu_[i] / (model_.ub[i] - y_[i]);
    }
    return s;
  }

  double max_primal_step(const Eigen::VectorXd& dy, double tau) const {
    double a = 1.0;
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i]) && dy[i] < 0) {
        double lim = -tau * (y_[i] - model_.lb[i]) / dy[i];
        a = std::min(a, lim);
      }
      if (std::isfinite(model_.ub[i]) && dy[i] > 0) {
        double lim = tau * (model_.ub[i] - y_[i]) / dy[i];
        a = std::min(a, lim);
      }
    }
    return a;
  }

  std::pair<Eigen::VectorXd, Eigen::VectorXd> tentative_duals(const Eigen::VectorXd& y_new,
                                                               const Eigen::VectorXd& dy,
                                                               double alpha, double tau) const {
    double az = 1.0;
    Eigen::VectorXd dzl = Eigen::VectorXd::Zero(model_.ny), dzu = dzl;
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) {
        double d_prev = (y_new[i] - alpha * dy[i]) - model_.lb[i];
        dzl[i] = (mu_ - zl_[i] * d_prev - zl_[i] * dy[i]) / d_prev;
        if (dzl[i] < 0) az = std::min(az, -tau * zl_[i] / dzl[i]);
      }
      if (std::isfinite(model_.ub[i])) {
        double d_prev = model_.ub[i] - (y_new[i] - alpha * dy[i]);
        dzu[i] = (mu_ - zu_[i] * d_prev + zu_[i] * dy[i]) / d_prev;
        if (dzu[i] < 0) az = std::min(az, -tau * zu_[i] / dzu[i]);
      }
    }
    Eigen::VectorXd zl = zl_ + az * dzl, zu = zu_ + az * dzu;
    const double ks = 1e10;
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) {
        double d = y_new[i] - model_.lb[i];
        zl[i] = std::clamp(zl[i], mu_ / (ks * d), ks * mu_ / d);
      }
      if (std::isfinite(model_.ub[i])) {
        double d = model_.ub[i] - y_new[i];
        zu[i] = std::clamp(zu[i], mu_ / (ks * d), ks * mu_ / d);
      }
    }
    return {zl, zu};
  }

  void update_duals(const Eigen::VectorXd& dy, double alpha, double tau) {
    auto [zl, zu] = tentative_duals(y_, dy, alpha, tau);
    zl_ = std::move(zl);
    zu_ = std::move(zu);
  }

  double dual_inf(const Eigen::VectorXd& c) const {
    (void)c;
    Eigen::VectorXd jt(model_.ny);
    jacobian_transpose_times(model_, y_, lambda_, jt);
    Eigen::VectorXd r = model_.grad + jt - zl_ + zu_;
    return r.lpNorm<Eigen::Infinity>();
  }

  double kkt_error(const Eigen::VectorXd& c, double mu) const {
    return kkt_error_at(c, mu, y_, lambda_, zl_, zu_);
  }

  double kkt_error_at(const Eigen::VectorXd& c, double mu, const Eigen::VectorXd& y,
                      const Eigen::VectorXd& lambda, const Eigen::VectorXd& zl,
                      const Eigen::VectorXd& zu) const {
    Eigen::VectorXd jt(model_.ny);
    jacobian_transpose_times(model_, y, lambda, jt);
    Eigen::VectorXd rd = model_.grad + jt - zl + zu;

    double compl_inf = 0.0;
    int n_bounded = 0;
    double dual_norm1 = lambda.lpNorm<1>();
    for (int i = 0; i < model_.ny; ++i) {
      if (std::isfinite(model_.lb[i])) {
        compl_inf = std::max(compl_inf, std::abs(zl[i] * (y[i] - model_.lb[i]) - mu));
        dual_norm1 += std::abs(zl[i]);
        ++n_bounded;
      }
      if (std::isfinite(model_.ub[i])) {
        compl_inf = std::max(compl_inf, std::abs(zu[i] * (model_.ub[i] - y[i]) - mu));
        dual_norm1 += std::abs(zu[i]);
        ++n_bounded;
      }
    }
    const double smax = 100.0;
    const double sd =
        std::max(smax, dual_norm1 / std::max(1, model_.m + n_bounded)) / smax;
    const double primal = model_.unscaled_infeasibility(c);
    return std::max({rd.lpNorm<Eigen::Infinity>() / sd, primal, compl_inf / sd});
  }

  double compute_alpha_min(double theta_k, double gphi_dy) const {
    const double ga = 0.05;
    if (gphi_dy < 0 && theta_k <= theta_min_) {
      double a = std::min(1e-5, std::min(1e-5 * theta_k / (-gphi_dy),
                                         std::pow(theta_k, 1.1) / std::pow(-gphi_dy, 2.3)));
      return ga * std::max(a, 1e-16);
    }
    if (gphi_dy < 0) return ga * std::min(1e-5, 1e-5 * theta_k / (-gphi_dy));
    return ga * 1e-5;
  }

  bool in_filter(double th, double ph) const {
    for (const auto& e : filter_)
      if (th >= e.theta && ph >= e.phi) return true;
    return false;
  }

  const InternalModel& model_;
  const SolverOptions& opts_;
  KktSystem kkt_;
  Eigen::VectorXd y_, lambda_, zl_, zu_;
  double mu_ = 0.1;
  bool duals_reset_ = false;
  double theta_max_ = kInf, theta_min_ = 0.0;
  std::vector<FilterEntry> filter_;
};

}  // namespace

SolveOutcome solve(const NlpProblem& problem, const SolverOptions& opts) {
  InternalModel model(problem);
  {
    Eigen::VectorXd y0 = Eigen::VectorXd::Zero(model.ny);
    for (int f = 0; f < model.nx; ++f) y0[f] = problem.variables[model.var_of_free[f]].init;
    model.apply_scaling(y0);
  }
  InteriorPoint ip(model, opts);
  return ip.run();
}

namespace {

double run_derivative_check(const NlpProblem& problem, const std::vector<double>& point,
                            double fd_step, int corrupt_row, int corrupt_var, double delta) {
  InternalModel model(problem);  // unscaled: no apply_scaling
  Eigen::VectorXd y = Eigen::VectorXd::Zero(model.ny);
  for (int f = 0; f < model.nx; ++f) y[f] = point.at(model.var_of_free[f]);
  for (const auto& row : model.rows)
    if (row.slack >= 0) y[row.slack] = 0.0;

  double worst = 0.0;
  Eigen::VectorXd cp(model.m), cm(model.m);
  for (int f = 0; f < model.nx; ++f) {
    Eigen::VectorXd yp = y, ym = y;
    yp[f] += fd_step;
    ym[f] -= fd_step;
    model.eval_c(yp, cp);
    model.eval_c(ym, cm);
    for (int k = 0; k < model.m; ++k) {
      // analytic entry
      double a = 0.0;
      const auto& row = model.rows[k];
      for (const auto& t : row.lin)
        if (t.var == f) a += t.coef;
      for (const auto& t : row.quad) {
        if (t.var_i == f) a += t.coef * y[t.var_j];
        if (t.var_j == f) a += t.coef * y[t.var_i];
      }
      if (k == corrupt_row && model.var_of_free[f] == corrupt_var) a += delta;
      double fd = (cp[k] - cm[k]) / (2.0 * fd_step);
      if (a == 0.0 && fd == 0.0) continue;
      worst = std::max(worst, std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)}));
    }
    // objective gradient (linear, exact)
    double go = model.grad[f];
    double fo = ((model.grad.dot(yp)) - (model.grad.dot(ym))) / (2.0 * fd_step);
    worst = std::max(worst, std::abs(go - fo) / std::max({1.0, std::abs(go), std::abs(fo)}));
  }
  return worst;
}

}  // namespace

double check_derivatives(const NlpProblem& problem, const std::vector<double>& point,
                         double fd_step) {
  return run_derivative_check(problem, point, fd_step, -1, -1, 0.0);
}

double check_derivatives_corrupted(const NlpProblem& problem, const std::vector<double>& point,
                                   double fd_step, int constraint_row, int variable, double delta) {
  return run_derivative_check(problem, point, fd_step, constraint_row, variable, delta);
}

}  // namespace impest
