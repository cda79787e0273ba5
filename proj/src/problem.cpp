#include "impest/problem.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "impest/parameterization.hpp"

namespace impest {

namespace {

const char* role_str(VarRole r) {
  switch (r) {
    case VarRole::Ure: return "Ure";
    case VarRole::Uim: return "Uim";
    case VarRole::IreBranch: return "Ire";
    case VarRole::IimBranch: return "Iim";
    case VarRole::IreUser: return "Iure";
    case VarRole::IimUser: return "Iuim";
    case VarRole::Umag: return "Umag";
    case VarRole::Rho: return "rho";
    case VarRole::Length: return "len";
    case VarRole::REntry: return "R";
    case VarRole::XEntry: return "X";
  }
  return "?";
}

}  // namespace

std::string DecisionVariable::name() const {
  std::ostringstream os;
  os << role_str(role) << '[' << owner;
  if (role == VarRole::REntry || role == VarRole::XEntry)
    os << ',' << phase_char(phase) << phase_char(phase2);
  else if (role != VarRole::Length && role != VarRole::Rho)
    os << ',' << phase_char(phase);
  else if (role == VarRole::Rho)
    os << ',' << phase_char(phase);
  if (timestep >= 0) os << ",t" << timestep;
  os << ']';
  return os.str();
}

std::string estimation_mode_str(EstimationMode m) {
  switch (m) {
    case EstimationMode::SeFixedZ: return "se";
    case EstimationMode::Lle: return "lle";
    case EstimationMode::ImeTransposed: return "ime_transposed";
    case EstimationMode::ImeUntransposed: return "ime_untransposed";
    case EstimationMode::ImeDiagonal: return "ime_diagonal";
  }
  return "?";
}

EstimationMode estimation_mode_from_str(const std::string& s) {
  if (s == "se") return EstimationMode::SeFixedZ;
  if (s == "lle") return EstimationMode::Lle;
  if (s == "ime_transposed") return EstimationMode::ImeTransposed;
  if (s == "ime_untransposed") return EstimationMode::ImeUntransposed;
  if (s == "ime_diagonal") return EstimationMode::ImeDiagonal;
  throw std::invalid_argument("unknown estimation mode '" + s + "'");
}

int ProblemBuilder::add_variable(DecisionVariable v) {
  p_.variables.push_back(std::move(v));
  return static_cast<int>(p_.variables.size()) - 1;
}

Constraint& ProblemBuilder::add_constraint(ConstraintKind kind, ConstraintTag tag, std::string label) {
  Constraint c;
  c.kind = kind;
  c.tag = tag;
  c.label = std::move(label);
  p_.constraints.push_back(std::move(c));
  return p_.constraints.back();
}

int NlpProblem::free_variable_count() const {
  int n = 0;
  for (const auto& v : variables)
    if (!v.fixed()) ++n;
  return n;
}

int NlpProblem::count_constraints(ConstraintTag tag) const {
  int n = 0;
  for (const auto& c : constraints)
    if (c.tag == tag) ++n;
  return n;
}

std::vector<double> NlpProblem::initial_point() const {
  std::vector<double> x(variables.size());
  for (std::size_t i = 0; i < variables.size(); ++i) x[i] = variables[i].init;
  return x;
}

NlpProblem::Evaluation NlpProblem::evaluate(const std::vector<double>& point) const {
  if (point.size() != variables.size())
    throw std::invalid_argument("point dimension " + std::to_string(point.size()) +
                                " does not match variable count " + std::to_string(variables.size()));
  Evaluation ev;
  for (const auto& term : objective) ev.objective += term.coef * point[term.var];
  for (const auto& c : constraints) {
    double lhs = 0.0;
    for (const auto& t : c.lin) lhs += t.coef * point[t.var];
    for (const auto& t : c.quad) lhs += t.coef * point[t.var_i] * point[t.var_j];
    double viol = (c.kind == ConstraintKind::Equality) ? std::abs(lhs - c.rhs)
                                                       : std::max(0.0, lhs - c.rhs);
    ev.max_violation = std::max(ev.max_violation, viol);
  }
  for (std::size_t i = 0; i < variables.size(); ++i) {
    ev.max_violation = std::max(ev.max_violation, variables[i].lb - point[i]);
    ev.max_violation = std::max(ev.max_violation, point[i] - variables[i].ub);
  }
  return ev;
}

double NlpProblem::binding_value(const MeasurementBinding& b, const std::vector<double>& point) const {
  double v = 0.0;
  for (const auto& t : b.expr_lin) v += t.coef * point[t.var];
  for (const auto& t : b.expr_quad) v += t.coef * point[t.var_i] * point[t.var_j];
  return v;
}

std::string NlpProblem::to_json_string() const {
  nlohmann::json j;
  j["mode"] = estimation_mode_str(mode);
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : variables)
    vars.push_back({{"name", v.name()}, {"lb", v.lb}, {"ub", v.ub}, {"init", v.init}});
  j["variables"] = vars;
  nlohmann::json cons = nlohmann::json::array();
  for (const auto& c : constraints) {
    nlohmann::json jc;
    jc["kind"] = (c.kind == ConstraintKind::Equality) ? "eq" : "le";
    jc["label"] = c.label;
    jc["rhs"] = c.rhs;
    nlohmann::json lin = nlohmann::json::array();
    for (const auto& t : c.lin) lin.push_back({t.var, t.coef});
    nlohmann::json quad = nlohmann::json::array();
    for (const auto& t : c.quad) quad.push_back({t.var_i, t.var_j, t.coef});
    jc["lin"] = lin;
    jc["quad"] = quad;
    cons.push_back(jc);
  }
  j["constraints"] = cons;
  nlohmann::json obj = nlohmann::json::array();
  for (const auto& t : objective) obj.push_back({t.var, t.coef});
  j["objective"] = obj;
  return j.dump(2);
}

namespace {

struct BuildContext {
  const Feeder& f_si;
  Feeder f_pu;
  const MeasurementSet& train;
  const BuildOptions& opt;
  NlpProblem& p;
  ProblemBuilder builder;
  std::unordered_map<std::string, int> index;  // composed key -> var id
  std::unordered_map<std::string, const Bus*> bus_by_id;
  std::unordered_map<std::string, const User*> user_by_id;

  BuildContext(const Feeder& f, const MeasurementSet& ms, const BuildOptions& o, NlpProblem& prob)
      : f_si(f), f_pu(to_per_unit(f)), train(ms), opt(o), p(prob), builder(prob) {
    for (const auto& b : f_pu.buses) bus_by_id[b.id] = &b;
    for (const auto& u : f_pu.users) user_by_id[u.id] = &u;
  }

  static std::string key(const char* role, const std::string& owner, Phase ph, int t) {
    return std::string(role) + '|' + owner + '|' + phase_char(ph) + '|' + std::to_string(t);
  }

  int var(const char* role, const std::string& owner, Phase ph, int t) const {
    auto it = index.find(key(role, owner, ph, t));
    if (it == index.end())
      throw std::logic_error(std::string("internal: missing variable ") + role + " " + owner);
    return it->second;
  }
  bool has_var(const char* role, const std::string& owner, Phase ph, int t) const {
    return index.count(key(role, owner, ph, t)) > 0;
  }
};

void flat_voltage_init(Phase p, double& re, double& im) {
  switch (p) {
    case Phase::A: re = 1.0; im = 0.0; break;
    case Phase::B: re = -0.5; im = -0.8660254037844386; break;
    case Phase::C: re = -0.5; im = 0.8660254037844386; break;
  }
}

void declare_state_variables(BuildContext& ctx, const std::vector<int>& steps,
                             const std::map<std::pair<std::string, int>, std::set<int>>& vmag_buses) {
  const auto& f = ctx.f_pu;
  const std::string src = f.source_bus().id;
  const Phase src_ref = *f.source_bus().phases.begin();

  for (int t : steps) {
    for (const auto& b : f.buses) {
      for (Phase ph : b.phases) {
        double re, im;
        flat_voltage_init(ph, re, im);
        DecisionVariable vre;
        vre.role = VarRole::Ure;
        vre.owner = b.id;
        vre.phase = ph;
        vre.timestep = t;
        vre.lb = -ctx.opt.v_box_pu;
        vre.ub = ctx.opt.v_box_pu;
        vre.init = re;
        ctx.index[BuildContext::key("Ure", b.id, ph, t)] = ctx.builder.add_variable(vre);

        DecisionVariable vim = vre;
        vim.role = VarRole::Uim;
        vim.init = im;
        if (b.id == src && ph == src_ref) {
          // Angle reference: imaginary part of the source reference phase.
          vim.lb = vim.ub = 0.0;
          vim.init = 0.0;
        }
        ctx.index[BuildContext::key("Uim", b.id, ph, t)] = ctx.builder.add_variable(vim);
      }
    }
    for (const auto& br : f.branches) {
      for (Phase ph : br.phases) {
        DecisionVariable ire;
        ire.role = VarRole::IreBranch;
        ire.owner = br.id;
        ire.phase = ph;
        ire.timestep = t;
        ire.lb = -ctx.opt.i_max_pu;
        ire.ub = ctx.opt.i_max_pu;
        ctx.index[BuildContext::key("Ire", br.id, ph, t)] = ctx.builder.add_variable(ire);
        DecisionVariable iim = ire;
        iim.role = VarRole::IimBranch;
        ctx.index[BuildContext::key("Iim", br.id, ph, t)] = ctx.builder.add_variable(iim);
      }
    }
    for (const auto& u : f.users) {
      for (Phase ph : u.phases) {
        DecisionVariable ire;
        ire.role = VarRole::IreUser;
        ire.owner = u.id;
        ire.phase = ph;
        ire.timestep = t;
        ire.lb = -ctx.opt.i_max_pu;
        ire.ub = ctx.opt.i_max_pu;
        ctx.index[BuildContext::key("Iure", u.id, ph, t)] = ctx.builder.add_variable(ire);
        DecisionVariable iim = ire;
        iim.role = VarRole::IimUser;
        ctx.index[BuildContext::key("Iuim", u.id, ph, t)] = ctx.builder.add_variable(iim);
      }
    }
    // One Umag per measured (bus, phase, timestep).
    for (const auto& [bus_phase, ts] : vmag_buses) {
      if (!ts.count(t)) continue;
      DecisionVariable m;
      m.role = VarRole::Umag;
      m.owner = bus_phase.first;
      m.phase = static_cast<Phase>(bus_phase.second);
      m.timestep = t;
      m.lb = ctx.opt.umag_lb_pu;
      m.ub = ctx.opt.umag_ub_pu;
      m.init = 1.0;
      ctx.index[BuildContext::key("Umag", bus_phase.first, m.phase, t)] = ctx.builder.add_variable(m);
    }
  }
}

void emit_physics(BuildContext& ctx, const std::vector<int>& steps,
                  const std::map<std::string, BranchImpedanceMap*>& z_maps) {
  const auto& f = ctx.f_pu;
  const std::string src = f.source_bus().id;

  for (int t : steps) {
    // KCL at every non-source bus: inflow - outflow - user draw = 0.
    for (const auto& b : f.buses) {
      if (b.id == src) continue;
      for (Phase ph : b.phases) {
        Constraint re_row, im_row;
        re_row.kind = im_row.kind = ConstraintKind::Equality;
        re_row.tag = im_row.tag = ConstraintTag::Kcl;
        re_row.label = "kcl re " + b.id + " " + phase_char(ph);
        im_row.label = "kcl im " + b.id + " " + phase_char(ph);
        for (const auto& br : f.branches) {
          if (!br.phases.contains(ph)) continue;
          double sign = 0.0;
          if (br.to_bus == b.id) sign = 1.0;
          else if (br.from_bus == b.id) sign = -1.0;
          else continue;
          re_row.lin.push_back({ctx.var("Ire", br.id, ph, t), sign});
          im_row.lin.push_back({ctx.var("Iim", br.id, ph, t), sign});
        }
        for (const auto& u : f.users) {
          if (u.bus != b.id || !u.phases.contains(ph)) continue;
          re_row.lin.push_back({ctx.var("Iure", u.id, ph, t), -1.0});
          im_row.lin.push_back({ctx.var("Iuim", u.id, ph, t), -1.0});
        }
        ctx.p.constraints.push_back(std::move(re_row));
        ctx.p.constraints.push_back(std::move(im_row));
      }
    }

    // Ohm's law per branch row; bilinear whenever an entry is a variable.
    for (const auto& br : f.branches) {
      const BranchImpedanceMap* map = z_maps.at(br.id);
      for (Phase ph : br.phases) {
        const int pi = br.phases.index_of(ph);
        Constraint re_row, im_row;
        re_row.kind = im_row.kind = ConstraintKind::Equality;
        re_row.tag = im_row.tag = ConstraintTag::Ohm;
        re_row.label = "ohm re " + br.id + " " + phase_char(ph);
        im_row.label = "ohm im " + br.id + " " + phase_char(ph);

        re_row.lin.push_back({ctx.var("Ure", br.from_bus, ph, t), 1.0});
        re_row.lin.push_back({ctx.var("Ure", br.to_bus, ph, t), -1.0});
        im_row.lin.push_back({ctx.var("Uim", br.from_bus, ph, t), 1.0});
        im_row.lin.push_back({ctx.var("Uim", br.to_bus, ph, t), -1.0});

        for (Phase q : br.phases) {
          const int qi = br.phases.index_of(q);
          const int ire = ctx.var("Ire", br.id, q, t);
          const int iim = ctx.var("Iim", br.id, q, t);
          if (map->length_var >= 0) {
            const double rn = map->r_nom(pi, qi), xn = map->x_nom(pi, qi);
            if (rn != 0.0) {
              re_row.quad.push_back({map->length_var, ire, -rn});
              im_row.quad.push_back({map->length_var, iim, -rn});
            }
            if (xn != 0.0) {
              re_row.quad.push_back({map->length_var, iim, xn});
              im_row.quad.push_back({map->length_var, ire, -xn});
            }
          } else {
            const int rv = map->r_var(pi, qi), xv = map->x_var(pi, qi);
            if (rv >= 0) {
              re_row.quad.push_back({rv, ire, -1.0});
              im_row.quad.push_back({rv, iim, -1.0});
            } else if (map->r_fixed(pi, qi) != 0.0) {
              re_row.lin.push_back({ire, -map->r_fixed(pi, qi)});
              im_row.lin.push_back({iim, -map->r_fixed(pi, qi)});
            }
            if (xv >= 0) {
              re_row.quad.push_back({xv, iim, 1.0});
              im_row.quad.push_back({xv, ire, -1.0});
            } else if (map->x_fixed(pi, qi) != 0.0) {
              re_row.lin.push_back({iim, map->x_fixed(pi, qi)});
              im_row.lin.push_back({ire, -map->x_fixed(pi, qi)});
            }
          }
        }
        ctx.p.constraints.push_back(std::move(re_row));
        ctx.p.constraints.push_back(std::move(im_row));
      }
    }
  }
}

void emit_measurements(BuildContext& ctx,
                       const std::map<std::pair<std::string, int>, std::set<int>>& vmag_buses) {
  // Voltage magnitude mapping rows, one per measured (bus, phase, timestep).
  for (const auto& [bus_phase, ts] : vmag_buses) {
    const auto& bus = bus_phase.first;
    const Phase ph = static_cast<Phase>(bus_phase.second);
    for (int t : ts) {
      auto& c = ctx.builder.add_constraint(ConstraintKind::Equality, ConstraintTag::VmagMapping,
                                           "vmag " + bus + " " + phase_char(ph));
      const int ure = ctx.var("Ure", bus, ph, t);
      const int uim = ctx.var("Uim", bus, ph, t);
      const int um = ctx.var("Umag", bus, ph, t);
      c.quad = {{ure, ure, 1.0}, {uim, uim, 1.0}, {um, um, -1.0}};
    }
  }

  // One rho and two epigraph rows per sample.
  for (const auto& s : ctx.train.samples) {
    const User* u = ctx.user_by_id.count(s.user_id) ? ctx.user_by_id.at(s.user_id) : nullptr;
    if (!u) throw std::invalid_argument("measurement references unknown user '" + s.user_id + "'");
    if (!u->phases.contains(s.phase))
      throw std::invalid_argument("measurement references phase " +
                                  std::string(1, phase_char(s.phase)) + " not on user " + s.user_id);
    if (!(s.sigma > 0))
      throw std::invalid_argument("measurement for user " + s.user_id + " has non-positive sigma");

    MeasurementBinding bind;
    bind.sample = s;
    const double scale = (s.kind == MeasKind::Vmag) ? ctx.p.v_base : ctx.p.s_base_1ph;
    bind.z_pu = s.value / scale;
    bind.sigma_pu = s.sigma / scale;

    DecisionVariable rho;
    rho.role = VarRole::Rho;
    rho.owner = s.user_id;
    rho.phase = s.phase;
    rho.timestep = s.timestep;
    rho.lb = 0.0;
    rho.init = 1.0;
    bind.rho_var = ctx.builder.add_variable(rho);
    ctx.builder.add_objective_term(bind.rho_var, 1.0);

    const int t = s.timestep;
    if (s.kind == MeasKind::Vmag) {
      bind.expr_lin = {{ctx.var("Umag", u->bus, s.phase, t), 1.0}};
    } else {
      const int ure = ctx.var("Ure", u->bus, s.phase, t);
      const int uim = ctx.var("Uim", u->bus, s.phase, t);
      const int ir = ctx.var("Iure", s.user_id, s.phase, t);
      const int ii = ctx.var("Iuim", s.user_id, s.phase, t);
      if (s.kind == MeasKind::P)
        bind.expr_quad = {{ure, ir, 1.0}, {uim, ii, 1.0}};
      else
        bind.expr_quad = {{uim, ir, 1.0}, {ure, ii, -1.0}};
    }

    const double w = 1.0 / bind.sigma_pu;
    auto label = meas_kind_str(s.kind) + " " + s.user_id + " " + phase_char(s.phase) + " t" +
                 std::to_string(t);
    auto& plus = ctx.builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::Epigraph,
                                            "epi+ " + label);
    for (const auto& term : bind.expr_lin) plus.lin.push_back({term.var, w * term.coef});
    for (const auto& term : bind.expr_quad) plus.quad.push_back({term.var_i, term.var_j, w * term.coef});
    plus.lin.push_back({bind.rho_var, -1.0});
    plus.rhs = w * bind.z_pu;

    auto& minus = ctx.builder.add_constraint(ConstraintKind::LessEqual, ConstraintTag::Epigraph,
                                             "epi- " + label);
    for (const auto& term : bind.expr_lin) minus.lin.push_back({term.var, -w * term.coef});
    for (const auto& term : bind.expr_quad)
      minus.quad.push_back({term.var_i, term.var_j, -w * term.coef});
    minus.lin.push_back({bind.rho_var, -1.0});
    minus.rhs = -w * bind.z_pu;

    ctx.p.bindings.push_back(std::move(bind));
  }
}

}  // namespace

NlpProblem build(const Feeder& feeder, const MeasurementSet& train, const BuildOptions& options) {
  auto violations = errors_only(validate(feeder));
  if (!violations.empty())
    throw std::invalid_argument("feeder invalid: " + violations.front().entity + ": " +
                                violations.front().message);
  if (train.samples.empty()) throw std::invalid_argument("training set is empty");

  // Duplicate samples are rejected, not averaged.
  {
    std::set<std::tuple<std::string, int, int, int>> seen;
    for (const auto& s : train.samples)
      if (!seen.insert({s.user_id, s.timestep, static_cast<int>(s.kind), static_cast<int>(s.phase)})
               .second)
        throw std::invalid_argument("duplicate measurement for user " + s.user_id + " at timestep " +
                                    std::to_string(s.timestep));
  }

  NlpProblem problem;
  problem.mode = options.mode;
  problem.feeder_si = feeder;
  problem.v_base = feeder.base_voltage_v;
  problem.s_base_1ph = feeder.base_power_va / 3.0;
  problem.i_base = feeder.i_base_a();
  {
    auto steps = train.timesteps();
    problem.timesteps.assign(steps.begin(), steps.end());
  }

  BuildContext ctx(feeder, train, options, problem);

  // Measured-voltage locations: (bus, phase) -> timesteps.
  std::map<std::pair<std::string, int>, std::set<int>> vmag_buses;
  bool any_meas_user = false;
  for (const auto& s : train.samples) {
    auto it = ctx.user_by_id.find(s.user_id);
    if (it == ctx.user_by_id.end())
      throw std::invalid_argument("measurement references unknown user '" + s.user_id + "'");
    any_meas_user = true;
    if (s.kind == MeasKind::Vmag)
      vmag_buses[{it->second->bus, static_cast<int>(s.phase)}].insert(s.timestep);
  }
  if (!any_meas_user) throw std::invalid_argument("no measurements on any connected user");

  declare_state_variables(ctx, problem.timesteps, vmag_buses);

  // Impedance parameterization per branch.
  const double z_base = feeder.z_base_ohm();
  std::vector<BranchImpedanceMap> maps;
  maps.reserve(feeder.branches.size());
  for (const auto& br : ctx.f_pu.branches) {
    const bool pinned = options.pinned_branches.count(br.id) > 0;
    if (pinned || options.mode == EstimationMode::SeFixedZ) {
      BranchImpedanceMap map;
      map.branch_id = br.id;
      map.dim = br.phases.size();
      map.r_var = Eigen::MatrixXi::Constant(map.dim, map.dim, -1);
      map.x_var = Eigen::MatrixXi::Constant(map.dim, map.dim, -1);
      map.r_fixed = br.impedance.R;  // already per-unit
      map.x_fixed = br.impedance.X;
      maps.push_back(std::move(map));
      continue;
    }
    if (options.mode == EstimationMode::Lle) {
      LleBranchParams params;
      auto ov = options.lle_overrides.find(br.id);
      if (ov != options.lle_overrides.end()) {
        params = ov->second;
        params.r_nom_per_km /= z_base;  // overrides are SI ohm/km
        params.x_nom_per_km /= z_base;
      } else {
        if (!br.linecode)
          throw std::invalid_argument("branch " + br.id + ": LLE requires a linecode (or pin it)");
        const auto& lc = ctx.f_pu.linecodes.at(*br.linecode);  // already per-unit
        params.r_nom_per_km = lc.r_ohm_per_km;
        params.x_nom_per_km = lc.x_ohm_per_km;
        if (!br.length_m)
          throw std::invalid_argument("branch " + br.id + ": LLE requires a listed length");
        params.length_guess_m = *br.length_m;
        params.length_lb_m = options.length_lb_rel * *br.length_m;
        params.length_ub_m = options.length_ub_rel * *br.length_m;
      }
      maps.push_back(parameterize_lle(br, params, ctx.builder, problem.timesteps,
                                      options.lle_use_length_residuals, options.lle_single_residual));
      continue;
    }
    ImeVariant variant;
    if (options.mode == EstimationMode::ImeTransposed) variant.tag = ImeVariant::Transposed;
    else if (options.mode == EstimationMode::ImeUntransposed) variant.tag = ImeVariant::Untransposed;
    else variant.tag = ImeVariant::Diagonal;
    AlphaBounds alphas = options.alphas ? *options.alphas
                        : default_alphas(variant.tag == ImeVariant::Untransposed
                                             ? AlphaScope::LooseUntransposed
                                             : AlphaScope::TransposedDefaults);
    ImeToggles toggles;
    toggles.entry_lb = options.z_entry_lb_pu;
    toggles.entry_ub = options.z_entry_ub_pu;
    maps.push_back(parameterize_ime(br, variant, alphas, toggles, ctx.builder));
  }
  problem.impedance_maps = std::move(maps);

  std::map<std::string, BranchImpedanceMap*> z_by_branch;
  for (auto& m : problem.impedance_maps) z_by_branch[m.branch_id] = &m;

  emit_physics(ctx, problem.timesteps, z_by_branch);
  emit_measurements(ctx, vmag_buses);
  return problem;
}

EstimationResult recover_solution(const NlpProblem& problem, const std::vector<double>& x_star) {
  auto ev = problem.evaluate(x_star);
  EstimationResult res;
  res.objective = ev.objective;
  res.max_violation = ev.max_violation;
  if (ev.max_violation > 1e-6) {
    res.flagged = true;
    res.flag_message =
        "solution violates constraints by " + std::to_string(ev.max_violation) + " (> 1e-6)";
  }

  const double z_base = problem.feeder_si.z_base_ohm();
  res.feeder_est = problem.feeder_si;
  for (const auto& map : problem.impedance_maps) {
    Branch* br = nullptr;
    for (auto& b : res.feeder_est.branches)
      if (b.id == map.branch_id) br = &b;
    if (!br) continue;
    const int n = map.dim;
    Eigen::MatrixXd R(n, n), X(n, n);
    if (map.length_var >= 0) {
      const double len_km = x_star[map.length_var];
      R = len_km * map.r_nom * z_base;
      X = len_km * map.x_nom * z_base;
      br->length_m = len_km * 1000.0;
      res.lengths_m[map.branch_id] = len_km * 1000.0;
    } else {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          R(i, j) = (map.r_var(i, j) >= 0 ? x_star[map.r_var(i, j)] : map.r_fixed(i, j)) * z_base;
          X(i, j) = (map.x_var(i, j) >= 0 ? x_star[map.x_var(i, j)] : map.x_fixed(i, j)) * z_base;
        }
    }
    const bool sym = R.isApprox(R.transpose(), 0.0) && X.isApprox(X.transpose(), 0.0);
    br->impedance = ImpedanceMatrix(R, X, sym);
  }

  // States per timestep, in SI.
  res.states.steps.resize(problem.timesteps.size());
  std::map<int, int> t_pos;
  for (std::size_t k = 0; k < problem.timesteps.size(); ++k)
    t_pos[problem.timesteps[k]] = static_cast<int>(k);

  for (std::size_t i = 0; i < problem.variables.size(); ++i) {
    const auto& v = problem.variables[i];
    if (v.timestep < 0 || !t_pos.count(v.timestep)) continue;
    auto& step = res.states.steps[t_pos[v.timestep]];
    step.converged = !res.flagged;
    switch (v.role) {
      case VarRole::Ure: {
        auto& vec = step.bus_voltage_v[v.owner];
        const Bus* bus = problem.feeder_si.find_bus(v.owner);
        if (vec.empty()) vec.resize(bus->phases.size());
        vec[bus->phases.index_of(v.phase)] += x_star[i] * problem.v_base;
        break;
      }
      case VarRole::Uim: {
        auto& vec = step.bus_voltage_v[v.owner];
        const Bus* bus = problem.feeder_si.find_bus(v.owner);
        if (vec.empty()) vec.resize(bus->phases.size());
        vec[bus->phases.index_of(v.phase)] += std::complex<double>(0, x_star[i] * problem.v_base);
        break;
      }
      case VarRole::IreBranch:
      case VarRole::IimBranch: {
        auto& vec = step.branch_current_a[v.owner];
        const Branch* b = problem.feeder_si.find_branch(v.owner);
        if (vec.empty()) vec.resize(b->phases.size());
        const double val = x_star[i] * problem.i_base;
        vec[b->phases.index_of(v.phase)] +=
            (v.role == VarRole::IreBranch) ? std::complex<double>(val, 0)
                                           : std::complex<double>(0, val);
        break;
      }
      case VarRole::IreUser:
      case VarRole::IimUser: {
        auto& vec = step.user_current_a[v.owner];
        const User* u = problem.feeder_si.find_user(v.owner);
        if (vec.empty()) vec.resize(u->phases.size());
        const double val = x_star[i] * problem.i_base;
        vec[u->phases.index_of(v.phase)] += (v.role == VarRole::IreUser)
                                                ? std::complex<double>(val, 0)
                                                : std::complex<double>(0, val);
        break;
      }
      default: break;
    }
  }

  res.residuals.reserve(problem.bindings.size());
  for (const auto& b : problem.bindings)
    res.residuals.push_back(std::abs(problem.binding_value(b, x_star) - b.z_pu) / b.sigma_pu);
  return res;
}

}  // namespace impest
