#pragma once

/// @file
/// Polynomial state-feedback synthesis from a control Lyapunov function.
///
/// Given a Lie derivative split L V = drift + sum_i inputs_i u_i (fitted
/// from data or computed from a model) and u = C chi(x), the entries of C
/// are chosen so that
///
///     -drift - sum_i inputs_i [C chi]_i - margin |x - x*|^2 + slack
///
/// is nonnegative on the domain with a Putinar certificate.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "koopsos/edmd.hpp"
#include "koopsos/errors.hpp"
#include "koopsos/polycore.hpp"
#include "koopsos/sdp_solver.hpp"
#include "koopsos/sos.hpp"

namespace koopsos {

/// Control-affine polynomial vector field xdot = f(x) + sum_i g_i(x) u_i.
struct PlantModel {
  int dimension = 1;
  std::vector<Polynomial> f;
  std::vector<std::vector<Polynomial>> g;

  int input_dim() const { return static_cast<int>(g.size()); }

  void validate() const {
    if (static_cast<int>(f.size()) != dimension) throw InputError("PlantModel: f must have one entry per state");
    for (const auto& p : f) {
      if (p.dimension() != dimension) throw InputError("PlantModel: f dimension mismatch");
    }
    for (const auto& gi : g) {
      if (static_cast<int>(gi.size()) != dimension) throw InputError("PlantModel: g_i must have one entry per state");
      for (const auto& p : gi) {
        if (p.dimension() != dimension) throw InputError("PlantModel: g dimension mismatch");
      }
    }
  }

  /// Largest total degree among f and g entries.
  int degree() const {
    int d = 0;
    for (const auto& p : f) d = std::max(d, p.degree());
    for (const auto& gi : g) {
      for (const auto& p : gi) d = std::max(d, p.degree());
    }
    return d;
  }
};

/// drift = <grad V, f>, inputs_i = <grad V, g_i>.
inline LieDecomposition exact_lie_derivative(const PlantModel& plant, const Polynomial& v) {
  plant.validate();
  if (v.dimension() != plant.dimension) throw InputError("exact_lie_derivative: V dimension mismatch");
  const auto grad = v.gradient();
  LieDecomposition out{Polynomial(plant.dimension), {}};
  for (int k = 0; k < plant.dimension; ++k) out.drift += grad[static_cast<std::size_t>(k)] * plant.f[static_cast<std::size_t>(k)];
  for (const auto& gi : plant.g) {
    Polynomial p(plant.dimension);
    for (int k = 0; k < plant.dimension; ++k) p += grad[static_cast<std::size_t>(k)] * gi[static_cast<std::size_t>(k)];
    out.inputs.push_back(std::move(p));
  }
  return out;
}

/// Degree of L V for a plant of the given degree: deg V - 1 + deg F, the ψ
/// degree a dictionary needs to represent it.
inline int degree_check(const Polynomial& v, int plant_degree) {
  if (plant_degree < 1) throw InputError("degree_check: plant degree must be at least 1");
  return std::max(v.degree(), 1) - 1 + plant_degree;
}

/// Candidate control Lyapunov function V = <c, phi>.
struct ClfCandidate {
  Dictionary phi;
  Eigen::VectorXd c;
  Polynomial v;
  Eigen::VectorXd equilibrium;

  ClfCandidate() = default;
  ClfCandidate(Dictionary dict, Eigen::VectorXd coeffs, Eigen::VectorXd eq)
      : phi(std::move(dict)), c(std::move(coeffs)), v(phi.combine(c)), equilibrium(std::move(eq)) {
    if (equilibrium.size() != phi.dimension()) throw InputError("ClfCandidate: equilibrium dimension mismatch");
  }

  bool vanishes_at_equilibrium(double tol = 1e-9) const { return std::abs(v.evaluate(equilibrium)) <= tol; }

  /// Necessary-condition spot check: V > 0 at every sample away from x*.
  bool positive_at(const std::vector<Eigen::VectorXd>& samples, double exclusion = 1e-9) const {
    for (const auto& x : samples) {
      if ((x - equilibrium).norm() <= exclusion) continue;
      if (!(v.evaluate(x) > 0.0)) return false;
    }
    return true;
  }
};

/// u(x) = C chi(x).
struct Controller {
  Dictionary chi;
  Eigen::MatrixXd c;  // m x r
  std::string provenance = "manual";
  std::string objective = "none";
  nlohmann::json diagnostics = nlohmann::json::object();

  int input_dim() const { return static_cast<int>(c.rows()); }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const { return c * chi.evaluate(x); }

  std::vector<Polynomial> polynomials() const {
    std::vector<Polynomial> out;
    for (Eigen::Index i = 0; i < c.rows(); ++i) out.push_back(chi.combine(c.row(i).transpose()));
    return out;
  }

  std::string to_string(int precision = 10) const {
    std::string s;
    const auto ps = polynomials();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      s += "u" + std::to_string(i + 1) + "(x) = " + ps[i].to_string(precision) + "\n";
    }
    return s;
  }
};

inline Eigen::VectorXd evaluate_controller(const Controller& ctrl, const Eigen::VectorXd& x) {
  if (x.size() != ctrl.chi.dimension()) throw InputError("evaluate_controller: state dimension mismatch");
  return ctrl.evaluate(x);
}

inline nlohmann::json to_json(const Controller& ctrl) {
  return {{"chi", to_json(ctrl.chi)},
          {"C", matrix_to_json(ctrl.c)},
          {"provenance", ctrl.provenance},
          {"objective", ctrl.objective},
          {"polynomial", ctrl.polynomials().empty() ? std::string() : ctrl.to_string()},
          {"diagnostics", ctrl.diagnostics}};
}

inline Controller controller_from_json(const nlohmann::json& j) {
  try {
    Controller ctrl;
    ctrl.chi = dictionary_from_json(j.at("chi"));
    ctrl.c = matrix_from_json(j.at("C"));
    if (static_cast<std::size_t>(ctrl.c.cols()) != ctrl.chi.size())
      throw InputError("controller JSON: C has " + std::to_string(ctrl.c.cols()) + " columns, chi has " +
                       std::to_string(ctrl.chi.size()) + " entries");
    ctrl.provenance = j.value("provenance", "manual");
    ctrl.objective = j.value("objective", "none");
    if (j.contains("diagnostics")) ctrl.diagnostics = j.at("diagnostics");
    return ctrl;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("controller JSON: ") + e.what());
  }
}

enum class SynthesisObjective { kL1, kBound, kFeasibility };

inline std::string to_string(SynthesisObjective o) {
  switch (o) {
    case SynthesisObjective::kL1:
      return "l1";
    case SynthesisObjective::kBound:
      return "bound";
    case SynthesisObjective::kFeasibility:
      return "feas";
  }
  return "feas";
}

inline SynthesisObjective synthesis_objective_from_string(const std::string& s) {
  if (s == "l1") return SynthesisObjective::kL1;
  if (s == "bound") return SynthesisObjective::kBound;
  if (s == "feas" || s == "feasibility") return SynthesisObjective::kFeasibility;
  throw InputError("unknown objective '" + s + "' (expected l1, bound or feas)");
}

struct SynthesisOptions {
  SynthesisObjective objective = SynthesisObjective::kL1;
  /// lambda in -lambda |x - x*|^2; 0 gives the non-strict program.
  double margin = 0.0;
  /// x* for the margin term; empty means the origin.
  Eigen::VectorXd equilibrium;
  MultiplierSpec multipliers;
  /// When positive, a nonnegative constant slack enters the expression and
  /// the objective with this weight; the certified bound is then
  /// L V <= slack on the domain.
  double slack_weight = 0.0;
  /// Retry once with multiplier degrees raised by two when infeasible.
  bool escalate_degrees = false;
  std::string provenance = "data-driven";
  SolverOptions solver;
};

/// All monomials of total degree <= degree with per-variable caps; when an
/// equilibrium is given, only monomials vanishing there are kept so that
/// u(x*) = 0 exactly.
inline Dictionary chi_dictionary(int dimension, int degree, std::span<const int> caps = {},
                                 const std::optional<Eigen::VectorXd>& vanish_at = std::nullopt) {
  Dictionary all = monomials_up_to(dimension, degree, caps);
  if (!vanish_at) return all;
  if (vanish_at->size() != dimension) throw InputError("chi_dictionary: equilibrium dimension mismatch");
  std::vector<Monomial> kept;
  const std::span<const double> xs(vanish_at->data(), static_cast<std::size_t>(dimension));
  for (const auto& m : all.entries()) {
    if (m.evaluate(xs) == 0.0) kept.push_back(m);
  }
  return Dictionary(dimension, std::move(kept));
}

struct SynthesisResult {
  Controller controller;
  VerificationReport report;
  double slack = 0.0;
  SdpSolution solution;
};

namespace detail {

inline Polynomial margin_polynomial(int dim, const Eigen::VectorXd& eq) {
  Polynomial p(dim);
  for (int i = 0; i < dim; ++i) {
    const double e = eq.size() == dim ? eq[i] : 0.0;
    Polynomial d = Polynomial::variable(dim, i) - Polynomial::constant(dim, e);
    p += d * d;
  }
  return p;
}

inline MultiplierSpec escalated(const MultiplierSpec& spec, int expr_degree, const SemialgebraicSet& dom) {
  MultiplierSpec s = spec;
  int total = std::max(expr_degree, 0);
  total += total % 2;
  std::vector<int> sd, rd;
  for (std::size_t j = 0; j < dom.inequalities.size(); ++j) {
    const int base = spec.sigma_degrees ? (*spec.sigma_degrees)[j] : total - dom.inequalities[j].degree();
    sd.push_back(base + 2 - (base + 2) % 2);
  }
  for (std::size_t l = 0; l < dom.equalities.size(); ++l) {
    const int base = spec.rho_degrees ? (*spec.rho_degrees)[l] : total - dom.equalities[l].degree();
    rd.push_back(base + 2);
  }
  s.sigma_degrees = sd;
  s.rho_degrees = rd;
  return s;
}

}  // namespace detail

/// The synthesis SOS program before compilation.
struct SynthesisProgram {
  SosProgram program;
  std::vector<int> coefficient_ids;  // row-major over (input, chi entry)
  int slack_id = -1;
};

/// Builds -drift - sum_i inputs_i u_i(x) - margin |x - x*|^2 [+ slack] as
/// one SOS constraint on the domain together with the chosen objective.
inline SynthesisProgram build_synthesis_program(const LieDecomposition& lie, const SemialgebraicSet& domain,
                                                const Dictionary& chi, const SynthesisOptions& options,
                                                const MultiplierSpec& spec) {
  const int dim = lie.drift.dimension();
  if (domain.dimension != dim || chi.dimension() != dim) throw InputError("synthesize: dimension mismatch");
  for (const auto& p : lie.inputs) {
    if (p.dimension() != dim) throw InputError("synthesize: input polynomial dimension mismatch");
  }
  if (chi.empty()) throw InputError("synthesize: empty chi dictionary");
  if (options.margin < 0.0) throw InputError("synthesize: margin must be nonnegative");
  const int m = static_cast<int>(lie.inputs.size());
  const int r = static_cast<int>(chi.size());

  SynthesisProgram out{SosProgram(dim), {}, -1};
  SosProgram& prog = out.program;
  std::vector<DecisionPolynomial> u_polys;
  for (int i = 0; i < m; ++i) {
    DecisionPolynomial ui(dim);
    for (int k = 0; k < r; ++k) {
      const int id = prog.add_decision("C[" + std::to_string(i) + "," + std::to_string(k) + "]");
      out.coefficient_ids.push_back(id);
      ui.add(id, Polynomial::monomial(chi[static_cast<std::size_t>(k)]));
    }
    u_polys.push_back(std::move(ui));
  }
  DecisionPolynomial expr(-lie.drift);
  for (int i = 0; i < m; ++i) {
    for (const auto& [id, p] : u_polys[static_cast<std::size_t>(i)].decision_terms())
      expr.add(id, -(lie.inputs[static_cast<std::size_t>(i)] * p));
  }
  if (options.margin > 0.0) expr.add(-options.margin * detail::margin_polynomial(dim, options.equilibrium));
  if (options.slack_weight > 0.0) {
    out.slack_id = prog.add_decision("slack", true);
    expr.add(out.slack_id, Polynomial::constant(dim, 1.0));
  }
  prog.add_constraint(make_sos_constraint("lie", std::move(expr), domain, spec));

  std::map<int, double> obj;
  switch (options.objective) {
    case SynthesisObjective::kL1:
      obj = l1_objective(prog, out.coefficient_ids);
      break;
    case SynthesisObjective::kBound:
      obj[bound_objective(prog, u_polys, domain, spec)] = 1.0;
      break;
    case SynthesisObjective::kFeasibility:
      break;
  }
  if (out.slack_id >= 0) obj[out.slack_id] += options.slack_weight;
  prog.set_objective(obj);
  return out;
}

/// Builds and solves the synthesis program. Throws InfeasibleError when no
/// certificate exists at the chosen degrees and NumericalError when the
/// solver fails or the extracted certificate does not verify.
inline SynthesisResult synthesize(const LieDecomposition& lie, const SemialgebraicSet& domain, const Dictionary& chi,
                                  const SynthesisOptions& options = {}) {
  const int m = static_cast<int>(lie.inputs.size());
  const int r = static_cast<int>(chi.size());

  auto attempt = [&](const MultiplierSpec& spec, SynthesisResult& res) -> SdpStatus {
    const SynthesisProgram built = build_synthesis_program(lie, domain, chi, options, spec);
    const SosProgram& prog = built.program;
    const std::vector<int>& cid = built.coefficient_ids;
    const int slack_id = built.slack_id;
    const CompiledSos compiled = prog.compile();
    res.solution = solve(compiled.sdp, options.solver);
    if (!has_candidate(res.solution)) return res.solution.status;
    const SosCertificate cert = prog.extract(compiled, res.solution);
    res.report = verify_certificate(cert, prog.constraints());
    // A near-optimal iterate counts only when its certificate verifies.
    if (res.solution.status != SdpStatus::kOptimal && !res.report.pass) return res.solution.status;
    res.controller.chi = chi;
    res.controller.c.resize(m, r);
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < r; ++k) res.controller.c(i, k) = cert.decisions[cid[static_cast<std::size_t>(i * r + k)]];
    }
    res.slack = slack_id >= 0 ? cert.decisions[slack_id] : 0.0;
    res.controller.provenance = options.provenance;
    res.controller.objective = to_string(options.objective);
    res.controller.diagnostics = {{"solver_status", to_string(res.solution.status)},
                                  {"near_optimal", res.solution.near_optimal},
                                  {"iterations", res.solution.iterations},
                                  {"primal_objective", res.solution.primal_objective},
                                  {"dual_objective", res.solution.dual_objective},
                                  {"primal_residual", res.solution.residuals.primal},
                                  {"dual_residual", res.solution.residuals.dual},
                                  {"gap", res.solution.residuals.gap},
                                  {"sdp_rows", compiled.sdp.equalities.size()},
                                  {"gram_size", compiled.layouts[0].gram_basis.size()},
                                  {"margin", options.margin},
                                  {"slack", res.slack},
                                  {"certificate", to_json(res.report)}};
    return SdpStatus::kOptimal;
  };

  SynthesisResult res;
  SdpStatus st = attempt(options.multipliers, res);
  if (st == SdpStatus::kInfeasible && options.escalate_degrees) {
    int degree = lie.drift.degree();
    for (const auto& p : lie.inputs) degree = std::max(degree, p.degree() + chi.max_degree());
    st = attempt(detail::escalated(options.multipliers, degree, domain), res);
  }
  switch (st) {
    case SdpStatus::kOptimal:
      break;
    case SdpStatus::kInfeasible:
      throw InfeasibleError("no certificate at these degrees: the SOS program is infeasible");
    case SdpStatus::kUnbounded:
      throw NumericalError("synthesis program reported unbounded");
    case SdpStatus::kMaxIterations:
      throw NumericalError("SDP solver reached the iteration cap (residuals " +
                           std::to_string(res.solution.residuals.primal) + ", " +
                           std::to_string(res.solution.residuals.dual) + ", " +
                           std::to_string(res.solution.residuals.gap) + ")");
    case SdpStatus::kNumericalFailure:
      throw NumericalError("SDP solver numerical failure");
  }
  if (!res.report.pass) throw NumericalError("certificate verification failed:\n" + res.report.to_string());
  return res;
}

struct ControllerCheck {
  VerificationReport report;
  /// Smallest constant s with -L V(x, u(x)) + s certified on the domain.
  double slack = 0.0;
  SdpStatus status = SdpStatus::kNumericalFailure;
};

/// Re-certifies a fixed controller: finds the least slack s >= 0 such that
/// -drift - inputs . u(x) + s admits a certificate on the domain. With
/// allow_slack = false the program is a pure feasibility check.
inline ControllerCheck verify_controller(const LieDecomposition& lie, const SemialgebraicSet& domain,
                                         const Controller& ctrl, bool allow_slack, const MultiplierSpec& spec = {},
                                         const SolverOptions& solver = {}) {
  const int dim = lie.drift.dimension();
  if (ctrl.input_dim() != static_cast<int>(lie.inputs.size()) || ctrl.chi.dimension() != dim)
    throw InputError("verify_controller: controller does not match the Lie derivative");
  SosProgram prog(dim);
  DecisionPolynomial expr(-lie.drift);
  const auto us = ctrl.polynomials();
  for (std::size_t i = 0; i < us.size(); ++i) expr.add(-(lie.inputs[i] * us[i]));
  int s = -1;
  if (allow_slack) {
    s = prog.add_decision("slack", true);
    expr.add(s, Polynomial::constant(dim, 1.0));
    prog.set_objective({{s, 1.0}});
  }
  prog.add_constraint(make_sos_constraint("lie", std::move(expr), domain, spec));
  const auto res = solve_sos(prog, solver);
  ControllerCheck out;
  out.status = res.solution.status;
  if (has_candidate(res.solution)) {
    out.report = res.report;
    out.slack = s >= 0 ? res.certificate.decisions[s] : 0.0;
  } else {
    out.report.pass = false;
  }
  return out;
}

/// Largest value of drift + inputs . u(x) over sample points: the sampled
/// counterpart of the certificate.
inline double max_sampled_lie(const LieDecomposition& lie, const Controller& ctrl,
                              const std::vector<Eigen::VectorXd>& samples) {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& x : samples) worst = std::max(worst, lie.at(ctrl.evaluate(x)).evaluate(x));
  return worst;
}

}  // namespace koopsos
