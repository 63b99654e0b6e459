#pragma once

/// @file
/// Sum-of-squares programs over semialgebraic sets and their compilation to
/// SdpProblem.
///
/// A constraint states that an expression e(x; d), affine in the decision
/// variables d, is nonnegative on D = {a_j >= 0, b_l = 0}. It is certified by
///
///     e - sum_j a_j sigma_j - sum_l b_l rho_l = v^T P v,
///
/// with P and the Gram matrices of every sigma_j positive semidefinite and
/// rho_l free polynomials. On D the left side is at most e, so the identity
/// proves e >= 0 there.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "koopsos/errors.hpp"
#include "koopsos/polycore.hpp"
#include "koopsos/sdp.hpp"
#include "koopsos/sdp_solver.hpp"

namespace koopsos {

inline constexpr double kPsdTolerance = 1e-7;
inline constexpr double kReconstructionTolerance = 1e-6;

/// Polynomial whose coefficients depend affinely on scalar decision
/// variables: constant_part + sum_id d_id * decision_terms[id].
class DecisionPolynomial {
 public:
  DecisionPolynomial() = default;
  explicit DecisionPolynomial(int dimension) : constant_(dimension) {}
  explicit DecisionPolynomial(Polynomial constant) : constant_(std::move(constant)) {}

  int dimension() const { return constant_.dimension(); }
  const Polynomial& constant_part() const { return constant_; }
  const std::map<int, Polynomial>& decision_terms() const { return terms_; }

  DecisionPolynomial& add(const Polynomial& p) {
    check(p);
    constant_ += p;
    return *this;
  }
  DecisionPolynomial& add(int id, const Polynomial& p) {
    check(p);
    if (id < 0) throw InputError("DecisionPolynomial: negative decision id");
    auto it = terms_.find(id);
    if (it == terms_.end()) {
      if (!p.is_zero()) terms_.emplace(id, p);
    } else {
      it->second += p;
      if (it->second.is_zero()) terms_.erase(it);
    }
    return *this;
  }
  DecisionPolynomial& operator+=(const DecisionPolynomial& o) {
    add(o.constant_);
    for (const auto& [id, p] : o.terms_) add(id, p);
    return *this;
  }
  DecisionPolynomial& operator*=(double s) {
    constant_ *= s;
    for (auto it = terms_.begin(); it != terms_.end();) {
      it->second *= s;
      it = it->second.is_zero() ? terms_.erase(it) : std::next(it);
    }
    return *this;
  }
  friend DecisionPolynomial operator+(DecisionPolynomial a, const DecisionPolynomial& b) { return a += b; }
  friend DecisionPolynomial operator*(DecisionPolynomial a, double s) { return a *= s; }
  friend DecisionPolynomial operator-(DecisionPolynomial a) { return a *= -1.0; }

  /// Plain polynomial at a numeric assignment (indexed by decision id).
  Polynomial evaluate(const Eigen::VectorXd& values) const {
    Polynomial out = constant_;
    for (const auto& [id, p] : terms_) {
      if (id >= values.size()) throw InputError("DecisionPolynomial::evaluate: missing decision value");
      out += values[id] * p;
    }
    return out;
  }

  std::set<Monomial> support() const {
    std::set<Monomial> s;
    for (const auto& [m, c] : constant_.terms()) s.insert(m);
    for (const auto& [id, p] : terms_) {
      for (const auto& [m, c] : p.terms()) s.insert(m);
    }
    return s;
  }

  int degree() const {
    int d = constant_.degree();
    for (const auto& [id, p] : terms_) d = std::max(d, p.degree());
    return d;
  }
  int degree_in(int i) const {
    int d = constant_.degree_in(i);
    for (const auto& [id, p] : terms_) d = std::max(d, p.degree_in(i));
    return d;
  }

 private:
  void check(const Polynomial& p) const {
    if (p.dimension() != dimension()) throw InputError("DecisionPolynomial: dimension mismatch");
  }

  Polynomial constant_;
  std::map<int, Polynomial> terms_;
};

/// Degree choices for the Putinar multipliers. Empty optionals select the
/// default rule: every a_j sigma_j and b_l rho_l reaches the expression
/// degree rounded up to even. variable_caps bounds per-variable exponents of
/// the Gram basis (for instance x2 <= 1 when x1^2 + x2^2 = 1 lets x2^2 be
/// rewritten).
struct MultiplierSpec {
  std::optional<std::vector<int>> sigma_degrees;
  std::optional<std::vector<int>> rho_degrees;
  std::vector<int> variable_caps;
};

inline nlohmann::json to_json(const MultiplierSpec& s) {
  nlohmann::json j = nlohmann::json::object();
  j["sigma_degrees"] = s.sigma_degrees ? nlohmann::json(*s.sigma_degrees) : nlohmann::json(nullptr);
  j["rho_degrees"] = s.rho_degrees ? nlohmann::json(*s.rho_degrees) : nlohmann::json(nullptr);
  j["variable_caps"] = s.variable_caps;
  return j;
}

inline MultiplierSpec multiplier_spec_from_json(const nlohmann::json& j) {
  MultiplierSpec s;
  try {
    if (j.contains("sigma_degrees") && !j["sigma_degrees"].is_null())
      s.sigma_degrees = j["sigma_degrees"].get<std::vector<int>>();
    if (j.contains("rho_degrees") && !j["rho_degrees"].is_null())
      s.rho_degrees = j["rho_degrees"].get<std::vector<int>>();
    if (j.contains("variable_caps")) s.variable_caps = j["variable_caps"].get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("multiplier spec: ") + e.what());
  }
  return s;
}

struct SosConstraint {
  std::string name;
  DecisionPolynomial expression;
  SemialgebraicSet domain;
  Dictionary gram_basis;
  std::vector<Dictionary> sigma_bases;  // one per domain inequality (may be empty)
  std::vector<Dictionary> rho_bases;    // one per domain equality (may be empty)
};

namespace detail {

inline int max_exponent(const Polynomial& p, int i) { return p.is_zero() ? 0 : p.degree_in(i); }

inline Dictionary capped_monomials(int dim, int total, const std::vector<int>& caps) {
  if (total < 0) return Dictionary(dim, {});
  for (int c : caps) {
    if (c < 0) return Dictionary(dim, {});
  }
  return build_dictionary(dim, std::span<const int>(caps), total);
}

}  // namespace detail

/// Monomials of total degree <= ceil(expr_degree / 2) with exponent_i <=
/// caps[i] (caps may be empty).
inline Dictionary gram_basis_for(int expr_degree, const SemialgebraicSet& domain, std::span<const int> caps = {}) {
  if (expr_degree < 0) throw InputError("gram_basis_for: negative degree");
  return monomials_up_to(domain.dimension, (expr_degree + 1) / 2, caps);
}

/// Builds a constraint with Gram and multiplier bases chosen by spec.
inline SosConstraint make_sos_constraint(std::string name, DecisionPolynomial expression,
                                         SemialgebraicSet domain, const MultiplierSpec& spec = {}) {
  const int dim = expression.dimension();
  if (domain.dimension != dim) throw InputError("SOS constraint '" + name + "': domain dimension mismatch");
  if (!spec.variable_caps.empty() && static_cast<int>(spec.variable_caps.size()) != dim)
    throw InputError("SOS constraint '" + name + "': variable_caps length must equal dimension");
  const std::size_t ni = domain.inequalities.size();
  const std::size_t ne = domain.equalities.size();
  if (spec.sigma_degrees && spec.sigma_degrees->size() != ni)
    throw InputError("SOS constraint '" + name + "': need one sigma degree per inequality");
  if (spec.rho_degrees && spec.rho_degrees->size() != ne)
    throw InputError("SOS constraint '" + name + "': need one rho degree per equality");

  int d_even = std::max(expression.degree(), 0);
  d_even += d_even % 2;
  int total = d_even;
  if (spec.sigma_degrees) {
    for (std::size_t j = 0; j < ni; ++j) {
      if ((*spec.sigma_degrees)[j] >= 0)
        total = std::max(total, domain.inequalities[j].degree() + (*spec.sigma_degrees)[j]);
    }
  }
  if (spec.rho_degrees) {
    for (std::size_t l = 0; l < ne; ++l) {
      if ((*spec.rho_degrees)[l] >= 0) total = std::max(total, domain.equalities[l].degree() + (*spec.rho_degrees)[l]);
    }
  }
  total += total % 2;
  const int half = total / 2;

  std::vector<int> gram_caps(static_cast<std::size_t>(dim), half);
  for (int i = 0; i < dim; ++i) {
    auto& c = gram_caps[static_cast<std::size_t>(i)];
    if (!spec.sigma_degrees && !spec.rho_degrees) c = std::min(c, (expression.degree_in(i) + 1) / 2);
    if (!spec.variable_caps.empty()) c = std::min(c, spec.variable_caps[static_cast<std::size_t>(i)]);
  }
  SosConstraint out;
  out.name = std::move(name);
  out.gram_basis = detail::capped_monomials(dim, half, gram_caps);

  for (std::size_t j = 0; j < ni; ++j) {
    const Polynomial& a = domain.inequalities[j];
    const int sdeg = spec.sigma_degrees ? (*spec.sigma_degrees)[j] : total - a.degree();
    std::vector<int> caps(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
      caps[static_cast<std::size_t>(i)] = (2 * gram_caps[static_cast<std::size_t>(i)] - detail::max_exponent(a, i)) / 2;
    out.sigma_bases.push_back(sdeg < 0 ? Dictionary(dim, {}) : detail::capped_monomials(dim, sdeg / 2, caps));
  }
  for (std::size_t l = 0; l < ne; ++l) {
    const Polynomial& b = domain.equalities[l];
    const int rdeg = spec.rho_degrees ? (*spec.rho_degrees)[l] : total - b.degree();
    std::vector<int> caps(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
      caps[static_cast<std::size_t>(i)] = 2 * gram_caps[static_cast<std::size_t>(i)] - detail::max_exponent(b, i);
    out.rho_bases.push_back(rdeg < 0 ? Dictionary(dim, {}) : detail::capped_monomials(dim, rdeg, caps));
  }
  out.expression = std::move(expression);
  out.domain = std::move(domain);
  return out;
}

struct DecisionVariable {
  std::string name;
  bool nonnegative = false;
};

/// Layout of one compiled constraint inside the SdpProblem.
struct ConstraintLayout {
  Dictionary gram_basis;  // after pruning
  int gram_block = -1;    // -1 when the pruned basis is empty
  std::vector<int> sigma_blocks;
  std::vector<std::vector<int>> rho_vars;  // free-variable index per rho monomial
};

struct CompiledSos {
  SdpProblem sdp;
  std::vector<VarRef> decision_vars;
  std::vector<ConstraintLayout> layouts;
  /// For every SDP row: the constraint index (or -1 for a linear row) and
  /// the monomial it matches.
  std::vector<std::pair<int, Monomial>> row_labels;
};

struct SosCertificate {
  Eigen::VectorXd decisions;
  std::vector<Dictionary> gram_bases;
  std::vector<Eigen::MatrixXd> grams;
  std::vector<std::vector<Eigen::MatrixXd>> sigma_grams;
  std::vector<std::vector<Polynomial>> sigmas;
  std::vector<std::vector<Polynomial>> rhos;
};

struct ConstraintCheck {
  std::string name;
  double min_eigenvalue = 0.0;
  double residual = 0.0;
  bool pass = false;
};

struct VerificationReport {
  std::vector<ConstraintCheck> constraints;
  bool pass = false;

  std::string to_string() const {
    std::string s;
    for (const auto& c : constraints) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s: min_eig %.3e residual %.3e %s\n", c.name.c_str(), c.min_eigenvalue,
                    c.residual, c.pass ? "pass" : "FAIL");
      s += buf;
    }
    s += pass ? "certificate: pass\n" : "certificate: FAIL\n";
    return s;
  }
};

inline nlohmann::json to_json(const VerificationReport& r) {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : r.constraints) {
    cs.push_back({{"name", c.name}, {"min_eigenvalue", c.min_eigenvalue}, {"residual", c.residual}, {"pass", c.pass}});
  }
  return {{"constraints", cs}, {"pass", r.pass}};
}

namespace detail {

inline double min_eigenvalue(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline Polynomial gram_polynomial(const Dictionary& basis, const Eigen::MatrixXd& g, int dim) {
  Polynomial p(dim);
  std::map<Monomial, double> acc;
  for (std::size_t i = 0; i < basis.size(); ++i) {
    for (std::size_t j = 0; j < basis.size(); ++j) {
      acc[basis[i] * basis[j]] += g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    }
  }
  for (const auto& [m, c] : acc) p.add_term(m, c);
  return p;
}

}  // namespace detail

/// Checks every constraint: Gram and sigma Gram matrices PSD to
/// -kPsdTolerance and the certificate identity holds coefficient-wise to
/// kReconstructionTolerance.
inline VerificationReport verify_certificate(const SosCertificate& cert, const std::vector<SosConstraint>& constraints,
                                             double psd_tolerance = kPsdTolerance,
                                             double reconstruction_tolerance = kReconstructionTolerance) {
  if (cert.grams.size() != constraints.size() || cert.gram_bases.size() != constraints.size() ||
      cert.sigma_grams.size() != constraints.size() || cert.rhos.size() != constraints.size())
    throw InputError("verify_certificate: certificate does not match constraint count");
  VerificationReport rep;
  rep.pass = true;
  for (std::size_t k = 0; k < constraints.size(); ++k) {
    const auto& con = constraints[k];
    const int dim = con.expression.dimension();
    const auto& basis = cert.gram_bases[k];
    if (static_cast<std::size_t>(cert.grams[k].rows()) != basis.size() || cert.grams[k].rows() != cert.grams[k].cols())
      throw InputError("verify_certificate: Gram shape mismatch in '" + con.name + "'");
    if (cert.sigma_grams[k].size() != con.domain.inequalities.size() ||
        cert.rhos[k].size() != con.domain.equalities.size())
      throw InputError("verify_certificate: multiplier count mismatch in '" + con.name + "'");
    ConstraintCheck chk;
    chk.name = con.name;
    chk.min_eigenvalue = std::min(std::numeric_limits<double>::infinity(), detail::min_eigenvalue(cert.grams[k]));
    Polynomial lhs = con.expression.evaluate(cert.decisions);
    for (std::size_t j = 0; j < con.domain.inequalities.size(); ++j) {
      const auto& g = cert.sigma_grams[k][j];
      if (static_cast<std::size_t>(g.rows()) != con.sigma_bases[j].size())
        throw InputError("verify_certificate: sigma Gram shape mismatch in '" + con.name + "'");
      chk.min_eigenvalue = std::min(chk.min_eigenvalue, detail::min_eigenvalue(g));
      lhs -= con.domain.inequalities[j] * detail::gram_polynomial(con.sigma_bases[j], g, dim);
    }
    for (std::size_t l = 0; l < con.domain.equalities.size(); ++l) lhs -= con.domain.equalities[l] * cert.rhos[k][l];
    lhs -= detail::gram_polynomial(basis, cert.grams[k], dim);
    chk.residual = lhs.max_abs_coefficient();
    if (!std::isfinite(chk.min_eigenvalue)) chk.min_eigenvalue = 0.0;
    chk.pass = chk.min_eigenvalue >= -psd_tolerance && chk.residual <= reconstruction_tolerance;
    rep.pass = rep.pass && chk.pass;
    rep.constraints.push_back(std::move(chk));
  }
  return rep;
}

/// Decision variables, SOS constraints, linear constraints and a linear
/// objective; compiles to one SdpProblem.
class SosProgram {
 public:
  explicit SosProgram(int dimension) : dimension_(dimension) {}

  int dimension() const { return dimension_; }

  int add_decision(std::string name, bool nonnegative = false) {
    vars_.push_back({std::move(name), nonnegative});
    return static_cast<int>(vars_.size()) - 1;
  }
  int num_decisions() const { return static_cast<int>(vars_.size()); }
  const std::vector<DecisionVariable>& decisions() const { return vars_; }

  void add_constraint(SosConstraint c) {
    if (c.expression.dimension() != dimension_) throw InputError("SosProgram: constraint dimension mismatch");
    for (const auto& [id, p] : c.expression.decision_terms()) check_id(id);
    constraints_.push_back(std::move(c));
  }
  const std::vector<SosConstraint>& constraints() const { return constraints_; }

  /// sum coef * d_id == rhs
  void add_linear_equality(std::map<int, double> terms, double rhs) {
    for (const auto& [id, v] : terms) check_id(id);
    linear_.push_back({std::move(terms), rhs, false});
  }
  /// sum coef * d_id <= rhs
  void add_linear_inequality(std::map<int, double> terms, double rhs) {
    for (const auto& [id, v] : terms) check_id(id);
    linear_.push_back({std::move(terms), rhs, true});
  }

  void set_objective(std::map<int, double> terms) {
    for (const auto& [id, v] : terms) check_id(id);
    objective_ = std::move(terms);
  }
  const std::map<int, double>& objective() const { return objective_; }

  /// Generates coefficient-matching equalities for every monomial of every
  /// certificate identity. Throws DegreeOverflowError when the expression
  /// or a multiplier product reaches beyond what the Gram form spans.
  CompiledSos compile() const {
    CompiledSos out;
    SdpProblem& sdp = out.sdp;
    for (const auto& v : vars_) out.decision_vars.push_back(v.nonnegative ? VarRef::nonneg(sdp.add_nonneg()) : VarRef::free(sdp.add_free()));

    for (std::size_t k = 0; k < constraints_.size(); ++k) compile_constraint(static_cast<int>(k), out);

    for (const auto& row : linear_) {
      LinearRow r;
      r.rhs = row.rhs;
      for (const auto& [id, v] : row.terms) {
        if (v != 0.0) r.terms.push_back({out.decision_vars[static_cast<std::size_t>(id)], v});
      }
      if (row.inequality) r.terms.push_back({VarRef::nonneg(sdp.add_nonneg()), 1.0});
      sdp.equalities.push_back(std::move(r));
      out.row_labels.emplace_back(-1, Monomial::constant(dimension_));
    }
    for (const auto& [id, v] : objective_) {
      if (v != 0.0) sdp.objective.push_back({out.decision_vars[static_cast<std::size_t>(id)], v});
    }
    sdp.validate();
    return out;
  }

  /// Reads the certificate out of a solved compilation after projecting the
  /// primal values onto the coefficient-matching equalities.
  SosCertificate extract(const CompiledSos& compiled, const SdpSolution& raw) const {
    const SdpSolution sol = polish_primal(compiled.sdp, raw);
    SosCertificate cert;
    cert.decisions.resize(num_decisions());
    for (int i = 0; i < num_decisions(); ++i) cert.decisions[i] = sol.value(compiled.decision_vars[static_cast<std::size_t>(i)]);
    for (std::size_t k = 0; k < constraints_.size(); ++k) {
      const auto& con = constraints_[k];
      const auto& lay = compiled.layouts[k];
      cert.gram_bases.push_back(lay.gram_basis);
      cert.grams.push_back(lay.gram_block >= 0 ? sol.psd_values[static_cast<std::size_t>(lay.gram_block)]
                                               : Eigen::MatrixXd(0, 0));
      std::vector<Eigen::MatrixXd> sg;
      std::vector<Polynomial> sp;
      for (std::size_t j = 0; j < con.sigma_bases.size(); ++j) {
        const int blk = lay.sigma_blocks[j];
        sg.push_back(blk >= 0 ? sol.psd_values[static_cast<std::size_t>(blk)] : Eigen::MatrixXd(0, 0));
        sp.push_back(detail::gram_polynomial(con.sigma_bases[j], sg.back(), dimension_));
      }
      cert.sigma_grams.push_back(std::move(sg));
      cert.sigmas.push_back(std::move(sp));
      std::vector<Polynomial> rp;
      for (std::size_t l = 0; l < con.rho_bases.size(); ++l) {
        Polynomial r(dimension_);
        for (std::size_t t = 0; t < con.rho_bases[l].size(); ++t)
          r.add_term(con.rho_bases[l][t], sol.free_values[lay.rho_vars[l][t]]);
        rp.push_back(std::move(r));
      }
      cert.rhos.push_back(std::move(rp));
    }
    return cert;
  }

 private:
  struct LinearConstraint {
    std::map<int, double> terms;
    double rhs;
    bool inequality;
  };

  void check_id(int id) const {
    if (id < 0 || id >= num_decisions()) throw InputError("SosProgram: unknown decision id " + std::to_string(id));
  }

  void compile_constraint(int k, CompiledSos& out) const {
    const SosConstraint& con = constraints_[static_cast<std::size_t>(k)];
    SdpProblem& sdp = out.sdp;
    const int dim = dimension_;
    if (con.sigma_bases.size() != con.domain.inequalities.size() || con.rho_bases.size() != con.domain.equalities.size())
      throw InputError("SOS constraint '" + con.name + "': multiplier bases do not match domain");

    // Degree reach of the non-Gram side of the identity.
    std::vector<int> reach(static_cast<std::size_t>(dim), 0);
    int reach_total = 0;
    for (const auto& m : con.expression.support()) {
      reach_total = std::max(reach_total, m.degree());
      for (int i = 0; i < dim; ++i) reach[static_cast<std::size_t>(i)] = std::max(reach[static_cast<std::size_t>(i)], m[i]);
    }
    auto extend = [&](const Polynomial& a, const Dictionary& basis, int factor) {
      if (basis.empty() || a.is_zero()) return;
      reach_total = std::max(reach_total, a.degree() + factor * basis.max_degree());
      for (int i = 0; i < dim; ++i) {
        int be = 0;
        for (const auto& m : basis.entries()) be = std::max(be, m[i]);
        reach[static_cast<std::size_t>(i)] =
            std::max(reach[static_cast<std::size_t>(i)], detail::max_exponent(a, i) + factor * be);
      }
    };
    for (std::size_t j = 0; j < con.sigma_bases.size(); ++j) extend(con.domain.inequalities[j], con.sigma_bases[j], 2);
    for (std::size_t l = 0; l < con.rho_bases.size(); ++l) extend(con.domain.equalities[l], con.rho_bases[l], 1);

    // Newton-polytope style pruning: a basis monomial whose square lies
    // beyond the reach of every other term has a zero diagonal Gram entry.
    std::vector<Monomial> kept;
    for (const auto& m : con.gram_basis.entries()) {
      bool ok = 2 * m.degree() <= reach_total;
      for (int i = 0; i < dim && ok; ++i) ok = 2 * m[i] <= reach[static_cast<std::size_t>(i)];
      if (ok) kept.push_back(m);
    }
    ConstraintLayout lay;
    lay.gram_basis = Dictionary(dim, kept);

    // Capacity of the declared Gram form. Monomials beyond the pruned basis
    // but within this capacity give inconsistent rows, not an overflow.
    std::vector<int> cap(static_cast<std::size_t>(dim), 0);
    int cap_total = -1;
    for (const auto& m : con.gram_basis.entries()) {
      cap_total = std::max(cap_total, 2 * m.degree());
      for (int i = 0; i < dim; ++i) cap[static_cast<std::size_t>(i)] = std::max(cap[static_cast<std::size_t>(i)], 2 * m[i]);
    }
    auto within = [&](const Monomial& m) {
      if (m.degree() > std::max(cap_total, 0)) return false;
      for (int i = 0; i < dim; ++i) {
        if (m[i] > cap[static_cast<std::size_t>(i)]) return false;
      }
      return true;
    };
    auto overflow = [&](const Monomial& m, const std::string& what) {
      throw DegreeOverflowError("SOS constraint '" + con.name + "': monomial " + m.to_string() + " of " + what +
                                " exceeds the Gram basis capacity (degree " + std::to_string(std::max(cap_total, 0)) +
                                ")");
    };
    for (const auto& m : con.expression.support()) {
      if (!within(m)) overflow(m, "the expression");
    }

    // Coefficient rows keyed by monomial.
    std::map<Monomial, std::map<VarRef, double>> rows;
    auto acc = [&](const Monomial& m, const VarRef& v, double c) {
      if (c != 0.0) rows[m][v] += c;
    };
    if (!kept.empty()) {
      lay.gram_block = sdp.add_psd_block(static_cast<int>(kept.size()));
      for (std::size_t p = 0; p < kept.size(); ++p) {
        for (std::size_t q = p; q < kept.size(); ++q) {
          acc(kept[p] * kept[q], VarRef::psd(lay.gram_block, static_cast<int>(p), static_cast<int>(q)), p == q ? 1.0 : 2.0);
        }
      }
    }
    for (std::size_t j = 0; j < con.sigma_bases.size(); ++j) {
      const auto& basis = con.sigma_bases[j];
      const auto& a = con.domain.inequalities[j];
      if (basis.empty() || a.is_zero()) {
        lay.sigma_blocks.push_back(-1);
        continue;
      }
      const int blk = sdp.add_psd_block(static_cast<int>(basis.size()));
      lay.sigma_blocks.push_back(blk);
      for (std::size_t p = 0; p < basis.size(); ++p) {
        for (std::size_t q = p; q < basis.size(); ++q) {
          const Monomial pq = basis[p] * basis[q];
          for (const auto& [am, av] : a.terms()) {
            const Monomial m = pq * am;
            if (!within(m)) overflow(m, "multiplier sigma_" + std::to_string(j + 1));
            acc(m, VarRef::psd(blk, static_cast<int>(p), static_cast<int>(q)), (p == q ? 1.0 : 2.0) * av);
          }
        }
      }
    }
    for (std::size_t l = 0; l < con.rho_bases.size(); ++l) {
      const auto& basis = con.rho_bases[l];
      const auto& b = con.domain.equalities[l];
      std::vector<int> vars;
      for (std::size_t t = 0; t < basis.size(); ++t) {
        const int v = sdp.add_free();
        vars.push_back(v);
        for (const auto& [bm, bv] : b.terms()) {
          const Monomial m = basis[t] * bm;
          if (!within(m)) overflow(m, "multiplier rho_" + std::to_string(l + 1));
          acc(m, VarRef::free(v), bv);
        }
      }
      lay.rho_vars.push_back(std::move(vars));
    }
    for (const auto& [id, p] : con.expression.decision_terms()) {
      for (const auto& [m, c] : p.terms()) acc(m, out.decision_vars[static_cast<std::size_t>(id)], -c);
    }
    for (const auto& [m, c] : con.expression.constant_part().terms()) rows[m];

    for (const auto& [m, terms] : rows) {
      LinearRow r;
      r.rhs = con.expression.constant_part().coefficient(m);
      for (const auto& [v, c] : terms) {
        if (c != 0.0) r.terms.push_back({v, c});
      }
      if (r.terms.empty() && r.rhs == 0.0) continue;
      sdp.equalities.push_back(std::move(r));
      out.row_labels.emplace_back(k, m);
    }
    out.layouts.push_back(std::move(lay));
  }

  int dimension_;
  std::vector<DecisionVariable> vars_;
  std::vector<SosConstraint> constraints_;
  std::vector<LinearConstraint> linear_;
  std::map<int, double> objective_;
};

/// Adds one nonnegative epigraph variable t_i per decision with
/// -t_i <= d_i <= t_i and returns the objective sum_i t_i.
inline std::map<int, double> l1_objective(SosProgram& prog, const std::vector<int>& decision_ids) {
  if (decision_ids.empty()) throw InputError("l1_objective: empty decision list");
  std::map<int, double> obj;
  for (int id : decision_ids) {
    const int t = prog.add_decision("abs(" + prog.decisions().at(static_cast<std::size_t>(id)).name + ")", true);
    prog.add_linear_inequality({{id, 1.0}, {t, -1.0}}, 0.0);
    prog.add_linear_inequality({{id, -1.0}, {t, -1.0}}, 0.0);
    obj[t] += 1.0;
  }
  return obj;
}

/// Adds a bound variable M with M - u_i >= 0 and M + u_i >= 0 on the domain
/// for every controller component; returns the id of M.
inline int bound_objective(SosProgram& prog, const std::vector<DecisionPolynomial>& controller,
                           const SemialgebraicSet& domain, const MultiplierSpec& spec = {}) {
  const int m = prog.add_decision("M", true);
  const Polynomial one = Polynomial::constant(prog.dimension(), 1.0);
  for (std::size_t i = 0; i < controller.size(); ++i) {
    DecisionPolynomial upper(prog.dimension());
    upper.add(m, one);
    upper += -controller[i];
    DecisionPolynomial lower(prog.dimension());
    lower.add(m, one);
    lower += controller[i];
    const std::string idx = std::to_string(i + 1);
    prog.add_constraint(make_sos_constraint("M - u" + idx, std::move(upper), domain, spec));
    prog.add_constraint(make_sos_constraint("M + u" + idx, std::move(lower), domain, spec));
  }
  return m;
}

struct SosSolveResult {
  CompiledSos compiled;
  SdpSolution solution;
  SosCertificate certificate;
  VerificationReport report;

  /// A certificate was extracted and passed verify_certificate. This also
  /// covers near-optimal solver exits, which occur when no Gram matrix is
  /// strictly positive definite (for instance when p has real zeros).
  bool feasible() const { return has_candidate(solution) && report.pass; }
};

/// Compiles, solves and, when the solver returns an optimal or near-optimal
/// point, extracts and verifies the certificate. Never throws on
/// infeasibility: callers inspect solution.status and report.pass.
inline SosSolveResult solve_sos(const SosProgram& prog, const SolverOptions& options = {}) {
  SosSolveResult r;
  r.compiled = prog.compile();
  r.solution = solve(r.compiled.sdp, options);
  if (has_candidate(r.solution)) {
    r.certificate = prog.extract(r.compiled, r.solution);
    r.report = verify_certificate(r.certificate, prog.constraints());
  }
  return r;
}

}  // namespace koopsos
