#pragma once

/// @file
/// Sparse multivariate polynomials with real coefficients, monomial
/// dictionaries and semialgebraic set descriptions.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "koopsos/errors.hpp"

namespace koopsos {

/// Coefficients with absolute value below this are dropped from term maps.
inline constexpr double kZeroThreshold = 1e-12;
/// Band used when testing membership in a semialgebraic set.
inline constexpr double kMembershipTolerance = 1e-9;

/// A power product x_1^{e_1} ... x_d^{e_d}.
///
/// Ordering is graded lexicographic: lower total degree first; within one
/// degree the exponent vectors are compared lexicographically with larger
/// exponents of earlier variables first, so that for d = 3 the degree-one
/// block reads x1, x2, x3 and the degree-two block x1^2, x1 x2, x1 x3, ...
class Monomial {
 public:
  Monomial() = default;
  explicit Monomial(std::vector<int> exponents) : exponents_(std::move(exponents)) {
    for (int e : exponents_) {
      if (e < 0) throw InputError("Monomial: negative exponent");
    }
  }

  static Monomial constant(int dimension) {
    return Monomial(std::vector<int>(static_cast<std::size_t>(dimension), 0));
  }
  static Monomial variable(int dimension, int index, int power = 1) {
    std::vector<int> e(static_cast<std::size_t>(dimension), 0);
    e.at(static_cast<std::size_t>(index)) = power;
    return Monomial(std::move(e));
  }

  int dimension() const { return static_cast<int>(exponents_.size()); }
  const std::vector<int>& exponents() const { return exponents_; }
  int operator[](int i) const { return exponents_[static_cast<std::size_t>(i)]; }
  int degree() const { return std::accumulate(exponents_.begin(), exponents_.end(), 0); }
  bool is_constant() const { return degree() == 0; }

  Monomial operator*(const Monomial& other) const {
    check_dimension(other);
    std::vector<int> e(exponents_);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] += other.exponents_[i];
    return Monomial(std::move(e));
  }

  double evaluate(std::span<const double> x) const {
    double value = 1.0;
    for (std::size_t i = 0; i < exponents_.size(); ++i) {
      for (int k = 0; k < exponents_[i]; ++k) value *= x[i];
    }
    return value;
  }

  /// Human-readable form such as "x1^2*x3"; "1" for the constant monomial.
  std::string to_string() const {
    std::ostringstream os;
    bool first = true;
    for (std::size_t i = 0; i < exponents_.size(); ++i) {
      if (exponents_[i] == 0) continue;
      if (!first) os << '*';
      os << 'x' << (i + 1);
      if (exponents_[i] > 1) os << '^' << exponents_[i];
      first = false;
    }
    return first ? std::string("1") : os.str();
  }

  friend bool operator==(const Monomial&, const Monomial&) = default;
  friend bool operator<(const Monomial& a, const Monomial& b) {
    const int da = a.degree();
    const int db = b.degree();
    if (da != db) return da < db;
    return a.exponents_ > b.exponents_;
  }

 private:
  void check_dimension(const Monomial& other) const {
    if (other.dimension() != dimension()) {
      throw InputError("Monomial: dimension mismatch");
    }
  }

  std::vector<int> exponents_;
};

/// Sparse polynomial in `dimension` variables. Term maps never hold a
/// coefficient below kZeroThreshold in magnitude.
class Polynomial {
 public:
  using TermMap = std::map<Monomial, double>;

  Polynomial() = default;
  explicit Polynomial(int dimension) : dimension_(dimension) {
    if (dimension < 1) throw InputError("Polynomial: dimension must be positive");
  }
  Polynomial(int dimension, TermMap terms) : Polynomial(dimension) {
    for (auto& [m, c] : terms) add_term(m, c);
  }

  static Polynomial zero(int dimension) { return Polynomial(dimension); }
  static Polynomial constant(int dimension, double value) {
    Polynomial p(dimension);
    p.add_term(Monomial::constant(dimension), value);
    return p;
  }
  static Polynomial monomial(const Monomial& m, double coefficient = 1.0) {
    Polynomial p(m.dimension());
    p.add_term(m, coefficient);
    return p;
  }
  static Polynomial variable(int dimension, int index) {
    return monomial(Monomial::variable(dimension, index));
  }

  int dimension() const { return dimension_; }
  const TermMap& terms() const { return terms_; }
  bool is_zero() const { return terms_.empty(); }
  std::size_t size() const { return terms_.size(); }

  /// Total degree; -1 for the zero polynomial.
  int degree() const {
    int d = -1;
    for (const auto& [m, c] : terms_) d = std::max(d, m.degree());
    return d;
  }
  /// Largest exponent of variable i over all terms (0 for the zero polynomial).
  int degree_in(int i) const {
    int d = 0;
    for (const auto& [m, c] : terms_) d = std::max(d, m[i]);
    return d;
  }

  double coefficient(const Monomial& m) const {
    auto it = terms_.find(m);
    return it == terms_.end() ? 0.0 : it->second;
  }

  /// Adds c * m in place, dropping the term if it cancels below threshold.
  void add_term(const Monomial& m, double c) {
    if (m.dimension() != dimension_) throw InputError("Polynomial: monomial dimension mismatch");
    auto [it, inserted] = terms_.try_emplace(m, c);
    if (!inserted) it->second += c;
    if (std::abs(it->second) < kZeroThreshold) terms_.erase(it);
  }

  double evaluate(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != dimension_) {
      throw InputError("Polynomial::evaluate: point has length " + std::to_string(x.size()) +
                       ", expected " + std::to_string(dimension_));
    }
    double value = 0.0;
    for (const auto& [m, c] : terms_) value += c * m.evaluate(x);
    return value;
  }
  double evaluate(const Eigen::VectorXd& x) const {
    return evaluate(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
  }
  double operator()(const Eigen::VectorXd& x) const { return evaluate(x); }

  /// Partial derivative with respect to variable i.
  Polynomial derivative(int i) const {
    if (i < 0 || i >= dimension_) throw InputError("Polynomial::derivative: bad variable index");
    Polynomial d(dimension_);
    for (const auto& [m, c] : terms_) {
      const int e = m[i];
      if (e == 0) continue;
      std::vector<int> ex = m.exponents();
      ex[static_cast<std::size_t>(i)] -= 1;
      d.add_term(Monomial(std::move(ex)), c * e);
    }
    return d;
  }

  /// Gradient; component i is the partial derivative in x_{i+1}.
  std::vector<Polynomial> gradient() const {
    std::vector<Polynomial> g;
    g.reserve(static_cast<std::size_t>(dimension_));
    for (int i = 0; i < dimension_; ++i) g.push_back(derivative(i));
    return g;
  }

  /// Largest coefficient magnitude; 0 for the zero polynomial.
  double max_abs_coefficient() const {
    double v = 0.0;
    for (const auto& [m, c] : terms_) v = std::max(v, std::abs(c));
    return v;
  }

  Polynomial& operator+=(const Polynomial& o) {
    check_dimension(o);
    for (const auto& [m, c] : o.terms_) add_term(m, c);
    return *this;
  }
  Polynomial& operator-=(const Polynomial& o) {
    check_dimension(o);
    for (const auto& [m, c] : o.terms_) add_term(m, -c);
    return *this;
  }
  Polynomial& operator*=(double s) {
    if (s == 0.0) {
      terms_.clear();
      return *this;
    }
    for (auto it = terms_.begin(); it != terms_.end();) {
      it->second *= s;
      if (std::abs(it->second) < kZeroThreshold) {
        it = terms_.erase(it);
      } else {
        ++it;
      }
    }
    return *this;
  }

  friend Polynomial operator+(Polynomial a, const Polynomial& b) { return a += b; }
  friend Polynomial operator-(Polynomial a, const Polynomial& b) { return a -= b; }
  friend Polynomial operator-(Polynomial a) { return a *= -1.0; }
  friend Polynomial operator*(Polynomial a, double s) { return a *= s; }
  friend Polynomial operator*(double s, Polynomial a) { return a *= s; }
  friend Polynomial operator*(const Polynomial& a, const Polynomial& b) {
    a.check_dimension(b);
    Polynomial r(a.dimension_);
    // Accumulate raw products first so cancellation happens on the final sum.
    std::map<Monomial, double> acc;
    for (const auto& [ma, ca] : a.terms_) {
      for (const auto& [mb, cb] : b.terms_) acc[ma * mb] += ca * cb;
    }
    for (const auto& [m, c] : acc) {
      if (std::abs(c) >= kZeroThreshold) r.terms_.emplace(m, c);
    }
    return r;
  }
  friend bool operator==(const Polynomial& a, const Polynomial& b) {
    return a.dimension_ == b.dimension_ && a.terms_ == b.terms_;
  }

  /// Pretty form like "212.5*x1*x2 + 54.1*x1*x3".
  std::string to_string(int precision = 10) const {
    if (terms_.empty()) return "0";
    std::ostringstream os;
    os.precision(precision);
    bool first = true;
    for (const auto& [m, c] : terms_) {
      double mag = c;
      if (!first) {
        os << (c < 0 ? " - " : " + ");
        mag = std::abs(c);
      }
      if (m.is_constant()) {
        os << mag;
      } else if (mag == 1.0) {
        os << m.to_string();
      } else if (mag == -1.0) {
        os << '-' << m.to_string();
      } else {
        os << mag << '*' << m.to_string();
      }
      first = false;
    }
    return os.str();
  }

 private:
  void check_dimension(const Polynomial& o) const {
    if (o.dimension_ != dimension_) {
      throw InputError("Polynomial: dimension mismatch (" + std::to_string(dimension_) + " vs " +
                       std::to_string(o.dimension_) + ")");
    }
  }

  int dimension_ = 1;
  TermMap terms_;
};

inline Polynomial poly_add(const Polynomial& a, const Polynomial& b) { return a + b; }
inline Polynomial poly_mul(const Polynomial& a, const Polynomial& b) { return a * b; }
inline double poly_eval(const Polynomial& p, const Eigen::VectorXd& x) { return p.evaluate(x); }
inline std::vector<Polynomial> poly_grad(const Polynomial& p) { return p.gradient(); }

/// Ordered, duplicate-free list of monomials used as lifting coordinates or
/// as a Gram basis.
class Dictionary {
 public:
  Dictionary() = default;
  Dictionary(int dimension, std::vector<Monomial> entries)
      : dimension_(dimension), entries_(std::move(entries)) {
    if (dimension < 1) throw InputError("Dictionary: dimension must be positive");
    for (const auto& m : entries_) {
      if (m.dimension() != dimension) throw InputError("Dictionary: entry dimension mismatch");
    }
    std::sort(entries_.begin(), entries_.end());
    if (std::adjacent_find(entries_.begin(), entries_.end()) != entries_.end()) {
      throw InputError("Dictionary: duplicate entries");
    }
  }

  int dimension() const { return dimension_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Monomial>& entries() const { return entries_; }
  const Monomial& operator[](std::size_t i) const { return entries_[i]; }

  std::optional<std::size_t> index_of(const Monomial& m) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), m);
    if (it == entries_.end() || !(*it == m)) return std::nullopt;
    return static_cast<std::size_t>(it - entries_.begin());
  }
  bool contains(const Monomial& m) const { return index_of(m).has_value(); }

  /// Largest total degree over the entries (-1 if empty).
  int max_degree() const {
    int d = -1;
    for (const auto& m : entries_) d = std::max(d, m.degree());
    return d;
  }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const {
    if (x.size() != dimension_) {
      throw InputError("Dictionary::evaluate: point has length " + std::to_string(x.size()) +
                       ", expected " + std::to_string(dimension_));
    }
    Eigen::VectorXd v(static_cast<Eigen::Index>(entries_.size()));
    const std::span<const double> xs(x.data(), static_cast<std::size_t>(x.size()));
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      v[static_cast<Eigen::Index>(i)] = entries_[i].evaluate(xs);
    }
    return v;
  }

  /// Returns sum_i c_i * entry_i.
  Polynomial combine(const Eigen::VectorXd& c) const {
    if (static_cast<std::size_t>(c.size()) != entries_.size()) {
      throw InputError("Dictionary::combine: coefficient vector has length " +
                       std::to_string(c.size()) + ", expected " + std::to_string(entries_.size()));
    }
    Polynomial p(dimension_);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      p.add_term(entries_[i], c[static_cast<Eigen::Index>(i)]);
    }
    return p;
  }

  /// Coefficient vector of p over this dictionary; throws if p has a term
  /// outside the dictionary.
  Eigen::VectorXd coefficients_of(const Polynomial& p) const {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(entries_.size()));
    for (const auto& [m, v] : p.terms()) {
      auto idx = index_of(m);
      if (!idx) throw InputError("Dictionary::coefficients_of: term " + m.to_string() + " not in dictionary");
      c[static_cast<Eigen::Index>(*idx)] = v;
    }
    return c;
  }

  friend bool operator==(const Dictionary&, const Dictionary&) = default;

 private:
  int dimension_ = 1;
  std::vector<Monomial> entries_;
};

/// All monomials with exponent_i <= caps[i] (and total degree <= total_cap
/// when given), in graded-lex order. The constant monomial is always included.
inline Dictionary build_dictionary(int dimension, std::span<const int> caps,
                                   std::optional<int> total_cap = std::nullopt) {
  if (dimension < 1) throw InputError("build_dictionary: dimension must be positive");
  if (static_cast<int>(caps.size()) != dimension) {
    throw InputError("build_dictionary: caps length must equal dimension");
  }
  for (int c : caps) {
    if (c < 0) throw InputError("build_dictionary: negative cap");
  }
  std::vector<Monomial> out;
  std::vector<int> e(static_cast<std::size_t>(dimension), 0);
  std::function<void(std::size_t, int)> rec = [&](std::size_t i, int deg) {
    if (i == e.size()) {
      out.emplace_back(e);
      return;
    }
    for (int k = 0; k <= caps[i]; ++k) {
      if (total_cap && deg + k > *total_cap) break;
      e[i] = k;
      rec(i + 1, deg + k);
    }
    e[i] = 0;
  };
  rec(0, 0);
  return Dictionary(dimension, std::move(out));
}

inline Dictionary build_dictionary(int dimension, std::initializer_list<int> caps,
                                   std::optional<int> total_cap = std::nullopt) {
  const std::vector<int> v(caps);
  return build_dictionary(dimension, std::span<const int>(v), total_cap);
}

/// All monomials of total degree <= degree, optionally capped per variable.
inline Dictionary monomials_up_to(int dimension, int degree, std::span<const int> caps = {}) {
  std::vector<int> c(static_cast<std::size_t>(dimension), std::max(degree, 0));
  for (std::size_t i = 0; i < caps.size() && i < c.size(); ++i) c[i] = std::min(c[i], caps[i]);
  if (degree < 0) return Dictionary(dimension, {});
  return build_dictionary(dimension, std::span<const int>(c), degree);
}

inline Eigen::VectorXd dict_eval(const Dictionary& d, const Eigen::VectorXd& x) { return d.evaluate(x); }
inline Polynomial linear_combination(const Eigen::VectorXd& c, const Dictionary& d) { return d.combine(c); }

/// { x : a_j(x) >= 0 for all j, b_l(x) = 0 for all l }.
struct SemialgebraicSet {
  int dimension = 1;
  std::vector<Polynomial> inequalities;
  std::vector<Polynomial> equalities;

  SemialgebraicSet() = default;
  SemialgebraicSet(int dim, std::vector<Polynomial> ineq, std::vector<Polynomial> eq)
      : dimension(dim), inequalities(std::move(ineq)), equalities(std::move(eq)) {
    validate();
  }

  static SemialgebraicSet whole_space(int dim) { return SemialgebraicSet(dim, {}, {}); }

  void validate() const {
    for (const auto& p : inequalities) {
      if (p.dimension() != dimension) throw InputError("SemialgebraicSet: inequality dimension mismatch");
    }
    for (const auto& p : equalities) {
      if (p.dimension() != dimension) throw InputError("SemialgebraicSet: equality dimension mismatch");
    }
  }

  bool contains(const Eigen::VectorXd& x, double tol = kMembershipTolerance) const {
    for (const auto& a : inequalities) {
      if (a.evaluate(x) < -tol) return false;
    }
    for (const auto& b : equalities) {
      if (std::abs(b.evaluate(x)) > tol) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------------------
// JSON
//
// Polynomial:  {"dimension": d, "terms": [{"exponents": [..], "coefficient": c}, ...]}
// Dictionary:  {"dimension": d, "entries": [[..], [..], ...]}

inline nlohmann::json to_json(const Polynomial& p) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& [m, c] : p.terms()) {
    terms.push_back({{"exponents", m.exponents()}, {"coefficient", c}});
  }
  return {{"dimension", p.dimension()}, {"terms", std::move(terms)}};
}

inline Polynomial polynomial_from_json(const nlohmann::json& j) {
  try {
    const int d = j.at("dimension").get<int>();
    Polynomial p(d);
    for (const auto& t : j.at("terms")) {
      Monomial m(t.at("exponents").get<std::vector<int>>());
      if (m.dimension() != d) throw InputError("polynomial JSON: exponent length != dimension");
      p.add_term(m, t.at("coefficient").get<double>());
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("polynomial JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const Dictionary& d) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& m : d.entries()) entries.push_back(m.exponents());
  return {{"dimension", d.dimension()}, {"entries", std::move(entries)}};
}

inline Dictionary dictionary_from_json(const nlohmann::json& j) {
  try {
    const int d = j.at("dimension").get<int>();
    std::vector<Monomial> entries;
    for (const auto& e : j.at("entries")) entries.emplace_back(e.get<std::vector<int>>());
    return Dictionary(d, std::move(entries));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("dictionary JSON: ") + e.what());
  }
}

inline nlohmann::json to_json(const SemialgebraicSet& s) {
  nlohmann::json ineq = nlohmann::json::array();
  nlohmann::json eq = nlohmann::json::array();
  for (const auto& p : s.inequalities) ineq.push_back(to_json(p));
  for (const auto& p : s.equalities) eq.push_back(to_json(p));
  return {{"dimension", s.dimension}, {"inequalities", ineq}, {"equalities", eq}};
}

inline SemialgebraicSet semialgebraic_set_from_json(const nlohmann::json& j) {
  try {
    std::vector<Polynomial> ineq;
    std::vector<Polynomial> eq;
    for (const auto& p : j.at("inequalities")) ineq.push_back(polynomial_from_json(p));
    for (const auto& p : j.at("equalities")) eq.push_back(polynomial_from_json(p));
    return SemialgebraicSet(j.at("dimension").get<int>(), std::move(ineq), std::move(eq));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("semialgebraic set JSON: ") + e.what());
  }
}

}  // namespace koopsos
