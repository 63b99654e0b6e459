#pragma once

/// @file
/// Dense primal-dual interior-point method for SdpProblem.
///
/// The solver works on the homogeneous self-dual embedding
///
///     A x - b tau           = 0
///     c tau - A^T y - s     = 0      (s = 0 on free variables)
///     b^T y - c^T x - kappa = 0
///     x, s in the cone,  tau, kappa >= 0,
///
/// with Nesterov-Todd scaling and Mehrotra predictor-corrector steps. A
/// positive tau in the limit recovers an optimal pair; a positive kappa
/// yields a Farkas ray that certifies primal or dual infeasibility.
///
/// Free variables never enter a cone: each Newton step solves the
/// saddle-point system [M A_f; A_f^T 0] where M is the Schur complement of
/// the conic variables. The system is reduced onto the null space of A_f^T,
/// taken from a QR factorization of A_f.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "koopsos/errors.hpp"
#include "koopsos/sdp.hpp"

namespace koopsos {

enum class SdpStatus { kOptimal, kInfeasible, kUnbounded, kMaxIterations, kNumericalFailure };

inline std::string to_string(SdpStatus s) {
  switch (s) {
    case SdpStatus::kOptimal:
      return "optimal";
    case SdpStatus::kInfeasible:
      return "infeasible";
    case SdpStatus::kUnbounded:
      return "unbounded";
    case SdpStatus::kMaxIterations:
      return "max_iterations";
    case SdpStatus::kNumericalFailure:
      return "numerical_failure";
  }
  return "unknown";
}

struct SolverOptions {
  double gap_tolerance = 1e-8;
  double feasibility_tolerance = 1e-7;
  double infeasibility_tolerance = 1e-8;
  int max_iterations = 200;
  double step_fraction = 0.99;
  bool verbose = false;

  /// Plain key-value configuration; unknown keys are rejected.
  static SolverOptions from_key_values(const std::map<std::string, std::string>& kv) {
    SolverOptions o;
    for (const auto& [k, v] : kv) {
      try {
        if (k == "gap_tolerance") {
          o.gap_tolerance = std::stod(v);
        } else if (k == "feasibility_tolerance") {
          o.feasibility_tolerance = std::stod(v);
        } else if (k == "infeasibility_tolerance") {
          o.infeasibility_tolerance = std::stod(v);
        } else if (k == "max_iterations") {
          o.max_iterations = std::stoi(v);
        } else if (k == "step_fraction") {
          o.step_fraction = std::stod(v);
        } else if (k == "verbose") {
          o.verbose = (v == "1" || v == "true");
        } else {
          throw InputError("solver option: unknown key '" + k + "'");
        }
      } catch (const std::logic_error&) {
        throw InputError("solver option '" + k + "': bad value '" + v + "'");
      }
    }
    return o;
  }
};

inline nlohmann::json to_json(const SolverOptions& o) {
  return {{"gap_tolerance", o.gap_tolerance},
          {"feasibility_tolerance", o.feasibility_tolerance},
          {"infeasibility_tolerance", o.infeasibility_tolerance},
          {"max_iterations", o.max_iterations},
          {"step_fraction", o.step_fraction},
          {"verbose", o.verbose}};
}

inline SolverOptions solver_options_from_json(const nlohmann::json& j) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : j.items()) kv[k] = v.is_string() ? v.get<std::string>() : v.dump();
  return SolverOptions::from_key_values(kv);
}

struct SdpResiduals {
  double primal = 0.0;  // ||A x - b|| / (1 + ||b||)
  double dual = 0.0;    // ||c - A^T y - s|| / (1 + ||c||)
  double gap = 0.0;     // |c^T x - b^T y| / (1 + |c^T x| + |b^T y|)
};

struct SdpSolution {
  SdpStatus status = SdpStatus::kNumericalFailure;
  Eigen::VectorXd free_values;
  Eigen::VectorXd nonneg_values;
  std::vector<Eigen::MatrixXd> psd_values;
  Eigen::VectorXd duals;  // one multiplier per equality row
  Eigen::VectorXd nonneg_slacks;
  std::vector<Eigen::MatrixXd> psd_slacks;
  double primal_objective = 0.0;
  double dual_objective = 0.0;
  SdpResiduals residuals;
  int iterations = 0;
  std::vector<std::string> warnings;
  /// For kInfeasible the dual fields hold a ray with b^T y = 1 and
  /// -A^T y in the dual cone; for kUnbounded the primal fields hold a ray
  /// with c^T x = -1 and A x = 0.
  bool has_ray = false;
  /// Set when the solver stopped (numerical failure or iteration cap) and
  /// the returned values are the best iterate, with every residual within
  /// 10x of its tolerance. Status still reports the failure.
  bool near_optimal = false;

  double value(const VarRef& v) const {
    switch (v.kind) {
      case VarKind::kFree:
        return free_values[v.index];
      case VarKind::kNonneg:
        return nonneg_values[v.index];
      case VarKind::kPsd:
        return psd_values[static_cast<std::size_t>(v.index)](v.row, v.col);
    }
    return 0.0;
  }
};

/// True when the solution carries primal values worth checking
/// independently: optimal, or a near-optimal best iterate.
inline bool has_candidate(const SdpSolution& sol) {
  return sol.status == SdpStatus::kOptimal || sol.near_optimal;
}

namespace detail {

/// Symmetric constraint matrix entry: A(r,s) = A(s,r) = v, r <= s.
struct SymEntry {
  int r;
  int s;
  double v;
};

struct BlockRows {
  int size = 0;
  std::vector<int> rows;                          // rows touching this block
  std::vector<std::vector<SymEntry>> entries;     // parallel to rows
  Eigen::MatrixXd c;                              // symmetric objective block
};

/// Conic data after presolve.
struct ConeProgram {
  int m = 0;
  Eigen::MatrixXd af;  // m x nf
  Eigen::MatrixXd al;  // m x nl
  Eigen::VectorXd b;
  Eigen::VectorXd cf;
  Eigen::VectorXd cl;
  std::vector<BlockRows> blocks;

  int nf() const { return static_cast<int>(af.cols()); }
  int nl() const { return static_cast<int>(al.cols()); }
  int degree() const {
    int d = nl();
    for (const auto& b : blocks) d += b.size;
    return d;
  }
};

inline double sym_inner(const std::vector<SymEntry>& a, const Eigen::MatrixXd& x) {
  double v = 0.0;
  for (const auto& e : a) v += e.r == e.s ? e.v * x(e.r, e.s) : e.v * (x(e.r, e.s) + x(e.s, e.r));
  return v;
}

/// Conic part of a primal/dual vector: nonnegative scalars plus PSD blocks.
struct ConeVec {
  Eigen::VectorXd l;
  std::vector<Eigen::MatrixXd> k;

  static ConeVec zeros(const ConeProgram& p) {
    ConeVec v;
    v.l = Eigen::VectorXd::Zero(p.nl());
    for (const auto& b : p.blocks) v.k.push_back(Eigen::MatrixXd::Zero(b.size, b.size));
    return v;
  }
  static ConeVec identity(const ConeProgram& p) {
    ConeVec v;
    v.l = Eigen::VectorXd::Ones(p.nl());
    for (const auto& b : p.blocks) v.k.push_back(Eigen::MatrixXd::Identity(b.size, b.size));
    return v;
  }
  ConeVec& axpy(double a, const ConeVec& o) {
    l += a * o.l;
    for (std::size_t i = 0; i < k.size(); ++i) k[i] += a * o.k[i];
    return *this;
  }
  double dot(const ConeVec& o) const {
    double v = l.dot(o.l);
    for (std::size_t i = 0; i < k.size(); ++i) v += (k[i].array() * o.k[i].array()).sum();
    return v;
  }
  double squared_norm() const { return dot(*this); }
};

inline Eigen::VectorXd apply_a(const ConeProgram& p, const Eigen::VectorXd& xf, const ConeVec& x) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(p.m);
  if (p.nf() > 0) r += p.af * xf;
  if (p.nl() > 0) r += p.al * x.l;
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const auto& blk = p.blocks[k];
    for (std::size_t t = 0; t < blk.rows.size(); ++t) r[blk.rows[t]] += sym_inner(blk.entries[t], x.k[k]);
  }
  return r;
}

/// Cone part of A^T y.
inline ConeVec apply_at(const ConeProgram& p, const Eigen::VectorXd& y) {
  ConeVec v = ConeVec::zeros(p);
  if (p.nl() > 0) v.l = p.al.transpose() * y;
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const auto& blk = p.blocks[k];
    auto& out = v.k[k];
    for (std::size_t t = 0; t < blk.rows.size(); ++t) {
      const double yi = y[blk.rows[t]];
      if (yi == 0.0) continue;
      for (const auto& e : blk.entries[t]) {
        out(e.r, e.s) += yi * e.v;
        if (e.r != e.s) out(e.s, e.r) += yi * e.v;
      }
    }
  }
  return v;
}

/// Nesterov-Todd scaling of one PSD block: W S W = X, X = G D G^T,
/// G^T S G = D.
struct NtScaling {
  Eigen::MatrixXd g;
  Eigen::MatrixXd g_inv;
  Eigen::MatrixXd w;
  Eigen::VectorXd lambda;
  Eigen::MatrixXd chol_x;  // lower Cholesky factor of X
  Eigen::MatrixXd chol_s;
};

inline bool nt_scaling(const Eigen::MatrixXd& x, const Eigen::MatrixXd& s, NtScaling& out) {
  Eigen::LLT<Eigen::MatrixXd> lx(x);
  Eigen::LLT<Eigen::MatrixXd> ls(s);
  if (lx.info() != Eigen::Success || ls.info() != Eigen::Success) return false;
  out.chol_x = lx.matrixL();
  out.chol_s = ls.matrixL();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.chol_s.transpose() * out.chol_x, Eigen::ComputeFullU | Eigen::ComputeFullV);
  out.lambda = svd.singularValues();
  if (!(out.lambda.minCoeff() > 0.0)) return false;
  const Eigen::VectorXd d_isqrt = out.lambda.array().rsqrt();
  const Eigen::VectorXd d_sqrt = out.lambda.array().sqrt();
  out.g = out.chol_x * svd.matrixV() * d_isqrt.asDiagonal();
  // G^{-1} = D^{1/2} V^T L^{-1}
  const Eigen::MatrixXd linv = out.chol_x.triangularView<Eigen::Lower>().solve(
      Eigen::MatrixXd::Identity(x.rows(), x.cols()));
  out.g_inv = d_sqrt.asDiagonal() * svd.matrixV().transpose() * linv;
  out.w = out.g * out.g.transpose();
  out.w = 0.5 * (out.w + out.w.transpose());
  return true;
}

/// Largest alpha with X + alpha dX PSD, given the Cholesky factor of X.
inline double max_step_psd(const Eigen::MatrixXd& chol, const Eigen::MatrixXd& dx) {
  auto tri = chol.triangularView<Eigen::Lower>();
  Eigen::MatrixXd t = tri.solve(dx);
  t = tri.solve(t.transpose()).transpose();
  t = 0.5 * (t + t.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(t, Eigen::EigenvaluesOnly);
  const double lmin = es.eigenvalues().minCoeff();
  return lmin >= 0.0 ? std::numeric_limits<double>::infinity() : -1.0 / lmin;
}

inline double max_step_vec(const Eigen::VectorXd& x, const Eigen::VectorXd& dx) {
  double a = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (dx[i] < 0.0) a = std::min(a, -x[i] / dx[i]);
  }
  return a;
}

inline double max_step_scalar(double x, double dx) {
  return dx < 0.0 ? -x / dx : std::numeric_limits<double>::infinity();
}

/// Dense copy of the constraint rows in svec coordinates (off-diagonal PSD
/// entries scaled by sqrt 2) for rank detection.
inline Eigen::MatrixXd dense_rows(const SdpProblem& p, Eigen::VectorXd& rhs) {
  std::vector<int> offset;
  int n = p.free_vars + p.nonneg_vars;
  for (int s : p.psd_blocks) {
    offset.push_back(n);
    n += s * (s + 1) / 2;
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p.equalities.size()), n);
  rhs.resize(static_cast<Eigen::Index>(p.equalities.size()));
  for (std::size_t i = 0; i < p.equalities.size(); ++i) {
    rhs[static_cast<Eigen::Index>(i)] = p.equalities[i].rhs;
    for (const auto& t : p.equalities[i].terms) {
      const auto& v = t.var;
      Eigen::Index col = 0;
      double scale = 1.0;
      switch (v.kind) {
        case VarKind::kFree:
          col = v.index;
          break;
        case VarKind::kNonneg:
          col = p.free_vars + v.index;
          break;
        case VarKind::kPsd: {
          const int s = p.psd_blocks[static_cast<std::size_t>(v.index)];
          // column-major upper triangle index
          col = offset[static_cast<std::size_t>(v.index)] + v.col * (v.col + 1) / 2 + v.row;
          (void)s;
          if (v.row != v.col) scale = 1.0 / std::sqrt(2.0);
          break;
        }
      }
      a(static_cast<Eigen::Index>(i), col) += t.coef * scale;
    }
  }
  return a;
}

}  // namespace detail

/// Solves the program. Never throws on numerical trouble: the status field
/// reports the outcome. Throws InputError for malformed problems.
inline SdpSolution solve(const SdpProblem& problem, const SolverOptions& options = {}) {
  using detail::ConeVec;
  problem.validate();
  SdpSolution sol;
  const int m0 = static_cast<int>(problem.equalities.size());

  // ---- presolve: drop linearly dependent rows ------------------------------
  std::vector<int> kept;
  {
    Eigen::VectorXd rhs;
    const Eigen::MatrixXd dense = detail::dense_rows(problem, rhs);
    if (m0 > 0) {
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dense.transpose());
      qr.setThreshold(1e-10);
      const auto rank = qr.rank();
      std::vector<int> indep;
      for (Eigen::Index i = 0; i < rank; ++i) indep.push_back(static_cast<int>(qr.colsPermutation().indices()[i]));
      std::sort(indep.begin(), indep.end());
      if (rank < m0) {
        Eigen::MatrixXd ai(dense.cols(), rank);
        Eigen::VectorXd bi(rank);
        for (Eigen::Index j = 0; j < rank; ++j) {
          ai.col(j) = dense.row(indep[static_cast<std::size_t>(j)]).transpose();
          bi[j] = rhs[indep[static_cast<std::size_t>(j)]];
        }
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qi(ai);
        bool consistent = true;
        for (int i = 0; i < m0; ++i) {
          if (std::binary_search(indep.begin(), indep.end(), i)) continue;
          const Eigen::VectorXd z = qi.solve(dense.row(i).transpose());
          const double mismatch = std::abs(rhs[i] - bi.dot(z));
          if (mismatch > 1e-9 * (1.0 + std::abs(rhs[i]) + bi.cwiseAbs().dot(z.cwiseAbs()))) consistent = false;
        }
        if (!consistent) {
          sol.status = SdpStatus::kInfeasible;
          sol.warnings.push_back("equality rows are linearly dependent and inconsistent");
          sol.free_values = Eigen::VectorXd::Zero(problem.free_vars);
          sol.nonneg_values = Eigen::VectorXd::Zero(problem.nonneg_vars);
          for (int s : problem.psd_blocks) sol.psd_values.push_back(Eigen::MatrixXd::Zero(s, s));
          sol.duals = Eigen::VectorXd::Zero(m0);
          return sol;
        }
        sol.warnings.push_back("dropped " + std::to_string(m0 - rank) + " linearly dependent equality rows");
        if (options.verbose) std::fprintf(stderr, "[sdp] warning: %s\n", sol.warnings.back().c_str());
      }
      kept = indep;
    }
  }

  // ---- build conic data ----------------------------------------------------
  detail::ConeProgram p;
  p.m = static_cast<int>(kept.size());
  p.af = Eigen::MatrixXd::Zero(p.m, problem.free_vars);
  p.al = Eigen::MatrixXd::Zero(p.m, problem.nonneg_vars);
  p.b.resize(p.m);
  p.cf = Eigen::VectorXd::Zero(problem.free_vars);
  p.cl = Eigen::VectorXd::Zero(problem.nonneg_vars);
  for (int s : problem.psd_blocks) {
    detail::BlockRows br;
    br.size = s;
    br.c = Eigen::MatrixXd::Zero(s, s);
    p.blocks.push_back(std::move(br));
  }
  {
    std::vector<std::map<std::pair<int, int>, double>> acc(p.blocks.size());
    for (int i = 0; i < p.m; ++i) {
      const auto& row = problem.equalities[static_cast<std::size_t>(kept[static_cast<std::size_t>(i)])];
      p.b[i] = row.rhs;
      for (auto& a : acc) a.clear();
      for (const auto& t : row.terms) {
        switch (t.var.kind) {
          case VarKind::kFree:
            p.af(i, t.var.index) += t.coef;
            break;
          case VarKind::kNonneg:
            p.al(i, t.var.index) += t.coef;
            break;
          case VarKind::kPsd:
            acc[static_cast<std::size_t>(t.var.index)][{t.var.row, t.var.col}] +=
                t.var.row == t.var.col ? t.coef : 0.5 * t.coef;
            break;
        }
      }
      for (std::size_t k = 0; k < acc.size(); ++k) {
        if (acc[k].empty()) continue;
        std::vector<detail::SymEntry> es;
        for (const auto& [rc, v] : acc[k]) {
          if (v != 0.0) es.push_back({rc.first, rc.second, v});
        }
        if (es.empty()) continue;
        p.blocks[k].rows.push_back(i);
        p.blocks[k].entries.push_back(std::move(es));
      }
    }
    for (const auto& t : problem.objective) {
      switch (t.var.kind) {
        case VarKind::kFree:
          p.cf[t.var.index] += t.coef;
          break;
        case VarKind::kNonneg:
          p.cl[t.var.index] += t.coef;
          break;
        case VarKind::kPsd: {
          auto& c = p.blocks[static_cast<std::size_t>(t.var.index)].c;
          if (t.var.row == t.var.col) {
            c(t.var.row, t.var.row) += t.coef;
          } else {
            c(t.var.row, t.var.col) += 0.5 * t.coef;
            c(t.var.col, t.var.row) += 0.5 * t.coef;
          }
          break;
        }
      }
    }
  }
  ConeVec c_cone = ConeVec::zeros(p);
  c_cone.l = p.cl;
  for (std::size_t k = 0; k < p.blocks.size(); ++k) c_cone.k[k] = p.blocks[k].c;

  const int nf = p.nf();
  const int nl = p.nl();
  const int m = p.m;
  const double nu = p.degree();
  const double norm_b = p.b.norm();
  const double norm_c = std::sqrt(p.cf.squaredNorm() + c_cone.squared_norm());

  // ---- equilibration -------------------------------------------------------
  // Rows are scaled to unit max-abs coefficient, then b and c to unit norm.
  // Residuals and returned values are always reported in original units.
  Eigen::VectorXd row_scale = Eigen::VectorXd::Ones(m);
  {
    Eigen::VectorXd mx = Eigen::VectorXd::Zero(m);
    if (nf > 0) mx = mx.cwiseMax(p.af.cwiseAbs().rowwise().maxCoeff());
    if (nl > 0) mx = mx.cwiseMax(p.al.cwiseAbs().rowwise().maxCoeff());
    for (const auto& blk : p.blocks) {
      for (std::size_t t = 0; t < blk.rows.size(); ++t) {
        for (const auto& e : blk.entries[t]) mx[blk.rows[t]] = std::max(mx[blk.rows[t]], std::abs(e.v));
      }
    }
    for (int i = 0; i < m; ++i) row_scale[i] = mx[i] > 0.0 ? 1.0 / mx[i] : 1.0;
    p.af = row_scale.asDiagonal() * p.af;
    p.al = row_scale.asDiagonal() * p.al;
    p.b = row_scale.cwiseProduct(p.b);
    for (auto& blk : p.blocks) {
      for (std::size_t t = 0; t < blk.rows.size(); ++t) {
        for (auto& e : blk.entries[t]) e.v *= row_scale[blk.rows[t]];
      }
    }
  }
  const double scale_b = std::max(1.0, p.b.norm());
  const double scale_c = std::max(1.0, norm_c);
  p.b /= scale_b;
  p.cf /= scale_c;
  p.cl /= scale_c;
  for (auto& blk : p.blocks) blk.c /= scale_c;
  c_cone.l /= scale_c;
  for (auto& ck : c_cone.k) ck /= scale_c;
  const Eigen::VectorXd row_unscale = row_scale.cwiseInverse();

  // ---- iterate -------------------------------------------------------------
  Eigen::VectorXd xf = Eigen::VectorXd::Zero(nf);
  ConeVec x = ConeVec::identity(p);
  ConeVec s = ConeVec::identity(p);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
  double tau = 1.0;
  double kappa = 1.0;

  // Best iterate seen so far, scored by the worst residual-to-tolerance
  // ratio; used when progress stalls just short of the tolerances.
  struct Snapshot {
    Eigen::VectorXd xf;
    ConeVec x;
    Eigen::VectorXd y;
    ConeVec s;
    double tau = 1.0;
    double kappa = 1.0;
    double pobj = 0.0;
    double dobj = 0.0;
    SdpResiduals res;
    double score = std::numeric_limits<double>::infinity();
  } best;
  constexpr double kNearOptimalFactor = 10.0;
  auto fail = [&](const char* why) {
    if (best.score <= kNearOptimalFactor) {
      xf = best.xf;
      x = best.x;
      y = best.y;
      s = best.s;
      tau = best.tau;
      kappa = best.kappa;
      sol.primal_objective = best.pobj;
      sol.dual_objective = best.dobj;
      sol.residuals = best.res;
      sol.near_optimal = true;
      sol.warnings.push_back(std::string("numerical failure: ") + why + "; returning best iterate (near optimal)");
      if (options.verbose) std::fprintf(stderr, "[sdp] %s\n", sol.warnings.back().c_str());
      return SdpStatus::kNumericalFailure;
    }
    sol.warnings.push_back(std::string("numerical failure: ") + why);
    if (options.verbose) std::fprintf(stderr, "[sdp] %s\n", sol.warnings.back().c_str());
    return SdpStatus::kNumericalFailure;
  };
  auto finish = [&](SdpStatus status) {
    sol.status = status;
    double scale_p = tau;
    double scale_d = tau;
    if (status == SdpStatus::kInfeasible) {
      scale_d = scale_b * p.b.dot(y);
      sol.has_ray = true;
    } else if (status == SdpStatus::kUnbounded) {
      scale_p = -scale_c * (p.cf.dot(xf) + c_cone.dot(x));
      sol.has_ray = true;
    }
    if (!(scale_p > 0.0)) scale_p = 1.0;
    if (!(scale_d > 0.0)) scale_d = 1.0;
    if (!sol.has_ray) {
      scale_p /= scale_b;
      scale_d /= scale_c;
    }
    sol.free_values = xf / scale_p;
    sol.nonneg_values = x.l / scale_p;
    sol.psd_values.clear();
    for (const auto& xk : x.k) sol.psd_values.push_back(xk / scale_p);
    sol.duals = Eigen::VectorXd::Zero(m0);
    for (int i = 0; i < m; ++i) sol.duals[kept[static_cast<std::size_t>(i)]] = row_scale[i] * y[i] / scale_d;
    sol.nonneg_slacks = s.l / scale_d;
    sol.psd_slacks.clear();
    for (const auto& sk : s.k) sol.psd_slacks.push_back(sk / scale_d);
    return sol;
  };

  const Eigen::MatrixXd af_t = p.af.transpose();
  Eigen::MatrixXd q1;
  Eigen::MatrixXd q2;
  Eigen::MatrixXd r1;
  Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic> af_perm(nf);
  af_perm.setIdentity();
  Eigen::Index af_rank = 0;
  if (nf > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(p.af);
    qr.setThreshold(1e-12);
    af_rank = qr.rank();
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, m);
    q1 = q.leftCols(af_rank);
    q2 = q.rightCols(m - af_rank);
    r1 = qr.matrixR().topLeftCorner(af_rank, af_rank).triangularView<Eigen::Upper>();
    af_perm = qr.colsPermutation();
    if (af_rank < nf) sol.warnings.push_back("free variables are linearly dependent");
  } else {
    q1 = Eigen::MatrixXd::Zero(m, 0);
    q2 = Eigen::MatrixXd::Identity(m, m);
  }
  for (int iter = 0; iter <= options.max_iterations; ++iter) {
    sol.iterations = iter;
    // residuals of the embedding
    const Eigen::VectorXd ax = detail::apply_a(p, xf, x);
    const Eigen::VectorXd rp = ax - p.b * tau;
    const Eigen::VectorXd rdf = p.cf * tau - af_t * y;
    ConeVec aty = detail::apply_at(p, y);
    ConeVec rd = c_cone;
    {
      for (Eigen::Index i = 0; i < rd.l.size(); ++i) rd.l[i] *= tau;
      for (auto& mk : rd.k) mk *= tau;
      rd.axpy(-1.0, aty).axpy(-1.0, s);
    }
    const double cx = p.cf.dot(xf) + c_cone.dot(x);
    const double by = p.b.dot(y);
    const double rg = by - cx - kappa;
    const double mu = (x.dot(s) + tau * kappa) / (nu + 1.0);

    // termination on the unscaled problem
    const double obj_scale = scale_b * scale_c;
    sol.primal_objective = obj_scale * cx / tau;
    sol.dual_objective = obj_scale * by / tau;
    sol.residuals.primal = scale_b * row_unscale.cwiseProduct(rp).norm() / tau / (1.0 + norm_b);
    sol.residuals.dual = scale_c * std::sqrt(rdf.squaredNorm() + rd.squared_norm()) / tau / (1.0 + norm_c);
    sol.residuals.gap = obj_scale * std::abs(cx - by) / tau /
                        (1.0 + std::abs(sol.primal_objective) + std::abs(sol.dual_objective));
    if (options.verbose) {
      std::fprintf(stderr, "[sdp] %3d pobj %+.8e dobj %+.8e pres %.2e dres %.2e gap %.2e tau %.2e kap %.2e mu %.2e\n",
                   iter, sol.primal_objective, sol.dual_objective, sol.residuals.primal, sol.residuals.dual,
                   sol.residuals.gap, tau, kappa, mu);
    }
    if (!std::isfinite(mu) || !std::isfinite(tau) || !std::isfinite(sol.residuals.primal)) {
      return finish(fail("non-finite iterate"));
    }
    if (sol.residuals.primal <= options.feasibility_tolerance && sol.residuals.dual <= options.feasibility_tolerance &&
        sol.residuals.gap <= options.gap_tolerance) {
      return finish(SdpStatus::kOptimal);
    }
    {
      const double score = std::max({sol.residuals.primal / options.feasibility_tolerance,
                                     sol.residuals.dual / options.feasibility_tolerance,
                                     sol.residuals.gap / options.gap_tolerance});
      if (score < best.score && kappa < tau) {
        best = {xf, x, y, s, tau, kappa, sol.primal_objective, sol.dual_objective, sol.residuals, score};
      }
    }
    if (by > 0.0) {
      ConeVec ray = aty;
      ray.axpy(1.0, s);
      const double nrm = std::sqrt((af_t * y).squaredNorm() + ray.squared_norm());
      if (nrm <= options.infeasibility_tolerance * by) return finish(SdpStatus::kInfeasible);
    }
    if (cx < 0.0 && ax.norm() <= options.infeasibility_tolerance * (-cx)) return finish(SdpStatus::kUnbounded);
    if (iter == options.max_iterations) break;

    // scaling
    std::vector<detail::NtScaling> nt(p.blocks.size());
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
      if (!detail::nt_scaling(x.k[k], s.k[k], nt[k])) return finish(fail("iterate left the PSD cone"));
    }
    const Eigen::VectorXd wl = x.l.cwiseQuotient(s.l);
    auto apply_w = [&](const ConeVec& v) {
      ConeVec out = v;
      out.l = wl.cwiseProduct(v.l);
      for (std::size_t k = 0; k < v.k.size(); ++k) {
        out.k[k] = nt[k].w * v.k[k] * nt[k].w;
        out.k[k] = 0.5 * (out.k[k] + out.k[k].transpose());
      }
      return out;
    };

    // Schur complement M = A_K W A_K^T
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + nf, m + nf);
    if (nl > 0) kkt.topLeftCorner(m, m) += p.al * wl.asDiagonal() * p.al.transpose();
    for (std::size_t k = 0; k < p.blocks.size(); ++k) {
      const auto& blk = p.blocks[k];
      const auto& w = nt[k].w;
      const std::size_t nr = blk.rows.size();
      for (std::size_t jj = 0; jj < nr; ++jj) {
        // T = W A_j W restricted lazily via full symmetric expansion
        const auto& aj = blk.entries[jj];
        for (std::size_t ii = 0; ii <= jj; ++ii) {
          const auto& ai = blk.entries[ii];
          double v = 0.0;
          for (const auto& ea : ai) {
            for (const auto& eb : aj) {
              // <E_rs + E_sr, W (E_pq + E_qp) W> with symmetric weights
              double t;
              if (ea.r == ea.s && eb.r == eb.s) {
                t = w(ea.r, eb.r) * w(eb.r, ea.r);
              } else if (ea.r == ea.s) {
                t = 2.0 * w(ea.r, eb.r) * w(eb.s, ea.r);
              } else if (eb.r == eb.s) {
                t = 2.0 * w(ea.r, eb.r) * w(eb.r, ea.s);
              } else {
                t = 2.0 * (w(ea.r, eb.r) * w(eb.s, ea.s) + w(ea.r, eb.s) * w(eb.r, ea.s));
              }
              v += ea.v * eb.v * t;
            }
          }
          kkt(blk.rows[ii], blk.rows[jj]) += v;
          if (ii != jj) kkt(blk.rows[jj], blk.rows[ii]) += v;
        }
      }
    }
    if (nf > 0) {
      kkt.topRightCorner(m, nf) = p.af;
      kkt.bottomLeftCorner(nf, m) = af_t;
    }
    // Free variables are eliminated through the null space of A_f^T: with
    // A_f P = Q R, write dy = Q1 a + Q2 w so the remaining system in w is the
    // positive definite matrix Q2^T M Q2.
    const Eigen::MatrixXd m_sch = kkt.topLeftCorner(m, m);
    const Eigen::MatrixXd mz = q2.transpose() * m_sch * q2;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(mz);
    auto base_solve = [&](const Eigen::VectorXd& rhs) {
      const Eigen::VectorXd h1 = rhs.head(m);
      const Eigen::VectorXd h2 = af_perm.transpose() * rhs.tail(nf);
      Eigen::VectorXd a = Eigen::VectorXd::Zero(af_rank);
      if (af_rank > 0) a = r1.transpose().triangularView<Eigen::Lower>().solve(h2.head(af_rank));
      Eigen::VectorXd dy = q1 * a;
      if (mz.rows() > 0) dy += q2 * ldlt.solve(q2.transpose() * (h1 - m_sch * dy));
      Eigen::VectorXd out = Eigen::VectorXd::Zero(m + nf);
      out.head(m) = dy;
      if (af_rank > 0) {
        Eigen::VectorXd z = Eigen::VectorXd::Zero(nf);
        z.head(af_rank) = r1.triangularView<Eigen::Upper>().solve(q1.transpose() * (h1 - m_sch * dy));
        out.tail(nf) = af_perm * z;
      }
      return out;
    };
    auto kkt_solve = [&](const Eigen::VectorXd& rhs) {
      Eigen::VectorXd sol_v = base_solve(rhs);
      for (int r = 0; r < 3; ++r) {
        const Eigen::VectorXd res = rhs - kkt * sol_v;
        sol_v += base_solve(res);
      }
      return sol_v;
    };

    const ConeVec wc = apply_w(c_cone);
    Eigen::VectorXd g(m + nf);
    g.head(m) = p.b + detail::apply_a(p, Eigen::VectorXd::Zero(nf), wc);
    g.tail(nf) = p.cf;
    const Eigen::VectorXd qsol = kkt_solve(g);
    if (!qsol.allFinite()) return finish(fail("singular Newton system"));
    const Eigen::VectorXd qy = qsol.head(m);
    const Eigen::VectorXd qf = qsol.tail(nf);
    const Eigen::VectorXd v_vec = g.head(m) - p.b;
    const double cwc = c_cone.dot(wc);

    struct Direction {
      Eigen::VectorXd xf;
      ConeVec x;
      Eigen::VectorXd y;
      ConeVec s;
      double tau = 0.0;
      double kappa = 0.0;
    };
    // Newton system of the embedding:
    //   A dx - b dtau                 = p1
    //   -A^T dy - ds + c dtau         = p2   (ds = 0 on free variables)
    //   b^T dy - c^T dx - dkappa      = p3
    //   dx_K + W ds_K                 = rc
    //   kappa dtau + tau dkappa       = rtk
    // solved through the reduced saddle-point system, then refined against
    // the full operator.
    struct Rhs {
      Eigen::VectorXd p1;
      Eigen::VectorXd p2f;
      ConeVec p2;
      double p3 = 0.0;
      ConeVec rc;
      double rtk = 0.0;
    };
    const Eigen::VectorXd bv = p.b - v_vec;
    const double denom = bv.dot(qy) - p.cf.dot(qf) + cwc + kappa / tau;
    if (!(std::abs(denom) > 0.0) || !std::isfinite(denom)) return finish(fail("degenerate tau equation"));

    auto reduced_solve = [&](const Rhs& r, Direction& d) -> bool {
      ConeVec t = apply_w(r.p2);
      t.axpy(1.0, r.rc);  // rc + W p2
      Eigen::VectorXd h(m + nf);
      h.head(m) = r.p1 - detail::apply_a(p, Eigen::VectorXd::Zero(nf), t);
      h.tail(nf) = -r.p2f;
      const Eigen::VectorXd psol = kkt_solve(h);
      if (!psol.allFinite()) return false;
      const Eigen::VectorXd py = psol.head(m);
      const Eigen::VectorXd pf = psol.tail(nf);
      const double numer = r.p3 + c_cone.dot(t) + r.rtk / tau - bv.dot(py) + p.cf.dot(pf);
      d.tau = numer / denom;
      d.y = py + d.tau * qy;
      d.xf = pf + d.tau * qf;
      d.s = r.p2;
      d.s.axpy(-2.0, r.p2);  // -p2
      d.s.axpy(-1.0, detail::apply_at(p, d.y)).axpy(d.tau, c_cone);
      d.x = r.rc;
      d.x.axpy(-1.0, apply_w(d.s));
      d.kappa = (r.rtk - kappa * d.tau) / tau;
      return d.tau == d.tau && std::isfinite(d.kappa);
    };

    // Residual r - L(d) of the full system.
    auto residual = [&](const Rhs& r, const Direction& d) {
      Rhs e;
      e.p1 = r.p1 - (detail::apply_a(p, d.xf, d.x) - p.b * d.tau);
      e.p2f = r.p2f - (-af_t * d.y + p.cf * d.tau);
      ConeVec l2 = detail::apply_at(p, d.y);
      for (Eigen::Index i = 0; i < l2.l.size(); ++i) l2.l[i] = -l2.l[i];
      for (auto& mk : l2.k) mk = -mk;
      l2.axpy(-1.0, d.s).axpy(d.tau, c_cone);
      e.p2 = r.p2;
      e.p2.axpy(-1.0, l2);
      e.p3 = r.p3 - (p.b.dot(d.y) - p.cf.dot(d.xf) - c_cone.dot(d.x) - d.kappa);
      ConeVec l4 = apply_w(d.s);
      l4.axpy(1.0, d.x);
      e.rc = r.rc;
      e.rc.axpy(-1.0, l4);
      e.rtk = r.rtk - (kappa * d.tau + tau * d.kappa);
      return e;
    };
    auto rhs_norm = [&](const Rhs& r) {
      return std::sqrt(r.p1.squaredNorm() + r.p2f.squaredNorm() + r.p2.squared_norm() + r.p3 * r.p3 +
                       r.rc.squared_norm() + r.rtk * r.rtk);
    };

    auto newton = [&](double eta, const ConeVec& rc, double rtk, Direction& d) -> bool {
      Rhs r;
      r.p1 = -eta * rp;
      r.p2f = -eta * rdf;
      r.p2 = rd;
      for (Eigen::Index i = 0; i < r.p2.l.size(); ++i) r.p2.l[i] *= -eta;
      for (auto& mk : r.p2.k) mk *= -eta;
      r.p3 = -eta * rg;
      r.rc = rc;
      r.rtk = rtk;
      if (!reduced_solve(r, d)) return false;
      double err = rhs_norm(residual(r, d));
      for (int pass = 0; pass < 3; ++pass) {
        const Rhs e = residual(r, d);
        Direction c;
        if (!reduced_solve(e, c)) break;
        Direction trial = d;
        trial.xf += c.xf;
        trial.x.axpy(1.0, c.x);
        trial.y += c.y;
        trial.s.axpy(1.0, c.s);
        trial.tau += c.tau;
        trial.kappa += c.kappa;
        const double trial_err = rhs_norm(residual(r, trial));
        if (!(trial_err < err)) break;
        d = std::move(trial);
        err = trial_err;
      }
      return true;
    };

    auto max_step = [&](const Direction& d) {
      double a = std::min(detail::max_step_scalar(tau, d.tau), detail::max_step_scalar(kappa, d.kappa));
      a = std::min(a, detail::max_step_vec(x.l, d.x.l));
      a = std::min(a, detail::max_step_vec(s.l, d.s.l));
      for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        a = std::min(a, detail::max_step_psd(nt[k].chol_x, d.x.k[k]));
        a = std::min(a, detail::max_step_psd(nt[k].chol_s, d.s.k[k]));
      }
      return a;
    };

    // predictor
    ConeVec rc_aff = x;
    rc_aff.axpy(-2.0, x);  // -x
    Direction aff;
    if (!newton(1.0, rc_aff, -tau * kappa, aff)) return finish(fail("predictor solve"));
    const double alpha_aff = std::min(1.0, max_step(aff));
    const double sigma = std::pow(std::max(0.0, 1.0 - alpha_aff), 3.0);

    // corrector; with_second_order = false gives a plain centering direction
    auto corrector = [&](double sig, bool with_second_order, Direction& out) {
      ConeVec rc = ConeVec::zeros(p);
      const double w = with_second_order ? 1.0 : 0.0;
      for (Eigen::Index i = 0; i < nl; ++i) {
        rc.l[i] = (sig * mu - x.l[i] * s.l[i] - w * aff.x.l[i] * aff.s.l[i]) / s.l[i];
      }
      for (std::size_t k = 0; k < p.blocks.size(); ++k) {
        const auto& sc = nt[k];
        Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(sc.lambda.size(), sc.lambda.size());
        if (with_second_order) {
          const Eigen::MatrixXd dxs = sc.g_inv * aff.x.k[k] * sc.g_inv.transpose();
          const Eigen::MatrixXd dss = sc.g.transpose() * aff.s.k[k] * sc.g;
          rhs = -0.5 * (dxs * dss + dss * dxs);
        }
        for (Eigen::Index i = 0; i < rhs.rows(); ++i) rhs(i, i) += sig * mu - sc.lambda[i] * sc.lambda[i];
        Eigen::MatrixXd z(rhs.rows(), rhs.cols());
        for (Eigen::Index i = 0; i < rhs.rows(); ++i) {
          for (Eigen::Index j = 0; j < rhs.cols(); ++j) z(i, j) = 2.0 * rhs(i, j) / (sc.lambda[i] + sc.lambda[j]);
        }
        rc.k[k] = sc.g * z * sc.g.transpose();
        rc.k[k] = 0.5 * (rc.k[k] + rc.k[k].transpose());
      }
      const double rtk = sig * mu - tau * kappa - w * aff.tau * aff.kappa;
      return newton(1.0 - sig, rc, rtk, out);
    };

    // Rounding can push a 0.99 step onto the cone boundary; back off until
    // every block keeps a Cholesky factor.
    ConeVec x_new = x;
    ConeVec s_new = s;
    auto take_step = [&](const Direction& d, double& alpha) {
      for (int tries = 0; tries < 30 && alpha > 1e-12; ++tries) {
        x_new = x;
        x_new.axpy(alpha, d.x);
        s_new = s;
        s_new.axpy(alpha, d.s);
        bool ok = (x_new.l.array() > 0.0).all() && (s_new.l.array() > 0.0).all();
        for (std::size_t k = 0; k < p.blocks.size() && ok; ++k) {
          x_new.k[k] = 0.5 * (x_new.k[k] + x_new.k[k].transpose());
          s_new.k[k] = 0.5 * (s_new.k[k] + s_new.k[k].transpose());
          ok = Eigen::LLT<Eigen::MatrixXd>(x_new.k[k]).info() == Eigen::Success &&
               Eigen::LLT<Eigen::MatrixXd>(s_new.k[k]).info() == Eigen::Success;
        }
        if (ok) return true;
        alpha *= 0.8;
      }
      return false;
    };

    Direction dir;
    if (!corrector(sigma, true, dir)) return finish(fail("corrector solve"));
    double alpha = std::min(1.0, options.step_fraction * max_step(dir));
    if (options.verbose) std::fprintf(stderr, "[sdp]     alpha_aff %.3e sigma %.3e alpha %.3e\n", alpha_aff, sigma, alpha);
    if (!take_step(dir, alpha)) {
      // Near a face of the cone the second-order term can point outside it;
      // recentre instead.
      if (!corrector(std::max(sigma, 0.5), false, dir)) return finish(fail("centering solve"));
      alpha = std::min(1.0, options.step_fraction * max_step(dir));
      if (options.verbose) std::fprintf(stderr, "[sdp]     centering step alpha %.3e\n", alpha);
      if (!take_step(dir, alpha)) return finish(fail("step length collapsed"));
    }

    xf += alpha * dir.xf;
    x = std::move(x_new);
    y += alpha * dir.y;
    s = std::move(s_new);
    tau += alpha * dir.tau;
    kappa += alpha * dir.kappa;
  }
  if (best.score <= kNearOptimalFactor) {
    fail("iteration limit");
    sol.warnings.back() = "iteration limit; returning best iterate (near optimal)";
  }
  return finish(SdpStatus::kMaxIterations);
}

/// Minimum-norm correction of the free and PSD primal values so the
/// equality rows hold to rounding; nonnegative variables are left alone.
/// Returns the input unchanged when the correction would not reduce the
/// residual. The result is not guaranteed to stay inside the cone.
inline SdpSolution polish_primal(const SdpProblem& problem, const SdpSolution& sol) {
  if (problem.equalities.empty()) return sol;
  Eigen::VectorXd rhs;
  Eigen::MatrixXd a = detail::dense_rows(problem, rhs);
  Eigen::VectorXd z = Eigen::VectorXd::Zero(a.cols());
  z.head(problem.free_vars) = sol.free_values;
  z.segment(problem.free_vars, problem.nonneg_vars) = sol.nonneg_values;
  Eigen::Index off = problem.free_vars + problem.nonneg_vars;
  const double r2 = std::sqrt(2.0);
  for (std::size_t k = 0; k < problem.psd_blocks.size(); ++k) {
    const int n = problem.psd_blocks[k];
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i <= j; ++i) z[off + j * (j + 1) / 2 + i] = i == j ? sol.psd_values[k](i, j) : r2 * sol.psd_values[k](i, j);
    }
    off += n * (n + 1) / 2;
  }
  const Eigen::VectorXd r = rhs - a * z;
  a.middleCols(problem.free_vars, problem.nonneg_vars).setZero();
  const Eigen::VectorXd dz = a.completeOrthogonalDecomposition().solve(r);
  const Eigen::VectorXd z_new = z + dz;
  Eigen::VectorXd unused;
  const Eigen::MatrixXd full = detail::dense_rows(problem, unused);
  const double before = r.cwiseAbs().maxCoeff();
  const double after = (rhs - full * z_new).cwiseAbs().maxCoeff();
  if (!(after < before)) return sol;

  SdpSolution out = sol;
  out.free_values = z_new.head(problem.free_vars);
  off = problem.free_vars + problem.nonneg_vars;
  for (std::size_t k = 0; k < problem.psd_blocks.size(); ++k) {
    const int n = problem.psd_blocks[k];
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i <= j; ++i) {
        const double v = z_new[off + j * (j + 1) / 2 + i];
        out.psd_values[k](i, j) = i == j ? v : v / r2;
        out.psd_values[k](j, i) = out.psd_values[k](i, j);
      }
    }
    off += n * (n + 1) / 2;
  }
  out.residuals.primal = (rhs - full * z_new).norm() / (1.0 + rhs.norm());
  return out;
}

}  // namespace koopsos
