// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "koopsos/koopsos.hpp"

using namespace koopsos;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Monomial mono(std::vector<int> e) { return Monomial(std::move(e)); }

// xdot = -x sampled without noise: y = exp(-tau) x.
SnapshotDataset decay_dataset(int n, double tau) {
  SnapshotDataset d;
  d.state_dim = 1;
  d.input_dim = 0;
  d.tau = tau;
  d.x.resize(1, n);
  d.u.resize(0, n);
  d.y.resize(1, n);
  for (int k = 0; k < n; ++k) {
    const double x = -1.0 + 2.0 * (k + 0.5) / n;
    d.x(0, k) = x;
    d.y(0, k) = std::exp(-tau) * x;
  }
  return d;
}

double lie_x2_coefficient(double tau) {
  const Dictionary dict = monomials_up_to(1, 3);
  const LieModel lie(fit_koopman(decay_dataset(500, tau), dict, dict));
  const Eigen::VectorXd c = dict.coefficients_of(Polynomial::monomial(mono({2})));
  return lie_affine_decomposition(lie, c).drift.coefficient(mono({2}));
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  const double tau = 0.01;
  const Dictionary dict = monomials_up_to(1, 3);
  const KoopmanModel model = fit_koopman(decay_dataset(500, tau), dict, dict);
  double worst_diag = 0.0;
  for (int k = 0; k <= 3; ++k) {
    const auto i = static_cast<Eigen::Index>(*dict.index_of(mono({k})));
    worst_diag = std::max(worst_diag, std::abs(model.a(i, i) - std::exp(-k * tau)));
  }
  const double lie = lie_x2_coefficient(tau);
  const double lie_err = std::abs(lie - (std::exp(-2.0 * tau) - 1.0) / tau);
  const double secs = seconds_since(t0);
  return {worst_diag <= 1e-6 && lie_err <= 1e-6 && secs < 1.0,
          fmt("diag err %.2e", worst_diag) + fmt(", x^2 Lie coefficient %.6f", lie) + fmt(" (err %.2e)", lie_err) +
              fmt(", %.2f s", secs)};
}

Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> err;
  for (double tau : {0.1, 0.01, 0.001}) err.push_back(std::abs(lie_x2_coefficient(tau) + 2.0));
  const double r1 = err[0] / err[1];
  const double r2 = err[1] / err[2];
  const double secs = seconds_since(t0);
  const bool ok = r1 >= 8.0 && r1 <= 12.0 && r2 >= 8.0 && r2 <= 12.0 && secs < 5.0;
  return {ok, fmt("errors %.3e", err[0]) + fmt(" %.3e", err[1]) + fmt(" %.3e", err[2]) + fmt(", ratios %.3f", r1) +
                  fmt(" %.3f", r2) + fmt(", %.2f s", secs)};
}

SosSolveResult solve_plain_sos(const Polynomial& p) {
  SosProgram prog(p.dimension());
  prog.add_constraint(make_sos_constraint("p", DecisionPolynomial(p), SemialgebraicSet::whole_space(p.dimension())));
  return solve_sos(prog);
}

Outcome criterion3() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  const Dictionary quad = monomials_up_to(2, 2);
  int good = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Polynomial p(2);
    for (int s = 0; s < 2; ++s) {
      Eigen::VectorXd c(static_cast<Eigen::Index>(quad.size()));
      for (Eigen::Index i = 0; i < c.size(); ++i) c[i] = normal(gen);
      const Polynomial q = quad.combine(c);
      p += q * q;
    }
    if (solve_plain_sos(p).feasible()) ++good;
  }
  const SdpStatus neg = solve_plain_sos(Polynomial::constant(1, -1.0)).solution.status;
  const auto x = Polynomial::variable(1, 0);
  const SdpStatus odd = solve_plain_sos(x * x * x).solution.status;
  const double secs = seconds_since(t0);
  const bool ok = good == 20 && neg == SdpStatus::kInfeasible && odd == SdpStatus::kInfeasible && secs < 10.0;
  return {ok, std::to_string(good) + "/20 certified, p=-1 " + to_string(neg) + ", p=x^3 " + to_string(odd) +
                  fmt(", %.2f s", secs)};
}

Eigen::MatrixXd random_orthogonal(int n, std::mt19937_64& gen) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) g(i, j) = normal(gen);
  }
  return Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
}

// Builds min <C, X> s.t. <A_i, X> = b_i, X PSD with a planted primal-dual
// pair (X*, y*, S*) satisfying X* S* = 0, so the optimal value is b^T y*.
struct PlantedSdp {
  SdpProblem problem;
  std::vector<std::vector<Eigen::MatrixXd>> a;  // [row][block]
  std::vector<Eigen::MatrixXd> c;
  Eigen::VectorXd b;
  double optimum = 0.0;
};

PlantedSdp planted_sdp(std::mt19937_64& gen) {
  std::uniform_int_distribution<int> nblocks(1, 3), bsize(2, 10), rows(2, 12);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> pos(0.5, 2.0);
  PlantedSdp out;
  const int nb = nblocks(gen);
  std::vector<Eigen::MatrixXd> xs, ss;
  for (int k = 0; k < nb; ++k) {
    const int n = bsize(gen);
    out.problem.add_psd_block(n);
    const Eigen::MatrixXd q = random_orthogonal(n, gen);
    const int r = std::uniform_int_distribution<int>(1, n - 1)(gen);
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(n), ds = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) (i < r ? dx[i] : ds[i]) = pos(gen);
    xs.push_back(q * dx.asDiagonal() * q.transpose());
    ss.push_back(q * ds.asDiagonal() * q.transpose());
  }
  const int m = rows(gen);
  Eigen::VectorXd y(m);
  out.b.resize(m);
  for (int i = 0; i < m; ++i) {
    y[i] = normal(gen);
    std::vector<Eigen::MatrixXd> ai;
    LinearRow row;
    double bi = 0.0;
    for (int k = 0; k < nb; ++k) {
      const int n = out.problem.psd_blocks[static_cast<std::size_t>(k)];
      Eigen::MatrixXd g(n, n);
      for (int r = 0; r < n; ++r) {
        for (int s = 0; s < n; ++s) g(r, s) = normal(gen);
      }
      const Eigen::MatrixXd sym = 0.5 * (g + g.transpose());
      for (int r = 0; r < n; ++r) {
        for (int s = r; s < n; ++s) row.terms.push_back({VarRef::psd(k, r, s), r == s ? sym(r, s) : 2.0 * sym(r, s)});
      }
      bi += (sym.array() * xs[static_cast<std::size_t>(k)].array()).sum();
      ai.push_back(sym);
    }
    row.rhs = bi;
    out.b[i] = bi;
    out.problem.equalities.push_back(row);
    out.a.push_back(ai);
  }
  for (int k = 0; k < nb; ++k) {
    Eigen::MatrixXd ck = ss[static_cast<std::size_t>(k)];
    for (int i = 0; i < m; ++i) ck += y[i] * out.a[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    const int n = static_cast<int>(ck.rows());
    for (int r = 0; r < n; ++r) {
      for (int s = r; s < n; ++s) out.problem.objective.push_back({VarRef::psd(k, r, s), r == s ? ck(r, s) : 2.0 * ck(r, s)});
    }
    out.c.push_back(ck);
  }
  out.optimum = out.b.dot(y);
  return out;
}

double smallest_eigenvalue(const Eigen::MatrixXd& m) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

Outcome criterion4() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(99);
  int good = 0;
  double worst_kkt = 0.0, worst_obj = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const PlantedSdp sdp = planted_sdp(gen);
    const SdpSolution sol = solve(sdp.problem);
    if (sol.status != SdpStatus::kOptimal) continue;
    const std::size_t nb = sdp.c.size();
    double pres = 0.0;
    for (std::size_t i = 0; i < sdp.a.size(); ++i) {
      double v = 0.0;
      for (std::size_t k = 0; k < nb; ++k) v += (sdp.a[i][k].array() * sol.psd_values[k].array()).sum();
      pres = std::max(pres, std::abs(v - sdp.b[static_cast<Eigen::Index>(i)]));
    }
    pres /= 1.0 + sdp.b.norm();
    double dres = 0.0, cnorm = 0.0, compl_ = 0.0, obj = 0.0, min_eig = 0.0;
    for (std::size_t k = 0; k < nb; ++k) {
      Eigen::MatrixXd r = sdp.c[k] - sol.psd_slacks[k];
      for (std::size_t i = 0; i < sdp.a.size(); ++i) r -= sol.duals[static_cast<Eigen::Index>(i)] * sdp.a[i][k];
      dres += r.squaredNorm();
      cnorm += sdp.c[k].squaredNorm();
      compl_ += (sol.psd_values[k].array() * sol.psd_slacks[k].array()).sum();
      obj += (sdp.c[k].array() * sol.psd_values[k].array()).sum();
      min_eig = std::min(min_eig, std::min(smallest_eigenvalue(sol.psd_values[k]), smallest_eigenvalue(sol.psd_slacks[k])));
    }
    dres = std::sqrt(dres) / (1.0 + std::sqrt(cnorm));
    compl_ = std::abs(compl_) / (1.0 + std::abs(sdp.optimum));
    const double kkt = std::max({pres, dres, compl_, -min_eig});
    const double obj_err = std::abs(obj - sdp.optimum) / std::max(1.0, std::abs(sdp.optimum));
    worst_kkt = std::max(worst_kkt, kkt);
    worst_obj = std::max(worst_obj, obj_err);
    if (kkt <= 1e-6 && obj_err <= 1e-5) ++good;
  }
  const double secs = seconds_since(t0);
  return {good == 20 && secs < 10.0, std::to_string(good) + "/20 solved" + fmt(", worst KKT %.2e", worst_kkt) +
                                         fmt(", worst objective error %.2e", worst_obj) + fmt(", %.2f s", secs)};
}

Outcome criterion5() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto x = Polynomial::variable(1, 0);
  PlantModel plant;
  plant.dimension = 1;
  plant.f = {x};
  plant.g = {{Polynomial::constant(1, 1.0)}};
  const LieDecomposition lie = exact_lie_derivative(plant, x * x);
  const SemialgebraicSet dom(1, {Polynomial::constant(1, 1.0) - x * x}, {});
  const Dictionary chi = chi_dictionary(1, 1, {}, Eigen::VectorXd::Zero(1));
  SynthesisOptions opt;
  opt.objective = SynthesisObjective::kFeasibility;
  double c_feas = NAN, c_l1 = NAN;
  std::string err;
  try {
    c_feas = synthesize(lie, dom, chi, opt).controller.c(0, 0);
    opt.objective = SynthesisObjective::kL1;
    c_l1 = synthesize(lie, dom, chi, opt).controller.c(0, 0);
  } catch (const Error& e) {
    err = std::string(", error: ") + e.what();
  }
  const double secs = seconds_since(t0);
  const bool ok = c_feas <= -1.0 + 1e-6 && c_l1 >= -1.2 && c_l1 <= -1.0 + 1e-6 && secs < 5.0;
  return {ok, fmt("feasibility C = %.6f", c_feas) + fmt(", l1 C = %.6f", c_l1) + fmt(", %.2f s", secs) + err};
}

struct PendulumRun {
  KoopmanModel model;
  LieDecomposition lie;
  SynthesisResult synthesis;
  TrajectoryRecord trajectory;
  double fit_seconds = 0.0;
};

void criteria6and7(Outcome& c6, Outcome& c7) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg;
  PendulumRun run;
  const SnapshotDataset data = generate_pendulum_data(cfg.pendulum, cfg.data_options());
  run.model = fit_koopman(data, cfg.phi(), cfg.psi());
  const Eigen::VectorXd vc = run.model.phi.coefficients_of(pendulum_lyapunov(cfg.pendulum));
  run.lie = lie_affine_decomposition(LieModel(run.model), vc);
  run.fit_seconds = seconds_since(t0);

  // Cross-path agreement with the exact Lie derivative.
  const LieDecomposition exact = exact_lie_derivative(pendulum_plant(cfg.pendulum), pendulum_lyapunov(cfg.pendulum));
  double worst = 0.0;
  std::string worst_term;
  auto compare = [&](const Polynomial& data_poly, const Polynomial& exact_poly, const std::string& part) {
    for (const auto& [m, e] : exact_poly.terms()) {
      const double rel = std::abs(data_poly.coefficient(m) - e) / std::abs(e);
      if (rel > worst) {
        worst = rel;
        worst_term = part + " " + m.to_string();
      }
    }
  };
  compare(run.lie.drift, exact.drift, "drift");
  compare(run.lie.inputs[0], exact.inputs[0], "input");
  c7 = {worst <= 0.05 && run.fit_seconds < 60.0,
        fmt("worst relative coefficient error %.4f", worst) + " (" + worst_term + ")" +
            fmt(", %.2f s", run.fit_seconds)};

  std::string err;
  try {
    run.synthesis = synthesize(run.lie, cfg.domain(), cfg.chi(), cfg.synthesis_options());
  } catch (const Error& e) {
    c6 = {false, std::string("synthesis failed: ") + e.what()};
    return;
  }
  const Controller& ctrl = run.synthesis.controller;
  const bool cert = run.synthesis.report.pass;

  std::vector<std::size_t> order(ctrl.chi.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(ctrl.c(0, static_cast<Eigen::Index>(a))) > std::abs(ctrl.c(0, static_cast<Eigen::Index>(b)));
  });
  const Monomial x1x2 = mono({1, 1, 0});
  const Monomial x1x3 = mono({1, 0, 1});
  const bool top_two = order.size() >= 2 &&
                       ((ctrl.chi[order[0]] == x1x2 && ctrl.chi[order[1]] == x1x3) ||
                        (ctrl.chi[order[0]] == x1x3 && ctrl.chi[order[1]] == x1x2)) &&
                       ctrl.c(0, static_cast<Eigen::Index>(order[0])) > 0.0 &&
                       ctrl.c(0, static_cast<Eigen::Index>(order[1])) > 0.0;

  const Eigen::Vector2d x0(cfg.initial_state[0], cfg.initial_state[1]);
  run.trajectory = closed_loop_simulate(cfg.pendulum, ctrl, x0, cfg.sim_t_final, cfg.sim_step, cfg.sim_substeps);
  const double dist = run.trajectory.blew_up ? INFINITY : final_distance_to_upright(run.trajectory);
  const double rise = max_v_increase_in_domain(run.trajectory, cfg.pendulum);
  const double secs = seconds_since(t0);
  const bool ok = cert && top_two && dist < 1e-2 && rise <= 1e-6 && secs < 120.0;
  c6 = {ok, std::string("certificate ") + (cert ? "pass" : "FAIL") + ", u = " + ctrl.polynomials()[0].to_string(6) +
                ", top two on x1*x2 and x1*x3 " + (top_two ? "yes" : "NO") + fmt(", final distance %.2e", dist) +
                fmt(", max V rise in domain %.2e", rise) + fmt(", %.2f s", secs)};
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  if (!fs::exists(a) || !fs::exists(b)) return false;
  return io::read_file(a.string()) == io::read_file(b.string());
}

Outcome criterion8() {
  const auto t0 = std::chrono::steady_clock::now();
  unsetenv("KOOPSOS_OUT_DIR");
  const std::string cli = KOOPSOS_CLI;
  std::vector<fs::path> dirs{fs::absolute("acceptance_run_a"), fs::absolute("acceptance_run_b")};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    for (const char* cmd : {"generate-data", "fit", "synthesize"}) {
      const std::string line = "\"" + cli + "\" " + cmd + " --seed 5 --out \"" + d.string() + "\" > /dev/null 2>&1";
      if (std::system(line.c_str()) != 0) return {false, std::string("command failed: ") + cmd};
    }
  }
  std::string detail;
  bool ok = true;
  for (const char* f : {"dataset.csv", "dataset.json", "model.json", "controller.json"}) {
    const bool same = same_bytes(dirs[0] / f, dirs[1] / f);
    ok = ok && same;
    detail += std::string(f) + (same ? " identical, " : " DIFFERS, ");
  }
  return {ok, detail + fmt("%.2f s", seconds_since(t0))};
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, std::function<Outcome()>>> plan{
      {"1 EDMD exactness on a linear fixture", criterion1},
      {"2 first-order convergence of the Lie estimate", criterion2},
      {"3 SOS compiler soundness", criterion3},
      {"4 SDP solver correctness on planted problems", criterion4},
      {"5 scalar model-based synthesis", criterion5},
  };
  int failures = 0;
  auto report = [&](const std::string& name, const Outcome& o) {
    std::printf("criterion %s: %s  [%s]\n", name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };
  for (const auto& [name, fn] : plan) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    report(name, o);
  }
  Outcome c6, c7;
  try {
    criteria6and7(c6, c7);
  } catch (const std::exception& e) {
    c6 = c7 = {false, std::string("exception: ") + e.what()};
  }
  report("6 pendulum pipeline", c6);
  report("7 data-driven vs exact Lie derivative", c7);
  Outcome c8;
  try {
    c8 = criterion8();
  } catch (const std::exception& e) {
    c8 = {false, std::string("exception: ") + e.what()};
  }
  report("8 deterministic artifacts", c8);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
