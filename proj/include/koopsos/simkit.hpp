#pragma once

/// @file
/// Fixed-step RK4 simulation, pendulum-on-cart data generation and
/// closed-loop validation.
///
/// The arm obeys theta'' = sin(theta) - eps theta' - cos(theta) u with u the
/// cart acceleration; the upright position is theta = 0. Dictionary work uses
/// the lifted state x = (cos theta, sin theta, theta'), on which the dynamics
/// are polynomial:
///
///     x1' = -x2 x3,  x2' = x1 x3,  x3' = x2 - eps x3 - x1 u.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "koopsos/edmd.hpp"
#include "koopsos/errors.hpp"
#include "koopsos/io.hpp"
#include "koopsos/polycore.hpp"
#include "koopsos/synth.hpp"

namespace koopsos {

inline constexpr double kBlowUpNorm = 1e6;

struct PendulumParams {
  double epsilon = 0.1;
  double alpha = 100.0;
  double eta_sq = 0.95;

  void validate() const {
    if (!(epsilon > 0.0)) throw InputError("PendulumParams: epsilon must be positive");
    if (!(alpha > 0.0)) throw InputError("PendulumParams: alpha must be positive");
    if (!(eta_sq > 0.0 && eta_sq < 1.0)) throw InputError("PendulumParams: eta_sq must lie in (0, 1)");
  }
};

/// u(t) = amplitude * sin(t + phase).
struct ForcingLaw {
  double amplitude = 0.0;
  double phase = 0.0;

  void validate() const {
    if (!(std::abs(amplitude) <= 1.0)) throw InputError("ForcingLaw: amplitude must lie in [-1, 1]");
    if (!(std::abs(phase) <= std::numbers::pi)) throw InputError("ForcingLaw: phase must lie in [-pi, pi]");
  }
  double operator()(double t) const { return amplitude * std::sin(t + phase); }
};

struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> inputs;
  std::vector<double> v;  // optional; empty when not computed
  bool blew_up = false;

  std::size_t size() const { return times.size(); }
};

using Dynamics = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, const Eigen::VectorXd& u)>;
using InputLaw = std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x)>;

/// Classical RK4 with step/substeps internal steps per recorded sample; the
/// input law is evaluated at every stage. Samples are taken at t = k * step
/// for k = 0..round(t_final / step). A non-finite state or one with norm
/// above kBlowUpNorm truncates the record and sets blew_up.
inline TrajectoryRecord integrate(const Dynamics& f, const Eigen::VectorXd& x0, const InputLaw& input, double t_final,
                                  double step, int substeps = 1) {
  if (!(step > 0.0)) throw InputError("integrate: step must be positive");
  if (!(t_final >= 0.0)) throw InputError("integrate: t_final must be nonnegative");
  if (substeps < 1) throw InputError("integrate: substeps must be at least 1");
  const double ratio = t_final / step;
  const auto n = static_cast<long>(std::llround(ratio));
  if (std::abs(ratio - static_cast<double>(n)) > 1e-9 * std::max(1.0, ratio))
    throw InputError("integrate: step does not divide the time span");
  const double h = step / substeps;
  TrajectoryRecord rec;
  rec.times.reserve(static_cast<std::size_t>(n) + 1);
  Eigen::VectorXd x = x0;
  auto record = [&](double t) {
    rec.times.push_back(t);
    rec.states.push_back(x);
    rec.inputs.push_back(input(t, x));
  };
  record(0.0);
  for (long k = 0; k < n; ++k) {
    const double t0 = static_cast<double>(k) * step;
    for (int j = 0; j < substeps; ++j) {
      const double t = t0 + static_cast<double>(j) * h;
      const Eigen::VectorXd k1 = f(x, input(t, x));
      const Eigen::VectorXd x2 = x + 0.5 * h * k1;
      const Eigen::VectorXd k2 = f(x2, input(t + 0.5 * h, x2));
      const Eigen::VectorXd x3 = x + 0.5 * h * k2;
      const Eigen::VectorXd k3 = f(x3, input(t + 0.5 * h, x3));
      const Eigen::VectorXd x4 = x + h * k3;
      const Eigen::VectorXd k4 = f(x4, input(t + h, x4));
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!x.allFinite() || x.norm() > kBlowUpNorm) {
      rec.blew_up = true;
      break;
    }
    record(static_cast<double>(k + 1) * step);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Pendulum

inline Eigen::VectorXd pendulum_rhs(const PendulumParams& p, const Eigen::VectorXd& s, double u) {
  Eigen::VectorXd d(2);
  d << s[1], std::sin(s[0]) - p.epsilon * s[1] - std::cos(s[0]) * u;
  return d;
}

/// (theta, theta') -> (cos theta, sin theta, theta').
inline Eigen::VectorXd lift(double theta, double theta_dot) {
  Eigen::VectorXd x(3);
  x << std::cos(theta), std::sin(theta), theta_dot;
  return x;
}
inline Eigen::VectorXd lift(const Eigen::VectorXd& s) { return lift(s[0], s[1]); }

/// Lifted plant: f = [-x2 x3, x1 x3, x2 - eps x3], g = [0, 0, -x1].
inline PlantModel pendulum_plant(const PendulumParams& p) {
  const auto x1 = Polynomial::variable(3, 0);
  const auto x2 = Polynomial::variable(3, 1);
  const auto x3 = Polynomial::variable(3, 2);
  PlantModel m;
  m.dimension = 3;
  m.f = {-(x2 * x3), x1 * x3, x2 - p.epsilon * x3};
  m.g = {{Polynomial(3), Polynomial(3), -x1}};
  return m;
}

/// V = theta'^2 / 2 + 1 - cos theta + alpha (1 - cos^3 theta), lifted:
/// x3^2 / 2 + 1 - x1 + alpha (1 - x1^3).
inline Polynomial pendulum_lyapunov(const PendulumParams& p) {
  const auto x1 = Polynomial::variable(3, 0);
  const auto x3 = Polynomial::variable(3, 2);
  return 0.5 * (x3 * x3) + Polynomial::constant(3, 1.0 + p.alpha) - x1 - p.alpha * (x1 * x1 * x1);
}

inline double pendulum_v(const PendulumParams& p, double theta, double theta_dot) {
  const double c = std::cos(theta);
  return 0.5 * theta_dot * theta_dot + 1.0 - c + p.alpha * (1.0 - c * c * c);
}

/// Upright equilibrium in lifted coordinates.
inline Eigen::VectorXd pendulum_equilibrium() { return lift(0.0, 0.0); }

/// D = {eta^2 - x2^2 >= 0, 1 - x1^2 - x2^2 = 0}; a positive velocity bound
/// w adds w^2 - x3^2 >= 0.
inline SemialgebraicSet pendulum_domain(const PendulumParams& p, double velocity_bound = 0.0) {
  const auto x1 = Polynomial::variable(3, 0);
  const auto x2 = Polynomial::variable(3, 1);
  const auto x3 = Polynomial::variable(3, 2);
  std::vector<Polynomial> ineq{Polynomial::constant(3, p.eta_sq) - x2 * x2};
  if (velocity_bound > 0.0) ineq.push_back(Polynomial::constant(3, velocity_bound * velocity_bound) - x3 * x3);
  return SemialgebraicSet(3, std::move(ineq), {Polynomial::constant(3, 1.0) - x1 * x1 - x2 * x2});
}

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& gen, double lo, double hi) { return lo + (hi - lo) * uniform01(gen); }

/// Engine for trajectory `index`, derived only from (seed, index).
inline std::mt19937_64 trajectory_engine(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index & 0xffffffffu), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

struct DataGenerationOptions {
  int n_traj = 20;
  double t_final = 20.0;
  double tau = 0.01;
  int substeps = 10;
  std::uint64_t seed = 0;
};

/// Random initial conditions in [0, 2 pi) x [-2, 2] under forcing
/// A sin(t + B), A ~ U[-1, 1], B ~ U[-pi, pi]. Each snapshot pairs the lifted
/// state at t_k with the lifted state at t_k + tau; its input label is the
/// forcing value at t_k. Throws InputError when no snapshot results.
inline SnapshotDataset generate_pendulum_data(const PendulumParams& params, const DataGenerationOptions& opt) {
  params.validate();
  if (opt.n_traj < 1) throw InputError("generate_pendulum_data: n_traj must be positive");
  if (!(opt.tau > 0.0)) throw InputError("generate_pendulum_data: tau must be positive");
  const auto steps = static_cast<long>(std::llround(opt.t_final / opt.tau));
  if (steps < 1) throw InputError("generate_pendulum_data: t_final / tau yields an empty dataset");
  SnapshotDataset data;
  data.state_dim = 3;
  data.input_dim = 1;
  data.tau = opt.tau;
  data.x.resize(3, opt.n_traj * steps);
  data.u.resize(1, opt.n_traj * steps);
  data.y.resize(3, opt.n_traj * steps);
  Eigen::Index col = 0;
  for (int traj = 0; traj < opt.n_traj; ++traj) {
    auto gen = trajectory_engine(opt.seed, static_cast<std::uint64_t>(traj));
    Eigen::VectorXd s0(2);
    s0[0] = uniform(gen, 0.0, 2.0 * std::numbers::pi);
    s0[1] = uniform(gen, -2.0, 2.0);
    ForcingLaw forcing{uniform(gen, -1.0, 1.0), uniform(gen, -std::numbers::pi, std::numbers::pi)};
    forcing.validate();
    const auto rec = integrate([&](const Eigen::VectorXd& s, const Eigen::VectorXd& u) { return pendulum_rhs(params, s, u[0]); },
                               s0, [&](double t, const Eigen::VectorXd&) { return Eigen::VectorXd::Constant(1, forcing(t)); },
                               static_cast<double>(steps) * opt.tau, opt.tau, opt.substeps);
    if (rec.blew_up) throw NumericalError("generate_pendulum_data: trajectory " + std::to_string(traj) + " blew up");
    for (long k = 0; k < steps; ++k) {
      data.x.col(col) = lift(rec.states[static_cast<std::size_t>(k)]);
      data.u(0, col) = rec.inputs[static_cast<std::size_t>(k)][0];
      data.y.col(col) = lift(rec.states[static_cast<std::size_t>(k + 1)]);
      ++col;
    }
  }
  data.validate();
  return data;
}

/// Simulates (theta, theta') under u = ctrl(lift(state)) evaluated at every
/// RK4 stage and records V along the way.
inline TrajectoryRecord closed_loop_simulate(const PendulumParams& params, const Controller& ctrl,
                                             const Eigen::VectorXd& x0, double t_final, double step = 0.01,
                                             int substeps = 10) {
  if (x0.size() != 2) throw InputError("closed_loop_simulate: initial state must be (theta, theta_dot)");
  if (ctrl.chi.dimension() != 3 || ctrl.input_dim() != 1)
    throw InputError("closed_loop_simulate: controller must map lifted 3-vectors to one input");
  auto rec = integrate([&](const Eigen::VectorXd& s, const Eigen::VectorXd& u) { return pendulum_rhs(params, s, u[0]); },
                       x0, [&](double, const Eigen::VectorXd& s) { return ctrl.evaluate(lift(s)); }, t_final, step,
                       substeps);
  for (const auto& s : rec.states) rec.v.push_back(pendulum_v(params, s[0], s[1]));
  return rec;
}

/// theta reduced to (-pi, pi].
inline double wrap_angle(double theta) {
  double t = std::remainder(theta, 2.0 * std::numbers::pi);
  if (t <= -std::numbers::pi) t += 2.0 * std::numbers::pi;
  return t;
}

/// |theta mod 2 pi| + |theta'| at the last sample.
inline double final_distance_to_upright(const TrajectoryRecord& rec) {
  if (rec.states.empty()) return std::numeric_limits<double>::infinity();
  const auto& s = rec.states.back();
  return std::abs(wrap_angle(s[0])) + std::abs(s[1]);
}

inline bool in_pendulum_domain(const PendulumParams& params, const Eigen::VectorXd& s) {
  return pendulum_domain(params).contains(lift(s));
}

/// Fraction of samples whose lifted state lies in D.
inline double domain_membership_fraction(const TrajectoryRecord& rec, const PendulumParams& params) {
  if (rec.states.empty()) return 0.0;
  const auto dom = pendulum_domain(params);
  std::size_t inside = 0;
  for (const auto& s : rec.states) inside += dom.contains(lift(s)) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(rec.states.size());
}

/// Largest V(t_{k+1}) - V(t_k) over consecutive samples with at least one
/// endpoint in D (negative infinity when there is none).
inline double max_v_increase_in_domain(const TrajectoryRecord& rec, const PendulumParams& params) {
  const auto dom = pendulum_domain(params);
  double worst = -std::numeric_limits<double>::infinity();
  bool prev_in = !rec.states.empty() && dom.contains(lift(rec.states[0]));
  for (std::size_t k = 0; k + 1 < rec.v.size(); ++k) {
    const bool next_in = dom.contains(lift(rec.states[k + 1]));
    if (prev_in || next_in) worst = std::max(worst, rec.v[k + 1] - rec.v[k]);
    prev_in = next_in;
  }
  return worst;
}

/// Uniform samples of D with |theta'| <= omega_max, in lifted coordinates.
inline std::vector<Eigen::VectorXd> sample_pendulum_domain(const PendulumParams& params, std::size_t n,
                                                           double omega_max, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const double limit = std::asin(std::sqrt(params.eta_sq));
  std::vector<Eigen::VectorXd> out;
  out.reserve(n);
  while (out.size() < n) {
    // theta within the admissible arcs around 0 and pi
    double theta = uniform(gen, -limit, limit);
    if (uniform01(gen) < 0.5) theta += std::numbers::pi;
    out.push_back(lift(theta, uniform(gen, -omega_max, omega_max)));
  }
  return out;
}

/// CSV with header t,theta,theta_dot,u,V.
inline std::string trajectory_to_csv(const TrajectoryRecord& rec) {
  std::string out = "t,theta,theta_dot,u,V\n";
  for (std::size_t k = 0; k < rec.size(); ++k) {
    out += io::format_double(rec.times[k]) + "," + io::format_double(rec.states[k][0]) + "," +
           io::format_double(rec.states[k][1]) + "," +
           io::format_double(rec.inputs[k].size() > 0 ? rec.inputs[k][0] : 0.0) + "," +
           io::format_double(k < rec.v.size() ? rec.v[k] : 0.0) + "\n";
  }
  return out;
}

}  // namespace koopsos
