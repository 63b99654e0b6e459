#pragma once

/// @file
/// Run configuration for the command-line pipeline. A RunConfig is a single
/// JSON document with a "version" field; missing keys take the defaults
/// below, unknown top-level keys are rejected, and to_json writes every
/// field so a written config reads back unchanged.
///
/// Defaults (pendulum experiment):
///   seed 1
///   plant      pendulum, epsilon 0.1, alpha 100, eta_sq 0.95
///   data       20 trajectories, t_final 20, tau 0.01, 10 RK4 substeps
///   phi caps   [3, 1, 3]; psi caps [4, 1, 4]
///   chi        total degree 2, caps [2, 1, 2], vanishing at (1, 0, 0)
///   domain     eta_sq ellipse plus |theta_dot| <= 4
///   synthesis  l1 objective, margin 0, slack weight 1e4,
///              multiplier caps [3, 1, 3], default multiplier degrees
///   solver     SolverOptions defaults
///   simulate   from (pi - 0.3, 0) for 20 s, record step 0.01, 10 substeps,
///              convergence tolerance 1e-2
///   verify     2000 sampled domain points, sample seed 7
///   paths      out "runs/default", inputs read from the run directory

#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "koopsos/errors.hpp"
#include "koopsos/sdp_solver.hpp"
#include "koopsos/simkit.hpp"
#include "koopsos/sos.hpp"
#include "koopsos/synth.hpp"

namespace koopsos {

inline constexpr int kConfigVersion = 1;

struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 1;

  std::string plant = "pendulum";
  PendulumParams pendulum;

  int n_traj = 20;
  double t_final = 20.0;
  double tau = 0.01;
  int substeps = 10;

  std::vector<int> phi_caps{3, 1, 3};
  std::vector<int> psi_caps{4, 1, 4};
  int chi_degree = 2;
  std::vector<int> chi_caps{2, 1, 2};
  bool chi_vanish_at_equilibrium = true;

  /// Extra box |theta_dot| <= velocity_bound added to the domain; 0 omits it.
  double velocity_bound = 4.0;

  SynthesisObjective objective = SynthesisObjective::kL1;
  double margin = 0.0;
  double slack_weight = 1e4;
  MultiplierSpec multipliers{std::nullopt, std::nullopt, {3, 1, 3}};
  bool escalate_degrees = false;

  SolverOptions solver;

  std::vector<double> initial_state{std::numbers::pi - 0.3, 0.0};
  double sim_t_final = 20.0;
  double sim_step = 0.01;
  int sim_substeps = 10;
  double convergence_tolerance = 1e-2;

  int verify_samples = 2000;
  std::uint64_t verify_seed = 7;

  std::string out = "runs/default";
  /// Optional input locations; empty means "inside the run directory".
  std::string dataset;
  std::string model;
  std::string controller;

  void validate() const {
    if (version != kConfigVersion)
      throw InputError("config: unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kConfigVersion) + ")");
    if (plant != "pendulum") throw InputError("config: unknown plant '" + plant + "'");
    pendulum.validate();
    if (n_traj < 1) throw InputError("config: data.trajectories must be positive");
    if (!(t_final >= 0.0)) throw InputError("config: data.t_final must be nonnegative");
    if (!(tau > 0.0)) throw InputError("config: data.tau must be positive");
    if (substeps < 1) throw InputError("config: data.substeps must be positive");
    auto caps_ok = [](const std::vector<int>& c) {
      return c.size() == 3 && std::all_of(c.begin(), c.end(), [](int v) { return v >= 0; });
    };
    if (!caps_ok(phi_caps) || !caps_ok(psi_caps) || !caps_ok(chi_caps))
      throw InputError("config: dictionary caps must be three nonnegative integers");
    if (chi_degree < 1) throw InputError("config: chi degree must be at least 1");
    if (!(velocity_bound >= 0.0)) throw InputError("config: domain.velocity_bound must be nonnegative");
    if (!(margin >= 0.0)) throw InputError("config: synthesis.margin must be nonnegative");
    if (!(slack_weight >= 0.0)) throw InputError("config: synthesis.slack_weight must be nonnegative");
    if (initial_state.size() != 2) throw InputError("config: simulate.initial_state must be [theta, theta_dot]");
    if (!(sim_t_final >= 0.0) || !(sim_step > 0.0) || sim_substeps < 1)
      throw InputError("config: simulate timing must be positive");
    if (verify_samples < 0) throw InputError("config: verify.samples must be nonnegative");
  }

  DataGenerationOptions data_options() const { return {n_traj, t_final, tau, substeps, seed}; }

  SynthesisOptions synthesis_options() const {
    SynthesisOptions o;
    o.objective = objective;
    o.margin = margin;
    o.equilibrium = pendulum_equilibrium();
    o.multipliers = multipliers;
    o.slack_weight = slack_weight;
    o.escalate_degrees = escalate_degrees;
    o.provenance = "data-driven";
    o.solver = solver;
    return o;
  }

  Dictionary chi() const {
    return chi_dictionary(3, chi_degree, chi_caps,
                          chi_vanish_at_equilibrium ? std::optional<Eigen::VectorXd>(pendulum_equilibrium())
                                                    : std::nullopt);
  }
  Dictionary phi() const { return build_dictionary(3, phi_caps); }
  Dictionary psi() const { return build_dictionary(3, psi_caps); }
  SemialgebraicSet domain() const { return pendulum_domain(pendulum, velocity_bound); }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {
      {"version", c.version},
      {"seed", c.seed},
      {"plant",
       {{"name", c.plant}, {"epsilon", c.pendulum.epsilon}, {"alpha", c.pendulum.alpha}, {"eta_sq", c.pendulum.eta_sq}}},
      {"data", {{"trajectories", c.n_traj}, {"t_final", c.t_final}, {"tau", c.tau}, {"substeps", c.substeps}}},
      {"dictionaries",
       {{"phi_caps", c.phi_caps},
        {"psi_caps", c.psi_caps},
        {"chi_degree", c.chi_degree},
        {"chi_caps", c.chi_caps},
        {"chi_vanish_at_equilibrium", c.chi_vanish_at_equilibrium}}},
      {"domain", {{"velocity_bound", c.velocity_bound}}},
      {"synthesis",
       {{"objective", to_string(c.objective)},
        {"margin", c.margin},
        {"slack_weight", c.slack_weight},
        {"multipliers", to_json(c.multipliers)},
        {"escalate_degrees", c.escalate_degrees}}},
      {"solver", to_json(c.solver)},
      {"simulate",
       {{"initial_state", c.initial_state},
        {"t_final", c.sim_t_final},
        {"step", c.sim_step},
        {"substeps", c.sim_substeps},
        {"convergence_tolerance", c.convergence_tolerance}}},
      {"verify", {{"samples", c.verify_samples}, {"seed", c.verify_seed}}},
      {"paths", {{"out", c.out}, {"dataset", c.dataset}, {"model", c.model}, {"controller", c.controller}}},
  };
}

namespace detail {

template <class T>
void read_key(const nlohmann::json& obj, const char* key, T& dst) {
  if (obj.contains(key)) dst = obj.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw InputError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw InputError("config: unknown key '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

}  // namespace detail

/// Overlays j onto base; keys absent from j keep base's values.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  using detail::check_keys;
  using detail::read_key;
  RunConfig c = std::move(base);
  try {
    check_keys(j, "", {"version", "seed", "plant", "data", "dictionaries", "domain", "synthesis", "solver", "simulate",
                       "verify", "paths"});
    if (!j.contains("version")) throw InputError("config: missing \"version\" field");
    read_key(j, "version", c.version);
    read_key(j, "seed", c.seed);
    if (j.contains("plant")) {
      const auto& p = j["plant"];
      check_keys(p, "plant", {"name", "epsilon", "alpha", "eta_sq"});
      read_key(p, "name", c.plant);
      read_key(p, "epsilon", c.pendulum.epsilon);
      read_key(p, "alpha", c.pendulum.alpha);
      read_key(p, "eta_sq", c.pendulum.eta_sq);
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      check_keys(d, "data", {"trajectories", "t_final", "tau", "substeps"});
      read_key(d, "trajectories", c.n_traj);
      read_key(d, "t_final", c.t_final);
      read_key(d, "tau", c.tau);
      read_key(d, "substeps", c.substeps);
    }
    if (j.contains("dictionaries")) {
      const auto& d = j["dictionaries"];
      check_keys(d, "dictionaries", {"phi_caps", "psi_caps", "chi_degree", "chi_caps", "chi_vanish_at_equilibrium"});
      read_key(d, "phi_caps", c.phi_caps);
      read_key(d, "psi_caps", c.psi_caps);
      read_key(d, "chi_degree", c.chi_degree);
      read_key(d, "chi_caps", c.chi_caps);
      read_key(d, "chi_vanish_at_equilibrium", c.chi_vanish_at_equilibrium);
    }
    if (j.contains("domain")) {
      const auto& d = j["domain"];
      check_keys(d, "domain", {"velocity_bound"});
      read_key(d, "velocity_bound", c.velocity_bound);
    }
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      check_keys(s, "synthesis", {"objective", "margin", "slack_weight", "multipliers", "escalate_degrees"});
      if (s.contains("objective")) c.objective = synthesis_objective_from_string(s["objective"].get<std::string>());
      read_key(s, "margin", c.margin);
      read_key(s, "slack_weight", c.slack_weight);
      if (s.contains("multipliers")) c.multipliers = multiplier_spec_from_json(s["multipliers"]);
      read_key(s, "escalate_degrees", c.escalate_degrees);
    }
    if (j.contains("solver")) c.solver = solver_options_from_json(j["solver"]);
    if (j.contains("simulate")) {
      const auto& s = j["simulate"];
      check_keys(s, "simulate", {"initial_state", "t_final", "step", "substeps", "convergence_tolerance"});
      read_key(s, "initial_state", c.initial_state);
      read_key(s, "t_final", c.sim_t_final);
      read_key(s, "step", c.sim_step);
      read_key(s, "substeps", c.sim_substeps);
      read_key(s, "convergence_tolerance", c.convergence_tolerance);
    }
    if (j.contains("verify")) {
      const auto& v = j["verify"];
      check_keys(v, "verify", {"samples", "seed"});
      read_key(v, "samples", c.verify_samples);
      read_key(v, "seed", c.verify_seed);
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      check_keys(p, "paths", {"out", "dataset", "model", "controller"});
      read_key(p, "out", c.out);
      read_key(p, "dataset", c.dataset);
      read_key(p, "model", c.model);
      read_key(p, "controller", c.controller);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace koopsos
