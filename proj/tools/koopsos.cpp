// koopsos: data generation, Koopman fit, SOS controller synthesis,
// closed-loop simulation and certificate checks for the pendulum pipeline.
//
// Exit codes: 0 success, 1 a check ran and failed, 2 infeasible,
// 3 numerical failure, 4 bad input.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "koopsos/koopsos.hpp"

namespace fs = std::filesystem;
using namespace koopsos;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitInfeasible = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitBadInput = 4;

constexpr const char* kOutEnv = "KOOPSOS_OUT_DIR";

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<double> alpha;
  std::optional<double> eta_sq;
  std::optional<double> tau;
  std::optional<std::string> objective;
  std::optional<double> margin;
  std::optional<int> chi_degree;
  std::optional<std::string> dataset;
  std::optional<std::string> model;
  std::optional<std::string> controller;
  bool export_sdpa = false;
  std::string against = "model";
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "RNG seed");
  cmd->add_option("--out", f.out, "run directory");
  cmd->add_option("--alpha", f.alpha, "pendulum alpha");
  cmd->add_option("--eta-sq", f.eta_sq, "domain parameter eta^2");
  cmd->add_option("--tau", f.tau, "sampling interval");
  cmd->add_option("--objective", f.objective, "synthesis objective")->check(CLI::IsMember({"l1", "bound", "feas"}));
  cmd->add_option("--margin", f.margin, "strictness margin lambda");
  cmd->add_option("--chi-degree", f.chi_degree, "total degree of the controller dictionary");
}

RunConfig effective_config(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : run_config_from_json(io::read_json(f.config));
  if (const char* env = std::getenv(kOutEnv); env != nullptr && *env != '\0') c.out = env;
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out = *f.out;
  if (f.alpha) c.pendulum.alpha = *f.alpha;
  if (f.eta_sq) c.pendulum.eta_sq = *f.eta_sq;
  if (f.tau) c.tau = *f.tau;
  if (f.objective) c.objective = synthesis_objective_from_string(*f.objective);
  if (f.margin) c.margin = *f.margin;
  if (f.chi_degree) c.chi_degree = *f.chi_degree;
  if (f.dataset) c.dataset = *f.dataset;
  if (f.model) c.model = *f.model;
  if (f.controller) c.controller = *f.controller;
  c.validate();
  return c;
}

std::string run_path(const RunConfig& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

std::string dataset_stem(const RunConfig& c) { return c.dataset.empty() ? run_path(c, "dataset") : c.dataset; }
std::string model_path(const RunConfig& c) { return c.model.empty() ? run_path(c, "model.json") : c.model; }
std::string controller_path(const RunConfig& c) {
  return c.controller.empty() ? run_path(c, "controller.json") : c.controller;
}

void prepare_run(const RunConfig& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw InputError("cannot create run directory '" + c.out + "': " + ec.message());
  io::write_json(run_path(c, "config.json"), to_json(c));
}

LieDecomposition data_lie(const RunConfig& c, const KoopmanModel& model) {
  const Polynomial v = pendulum_lyapunov(c.pendulum);
  return lie_affine_decomposition(LieModel(model), model.phi.coefficients_of(v));
}

KoopmanModel load_model(const RunConfig& c) {
  KoopmanModel m = koopman_from_json(io::read_json(model_path(c)));
  if (m.input_dim() != 1 || m.phi.dimension() != 3) throw InputError("model does not describe the lifted pendulum");
  return m;
}

int cmd_generate(const RunConfig& c) {
  const SnapshotDataset data = generate_pendulum_data(c.pendulum, c.data_options());
  write_dataset(dataset_stem(c), data);
  std::printf("dataset: %lld snapshots, tau %g -> %s.csv\n", static_cast<long long>(data.size()), data.tau,
              dataset_stem(c).c_str());
  return kExitOk;
}

int cmd_fit(const RunConfig& c) {
  const SnapshotDataset data = read_dataset(dataset_stem(c));
  const KoopmanModel model = fit_koopman(data, c.phi(), c.psi());
  if (!model.full_rank()) {
    throw NumericalError("fit: Psi has numerical rank " + std::to_string(model.svd_rank) + " < " +
                         std::to_string(model.psi_rows) + "; the data do not excite the dictionary");
  }
  io::write_json(run_path(c, "model.json"), to_json(model));
  const LieDecomposition lie = data_lie(c, model);
  io::write_json(run_path(c, "lie.json"),
                 {{"drift", to_json(lie.drift)}, {"inputs", {to_json(lie.inputs[0])}},
                  {"drift_text", lie.drift.to_string()}, {"input_text", lie.inputs[0].to_string()}});
  std::printf("model: A %lldx%lld, B1 %lldx%lld, rank %d/%d, residual %.6e\n", static_cast<long long>(model.a.rows()),
              static_cast<long long>(model.a.cols()), static_cast<long long>(model.b[0].rows()),
              static_cast<long long>(model.b[0].cols()), model.svd_rank, model.psi_rows, model.fit_residual);
  return kExitOk;
}

int cmd_synthesize(const RunConfig& c, bool export_sdpa_too) {
  const KoopmanModel model = load_model(c);
  const LieDecomposition lie = data_lie(c, model);
  const SynthesisOptions opt = c.synthesis_options();
  if (export_sdpa_too) {
    const auto built = build_synthesis_program(lie, c.domain(), c.chi(), opt, opt.multipliers);
    io::write_file(run_path(c, "synthesis.dat-s"), export_sdpa(built.program.compile().sdp));
  }
  std::string report;
  try {
    const SynthesisResult res = synthesize(lie, c.domain(), c.chi(), opt);
    io::write_json(run_path(c, "controller.json"), to_json(res.controller));
    char buf[128];
    std::snprintf(buf, sizeof buf, "slack %.6e\n", res.slack);
    report = res.controller.to_string() + buf + res.report.to_string();
    io::write_file(run_path(c, "report.txt"), report);
    std::fputs(report.c_str(), stdout);
    return kExitOk;
  } catch (const Error& e) {
    io::write_file(run_path(c, "report.txt"), std::string("synthesis failed: ") + e.what() + "\n");
    throw;
  }
}

int cmd_simulate(const RunConfig& c) {
  const Controller ctrl = controller_from_json(io::read_json(controller_path(c)));
  Eigen::VectorXd x0(2);
  x0 << c.initial_state[0], c.initial_state[1];
  const TrajectoryRecord rec = closed_loop_simulate(c.pendulum, ctrl, x0, c.sim_t_final, c.sim_step, c.sim_substeps);
  io::write_file(run_path(c, "trajectory.csv"), trajectory_to_csv(rec));
  const double dist = final_distance_to_upright(rec);
  const double rise = max_v_increase_in_domain(rec, c.pendulum);
  const bool converged = !rec.blew_up && dist < c.convergence_tolerance;
  const bool monotone = !(rise > 1e-6);
  const nlohmann::json summary = {{"final_distance", dist},
                                  {"converged", converged},
                                  {"blew_up", rec.blew_up},
                                  {"max_v_increase_in_domain", std::isfinite(rise) ? rise : 0.0},
                                  {"v_monotone_in_domain", monotone},
                                  {"domain_fraction", domain_membership_fraction(rec, c.pendulum)},
                                  {"pass", converged && monotone}};
  io::write_json(run_path(c, "summary.json"), summary);
  std::printf("simulate: final |theta|+|theta_dot| = %.3e, converged %s, V monotone in D %s\n", dist,
              converged ? "yes" : "no", monotone ? "yes" : "no");
  return converged && monotone ? kExitOk : kExitCheckFailed;
}

int cmd_verify(const RunConfig& c, const std::string& against) {
  const Controller ctrl = controller_from_json(io::read_json(controller_path(c)));
  LieDecomposition lie;
  if (against == "plant") {
    lie = exact_lie_derivative(pendulum_plant(c.pendulum), pendulum_lyapunov(c.pendulum));
  } else {
    lie = data_lie(c, load_model(c));
  }
  const SemialgebraicSet dom = c.domain();
  const ControllerCheck chk = verify_controller(lie, dom, ctrl, true, c.multipliers, c.solver);
  const auto samples = sample_pendulum_domain(c.pendulum, static_cast<std::size_t>(c.verify_samples),
                                              c.velocity_bound > 0.0 ? c.velocity_bound : 4.0, c.verify_seed);
  const double sampled = samples.empty() ? 0.0 : max_sampled_lie(lie, ctrl, samples);
  const double recorded = ctrl.diagnostics.value("slack", 0.0);
  const double allowed = std::max(recorded, 0.0) * (1.0 + 1e-3) + 1e-6;
  const bool cert_ok = chk.report.pass;
  const bool slack_ok = cert_ok && chk.slack <= allowed;
  const bool sampled_ok = sampled <= (cert_ok ? chk.slack : allowed) + 1e-6;
  const bool pass = cert_ok && slack_ok && sampled_ok;
  const nlohmann::json out = {{"against", against},
                              {"solver_status", to_string(chk.status)},
                              {"certificate", to_json(chk.report)},
                              {"certified_bound", chk.slack},
                              {"allowed_bound", allowed},
                              {"max_sampled_lie", sampled},
                              {"samples", c.verify_samples},
                              {"pass", pass}};
  io::write_json(run_path(c, "verify_" + against + ".json"), out);
  std::printf("verify (%s): solver %s, certified L V <= %.6e (allowed %.6e), sampled max %.6e -> %s\n",
              against.c_str(), to_string(chk.status).c_str(), chk.slack, allowed, sampled, pass ? "pass" : "FAIL");
  return pass ? kExitOk : kExitCheckFailed;
}

int cmd_export(const RunConfig& c) {
  const KoopmanModel model = load_model(c);
  const SynthesisOptions opt = c.synthesis_options();
  const auto built = build_synthesis_program(data_lie(c, model), c.domain(), c.chi(), opt, opt.multipliers);
  const SdpProblem sdp = built.program.compile().sdp;
  io::write_file(run_path(c, "synthesis.dat-s"), export_sdpa(sdp));
  std::printf("export-sdpa: %zu constraints, %zu blocks -> %s\n", sdp.equalities.size(), sdp.psd_blocks.size(),
              run_path(c, "synthesis.dat-s").c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman/SOS controller synthesis pipeline"};
  app.require_subcommand(1);
  Flags f;
  auto* gen = app.add_subcommand("generate-data", "simulate forced trajectories and write the snapshot dataset");
  auto* fit = app.add_subcommand("fit", "fit the Koopman model with control");
  auto* syn = app.add_subcommand("synthesize", "synthesize a polynomial controller with an SOS certificate");
  auto* sim = app.add_subcommand("simulate", "simulate the closed loop and write the trajectory");
  auto* ver = app.add_subcommand("verify", "re-certify a controller against the model or the exact plant");
  auto* exp = app.add_subcommand("export-sdpa", "write the synthesis SDP in SDPA sparse format");
  for (auto* cmd : {gen, fit, syn, sim, ver, exp}) add_common(cmd, f);
  for (auto* cmd : {fit}) cmd->add_option("--dataset", f.dataset, "dataset stem (without .csv/.json)");
  for (auto* cmd : {syn, ver, exp}) cmd->add_option("--model", f.model, "model JSON");
  for (auto* cmd : {sim, ver}) cmd->add_option("--controller", f.controller, "controller JSON");
  syn->add_flag("--export-sdpa", f.export_sdpa, "also write synthesis.dat-s");
  ver->add_option("--against", f.against, "Lie derivative source")->check(CLI::IsMember({"model", "plant"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitBadInput;
  }

  try {
    const RunConfig c = effective_config(f);
    prepare_run(c);
    if (gen->parsed()) return cmd_generate(c);
    if (fit->parsed()) return cmd_fit(c);
    if (syn->parsed()) return cmd_synthesize(c, f.export_sdpa);
    if (sim->parsed()) return cmd_simulate(c);
    if (ver->parsed()) return cmd_verify(c, f.against);
    if (exp->parsed()) return cmd_export(c);
  } catch (const InfeasibleError& e) {
    std::fprintf(stderr, "infeasible: %s\n", e.what());
    return kExitInfeasible;
  } catch (const InputError& e) {
    std::fprintf(stderr, "bad input: %s\n", e.what());
    return kExitBadInput;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumerical;
  }
  return kExitBadInput;
}
