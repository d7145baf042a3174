// logstab: command-line front end.
//
// Exit codes: 0 success, 1 bad input or contract violation, 2 the
// computation did not converge (or diverged).

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "logstab/errors.hpp"
#include "logstab/extremal_diag.hpp"
#include "logstab/illustrative.hpp"
#include "logstab/matrix_io.hpp"
#include "logstab/node_runtime.hpp"
#include "logstab/outer_newton.hpp"
#include "logstab/result_io.hpp"
#include "logstab/robustness_lab.hpp"
#include "logstab/two_layer.hpp"

namespace fs = std::filesystem;
using namespace logstab;

namespace {

constexpr int kOk = 0;
constexpr int kBadInput = 1;
constexpr int kNoConvergence = 2;

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("LOGSTAB_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("LOGSTAB_SEED is not an unsigned integer: ") + s);
  return static_cast<std::uint64_t>(v);
}

struct StabilizeArgs {
  std::string input;
  std::string second;
  double delta = 0.0;
  double m = 0.0;
  std::string structure = "full";
  double tol = 1e-13;
  std::string out;
};

int run_stabilize(const StabilizeArgs& a) {
  const Matrix A = read_matrix_file(a.input);
  std::cout.precision(17);
  if (!a.second.empty()) {
    if (a.structure != "full") throw ContractViolation("--structure applies to one-layer runs only");
    TwoLayerInstance inst{A, read_matrix_file(a.second), a.m, a.delta};
    TwoLayerStabilizeOptions opts;
    opts.tol = a.tol;
    TwoLayerResult r = two_layer_stabilize(inst, opts);
    write_file_atomic(a.out, format_document(to_document(r)));
    if (r.already_satisfied) {
      std::cout << "already satisfied: max mu2 = " << r.achieved_mu << " <= delta\n";
      return kOk;
    }
    std::cout << "epsilon_star " << r.epsilon_star << "\nachieved_mu " << r.achieved_mu << "\nouter_iterations "
              << r.outer_iterations() << '\n';
    if (!r.converged) {
      std::cerr << "not converged: " << r.message << '\n';
      return kNoConvergence;
    }
    return kOk;
  }
  StabilizeOptions opts;
  opts.tol = a.tol;
  opts.structure = parse_structure(a.structure);
  StabilizationResult r = stabilize(A, a.delta, a.m, opts);
  write_file_atomic(a.out, format_document(to_document(r)));
  if (r.already_satisfied) {
    std::cout << "already satisfied: max mu2 = " << r.achieved_mu << " <= delta\n";
    return kOk;
  }
  std::cout << "epsilon_star " << r.epsilon_star << "\nachieved_mu " << r.achieved_mu << "\nouter_iterations "
            << r.outer_iterations() << '\n';
  if (!r.converged) {
    std::cerr << "not converged: " << r.message << '\n';
    return kNoConvergence;
  }
  return kOk;
}

int run_lognorm_max(const std::string& input, double m, bool oracle) {
  const Matrix A = read_matrix_file(input);
  ExtremizerReport r = find_extremizer(A, m);
  std::cout.precision(17);
  std::cout << "mu " << r.mu_value << "\nd_star";
  for (Eigen::Index i = 0; i < r.d_star.d.size(); ++i) std::cout << ' ' << format_real(r.d_star.d[i]);
  std::cout << "\nmethod " << to_string(r.method) << '\n';
  if (oracle) {
    ExtremizerReport o = vertex_oracle(A, m);
    std::cout << "oracle_mu " << o.mu_value << "\noracle_difference " << (o.mu_value - r.mu_value) << '\n';
  }
  return kOk;
}

int run_demo(const std::string& out) {
  const illustrative::Run r = illustrative::run(0.05);
  const std::string csv = illustrative::rows_csv(r);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_file_atomic(out, csv);
  }
  std::cout << illustrative::transitions_log(r);
  return kOk;
}

int run_verify(const std::string& manifest, double delta, int trials, double scale, std::optional<std::uint64_t> seed,
               const std::string& out) {
  const NeuralOdeModel model = read_manifest(manifest);
  VerifyOptions vo;
  if (seed) vo.seed = *seed;
  if (auto s = env_seed()) vo.seed = *s;
  const BoundReport rep = verify_bound(model, delta, trials, scale, vo);
  const std::string text = format_bound_report(rep);
  if (!out.empty()) write_file_atomic(out, text);
  std::cout << text;
  return kOk;
}

int run_robustness(const std::string& config, const std::string& out_dir) {
  std::ifstream in(config);
  if (!in) throw ConfigError("cannot open config " + config);
  ExperimentConfig cfg = parse_config(in, config);
  if (auto s = env_seed()) cfg.reseed(*s);
  const ExperimentResult res = run_experiment(cfg);
  fs::create_directories(fs::path(out_dir) / "models");
  write_file_atomic(fs::path(out_dir) / "accuracy.csv", accuracy_csv(res.rows));
  write_file_atomic(fs::path(out_dir) / "certificates.txt", certificates_text(res.certificates, res.selected_delta));
  write_file_atomic(fs::path(out_dir) / "config.txt", format_config(res.config));
  std::ostringstream sel;
  sel << "delta,clean_validation,robust_validation,eligible\n";
  for (const auto& d : res.delta_scores) {
    sel << format_real(d.delta) << ',' << format_real(d.clean_validation) << ',' << format_real(d.robust_validation)
        << ',' << (d.eligible ? 1 : 0) << '\n';
  }
  write_file_atomic(fs::path(out_dir) / "delta_selection.csv", sel.str());
  for (const auto& m : res.models) write_manifest(m.ode, fs::path(out_dir) / "models" / (m.name + ".manifest"));
  std::cout << "selected_delta " << format_real(res.selected_delta) << '\n' << accuracy_csv(res.rows);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Worst-case logarithmic-norm stabilization of neural ODE weights"};
  app.require_subcommand(1);

  StabilizeArgs st;
  auto* stab = app.add_subcommand("stabilize", "nearest weights with max over Omega_m of mu2(D A) = delta");
  stab->add_option("--input", st.input, "matrix file (A, or A1 with --two-layer)")->required();
  stab->add_option("--delta", st.delta, "target bound")->required();
  stab->add_option("--m", st.m, "lower activation slope, 0 < m <= 1")->required();
  stab->add_option("--structure", st.structure, "full or diagonal")->check(CLI::IsMember({"full", "diagonal"}));
  stab->add_option("--two-layer", st.second, "second weight matrix A2 for the two-layer field");
  stab->add_option("--tol", st.tol, "absolute tolerance on the penalty");
  stab->add_option("--out", st.out, "result document")->required();

  std::string ln_input;
  double ln_m = 0.0;
  bool ln_oracle = false;
  auto* ln = app.add_subcommand("lognorm-max", "max over Omega_m of mu2(D A) and the extremizer");
  ln->add_option("--input", ln_input, "matrix file")->required();
  ln->add_option("--m", ln_m, "lower activation slope")->required();
  ln->add_flag("--oracle", ln_oracle, "cross-check by enumerating all vertices (n <= 20)");

  std::string demo_out;
  auto* demo = app.add_subcommand("demo-illustrative", "extremizer schedule of the 3 x 3 example");
  demo->add_option("--out", demo_out, "write the mu(t) CSV here instead of stdout");

  std::string vb_manifest;
  std::string vb_out;
  double vb_delta = 0.0;
  int vb_trials = 1000;
  double vb_scale = 1e-3;
  std::optional<std::uint64_t> vb_seed;
  auto* vb = app.add_subcommand("verify-bound", "empirical check of exp(delta T) amplification");
  vb->add_option("--manifest", vb_manifest, "model manifest")->required();
  vb->add_option("--delta", vb_delta, "claimed bound")->required();
  vb->add_option("--trials", vb_trials, "number of random pairs");
  vb->add_option("--scale", vb_scale, "initial separation");
  vb->add_option("--seed", vb_seed, "sampling seed");
  vb->add_option("--out", vb_out, "also write the report here");

  std::string rb_config;
  std::string rb_out = "robustness_out";
  auto* rb = app.add_subcommand("robustness", "train, stabilize, attack and compare");
  rb->add_option("--config", rb_config, "experiment config")->required();
  rb->add_option("--out-dir", rb_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kBadInput;
  }

  try {
    if (*stab) return run_stabilize(st);
    if (*ln) return run_lognorm_max(ln_input, ln_m, ln_oracle);
    if (*demo) return run_demo(demo_out);
    if (*vb) return run_verify(vb_manifest, vb_delta, vb_trials, vb_scale, vb_seed, vb_out);
    if (*rb) return run_robustness(rb_config, rb_out);
  } catch (const ConvergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNoConvergence;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNoConvergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNoConvergence;
  }
  return kOk;
}
