#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "sidds/sidds.hpp"

namespace {

using nlohmann::json;

std::ostream& output_stream(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot open output file '" + path + "'");
  return file;
}

sidds::NoiseModel make_noise(const std::string& kind, double sigma, double rho, sidds::Index d) {
  if (kind == "iid") return sidds::NoiseModel::make_iid(sigma, d);
  if (kind == "correlated") return sidds::NoiseModel::make_correlated(sigma, rho, d);
  throw std::runtime_error("noise kind must be 'iid' or 'correlated'");
}

int cmd_simulate(const std::string& problem, long m_opt, double delta_opt, double sigma,
                 double rho, const std::string& kind, std::uint64_t seed, const std::string& out) {
  const sidds::TestProblem prob = sidds::make_test_problem(problem);
  const sidds::Index m = m_opt > 0 ? m_opt : prob.default_m;
  const double delta = delta_opt > 0 ? delta_opt : prob.default_delta;
  const sidds::Trajectory traj = sidds::integrate_trajectory(prob.field(), prob.x0, m, delta);
  const sidds::NoiseModel model = make_noise(kind, sigma, rho, prob.spec.dim);
  sidds::Matrix Y = traj.states;
  if (sigma > 0) {
    const sidds::Vector n = sidds::sample_noise(model, m, prob.spec.dim, seed);
    Y += sidds::devectorize(n, m, prob.spec.dim);
  }
  std::ofstream file;
  sidds::write_trajectory_csv(output_stream(out, file), traj, &Y);
  return 0;
}

int cmd_identify(const std::string& method, const std::string& input, const std::string& problem,
                 int degree, long points, const std::string& weight, const std::string& kind,
                 double sigma, double rho, bool masked, double alpha, double tau, double p_norm,
                 const std::string& out) {
  std::ifstream in(input);
  if (!in) throw std::runtime_error("cannot open input file '" + input + "'");
  const sidds::CsvData data = sidds::read_trajectory_csv(in);
  const sidds::Index m = data.states.rows();
  const sidds::Index d = data.states.cols();

  sidds::BasisSpec spec;
  std::optional<sidds::Mask> mask;
  if (!problem.empty()) {
    const sidds::TestProblem prob = sidds::make_test_problem(problem);
    if (prob.spec.dim != d) throw std::runtime_error("problem dimension does not match the CSV");
    spec = prob.spec;
    if (masked) mask = prob.sparsity_mask();
  } else {
    spec = sidds::enumerate_basis(static_cast<int>(d), degree);
    if (masked) throw std::runtime_error("--masked requires --problem");
  }

  json result;
  result["method"] = method;
  result["basis"] = spec;

  if (method == "lsoi" || method == "wlsoi") {
    const sidds::FinDiffMatrix D = sidds::make_findiff(m, data.delta, points);
    sidds::LsoiResult r;
    if (method == "lsoi") {
      r = sidds::lsoi_solve(data.states, D, spec, mask);
    } else {
      if (problem.empty()) throw std::runtime_error("wlsoi requires --problem (uses ground truth)");
      const sidds::TestProblem prob = sidds::make_test_problem(problem);
      const sidds::Trajectory& truth = sidds::cached_truth(prob, m, data.delta);
      const sidds::NoiseModel model = make_noise(kind, sigma, rho, d);
      const sidds::Matrix Gamma =
          sidds::whitening_gamma(spec, truth.states, prob.truth, D, model);
      r = sidds::weighted_lsoi_solve(data.states, D, spec, Gamma, mask);
    }
    result["rank_deficient"] = r.rank_deficient;
    std::vector<std::vector<double>> C;
    for (sidds::Index k = 0; k < r.coeffs.n(); ++k) {
      std::vector<double> row;
      for (sidds::Index s = 0; s < d; ++s) row.push_back(r.coeffs.matrix(k, s));
      C.push_back(row);
    }
    result["coefficients"] = C;
  } else if (method == "sidds" || method == "sidds_l0") {
    sidds::SiddsProblem sp;
    sidds::WeightMatrix M = sidds::WeightMatrix::identity(m, d);
    if (weight == "inverse_sigma") {
      const sidds::NoiseModel model = make_noise(kind, sigma, rho, d);
      M = sidds::inverse_weight(model, m);
    }
    sp.trajectories.push_back(sidds::TrajectoryData{sidds::vectorize(data.states), std::move(M)});
    sp.delta = data.delta;
    sp.points = points;
    sp.spec = spec;
    sp.mask = mask;
    if (method == "sidds") {
      sp.reg.alpha = alpha;
      sp.reg.tau = tau >= 0 ? std::optional<double>(tau) : std::optional<double>(0.0);
    } else {
      sp.reg.p = p_norm;
      sp.reg.alpha = alpha;
      if (tau >= 0) sp.reg.tau = tau;
    }
    const sidds::SiddsSolution sol = sidds::sidds_solve(sp);
    if (sol.report.status != sidds::SolveStatus::converged) return 2;
    std::vector<std::vector<double>> C;
    for (sidds::Index k = 0; k < sol.coeffs.n(); ++k) {
      std::vector<double> row;
      for (sidds::Index s = 0; s < d; ++s) row.push_back(sol.coeffs.matrix(k, s));
      C.push_back(row);
    }
    result["coefficients"] = C;
    result["iterations"] = sol.report.iterations.size();
  } else {
    throw std::runtime_error("unknown method '" + method + "'");
  }

  std::ofstream file;
  output_stream(out, file) << result.dump(2) << "\n";
  return 0;
}

int cmd_crlb(const std::string& problem, long m_opt, double delta_opt, double sigma, double rho,
             const std::string& kind, bool masked, const std::string& out) {
  const sidds::TestProblem prob = sidds::make_test_problem(problem);
  const sidds::Index m = m_opt > 0 ? m_opt : prob.default_m;
  const double delta = delta_opt > 0 ? delta_opt : prob.default_delta;
  const sidds::NoiseModel model = make_noise(kind, sigma, rho, prob.spec.dim);
  std::optional<sidds::Mask> mask;
  if (masked) mask = prob.sparsity_mask();
  const sidds::CrlbResult bound = sidds::crlb_bound(prob.field(), prob.x0, m, delta, model, mask);
  std::ofstream file;
  std::ostream& os = output_stream(out, file);
  os << "index,diag\n";
  for (sidds::Index i = 0; i < bound.coeff_bound.rows(); ++i)
    os << i << "," << sidds::format_full(bound.coeff_bound(i, i)) << "\n";
  os << "trace," << sidds::format_full(bound.coeff_bound.trace()) << "\n";
  return 0;
}

int cmd_mc(const std::string& config_path, const std::string& out) {
  std::ifstream in(config_path);
  if (!in) throw std::runtime_error("cannot open config file '" + config_path + "'");
  json j;
  in >> j;
  const sidds::ExperimentConfig config = j.get<sidds::ExperimentConfig>();
  const sidds::SweepResult result = sidds::run_sweep(config);
  std::ofstream file;
  result.write_csv(output_stream(out, file));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse dynamical system identification via constrained denoising"};
  app.require_subcommand(1);

  std::string problem = "sho", method = "lsoi", input, out, kind = "iid", config_path;
  std::string weight = "identity";
  long m = 0, points = 9;
  int degree = 2;
  double delta = 0, sigma = 0, rho = 0, alpha = 0, tau = -1, p_norm = 0;
  std::uint64_t seed = 0;
  bool masked = false;

  auto* sim = app.add_subcommand("simulate", "integrate a test problem and emit truth + noisy CSV");
  sim->add_option("--problem", problem, "test problem name")->required();
  sim->add_option("--m", m, "number of samples");
  sim->add_option("--delta", delta, "sample rate");
  sim->add_option("--sigma", sigma, "noise standard deviation");
  sim->add_option("--rho", rho, "noise correlation");
  sim->add_option("--kind", kind, "noise kind: iid|correlated");
  sim->add_option("--seed", seed, "noise seed");
  sim->add_option("--out", out, "output CSV path (default stdout)");

  std::string ident_problem;
  auto* ident = app.add_subcommand("identify", "run one method on a trajectory CSV");
  ident->add_option("--method", method, "lsoi|wlsoi|sidds|sidds_l0")->required();
  ident->add_option("--input", input, "trajectory CSV")->required();
  ident->add_option("--problem", ident_problem, "named problem (basis + defaults)");
  ident->add_option("--degree", degree, "basis total degree (when no --problem)");
  ident->add_option("--points", points, "finite-difference stencil width");
  ident->add_option("--weight", weight, "identity|inverse_sigma");
  ident->add_option("--kind", kind, "noise kind for the weight");
  ident->add_option("--sigma", sigma, "noise sigma for the weight");
  ident->add_option("--rho", rho, "noise rho for the weight");
  ident->add_flag("--masked", masked, "fix the true sparsity pattern");
  ident->add_option("--alpha", alpha, "regularization weight");
  ident->add_option("--tau", tau, "truncation threshold (unset: solver default)");
  ident->add_option("--p", p_norm, "lp exponent for sidds_l0");
  ident->add_option("--out", out, "output path (default stdout)");

  auto* crlb = app.add_subcommand("crlb", "emit the coefficient CRLB diagonal and trace");
  crlb->add_option("--problem", problem, "test problem name")->required();
  crlb->add_option("--m", m, "number of samples");
  crlb->add_option("--delta", delta, "sample rate");
  crlb->add_option("--sigma", sigma, "noise standard deviation")->required();
  crlb->add_option("--rho", rho, "noise correlation");
  crlb->add_option("--kind", kind, "noise kind");
  crlb->add_flag("--masked", masked, "sparsity-constrained bound");
  crlb->add_option("--out", out, "output CSV path (default stdout)");

  auto* mc = app.add_subcommand("mc", "run a Monte Carlo sweep from a JSON config");
  mc->add_option("--config", config_path, "experiment config JSON")->required();
  mc->add_option("--out", out, "output CSV path (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sim->parsed()) return cmd_simulate(problem, m, delta, sigma, rho, kind, seed, out);
    if (ident->parsed())
      return cmd_identify(method, input, ident_problem, degree, points, weight, kind, sigma, rho,
                          masked, alpha, tau, p_norm, out);
    if (crlb->parsed()) return cmd_crlb(problem, m, delta, sigma, rho, kind, masked, out);
    if (mc->parsed()) return cmd_mc(config_path, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
