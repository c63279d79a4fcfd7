#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sidds/crlb.hpp"
#include "sidds/integrate.hpp"
#include "sidds/lsoi.hpp"
#include "sidds/noise.hpp"
#include "sidds/solver.hpp"

namespace sidds {

inline std::string format_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Registered benchmark systems with the coefficients used throughout the
/// experiments.
struct TestProblem {
  std::string name;
  BasisSpec spec;
  Coefficients truth;
  Vector x0;
  Index default_m = 1000;
  double default_delta = 1e-2;
  double default_alpha_l0 = 0.0;

  VectorField field() const { return VectorField{spec, truth}; }
  Mask sparsity_mask() const { return truth.matrix.array() != 0.0; }
};

namespace detail {

inline Index basis_index(const BasisSpec& spec, const MultiIndex& alpha) {
  for (size_t k = 0; k < spec.multi_indices.size(); ++k)
    if (spec.multi_indices[k] == alpha) return static_cast<Index>(k);
  throw std::logic_error("basis_index: multi-index not found");
}

}  // namespace detail

inline TestProblem make_test_problem(const std::string& name) {
  TestProblem p;
  p.name = name;
  if (name == "sho") {
    // the two linear functions x1, x2 (degree-1 set without the constant)
    p.spec = subset_basis(enumerate_basis(2, 1), {1, 2});
    Matrix C = Matrix::Zero(2, 2);
    C(detail::basis_index(p.spec, {1, 0}), 1) = -1.0;  // ẋ2 = −x1
    C(detail::basis_index(p.spec, {0, 1}), 0) = 1.0;   // ẋ1 = x2
    p.truth = Coefficients(C);
    p.x0 = Vector{{1.0, 0.0}};
    p.default_m = 2000;
  } else if (name == "duffing") {
    p.spec = enumerate_basis(2, 3);
    Matrix C = Matrix::Zero(p.spec.size(), 2);
    C(detail::basis_index(p.spec, {0, 1}), 0) = 1.0;    // ẋ1 = x2
    C(detail::basis_index(p.spec, {1, 0}), 1) = -1.0;   // ẋ2 = −x1 …
    C(detail::basis_index(p.spec, {0, 1}), 1) = -0.1;   //      −0.1 x2
    C(detail::basis_index(p.spec, {3, 0}), 1) = -5.0;   //      −5 x1³
    p.truth = Coefficients(C);
    p.x0 = Vector{{-2.0, -2.0}};
    p.default_m = 1000;
    p.default_alpha_l0 = 0.01;
  } else if (name == "lorenz63") {
    p.spec = enumerate_basis(3, 2);
    Matrix C = Matrix::Zero(p.spec.size(), 3);
    C(detail::basis_index(p.spec, {1, 0, 0}), 0) = -10.0;
    C(detail::basis_index(p.spec, {0, 1, 0}), 0) = 10.0;
    C(detail::basis_index(p.spec, {1, 0, 0}), 1) = 28.0;
    C(detail::basis_index(p.spec, {0, 1, 0}), 1) = -1.0;
    C(detail::basis_index(p.spec, {1, 0, 1}), 1) = -1.0;
    C(detail::basis_index(p.spec, {1, 1, 0}), 2) = 1.0;
    C(detail::basis_index(p.spec, {0, 0, 1}), 2) = -8.0 / 3.0;
    p.truth = Coefficients(C);
    p.x0 = Vector{{-8.0, 7.0, -28.0}};
    p.default_m = 2000;
    p.default_alpha_l0 = 0.5;
  } else if (name == "vanderpol" || name == "vanderpol_lc") {
    p.spec = enumerate_basis(2, 3);
    Matrix C = Matrix::Zero(p.spec.size(), 2);
    C(detail::basis_index(p.spec, {0, 1}), 0) = 1.0;    // ẋ1 = x2
    C(detail::basis_index(p.spec, {1, 0}), 1) = -1.0;   // ẋ2 = −x1 + 2x2 − 2x1²x2
    C(detail::basis_index(p.spec, {0, 1}), 1) = 2.0;
    C(detail::basis_index(p.spec, {2, 1}), 1) = -2.0;
    p.truth = Coefficients(C);
    p.x0 = Vector{{0.0, 1.0}};
    p.default_m = 1000;
    p.default_alpha_l0 = 1.0;
    if (name == "vanderpol_lc") {
      // start on the limit cycle: run the transient off deterministically
      const Trajectory settle = integrate_trajectory(p.field(), p.x0, 41, 1.0);
      p.x0 = settle.states.row(40).transpose();
    }
  } else {
    throw std::invalid_argument("make_test_problem: unknown problem '" + name + "'");
  }
  return p;
}

/// Process-wide memo for ground-truth trajectories (trials share them).
inline const Trajectory& cached_truth(const TestProblem& p, Index m, double delta) {
  static std::map<std::string, Trajectory> cache;
  static std::mutex mtx;
  std::ostringstream key;
  key << p.name << ":" << m << ":" << format_full(delta);
  std::lock_guard<std::mutex> lock(mtx);
  auto it = cache.find(key.str());
  if (it == cache.end())
    it = cache.emplace(key.str(), integrate_trajectory(p.field(), p.x0, m, delta)).first;
  return it->second;
}

struct SweepSpec {
  std::string variable;  // sigma | m | rho | delta | points | oversample
  std::vector<double> values;
};

struct ExperimentConfig {
  std::string problem = "sho";
  std::string method = "sidds";  // lsoi | wlsoi | sidds | sidds_l0
  NoiseModel::Kind noise_kind = NoiseModel::Kind::iid;
  double sigma = 1.0;
  double rho = 0.0;
  Index trials = 100;
  std::uint64_t seed = 0;
  std::optional<Index> m;
  std::optional<double> delta;
  Index points = 9;
  Index oversample = 1;
  bool masked = false;                  // fix the true sparsity pattern
  std::string weight = "identity";     // identity | inverse_sigma
  std::optional<double> alpha;
  std::optional<double> p_norm;
  std::optional<double> tau;
  SiddsOptions solver;
  std::optional<SweepSpec> sweep;
  bool with_crlb = false;

  void validate() const {
    if (trials < 1) throw std::invalid_argument("ExperimentConfig: trials must be >= 1");
    if (sweep) {
      for (size_t i = 1; i < sweep->values.size(); ++i)
        if (!(sweep->values[i] > sweep->values[i - 1]))
          throw std::invalid_argument("ExperimentConfig: sweep values must be strictly increasing");
    }
  }
};

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  j.at("problem").get_to(c.problem);
  j.at("method").get_to(c.method);
  if (j.contains("noise")) {
    const auto& nj = j.at("noise");
    const std::string kind = nj.value("kind", "iid");
    if (kind == "iid")
      c.noise_kind = NoiseModel::Kind::iid;
    else if (kind == "correlated")
      c.noise_kind = NoiseModel::Kind::block_correlated;
    else
      throw std::invalid_argument("noise.kind must be 'iid' or 'correlated'");
    c.sigma = nj.value("sigma", 1.0);
    c.rho = nj.value("rho", 0.0);
  }
  c.trials = j.value("trials", 100);
  c.seed = j.value("seed", 0ULL);
  if (j.contains("m")) c.m = j.at("m").get<Index>();
  if (j.contains("delta")) c.delta = j.at("delta").get<double>();
  c.points = j.value("points", 9);
  c.oversample = j.value("oversample", 1);
  c.masked = j.value("masked", false);
  c.weight = j.value("weight", "identity");
  c.with_crlb = j.value("crlb", false);
  if (j.contains("solver")) {
    const auto& sj = j.at("solver");
    if (sj.contains("alpha")) c.alpha = sj.at("alpha").get<double>();
    if (sj.contains("p")) c.p_norm = sj.at("p").get<double>();
    if (sj.contains("tau")) c.tau = sj.at("tau").get<double>();
    c.solver.minres_tol = sj.value("minres_tol", c.solver.minres_tol);
    c.solver.minres_max_iter = sj.value("minres_max_iter", c.solver.minres_max_iter);
    c.solver.max_outer = sj.value("max_outer", c.solver.max_outer);
    c.solver.mu = sj.value("mu", c.solver.mu);
    c.solver.lambda_smooth = sj.value("lambda", c.solver.lambda_smooth);
  }
  if (j.contains("sweep")) {
    SweepSpec s;
    j.at("sweep").at("variable").get_to(s.variable);
    j.at("sweep").at("values").get_to(s.values);
    c.sweep = s;
  }
  c.validate();
}

struct TrialRecord {
  double c_err = 0.0;
  double x_err = 0.0;
  bool pattern_correct = false;
  bool failed = false;
  SolveReport report;
};

namespace detail {

inline ExperimentConfig apply_sweep_value(ExperimentConfig base, const std::string& variable,
                                          double value) {
  if (variable == "sigma")
    base.sigma = value;
  else if (variable == "m")
    base.m = static_cast<Index>(value);
  else if (variable == "rho")
    base.rho = value;
  else if (variable == "delta")
    base.delta = value;
  else if (variable == "points")
    base.points = static_cast<Index>(value);
  else if (variable == "oversample")
    base.oversample = static_cast<Index>(value);
  else
    throw std::invalid_argument("unknown sweep variable '" + variable + "'");
  base.sweep.reset();
  return base;
}

}  // namespace detail

inline TrialRecord run_trial(const ExperimentConfig& config, Index trial_index) {
  TrialRecord rec;
  try {
    const TestProblem prob = make_test_problem(config.problem);
    const Index m = config.m.value_or(prob.default_m);
    const double delta = config.delta.value_or(prob.default_delta);
    const Index d = prob.spec.dim;
    const NoiseModel model = config.noise_kind == NoiseModel::Kind::iid
                                 ? NoiseModel::make_iid(config.sigma, d)
                                 : NoiseModel::make_correlated(config.sigma, config.rho, d);

    const Trajectory& truth = cached_truth(prob, m, delta);
    const Vector xvec = vectorize(truth.states);
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(trial_index);
    const Vector y = xvec + sample_noise(model, m, d, seed);
    const Matrix Y = devectorize(y, m, d);

    std::optional<Mask> mask;
    if (config.masked) mask = prob.sparsity_mask();

    Coefficients result;
    if (config.method == "lsoi") {
      const FinDiffMatrix D = make_findiff(m, delta, config.points);
      result = lsoi_solve(Y, D, prob.spec, mask).coeffs;
      rec.x_err = (y - xvec).norm();
    } else if (config.method == "wlsoi") {
      const FinDiffMatrix D = make_findiff(m, delta, config.points);
      const Matrix Gamma = whitening_gamma(prob.spec, truth.states, prob.truth, D, model);
      result = weighted_lsoi_solve(Y, D, prob.spec, Gamma, mask).coeffs;
      rec.x_err = (y - xvec).norm();
    } else if (config.method == "sidds" || config.method == "sidds_l0") {
      SiddsProblem sp;
      WeightMatrix M = config.weight == "inverse_sigma" ? inverse_weight(model, m)
                                                        : WeightMatrix::identity(m, d);
      sp.trajectories.push_back(TrajectoryData{y, std::move(M)});
      sp.delta = delta;
      sp.points = config.points;
      sp.spec = prob.spec;
      sp.oversample_factor = config.oversample;
      sp.mask = mask;
      if (config.method == "sidds") {
        sp.reg.p = 0.0;
        sp.reg.alpha = config.alpha.value_or(0.0);
        sp.reg.tau = config.tau.value_or(0.0);
      } else {
        sp.reg.p = config.p_norm.value_or(0.0);
        sp.reg.alpha = config.alpha.value_or(prob.default_alpha_l0);
        sp.reg.tau = config.tau;  // default 0.01·max|c| inside the solver
      }
      SiddsSolution sol = sidds_solve(sp, config.solver);
      result = sol.coeffs;
      rec.x_err = (vectorize(sol.measurement_states[0]) - xvec).norm();
      rec.report = std::move(sol.report);
      rec.report.seed = seed;
    } else {
      throw std::invalid_argument("unknown method '" + config.method + "'");
    }

    rec.c_err = (result.matrix - prob.truth.matrix).norm();
    rec.pattern_correct =
        ((result.matrix.array() != 0.0) == (prob.truth.matrix.array() != 0.0)).all();
  } catch (const std::exception&) {
    rec.failed = true;
  }
  return rec;
}

inline Index worker_count() {
  if (const char* env = std::getenv("SIDDS_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<Index>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<Index>(hw) : 1;
}

/// Runs `trials` seeded trials concurrently; results land in trial order.
inline std::vector<TrialRecord> run_trials(const ExperimentConfig& config, Index trials) {
  std::vector<TrialRecord> records(static_cast<size_t>(trials));
  const Index workers = std::min<Index>(worker_count(), trials);
  if (workers <= 1) {
    for (Index i = 0; i < trials; ++i) records[static_cast<size_t>(i)] = run_trial(config, i);
    return records;
  }
  std::atomic<Index> next{0};
  std::vector<std::thread> pool;
  for (Index t = 0; t < workers; ++t) {
    pool.emplace_back([&]() {
      while (true) {
        const Index i = next.fetch_add(1);
        if (i >= trials) return;
        records[static_cast<size_t>(i)] = run_trial(config, i);
      }
    });
  }
  for (auto& th : pool) th.join();
  return records;
}

/// Percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: no values");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const size_t lo = static_cast<size_t>(h);
  if (lo + 1 >= values.size()) return values.back();
  const double frac = h - static_cast<double>(lo);
  return values[lo] + frac * (values[lo + 1] - values[lo]);
}

struct SweepRow {
  double sweep_value = 0.0;
  double f25 = 0.0, f50 = 0.0, f75 = 0.0;
  Index n_trials = 0;
  Index failed = 0;
  std::optional<double> crlb_trace;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  bool with_crlb = false;

  void write_csv(std::ostream& os) const {
    os << "sweep_value,F25,F50,F75,n_trials,failed";
    if (with_crlb) os << ",crlb_trace";
    os << "\n";
    for (const auto& r : rows) {
      os << format_full(r.sweep_value) << "," << format_full(r.f25) << "," << format_full(r.f50)
         << "," << format_full(r.f75) << "," << r.n_trials << "," << r.failed;
      if (with_crlb) os << "," << format_full(r.crlb_trace.value_or(0.0));
      os << "\n";
    }
  }
};

inline SweepResult run_sweep(const ExperimentConfig& config) {
  config.validate();
  std::vector<double> values;
  std::string variable = "sigma";
  if (config.sweep) {
    values = config.sweep->values;
    variable = config.sweep->variable;
  } else {
    values = {config.sigma};
  }

  SweepResult out;
  out.with_crlb = config.with_crlb;
  for (double value : values) {
    const ExperimentConfig cfg = detail::apply_sweep_value(config, variable, value);
    const std::vector<TrialRecord> records = run_trials(cfg, cfg.trials);
    SweepRow row;
    row.sweep_value = value;
    std::vector<double> errs;
    for (const auto& r : records) {
      if (r.failed)
        ++row.failed;
      else
        errs.push_back(r.c_err);
    }
    row.n_trials = static_cast<Index>(errs.size());
    if (!errs.empty()) {
      row.f25 = percentile(errs, 0.25);
      row.f50 = percentile(errs, 0.50);
      row.f75 = percentile(errs, 0.75);
    }
    if (config.with_crlb) {
      const TestProblem prob = make_test_problem(cfg.problem);
      const Index m = cfg.m.value_or(prob.default_m);
      const double delta = cfg.delta.value_or(prob.default_delta);
      const NoiseModel model = cfg.noise_kind == NoiseModel::Kind::iid
                                   ? NoiseModel::make_iid(cfg.sigma, prob.spec.dim)
                                   : NoiseModel::make_correlated(cfg.sigma, cfg.rho, prob.spec.dim);
      std::optional<Mask> mask;
      if (cfg.masked) mask = prob.sparsity_mask();
      const CrlbResult bound = crlb_bound(prob.field(), prob.x0, m, delta, model, mask);
      row.crlb_trace = bound.coeff_bound.trace();
    }
    out.rows.push_back(row);
  }
  return out;
}

/// Trajectory CSV: header t,x1,…,xd (plus y columns when noisy data given).
inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj,
                                 const Matrix* noisy = nullptr) {
  const Index d = traj.dim();
  os << "t";
  for (Index i = 1; i <= d; ++i) os << ",x" << i;
  if (noisy)
    for (Index i = 1; i <= d; ++i) os << ",y" << i;
  os << "\n";
  for (Index j = 0; j < traj.samples(); ++j) {
    os << format_full(traj.delta * static_cast<double>(j));
    for (Index i = 0; i < d; ++i) os << "," << format_full(traj.states(j, i));
    if (noisy)
      for (Index i = 0; i < d; ++i) os << "," << format_full((*noisy)(j, i));
    os << "\n";
  }
}

struct CsvData {
  double delta = 0.0;
  Matrix states;  // taken from the y columns when present, else the x columns
};

inline CsvData read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_trajectory_csv: empty file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) header.push_back(tok);
  }
  std::vector<Index> xcols, ycols;
  for (size_t i = 0; i < header.size(); ++i) {
    if (header[i].size() >= 2 && header[i][0] == 'x') xcols.push_back(static_cast<Index>(i));
    if (header[i].size() >= 2 && header[i][0] == 'y') ycols.push_back(static_cast<Index>(i));
  }
  const std::vector<Index>& cols = ycols.empty() ? xcols : ycols;
  if (cols.empty()) throw std::runtime_error("read_trajectory_csv: no state columns");

  std::vector<std::vector<double>> rows;
  std::vector<double> times;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<double> vals;
    while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
    times.push_back(vals.at(0));
    std::vector<double> state;
    for (Index c : cols) state.push_back(vals.at(static_cast<size_t>(c)));
    rows.push_back(std::move(state));
  }
  if (rows.size() < 2) throw std::runtime_error("read_trajectory_csv: need at least two samples");

  CsvData out;
  out.delta = times[1] - times[0];
  out.states.resize(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (size_t j = 0; j < rows.size(); ++j)
    for (size_t i = 0; i < rows[j].size(); ++i)
      out.states(static_cast<Index>(j), static_cast<Index>(i)) = rows[j][i];
  return out;
}

}  // namespace sidds
