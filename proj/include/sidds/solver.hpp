#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "sidds/basis.hpp"
#include "sidds/findiff.hpp"
#include "sidds/linalg.hpp"
#include "sidds/lsoi.hpp"
#include "sidds/minres.hpp"
#include "sidds/noise.hpp"

namespace sidds {

struct RegularizationSpec {
  double p = 0.0;             // ℓp exponent in [0, 2]
  double alpha = 0.0;         // regularization weight
  std::optional<double> tau;  // truncation threshold; default 0.01·max|c_i|
};

struct TrajectoryData {
  Vector y;        // dm measurements, row-major over samples
  WeightMatrix M;  // mismatch weight, m blocks of d×d
};

struct SiddsProblem {
  std::vector<TrajectoryData> trajectories;
  double delta = 1e-2;  // measurement sample rate
  Index points = 9;     // finite-difference stencil width q
  BasisSpec spec;
  RegularizationSpec reg;
  Index oversample_factor = 1;
  std::optional<Mask> mask;  // fixed sparsity pattern (true = free)
};

struct SiddsOptions {
  double lambda_smooth = 1e-2;
  double zeta = 1e-4;
  double mu = 100.0;
  double beta = 1e-6;
  double minres_tol = 1e-6;
  Index minres_max_iter = 2000;
  double eps_init = 1.0;
  double eps_stop = 1e-8;
  Index max_outer = 500;
  Index max_polish = 100;
  double grad_tol = 1e-6;
  double con_tol = 1e-8;
  bool precondition = true;
};

struct IterationRecord {
  Index iter = 0;
  double objective = 0.0;
  double con_norm = 0.0;
  double lagrangian_grad_norm = 0.0;
  double epsilon = 0.0;
  Index minres_iterations = 0;
  double step_length = 0.0;
  bool accepted = false;
  bool polish = false;
};

enum class SolveStatus { converged, max_iterations, stalled };

struct SolveReport {
  std::vector<IterationRecord> iterations;
  SolveStatus status = SolveStatus::converged;
  std::uint64_t seed = 0;
  double seconds = 0.0;

  void write_csv(std::ostream& os) const {
    os << "it,objective,con_norm,l_grad_norm,eps,minres_its\n";
    for (const auto& r : iterations) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%ld\n",
                    static_cast<long>(r.iter), r.objective, r.con_norm, r.lagrangian_grad_norm,
                    r.epsilon, static_cast<long>(r.minres_iterations));
      os << buf;
    }
  }
};

struct SiddsSolution {
  Coefficients coeffs;
  std::vector<Matrix> states;              // denoised states on the solver grid
  std::vector<Matrix> measurement_states;  // restricted to measurement nodes
  SolveReport report;
};

/// Tikhonov smoothing: solves (I + λ²D²ᵀD²)z = y per coordinate.
inline Vector smooth_init(const Vector& y, double lambda, const BandedMatrix& D2, Index d) {
  if (lambda < 0) throw std::invalid_argument("smooth_init: lambda must be >= 0");
  const Index m = D2.rows();
  if (y.size() != m * d) throw std::invalid_argument("smooth_init: size mismatch");
  if (lambda == 0.0) return y;
  SparseMatrix D2s = D2.to_sparse();
  SparseMatrix I(m, m);
  I.setIdentity();
  SparseMatrix N = I + lambda * lambda * SparseMatrix(D2s.transpose() * D2s);
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(N);
  if (ldlt.info() != Eigen::Success) throw std::runtime_error("smooth_init: factorization failed");
  const Matrix Y = devectorize(y, m, d);
  Matrix Z(m, d);
  for (Index s = 0; s < d; ++s) Z.col(s) = ldlt.solve(Y.col(s));
  return vectorize(Z);
}

/// Per-trajectory constraint workspace: h⃗ = D⃗z⃗ − Φ⃗(z⃗)c⃗ and the Jacobian
/// blocks K⃗ = −Φ⃗(z⃗) (applied through Phi) and L⃗ = D⃗ − ∇Φ⃗(z⃗)⊗₂c⃗.
struct ConstraintWorkspace {
  Index m = 0;
  Index d = 0;
  FinDiffMatrix fd;    // solver-grid differentiation matrix
  BandedMatrix Dvec;   // D ⊗ I_d
  SparseMatrix Msp;    // weight matrix, sparse form

  Matrix Z;            // m×d current state iterate
  Matrix Phi;          // m×n
  Matrix PtP;          // ΦᵀΦ
  Vector h;            // dm
  BandedMatrix L;      // dm×dm
  SparseMatrix Lsp;
  SparseMatrix LtL;
};

/// Refreshes h⃗, K⃗ and L⃗ at (c⃗, z⃗).
inline void eval_constraint(ConstraintWorkspace& ws, const BasisSpec& spec,
                            const Coefficients& C, const Vector& z) {
  const Index d = ws.d;
  const Index m = ws.m;
  if (z.size() != m * d) throw std::invalid_argument("eval_constraint: z size mismatch");
  if (!z.allFinite()) throw std::runtime_error("eval_constraint: non-finite state entries");
  ws.Z = devectorize(z, m, d);
  ws.Phi = eval_basis(spec, ws.Z);
  ws.PtP = ws.Phi.transpose() * ws.Phi;
  ws.h = ws.Dvec.apply(z) - vectorize(ws.Phi * C.matrix);

  ws.L = ws.Dvec;
  const BlockDiagMatrix F = grad_basis_contract(spec, z, C.vectorized());
  for (Index j = 0; j < m; ++j) {
    const Matrix& B = F.block(j);
    for (Index r = 0; r < d; ++r)
      for (Index c = 0; c < d; ++c) ws.L.add(j * d + r, j * d + c, -B(r, c));
  }

  // Sparse form with a fixed structural pattern: full D-band entries plus all
  // diagonal d×d blocks.
  std::vector<Triplet> trips;
  const Index bw = ws.Dvec.lower();
  trips.reserve(static_cast<size_t>(m * d * (2 * bw + 1)));
  for (Index i = 0; i < m * d; ++i) {
    const Index j0 = std::max<Index>(0, i - ws.L.lower());
    const Index j1 = std::min<Index>(m * d - 1, i + ws.L.upper());
    for (Index j = j0; j <= j1; ++j) {
      const double v = ws.L(i, j);
      const bool in_block = (i / d) == (j / d);
      if (v != 0.0 || in_block) trips.emplace_back(i, j, v);
    }
  }
  ws.Lsp.resize(m * d, m * d);
  ws.Lsp.setFromTriplets(trips.begin(), trips.end());
  ws.LtL = SparseMatrix(ws.Lsp.transpose() * ws.Lsp);
}

/// K⃗ p⃗_c = −Φ⃗(z⃗) p⃗_c through the dense Φ.
inline Vector apply_K(const ConstraintWorkspace& ws,
                      const std::vector<std::pair<Index, Index>>& entries, Index n,
                      const Vector& pc) {
  Matrix P = Matrix::Zero(n, ws.d);
  for (size_t i = 0; i < entries.size(); ++i) P(entries[i].first, entries[i].second) = pc(static_cast<Index>(i));
  return -vectorize(ws.Phi * P);
}

inline Vector apply_Kt(const ConstraintWorkspace& ws,
                       const std::vector<std::pair<Index, Index>>& entries, const Vector& v) {
  const Matrix Vm = devectorize(v, ws.m, ws.d);
  const Matrix G = ws.Phi.transpose() * Vm;  // n×d
  Vector out(static_cast<Index>(entries.size()));
  for (size_t i = 0; i < entries.size(); ++i) out(static_cast<Index>(i)) = -G(entries[i].first, entries[i].second);
  return out;
}

struct RelaxationStep {
  Vector p_c;
  std::vector<Vector> p_z;
  std::vector<Vector> Ap;  // K p_c + L p_z per trajectory
};

struct KktResult {
  Vector dc;
  std::vector<Vector> dz;
  std::vector<Vector> w;
  Index iterations = 0;
  bool converged = false;
};

struct StepOutcome {
  bool accepted = false;
  bool stalled = false;
  double step_length = 0.0;
  Index minres_iterations = 0;
};

/// SQP engine for the SIDDS problem. Holds the current iterate
/// (coefficients, denoised states, multipliers) and the per-trajectory
/// constraint workspaces.
class SiddsSolver {
 public:
  SiddsSolver(SiddsProblem problem, SiddsOptions options = {})
      : problem_(std::move(problem)), opts_(options) {
    if (problem_.trajectories.empty()) throw std::invalid_argument("SiddsSolver: no trajectories");
    d_ = problem_.spec.dim;
    const Index r = problem_.oversample_factor;
    if (r < 1) throw std::invalid_argument("SiddsSolver: oversample factor must be >= 1");
    solver_delta_ = problem_.delta / static_cast<double>(r);

    for (const auto& t : problem_.trajectories) {
      if (t.M.block_dim() != d_) throw std::invalid_argument("SiddsSolver: weight dimension mismatch");
      if (t.y.size() != t.M.rows()) throw std::invalid_argument("SiddsSolver: y/M size mismatch");
      if (!t.M.is_psd()) throw std::invalid_argument("SiddsSolver: weight blocks must be PSD");
      TrajectoryData solver_data;
      if (r > 1) {
        const Oversampled up = oversample(t.y, t.M, r);
        solver_data.y = up.y;
        solver_data.M = up.M;
      } else {
        solver_data = t;
      }
      data_.push_back(std::move(solver_data));
    }

    for (auto& t : data_) {
      auto ws = std::make_unique<ConstraintWorkspace>();
      ws->d = d_;
      ws->m = t.y.size() / d_;
      ws->fd = make_findiff(ws->m, solver_delta_, problem_.points);
      ws->Dvec = kron_lift(ws->fd, d_);
      ws->Msp = t.M.to_sparse();
      workspaces_.push_back(std::move(ws));
      relax_ldlt_.push_back(std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>());
      prec_ldlt_.push_back(std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>());
    }

    coeffs_ = Coefficients(Matrix::Zero(problem_.spec.size(), d_), problem_.mask);
    entries_ = coeffs_.free_entries();
    alpha_eff_ = problem_.reg.alpha;
    irls_weights_ = Vector::Ones(static_cast<Index>(entries_.size()));
    for (const auto& t : data_) {
      z_.push_back(t.y);
      w_.push_back(Vector::Zero(t.y.size()));
    }
  }

  Index trajectory_count() const { return static_cast<Index>(data_.size()); }
  const ConstraintWorkspace& workspace(Index i) const { return *workspaces_[static_cast<size_t>(i)]; }
  const Coefficients& coefficients() const { return coeffs_; }
  const std::vector<Vector>& states() const { return z_; }
  const std::vector<Vector>& multipliers() const { return w_; }
  const Vector& irls_weights() const { return irls_weights_; }
  double epsilon() const { return eps_; }
  double solver_delta() const { return solver_delta_; }

  /// Smoothing + LSOI initialization (Tikhonov on the measurement grid, then
  /// linear interpolation onto the oversampled grid when r > 1).
  void initialize() {
    const Index r = problem_.oversample_factor;
    for (size_t i = 0; i < data_.size(); ++i) {
      const Vector& y_meas = problem_.trajectories[i].y;
      const Index m_meas = y_meas.size() / d_;
      const BandedMatrix D2 = make_second_diff(m_meas, problem_.delta);
      const Vector z_meas = smooth_init(y_meas, opts_.lambda_smooth, D2, d_);
      if (r == 1) {
        z_[i] = z_meas;
      } else {
        const Matrix Zm = devectorize(z_meas, m_meas, d_);
        const Index m_up = workspaces_[i]->m;
        Matrix Zu(m_up, d_);
        for (Index t = 0; t < m_up; ++t) {
          const Index j = std::min<Index>(t / r, m_meas - 2);
          const double frac = static_cast<double>(t - j * r) / static_cast<double>(r);
          Zu.row(t) = (1.0 - frac) * Zm.row(j) + frac * Zm.row(j + 1);
        }
        z_[i] = vectorize(Zu);
      }
    }
    // LSOI for c⁰ on the measurement grid of the first trajectory family.
    {
      std::vector<Matrix> Zs;
      for (size_t i = 0; i < data_.size(); ++i) {
        const Vector& y_meas = problem_.trajectories[i].y;
        const Index m_meas = y_meas.size() / d_;
        const BandedMatrix D2 = make_second_diff(m_meas, problem_.delta);
        Zs.push_back(devectorize(smooth_init(y_meas, opts_.lambda_smooth, D2, d_), m_meas, d_));
      }
      coeffs_ = lsoi_multi(Zs);
    }
    for (auto& w : w_) w.setZero();
    eps_ = opts_.eps_init;
    refresh();
  }

  void set_state(const Coefficients& C, const std::vector<Vector>& z, const std::vector<Vector>& w) {
    coeffs_ = C;
    entries_ = coeffs_.free_entries();
    irls_weights_ = Vector::Ones(static_cast<Index>(entries_.size()));
    z_ = z;
    w_ = w;
    refresh();
  }

  void refresh() {
    for (size_t i = 0; i < workspaces_.size(); ++i) {
      eval_constraint(*workspaces_[i], problem_.spec, coeffs_, z_[i]);
      SparseMatrix R = workspaces_[i]->LtL;
      for (Index k = 0; k < R.rows(); ++k) R.coeffRef(k, k) += opts_.beta;
      relax_ldlt_[i]->compute(R);
      if (relax_ldlt_[i]->info() != Eigen::Success)
        throw std::runtime_error("SiddsSolver: relaxation factorization failed");
    }
    prec_current_ = false;
  }

  void update_irls_weights() {
    const Vector c = coeffs_.free_values();
    irls_weights_.resize(c.size());
    for (Index i = 0; i < c.size(); ++i)
      irls_weights_(i) = std::pow(c(i) * c(i) + eps_, 0.5 * problem_.reg.p - 1.0);
  }

  double objective() const {
    double obj = 0.0;
    for (size_t i = 0; i < data_.size(); ++i) {
      const Vector r = data_[i].y - z_[i];
      obj += 0.5 * data_[i].M.quadratic(r);
    }
    if (alpha_eff_ > 0) {
      const Vector c = coeffs_.free_values();
      obj += 0.5 * alpha_eff_ * c.dot(irls_weights_.cwiseProduct(c));
    }
    return obj;
  }

  double constraint_norm() const {
    double s = 0.0;
    for (const auto& ws : workspaces_) s += ws->h.squaredNorm();
    return std::sqrt(s);
  }

  Vector gradient_c() const {
    if (alpha_eff_ == 0.0) return Vector::Zero(static_cast<Index>(entries_.size()));
    return alpha_eff_ * irls_weights_.cwiseProduct(coeffs_.free_values());
  }

  Vector gradient_z(Index i) const { return data_[static_cast<size_t>(i)].M.apply(z_[static_cast<size_t>(i)] - data_[static_cast<size_t>(i)].y); }

  /// ∇L = g + A⃗ᵀw⃗ in the (c⃗, z⃗) layout.
  Vector lagrangian_gradient() const {
    const Index nc = static_cast<Index>(entries_.size());
    Index total = nc;
    for (const auto& ws : workspaces_) total += ws->m * d_;
    Vector gl(total);
    Vector glc = gradient_c();
    for (size_t i = 0; i < workspaces_.size(); ++i) glc += apply_Kt(*workspaces_[i], entries_, w_[i]);
    gl.head(nc) = glc;
    Index off = nc;
    for (size_t i = 0; i < workspaces_.size(); ++i) {
      const Index dm = workspaces_[i]->m * d_;
      gl.segment(off, dm) = gradient_z(static_cast<Index>(i)) + workspaces_[i]->L.apply_transpose(w_[i]);
      off += dm;
    }
    return gl;
  }

  bool converged() const {
    const Vector gl = lagrangian_gradient();
    double ginf = gradient_c().cwiseAbs().maxCoeff();
    for (size_t i = 0; i < data_.size(); ++i)
      ginf = std::max(ginf, gradient_z(static_cast<Index>(i)).cwiseAbs().maxCoeff());
    if (gl.cwiseAbs().maxCoeff() > opts_.grad_tol * (1.0 + ginf)) return false;
    for (const auto& ws : workspaces_) {
      const double dz_inf = ws->Dvec.apply(vectorize(ws->Z)).cwiseAbs().maxCoeff();
      if (ws->h.cwiseAbs().maxCoeff() > opts_.con_tol * (1.0 + dz_inf)) return false;
    }
    return true;
  }

  /// Relaxation direction: p⃗_c by the dense columnwise least squares
  /// min ‖Φ(Z)P_C − [DZ − Φ(Z)C]‖_F, then
  /// p⃗_z = −[L⃗ᵀL⃗ + βI]⁻¹L⃗ᵀ[h⃗ + K⃗p⃗_c] per trajectory.
  RelaxationStep relaxation_step() const {
    const Index n = problem_.spec.size();
    const Index nc = static_cast<Index>(entries_.size());
    RelaxationStep out;
    out.p_c = Vector::Zero(nc);

    Index total_rows = 0;
    for (const auto& ws : workspaces_) total_rows += ws->m;
    for (Index s = 0; s < d_; ++s) {
      std::vector<Index> cols;        // basis indices free in coordinate s
      std::vector<Index> c_index;     // position in the free-entry vector
      for (size_t e = 0; e < entries_.size(); ++e)
        if (entries_[e].second == s) {
          cols.push_back(entries_[e].first);
          c_index.push_back(static_cast<Index>(e));
        }
      if (cols.empty()) continue;
      Matrix A(total_rows, static_cast<Index>(cols.size()));
      Vector b(total_rows);
      Index row = 0;
      for (const auto& ws : workspaces_) {
        for (size_t k = 0; k < cols.size(); ++k)
          A.col(static_cast<Index>(k)).segment(row, ws->m) = ws->Phi.col(cols[k]);
        const Matrix H = devectorize(ws->h, ws->m, d_);
        b.segment(row, ws->m) = H.col(s);
        row += ws->m;
      }
      Eigen::ColPivHouseholderQR<Matrix> qr(A);
      const Vector ps = qr.solve(b);
      for (size_t k = 0; k < cols.size(); ++k) out.p_c(c_index[k]) = ps(static_cast<Index>(k));
    }

    for (size_t i = 0; i < workspaces_.size(); ++i) {
      const auto& ws = *workspaces_[i];
      const Vector Kpc = apply_K(ws, entries_, n, out.p_c);
      const Vector pz = -relax_ldlt_[i]->solve(ws.L.apply_transpose(ws.h + Kpc));
      out.p_z.push_back(pz);
      out.Ap.push_back(Kpc + ws.L.apply(pz));
    }

    // ‖h + A⃗p⃗‖ ≤ ‖h⃗‖ holds for the exact regularized minimizer; guard the
    // computed step against roundoff by shrinking along p when needed.
    double h_sq = 0.0, hAp = 0.0, Ap_sq = 0.0;
    for (size_t i = 0; i < workspaces_.size(); ++i) {
      h_sq += workspaces_[i]->h.squaredNorm();
      hAp += workspaces_[i]->h.dot(out.Ap[i]);
      Ap_sq += out.Ap[i].squaredNorm();
    }
    if (h_sq + 2.0 * hAp + Ap_sq > h_sq && Ap_sq > 0.0) {
      const double t = std::min(1.0, std::max(0.0, -hAp / Ap_sq));
      out.p_c *= t;
      for (size_t i = 0; i < workspaces_.size(); ++i) {
        out.p_z[i] *= t;
        out.Ap[i] *= t;
      }
    }
    return out;
  }

  /// γ^(ℓ) = 10⁻⁴(‖g + A⃗ᵀw⃗‖₁ + ‖h⃗‖₁) at the current iterate.
  double gamma() const {
    double s = lagrangian_gradient().lpNorm<1>();
    for (const auto& ws : workspaces_) s += ws->h.lpNorm<1>();
    return 1e-4 * s;
  }

  /// Solves the stabilized KKT system
  /// [[B⃗+ζI, A⃗ᵀ],[A⃗, −γI]]·[d⃗; w⃗] = [−g⃗; A⃗p⃗] by preconditioned MINRES.
  KktResult kkt_solve(const RelaxationStep& relax, double gamma_value, bool precondition,
                      double tol, Index max_iter,
                      const std::function<void(Index, const Vector&)>& on_iterate = nullptr) {
    const Index nc = static_cast<Index>(entries_.size());
    const Index N = trajectory_count();
    std::vector<Index> dms(static_cast<size_t>(N));
    Index S = 0;
    for (Index i = 0; i < N; ++i) {
      dms[static_cast<size_t>(i)] = workspaces_[static_cast<size_t>(i)]->m * d_;
      S += dms[static_cast<size_t>(i)];
    }
    const Index nvar = nc + 2 * S;

    std::vector<Index> oz(static_cast<size_t>(N)), ow(static_cast<size_t>(N));
    {
      Index acc = nc;
      for (Index i = 0; i < N; ++i) {
        oz[static_cast<size_t>(i)] = acc;
        acc += dms[static_cast<size_t>(i)];
      }
      for (Index i = 0; i < N; ++i) {
        ow[static_cast<size_t>(i)] = acc;
        acc += dms[static_cast<size_t>(i)];
      }
    }

    Vector rhs(nvar);
    rhs.head(nc) = -gradient_c();
    for (Index i = 0; i < N; ++i) {
      rhs.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) = -gradient_z(i);
      rhs.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) = relax.Ap[static_cast<size_t>(i)];
    }

    auto apply_S = [&](const Vector& x) -> Vector {
      Vector out(nvar);
      const Vector dc = x.head(nc);
      Vector out_c = opts_.zeta * dc;
      if (alpha_eff_ > 0) out_c += alpha_eff_ * irls_weights_.cwiseProduct(dc);
      for (Index i = 0; i < N; ++i) {
        const auto& ws = *workspaces_[static_cast<size_t>(i)];
        const Vector wi = x.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]);
        const Vector dzi = x.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]);
        out_c += apply_Kt(ws, entries_, wi);
        out.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) =
            data_[static_cast<size_t>(i)].M.apply(dzi) + opts_.zeta * dzi + ws.L.apply_transpose(wi);
        out.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) =
            apply_K(ws, entries_, problem_.spec.size(), dc) + ws.L.apply(dzi) - gamma_value * wi;
      }
      out.head(nc) = out_c;
      return out;
    };

    LinearOp apply_P;
    if (precondition) {
      prepare_preconditioner();
      apply_P = [&](const Vector& x) -> Vector {
        Vector out(nvar);
        out.head(nc) = prec_c_.solve(x.head(nc));
        for (Index i = 0; i < N; ++i) {
          out.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) =
              prec_ldlt_[static_cast<size_t>(i)]->solve(
                  x.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]));
          out.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]) =
              opts_.mu * x.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]);
        }
        return out;
      };
    } else {
      apply_P = [](const Vector& x) { return x; };
    }

    Vector sol;
    const MinresResult mr = minres(apply_S, apply_P, rhs, sol, tol, max_iter, on_iterate);

    KktResult out;
    out.dc = sol.head(nc);
    for (Index i = 0; i < N; ++i) {
      out.dz.push_back(sol.segment(oz[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]));
      out.w.push_back(sol.segment(ow[static_cast<size_t>(i)], dms[static_cast<size_t>(i)]));
    }
    out.iterations = mr.iterations;
    out.converged = mr.converged;
    return out;
  }

  /// One Liu-Yuan-style SQP step: relaxation direction, stabilized KKT solve,
  /// then a bi-criteria acceptance rule with backtracking on
  /// objective + ν‖h⃗‖₂. The KKT tolerance tightens with the optimality
  /// measure so late steps are not limited by the inexact solve.
  StepOutcome sqp_step() {
    const RelaxationStep relax = relaxation_step();
    const double gamma_value = gamma();

    double rhs_sq = gradient_c().squaredNorm();
    for (size_t i = 0; i < data_.size(); ++i) {
      rhs_sq += gradient_z(static_cast<Index>(i)).squaredNorm();
      rhs_sq += relax.Ap[i].squaredNorm();
    }
    const double rhs_norm = std::sqrt(rhs_sq);
    double h_inf = 0.0;
    for (const auto& ws : workspaces_) h_inf = std::max(h_inf, ws->h.cwiseAbs().maxCoeff());
    const double opt_abs = lagrangian_gradient().cwiseAbs().maxCoeff() + h_inf;
    const double tol_eff =
        std::max(std::min(opts_.minres_tol, 0.05 * opt_abs / (1.0 + rhs_norm)), 1e-13);

    KktResult kkt = kkt_solve(relax, gamma_value, opts_.precondition, tol_eff,
                              opts_.minres_max_iter);

    const double obj0 = objective();
    const double con0 = constraint_norm();

    auto trial_values = [&](double t) {
      Coefficients Ct = coeffs_;
      Vector cf = coeffs_.free_values() + t * kkt.dc;
      Ct.set_free_values(cf);
      double obj = 0.0, con2 = 0.0;
      for (size_t i = 0; i < data_.size(); ++i) {
        const Vector zt = z_[i] + t * kkt.dz[i];
        const auto& ws = *workspaces_[i];
        const Matrix Zt = devectorize(zt, ws.m, d_);
        const Vector ht = ws.Dvec.apply(zt) - vectorize(eval_basis(problem_.spec, Zt) * Ct.matrix);
        con2 += ht.squaredNorm();
        const Vector r = data_[i].y - zt;
        obj += 0.5 * data_[i].M.quadratic(r);
      }
      if (alpha_eff_ > 0) obj += 0.5 * alpha_eff_ * cf.dot(irls_weights_.cwiseProduct(cf));
      return std::make_pair(obj, std::sqrt(con2));
    };

    StepOutcome outcome;
    outcome.minres_iterations = kkt.iterations;
    double t = 1.0;
    auto [obj1, con1] = trial_values(1.0);
    bool accepted = (con1 <= con0 * (1.0 - 1e-12)) || (obj1 <= obj0 * (1.0 - 1e-12));
    if (!accepted) {
      double nu = 1.0;
      for (const auto& wi : kkt.w) nu = std::max(nu, wi.cwiseAbs().maxCoeff());
      const double merit0 = obj0 + nu * con0;
      t = 0.5;
      while (t >= 1e-8) {
        auto [objt, cont] = trial_values(t);
        if (objt + nu * cont < merit0) {
          accepted = true;
          break;
        }
        t *= 0.5;
      }
    }

    if (accepted) {
      Vector cf = coeffs_.free_values() + t * kkt.dc;
      coeffs_.set_free_values(cf);
      for (size_t i = 0; i < data_.size(); ++i) z_[i] += t * kkt.dz[i];
    }
    w_ = kkt.w;  // multipliers from the most recent KKT solve
    if (accepted) refresh();

    outcome.accepted = accepted;
    outcome.stalled = !accepted;
    outcome.step_length = accepted ? t : 0.0;
    return outcome;
  }

  /// Block constraint Jacobian A⃗ = [K⃗_□ L⃗_□] in sparse form (diagnostics).
  SparseMatrix assemble_constraint_jacobian() const {
    const Index nc = static_cast<Index>(entries_.size());
    Index S = 0;
    for (const auto& ws : workspaces_) S += ws->m * d_;
    std::vector<Triplet> trips;
    Index row_off = 0;
    for (const auto& wsp : workspaces_) {
      const auto& ws = *wsp;
      for (size_t e = 0; e < entries_.size(); ++e) {
        const auto [k, s] = entries_[e];
        for (Index j = 0; j < ws.m; ++j) {
          const double v = -ws.Phi(j, k);
          if (v != 0.0) trips.emplace_back(row_off + j * d_ + s, static_cast<Index>(e), v);
        }
      }
      for (Index outer = 0; outer < ws.Lsp.outerSize(); ++outer)
        for (SparseMatrix::InnerIterator it(ws.Lsp, outer); it; ++it)
          trips.emplace_back(row_off + it.row(), nc + row_off + it.col(), it.value());
      row_off += ws.m * d_;
    }
    SparseMatrix A(S, nc + S);
    A.setFromTriplets(trips.begin(), trips.end());
    return A;
  }

  /// Full Alg.-4.1 driver: IRLS-weighted SQP with the ε schedule, then the
  /// fixed-sparsity polish with α = 0.
  SiddsSolution solve() {
    const auto t0 = std::chrono::steady_clock::now();
    SolveReport report;
    initialize();

    Index iter = 0;
    Index consecutive_stalls = 0;
    bool schedule_done = false;
    for (Index outer = 0; outer < opts_.max_outer; ++outer) {
      update_irls_weights();
      const StepOutcome so = sqp_step();
      ++iter;
      const bool conv = converged();
      report.iterations.push_back(record(iter, so, false));
      if (conv) {
        consecutive_stalls = 0;
        eps_ /= 10.0;
        if (eps_ < opts_.eps_stop) {
          schedule_done = true;
          break;
        }
      } else if (so.stalled) {
        ++consecutive_stalls;
        if (consecutive_stalls >= 2) {
          // no acceptable step at this ε; advance the schedule
          consecutive_stalls = 0;
          eps_ /= 10.0;
          if (eps_ < opts_.eps_stop) break;
        }
      } else {
        consecutive_stalls = 0;
      }
    }
    if (!schedule_done && static_cast<Index>(report.iterations.size()) >= opts_.max_outer)
      report.status = SolveStatus::max_iterations;

    // Fix the sparsity pattern and re-solve with α = 0 (polish).
    const double tau = problem_.reg.tau.value_or(
        0.01 * (coeffs_.free_count() > 0 ? coeffs_.free_values().cwiseAbs().maxCoeff() : 0.0));
    Mask mask = coeffs_.mask ? *coeffs_.mask : Mask::Constant(coeffs_.n(), coeffs_.d(), true);
    for (Index k = 0; k < coeffs_.n(); ++k)
      for (Index s = 0; s < d_; ++s)
        if (mask(k, s) && std::abs(coeffs_.matrix(k, s)) <= tau) mask(k, s) = false;
    coeffs_.mask = mask;
    coeffs_.enforce_mask();
    entries_ = coeffs_.free_entries();
    alpha_eff_ = 0.0;
    irls_weights_ = Vector::Ones(static_cast<Index>(entries_.size()));
    refresh();

    bool polished = converged();
    for (Index j = 0; j < opts_.max_polish && !polished; ++j) {
      const StepOutcome so = sqp_step();
      ++iter;
      report.iterations.push_back(record(iter, so, true));
      polished = converged();
      if (!polished && so.stalled) break;
    }
    if (!polished && report.status == SolveStatus::converged) report.status = SolveStatus::stalled;

    SiddsSolution out;
    out.coeffs = coeffs_;
    for (size_t i = 0; i < data_.size(); ++i) {
      const auto& ws = *workspaces_[i];
      out.states.push_back(ws.Z);
      if (problem_.oversample_factor > 1) {
        const Vector zm = restrict_oversampled(z_[i], problem_.oversample_factor, d_);
        out.measurement_states.push_back(devectorize(zm, zm.size() / d_, d_));
      } else {
        out.measurement_states.push_back(ws.Z);
      }
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.report = std::move(report);
    return out;
  }

 private:
  IterationRecord record(Index iter, const StepOutcome& so, bool polish) const {
    IterationRecord r;
    r.iter = iter;
    r.objective = objective();
    r.con_norm = constraint_norm();
    r.lagrangian_grad_norm = lagrangian_gradient().norm();
    r.epsilon = eps_;
    r.minres_iterations = so.minres_iterations;
    r.step_length = so.step_length;
    r.accepted = so.accepted;
    r.polish = polish;
    return r;
  }

  /// Block preconditioner blockdiag(αW+ζI+μK⃗ᵀK⃗, M⃗+ζI+μL⃗ᵀL⃗, μ⁻¹I)⁻¹:
  /// dense inverse of the small coefficient block, sparse factorization of
  /// the banded state block.
  void prepare_preconditioner() {
    if (prec_current_) return;
    const Index nc = static_cast<Index>(entries_.size());
    Matrix P1 = Matrix::Zero(nc, nc);
    for (Index a = 0; a < nc; ++a) {
      for (Index b = 0; b < nc; ++b) {
        if (entries_[static_cast<size_t>(a)].second != entries_[static_cast<size_t>(b)].second) continue;
        double acc = 0.0;
        for (const auto& ws : workspaces_)
          acc += ws->PtP(entries_[static_cast<size_t>(a)].first, entries_[static_cast<size_t>(b)].first);
        P1(a, b) = opts_.mu * acc;
      }
      P1(a, a) += opts_.zeta;
      if (alpha_eff_ > 0) P1(a, a) += alpha_eff_ * irls_weights_(a);
    }
    prec_c_.compute(P1);

    for (size_t i = 0; i < workspaces_.size(); ++i) {
      SparseMatrix P2 = workspaces_[i]->Msp + SparseMatrix(opts_.mu * workspaces_[i]->LtL);
      for (Index k = 0; k < P2.rows(); ++k) P2.coeffRef(k, k) += opts_.zeta;
      prec_ldlt_[i]->compute(P2);
      if (prec_ldlt_[i]->info() != Eigen::Success)
        throw std::runtime_error("SiddsSolver: preconditioner factorization failed");
    }
    prec_current_ = true;
  }

  Coefficients lsoi_multi(const std::vector<Matrix>& Zs) const {
    // columnwise masked least squares stacked over trajectories
    Coefficients out(Matrix::Zero(problem_.spec.size(), d_), problem_.mask);
    const auto entries = out.free_entries();
    for (Index s = 0; s < d_; ++s) {
      std::vector<Index> cols;
      for (const auto& [k, ss] : entries)
        if (ss == s) cols.push_back(k);
      if (cols.empty()) continue;
      Index total = 0;
      for (const auto& Z : Zs) total += Z.rows();
      Matrix A(total, static_cast<Index>(cols.size()));
      Vector b(total);
      Index row = 0;
      for (const auto& Z : Zs) {
        const FinDiffMatrix D = make_findiff(Z.rows(), problem_.delta, problem_.points);
        const Matrix Phi = eval_basis(problem_.spec, Z);
        const Matrix DZ = D.apply(Z);
        for (size_t k = 0; k < cols.size(); ++k)
          A.col(static_cast<Index>(k)).segment(row, Z.rows()) = Phi.col(cols[k]);
        b.segment(row, Z.rows()) = DZ.col(s);
        row += Z.rows();
      }
      Eigen::ColPivHouseholderQR<Matrix> qr(A);
      const Vector x = qr.solve(b);
      Index idx = 0;
      for (Index k : cols) out.matrix(k, s) = x(idx++);
    }
    return out;
  }

  SiddsProblem problem_;
  SiddsOptions opts_;
  Index d_ = 0;
  double solver_delta_ = 0.0;

  std::vector<TrajectoryData> data_;  // solver-grid measurements and weights
  std::vector<std::unique_ptr<ConstraintWorkspace>> workspaces_;
  std::vector<std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>>> relax_ldlt_;
  std::vector<std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>>> prec_ldlt_;
  Eigen::LDLT<Matrix> prec_c_;
  bool prec_current_ = false;

  Coefficients coeffs_;
  std::vector<std::pair<Index, Index>> entries_;
  std::vector<Vector> z_;
  std::vector<Vector> w_;
  Vector irls_weights_;
  double alpha_eff_ = 0.0;
  double eps_ = 1.0;
};

/// Convenience driver matching the problem/options split.
inline SiddsSolution sidds_solve(const SiddsProblem& problem, const SiddsOptions& options = {}) {
  SiddsSolver solver(problem, options);
  return solver.solve();
}

}  // namespace sidds
