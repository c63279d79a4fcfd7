#pragma once

#include <optional>
#include <stdexcept>

#include "sidds/basis.hpp"
#include "sidds/findiff.hpp"
#include "sidds/integrate.hpp"
#include "sidds/linalg.hpp"
#include "sidds/lsoi.hpp"
#include "sidds/noise.hpp"

namespace sidds {

/// Orthonormal basis of the tangent space of the evolution constraint set at
/// (c⃗★, x⃗): the reduced-QR factor of the stacked sensitivity matrix
/// [I 0; V(0) W(0); …; V((m−1)δ) W((m−1)δ)] in the (c⃗, z⃗) layout.
inline Matrix tangent_basis(const VectorField& field, const Vector& x0, Index m, double delta,
                            double rtol = 1e-10, double atol = 1e-12) {
  const Index d = field.dim();
  const Index nc = field.coeffs.free_count();
  const SensitivityBundle bundle = integrate_sensitivities(field, x0, m, delta, rtol, atol);

  Matrix S = Matrix::Zero(nc + d * m, nc + d);
  S.topLeftCorner(nc, nc).setIdentity();
  for (Index j = 0; j < m; ++j) {
    S.block(nc + j * d, 0, d, nc) = bundle.V[static_cast<size_t>(j)];
    S.block(nc + j * d, nc, d, d) = bundle.W[static_cast<size_t>(j)];
  }

  Eigen::HouseholderQR<Matrix> qr(S);
  const Matrix R = qr.matrixQR().topRows(nc + d).triangularView<Eigen::Upper>();
  const double dmax = R.diagonal().cwiseAbs().maxCoeff();
  const double dmin = R.diagonal().cwiseAbs().minCoeff();
  if (!(dmax > 0) || dmin < 1e-12 * dmax)
    throw std::runtime_error("tangent_basis: rank loss in QR of the sensitivity stack");
  Matrix U = Matrix::Identity(S.rows(), nc + d);
  U = qr.householderQ() * U;
  return U;
}

struct CrlbResult {
  Matrix coeff_bound;       // n_c×n_c PSD, the S⃗_c-selected block
  Index tangent_dim = 0;    // n_c + d
  bool cutoff_ambiguous = false;
};

/// Constrained Cramér-Rao lower bound U⃗[U⃗ᵀJ⃗U⃗]⁺U⃗ᵀ with
/// J⃗ = blockdiag(0, Σ⃗^{-1}), restricted to the coefficient block. With a
/// sparsity mask the coefficient columns of the sensitivity stack are
/// restricted to the free entries before the QR.
inline CrlbResult crlb_bound(const VectorField& field, const Vector& x0, Index m, double delta,
                             const NoiseModel& noise,
                             const std::optional<Mask>& mask = std::nullopt) {
  if (!(noise.sigma > 0)) throw std::invalid_argument("crlb_bound: noise must be positive definite");
  VectorField masked = field;
  if (mask) {
    masked.coeffs.mask = mask;
    masked.coeffs.enforce_mask();
  }
  const Index d = field.dim();
  const Index nc = masked.coeffs.free_count();

  const Matrix U = tangent_basis(masked, x0, m, delta);
  const Matrix Uz = U.bottomRows(d * m);
  const Matrix Uc = U.topRows(nc);

  // UᵀJU = U_zᵀ Σ⁻¹ U_z via blockwise application of Σ⁻¹.
  const Matrix Sinv_block = inverse_weight(noise, 1).block(0);
  Matrix SU(Uz.rows(), Uz.cols());
  for (Index j = 0; j < m; ++j) SU.middleRows(j * d, d) = Sinv_block * Uz.middleRows(j * d, d);
  const Matrix G = Uz.transpose() * SU;

  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (G + G.transpose()));
  const Vector ev = es.eigenvalues();
  const double emax = ev.cwiseAbs().maxCoeff();
  const double cutoff = 1e-10 * emax;
  CrlbResult out;
  out.tangent_dim = nc + d;
  Matrix Gp = Matrix::Zero(G.rows(), G.cols());
  for (Index i = 0; i < ev.size(); ++i) {
    const double lambda = ev(i);
    if (lambda > cutoff) {
      Gp += es.eigenvectors().col(i) * es.eigenvectors().col(i).transpose() / lambda;
    } else if (std::abs(lambda) > 0.1 * cutoff) {
      out.cutoff_ambiguous = true;
    }
  }
  out.coeff_bound = Uc * Gp * Uc.transpose();
  out.coeff_bound = 0.5 * (out.coeff_bound + out.coeff_bound.transpose()).eval();
  return out;
}

struct SiddsAsymptotics {
  Vector bias;             // n_c + dm, (c⃗, z⃗) layout
  Matrix coeff_covariance; // n_c×n_c (when requested)
  Index nullity = 0;
  bool cutoff_ambiguous = false;

  Vector coeff_bias(Index nc) const { return bias.head(nc); }
};

/// First-order SIDDS error model at the truth: bias = −[K⃗ L⃗]⁺h⃗(c⃗★, x⃗),
/// covariance from the reduced-Hessian sandwich over the nullspace basis of
/// [K⃗ L⃗]. The nullspace is found by dense SVD, which bounds the usable m.
///
/// [K⃗ L⃗] carries a structural near-null cluster of dimension d (the
/// discrete constraint encodes ~d(m−1) conditions in dm rows). Those
/// directions are treated as nullspace: the pseudoinverse cutoff is
/// 1e-6·σ_max, far below the genuine spectrum and far above the cluster.
inline SiddsAsymptotics sidds_asymptotics(const VectorField& field, const Vector& x0, Index m,
                                          double delta, const FinDiffMatrix& D,
                                          const NoiseModel& noise, const WeightMatrix& M,
                                          const std::optional<Mask>& mask = std::nullopt,
                                          bool compute_covariance = false) {
  VectorField masked = field;
  if (mask) {
    masked.coeffs.mask = mask;
    masked.coeffs.enforce_mask();
  }
  const Index d = field.dim();
  if (D.m != m) throw std::invalid_argument("sidds_asymptotics: D size mismatch");
  const auto entries = masked.coeffs.free_entries();
  const Index nc = static_cast<Index>(entries.size());
  const Index dm = d * m;

  const Trajectory traj = integrate_trajectory(masked, x0, m, delta);
  const Matrix& X = traj.states;
  const Vector xvec = vectorize(X);
  const Vector cstar = masked.coeffs.vectorized();

  // h = D⃗x⃗ − Φ⃗(x⃗)c⃗★
  const Vector h = vectorize(D.apply(X)) - vectorize(eval_basis(masked.spec, X) * masked.coeffs.matrix);

  // A = [K L] with K = −Φ⃗ (mask-restricted) and L = D⃗ − ∇Φ⃗⊗₂c⃗.
  Matrix A(dm, nc + dm);
  A.leftCols(nc) = -build_phi_vec(masked.spec, X, entries);
  Matrix L = D.D.kron_identity(d).to_dense();
  const BlockDiagMatrix G = grad_basis_contract(masked.spec, xvec, cstar);
  for (Index j = 0; j < m; ++j) L.block(j * d, j * d, d, d) -= G.block(j);
  A.rightCols(dm) = L;

  constexpr double kPinvCutoff = 1e-6;
  SiddsAsymptotics out;
  out.bias = -min_norm_lstsq(A, h, kPinvCutoff);

  if (compute_covariance) {
    const ThinSvd svd = svd_full(A);
    const double smax = svd.S.size() > 0 ? svd.S(0) : 0.0;
    const double cutoff = kPinvCutoff * smax;
    std::vector<Index> null_cols;
    for (Index i = 0; i < svd.V.cols(); ++i) {
      const double s = i < svd.S.size() ? svd.S(i) : 0.0;
      if (s <= cutoff) null_cols.push_back(i);
      if ((s > cutoff && s < 10 * cutoff) || (s <= cutoff && s > 0.1 * cutoff))
        out.cutoff_ambiguous = true;
    }
    out.nullity = static_cast<Index>(null_cols.size());
    Matrix Un(nc + dm, out.nullity);
    for (size_t i = 0; i < null_cols.size(); ++i) Un.col(static_cast<Index>(i)) = svd.V.col(null_cols[i]);

    const Matrix Un_z = Un.bottomRows(dm);
    const Matrix Un_c = Un.topRows(nc);

    // small k×k pieces: U_zᵀ M U_z and U_zᵀ M Σ Mᵀ U_z
    Matrix MU(dm, out.nullity);
    for (Index i = 0; i < out.nullity; ++i) MU.col(i) = M.apply(Vector(Un_z.col(i)));
    const Matrix Gm = Un_z.transpose() * MU;

    const Matrix Sb = noise.block();
    Matrix SMU(dm, out.nullity);
    for (Index j = 0; j < m; ++j) SMU.middleRows(j * d, d) = Sb * MU.middleRows(j * d, d);
    Matrix Mid(out.nullity, out.nullity);
    Mid = MU.transpose() * SMU;  // U_zᵀ Mᵀ Σ M U_z (M symmetric)

    const Matrix Gp = pinv(0.5 * (Gm + Gm.transpose()), 1e-12);
    const Matrix core = Gp * Mid * Gp;
    out.coeff_covariance = Un_c * core * Un_c.transpose();
    out.coeff_covariance = 0.5 * (out.coeff_covariance + out.coeff_covariance.transpose()).eval();
  }
  return out;
}

}  // namespace sidds
