#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "sidds/basis.hpp"
#include "sidds/findiff.hpp"
#include "sidds/integrate.hpp"
#include "sidds/linalg.hpp"
#include "sidds/noise.hpp"

namespace sidds {

/// Φ⃗(X) = Φ(X) ⊗ I_d restricted to the free coefficient entries:
/// column (k, s) has entries Φ(j, k) in rows jd+s.
inline Matrix build_phi_vec(const BasisSpec& spec, const Matrix& states,
                            const std::vector<std::pair<Index, Index>>& entries) {
  const Index d = spec.dim;
  const Index m = states.rows();
  const Matrix Phi = eval_basis(spec, states);
  Matrix A = Matrix::Zero(m * d, static_cast<Index>(entries.size()));
  Index col = 0;
  for (const auto& [k, s] : entries) {
    for (Index j = 0; j < m; ++j) A(j * d + s, col) = Phi(j, k);
    ++col;
  }
  return A;
}

inline std::vector<std::pair<Index, Index>> all_entries(Index n, Index d) {
  std::vector<std::pair<Index, Index>> out;
  out.reserve(static_cast<size_t>(n * d));
  for (Index k = 0; k < n; ++k)
    for (Index s = 0; s < d; ++s) out.emplace_back(k, s);
  return out;
}

struct LsoiResult {
  Coefficients coeffs;
  bool rank_deficient = false;
};

/// Least Squares Operator Inference: min ‖DY − Φ(Y)C‖_F over the free
/// entries, solved columnwise. Rank-deficient dictionaries yield the
/// minimum-norm solution and set the warning flag.
inline LsoiResult lsoi_solve(const Matrix& Y, const FinDiffMatrix& D, const BasisSpec& spec,
                             const std::optional<Mask>& mask = std::nullopt) {
  const Index m = Y.rows();
  const Index d = Y.cols();
  const Index n = spec.size();
  if (d != spec.dim) throw std::invalid_argument("lsoi_solve: dimension mismatch");
  if (D.m != m) throw std::invalid_argument("lsoi_solve: differentiation matrix size mismatch");

  const Matrix Phi = eval_basis(spec, Y);
  const Matrix DY = D.apply(Y);

  LsoiResult out;
  out.coeffs = Coefficients(Matrix::Zero(n, d), mask);
  for (Index s = 0; s < d; ++s) {
    std::vector<Index> rows;
    for (Index k = 0; k < n; ++k)
      if (out.coeffs.is_free(k, s)) rows.push_back(k);
    if (rows.empty()) continue;
    if (m < static_cast<Index>(rows.size()))
      throw std::invalid_argument("lsoi_solve: fewer samples than free dictionary columns");
    Matrix A(m, static_cast<Index>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) A.col(static_cast<Index>(i)) = Phi.col(rows[i]);
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(A);
    if (cod.rank() < A.cols()) out.rank_deficient = true;
    const Vector x = cod.solve(DY.col(s));
    for (size_t i = 0; i < rows.size(); ++i) out.coeffs.matrix(rows[i], s) = x(static_cast<Index>(i));
  }
  return out;
}

/// Weighted LSOI: min ‖Γ[D⃗y⃗ − Φ⃗(y⃗)c⃗]‖₂ over the free entries.
inline LsoiResult weighted_lsoi_solve(const Matrix& Y, const FinDiffMatrix& D,
                                      const BasisSpec& spec, const Matrix& Gamma,
                                      const std::optional<Mask>& mask = std::nullopt) {
  const Index m = Y.rows();
  const Index d = Y.cols();
  if (d != spec.dim) throw std::invalid_argument("weighted_lsoi_solve: dimension mismatch");
  if (Gamma.rows() != m * d || Gamma.cols() != m * d)
    throw std::invalid_argument("weighted_lsoi_solve: Gamma must be dm×dm");

  Coefficients shape(Matrix::Zero(spec.size(), d), mask);
  const auto entries = shape.free_entries();
  const Matrix A = Gamma * build_phi_vec(spec, Y, entries);
  const Vector b = Gamma * vectorize(D.apply(Y));
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(A);
  LsoiResult out;
  out.rank_deficient = cod.rank() < A.cols();
  Vector c = cod.solve(b);
  out.coeffs = shape;
  out.coeffs.set_free_values(c);
  return out;
}

/// Whitening operator Γ = Σ⃗^{-1/2}[D⃗ − ∇Φ⃗(x⃗)⊗₂c⃗★]⁺ for the weighted
/// variant; requires ground truth and a rank-truncated pseudoinverse.
inline Matrix whitening_gamma(const BasisSpec& spec, const Matrix& X_true,
                              const Coefficients& c_true, const FinDiffMatrix& D,
                              const NoiseModel& noise, double rank_tol = 1e-8) {
  const Index d = X_true.cols();
  const Index m = X_true.rows();
  Matrix Lstar = D.D.kron_identity(d).to_dense();
  const BlockDiagMatrix G = grad_basis_contract(spec, vectorize(X_true), c_true.vectorized());
  for (Index j = 0; j < m; ++j) Lstar.block(j * d, j * d, d, d) -= G.block(j);

  const Matrix Lpinv = pinv(Lstar, rank_tol);

  // Σ^{-1/2} blockwise via eigendecomposition.
  Eigen::SelfAdjointEigenSolver<Matrix> es(noise.block());
  if (es.eigenvalues().minCoeff() <= 0)
    throw std::runtime_error("whitening_gamma: covariance block not SPD");
  const Matrix Bi = es.eigenvectors() *
                    es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                    es.eigenvectors().transpose();
  Matrix Gamma(m * d, m * d);
  for (Index j = 0; j < m; ++j) Gamma.middleRows(j * d, d) = Bi * Lpinv.middleRows(j * d, d);
  return Gamma;
}

/// Golub-Pereyra derivative of the pseudoinverse:
/// d(A⁺) = −A⁺ dA A⁺ + A⁺A⁺ᵀ dAᵀ (I − AA⁺) + (I − A⁺A) dAᵀ A⁺ᵀA⁺.
inline Matrix pinv_derivative(const Matrix& A, const Matrix& dA) {
  const Matrix P = pinv(A);
  const Matrix PA = P * A;
  const Matrix AP = A * P;
  return -P * dA * P + P * P.transpose() * dA.transpose() * (Matrix::Identity(AP.rows(), AP.cols()) - AP) +
         (Matrix::Identity(PA.rows(), PA.cols()) - PA) * dA.transpose() * P.transpose() * P;
}

struct LsoiAsymptotics {
  Vector bias;        // n_c, E[c⃗ − c⃗★] to first order
  Matrix covariance;  // n_c×n_c, T Σ⃗ Tᵀ
  Matrix transform;   // T_lsoi, n_c×dm
  bool rank_warning = false;
};

/// Small-noise asymptotics of LSOI around the exact trajectory:
/// bias = Φ⃗⁺(x⃗)(D⃗x⃗ − ẋ⃗) and covariance T Σ⃗ Tᵀ with
/// T = [∇Φ⃗⁺(x⃗)]⊗₂(D⃗x⃗) + Φ⃗⁺(x⃗)D⃗. The pseudoinverse derivative is
/// applied one measurement direction at a time, never materializing the
/// 3-tensor.
inline LsoiAsymptotics lsoi_asymptotics(const BasisSpec& spec, const Matrix& X_true,
                                        const Coefficients& c_true, const FinDiffMatrix& D,
                                        const NoiseModel& noise) {
  const Index d = X_true.cols();
  const Index m = X_true.rows();
  const Index dm = d * m;
  const auto entries = c_true.free_entries();
  const Index nc = static_cast<Index>(entries.size());

  const Matrix A = build_phi_vec(spec, X_true, entries);
  const ThinSvd svd = svd_thin(A);
  LsoiAsymptotics out;
  out.rank_warning = numerical_rank(svd.S, 1e-10) < nc;
  Matrix P = Matrix::Zero(nc, dm);
  for (Index i = 0; i < svd.S.size(); ++i)
    if (svd.S(i) > 1e-12 * svd.S(0)) P += svd.V.col(i) * (svd.U.col(i).transpose() / svd.S(i));

  const Matrix DX = D.apply(X_true);
  const Vector v = vectorize(DX);                                           // D⃗x⃗
  const Vector fdot = vectorize(eval_basis(spec, X_true) * c_true.matrix);  // ẋ⃗ = Φ⃗(x⃗)c⃗★
  out.bias = P * (v - fdot);

  // T = T₁ + P D⃗ with T₁ column r = [∂_r Φ⃗⁺](D⃗x⃗).
  const Vector a = P * v;          // Φ⁺ v
  const Vector u = v - A * a;      // (I − AA⁺)v
  const Vector t = P.transpose() * a;
  const Matrix G1 = P * P.transpose();
  const Matrix Pr = Matrix::Identity(nc, nc) - P * A;

  Matrix T = Matrix::Zero(nc, dm);
  for (Index j = 0; j < m; ++j) {
    const Matrix G = eval_basis_gradient(spec, X_true.row(j).transpose());  // n×d
    for (Index i = 0; i < d; ++i) {
      const Index r = j * d + i;
      // dA has entries G(k, i) at (jd+s, col) for each free entry (k, s).
      Vector dAa = Vector::Zero(d);  // indexed by s, value Σ G(k,i) a(col)
      Vector dAt_u = Vector::Zero(nc);
      Vector dAt_t = Vector::Zero(nc);
      for (Index col = 0; col < nc; ++col) {
        const auto& [k, s] = entries[static_cast<size_t>(col)];
        const double g = G(k, i);
        if (g == 0.0) continue;
        dAa(s) += g * a(col);
        dAt_u(col) = g * u(j * d + s);
        dAt_t(col) = g * t(j * d + s);
      }
      Vector colv = G1 * dAt_u + Pr * dAt_t;
      for (Index s = 0; s < d; ++s)
        if (dAa(s) != 0.0) colv -= P.col(j * d + s) * dAa(s);
      T.col(r) = colv;
    }
  }
  // + Φ⁺ D⃗: (P D⃗)(:, r) with D⃗ = D ⊗ I_d; column (j,i) of D⃗ is D(:,j) ⊗ e_i.
  for (Index j = 0; j < m; ++j) {
    const Index lo = std::max<Index>(0, j - D.D.upper());
    const Index hi = std::min<Index>(m - 1, j + D.D.lower());
    for (Index row = lo; row <= hi; ++row) {
      const double value = D.D(row, j);
      if (value == 0.0) continue;
      for (Index i = 0; i < d; ++i) T.col(j * d + i) += value * P.col(row * d + i);
    }
  }
  out.transform = T;

  // covariance = T Σ⃗ Tᵀ, Σ⃗ block diagonal.
  const Matrix Sb = noise.block();
  Matrix TS(nc, dm);
  for (Index j = 0; j < m; ++j) TS.middleCols(j * d, d) = T.middleCols(j * d, d) * Sb;
  out.covariance = TS * T.transpose();
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  return out;
}

}  // namespace sidds
