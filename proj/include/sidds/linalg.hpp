#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#ifdef SIDDS_HAVE_LAPACKE
#include <lapacke.h>
#endif

namespace sidds {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Row-major vectorization: stacks the rows of X into one column vector.
inline Vector vectorize(const Matrix& X) {
  Vector v(X.size());
  const Index d = X.cols();
  for (Index j = 0; j < X.rows(); ++j) v.segment(j * d, d) = X.row(j).transpose();
  return v;
}

/// Inverse of vectorize: rebuilds the rows×cols matrix.
inline Matrix devectorize(const Vector& v, Index rows, Index cols) {
  if (v.size() != rows * cols) throw std::invalid_argument("devectorize: size mismatch");
  Matrix X(rows, cols);
  for (Index j = 0; j < rows; ++j) X.row(j) = v.segment(j * cols, cols).transpose();
  return X;
}

/// Banded square matrix with uniform lower/upper bandwidth.
/// Storage is by diagonal: data_(j - i + lower, i) holds A(i, j).
class BandedMatrix {
 public:
  BandedMatrix() = default;
  BandedMatrix(Index n, Index lower, Index upper)
      : n_(n), lower_(lower), upper_(upper), data_(Matrix::Zero(lower + upper + 1, n)) {}

  Index rows() const { return n_; }
  Index cols() const { return n_; }
  Index lower() const { return lower_; }
  Index upper() const { return upper_; }

  double operator()(Index i, Index j) const {
    const Index off = j - i;
    if (off < -lower_ || off > upper_) return 0.0;
    return data_(off + lower_, i);
  }

  void set(Index i, Index j, double v) {
    const Index off = j - i;
    if (off < -lower_ || off > upper_) throw std::out_of_range("BandedMatrix::set outside band");
    data_(off + lower_, i) = v;
  }

  void add(Index i, Index j, double v) {
    const Index off = j - i;
    if (off < -lower_ || off > upper_) throw std::out_of_range("BandedMatrix::add outside band");
    data_(off + lower_, i) += v;
  }

  Vector apply(const Vector& x) const {
    if (x.size() != n_) throw std::invalid_argument("BandedMatrix::apply size mismatch");
    Vector y = Vector::Zero(n_);
    for (Index i = 0; i < n_; ++i) {
      const Index j0 = std::max<Index>(0, i - lower_);
      const Index j1 = std::min<Index>(n_ - 1, i + upper_);
      double acc = 0.0;
      for (Index j = j0; j <= j1; ++j) acc += data_(j - i + lower_, i) * x(j);
      y(i) = acc;
    }
    return y;
  }

  Vector apply_transpose(const Vector& x) const {
    if (x.size() != n_) throw std::invalid_argument("BandedMatrix::apply_transpose size mismatch");
    Vector y = Vector::Zero(n_);
    for (Index i = 0; i < n_; ++i) {
      const Index j0 = std::max<Index>(0, i - lower_);
      const Index j1 = std::min<Index>(n_ - 1, i + upper_);
      for (Index j = j0; j <= j1; ++j) y(j) += data_(j - i + lower_, i) * x(i);
    }
    return y;
  }

  /// Columnwise application to a matrix: Y = A * X.
  Matrix apply(const Matrix& X) const {
    Matrix Y(n_, X.cols());
    for (Index c = 0; c < X.cols(); ++c) Y.col(c) = apply(Vector(X.col(c)));
    return Y;
  }

  SparseMatrix to_sparse() const {
    std::vector<Triplet> trips;
    trips.reserve(static_cast<size_t>(n_ * (lower_ + upper_ + 1)));
    for (Index i = 0; i < n_; ++i) {
      const Index j0 = std::max<Index>(0, i - lower_);
      const Index j1 = std::min<Index>(n_ - 1, i + upper_);
      for (Index j = j0; j <= j1; ++j) {
        const double v = data_(j - i + lower_, i);
        if (v != 0.0) trips.emplace_back(i, j, v);
      }
    }
    SparseMatrix S(n_, n_);
    S.setFromTriplets(trips.begin(), trips.end());
    return S;
  }

  Matrix to_dense() const {
    Matrix A = Matrix::Zero(n_, n_);
    for (Index i = 0; i < n_; ++i) {
      const Index j0 = std::max<Index>(0, i - lower_);
      const Index j1 = std::min<Index>(n_ - 1, i + upper_);
      for (Index j = j0; j <= j1; ++j) A(i, j) = data_(j - i + lower_, i);
    }
    return A;
  }

  /// Kronecker lift A ⊗ I_d, still banded with bandwidths scaled by d.
  BandedMatrix kron_identity(Index d) const {
    if (d < 1) throw std::invalid_argument("kron_identity: d must be >= 1");
    BandedMatrix B(n_ * d, lower_ * d, upper_ * d);
    for (Index i = 0; i < n_; ++i) {
      const Index j0 = std::max<Index>(0, i - lower_);
      const Index j1 = std::min<Index>(n_ - 1, i + upper_);
      for (Index j = j0; j <= j1; ++j) {
        const double v = data_(j - i + lower_, i);
        if (v == 0.0) continue;
        for (Index r = 0; r < d; ++r) B.set(i * d + r, j * d + r, v);
      }
    }
    return B;
  }

 private:
  Index n_ = 0;
  Index lower_ = 0;
  Index upper_ = 0;
  Matrix data_;
};

/// Block-diagonal matrix with equally sized square blocks.
class BlockDiagMatrix {
 public:
  BlockDiagMatrix() = default;
  explicit BlockDiagMatrix(std::vector<Matrix> blocks) : blocks_(std::move(blocks)) {
    for (const auto& b : blocks_) {
      if (b.rows() != b.cols()) throw std::invalid_argument("BlockDiagMatrix: blocks must be square");
      if (b.rows() != blocks_.front().rows())
        throw std::invalid_argument("BlockDiagMatrix: blocks must share their size");
    }
  }

  Index block_count() const { return static_cast<Index>(blocks_.size()); }
  Index block_size() const { return blocks_.empty() ? 0 : blocks_.front().rows(); }
  Index rows() const { return block_count() * block_size(); }
  const Matrix& block(Index i) const { return blocks_[static_cast<size_t>(i)]; }
  Matrix& block(Index i) { return blocks_[static_cast<size_t>(i)]; }

  Vector apply(const Vector& x) const {
    const Index d = block_size();
    if (x.size() != rows()) throw std::invalid_argument("BlockDiagMatrix::apply size mismatch");
    Vector y(x.size());
    for (Index i = 0; i < block_count(); ++i)
      y.segment(i * d, d) = blocks_[static_cast<size_t>(i)] * x.segment(i * d, d);
    return y;
  }

  SparseMatrix to_sparse() const {
    const Index d = block_size();
    std::vector<Triplet> trips;
    trips.reserve(static_cast<size_t>(rows() * d));
    for (Index b = 0; b < block_count(); ++b)
      for (Index r = 0; r < d; ++r)
        for (Index c = 0; c < d; ++c) {
          const double v = blocks_[static_cast<size_t>(b)](r, c);
          if (v != 0.0) trips.emplace_back(b * d + r, b * d + c, v);
        }
    SparseMatrix S(rows(), rows());
    S.setFromTriplets(trips.begin(), trips.end());
    return S;
  }

 private:
  std::vector<Matrix> blocks_;
};

struct ThinSvd {
  Matrix U;   // rows(A) × k
  Vector S;   // k, descending
  Matrix V;   // cols(A) × k
};

/// Thin SVD; k = min(rows, cols). Uses LAPACKE's divide-and-conquer driver
/// when available, which matters for the dm-scale matrices in the asymptotic
/// analyses.
inline ThinSvd svd_thin(const Matrix& A) {
  ThinSvd out;
#ifdef SIDDS_HAVE_LAPACKE
  {
    const lapack_int m = static_cast<lapack_int>(A.rows());
    const lapack_int n = static_cast<lapack_int>(A.cols());
    const lapack_int k = std::min(m, n);
    Matrix work = A;  // overwritten
    out.U.resize(m, k);
    out.S.resize(k);
    Matrix VT(k, n);
    const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'S', m, n, work.data(), m,
                                           out.S.data(), out.U.data(), m, VT.data(), k);
    if (info == 0) {
      out.V = VT.transpose();
      return out;
    }
    // fall through to the Eigen path on (rare) non-convergence
  }
#endif
  Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.U = svd.matrixU();
  out.S = svd.singularValues();
  out.V = svd.matrixV();
  return out;
}

/// Full SVD (all right singular vectors), needed to extract complete
/// nullspaces of wide matrices.
inline ThinSvd svd_full(const Matrix& A) {
  ThinSvd out;
#ifdef SIDDS_HAVE_LAPACKE
  {
    const lapack_int m = static_cast<lapack_int>(A.rows());
    const lapack_int n = static_cast<lapack_int>(A.cols());
    const lapack_int k = std::min(m, n);
    Matrix work = A;
    out.U.resize(m, m);
    out.S.resize(k);
    Matrix VT(n, n);
    const lapack_int info = LAPACKE_dgesdd(LAPACK_COL_MAJOR, 'A', m, n, work.data(), m,
                                           out.S.data(), out.U.data(), m, VT.data(), n);
    if (info == 0) {
      out.V = VT.transpose();
      return out;
    }
  }
#endif
  Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
  out.U = svd.matrixU();
  out.S = svd.singularValues();
  out.V = svd.matrixV();
  return out;
}

/// Moore-Penrose pseudoinverse with relative singular-value cutoff.
inline Matrix pinv(const Matrix& A, double rel_cutoff = 1e-12) {
  if (A.size() == 0) return Matrix(A.cols(), A.rows());
  const ThinSvd svd = svd_thin(A);
  const double cutoff = rel_cutoff * (svd.S.size() > 0 ? svd.S(0) : 0.0);
  Matrix P = Matrix::Zero(A.cols(), A.rows());
  for (Index i = 0; i < svd.S.size(); ++i) {
    if (svd.S(i) > cutoff) P += svd.V.col(i) * (svd.U.col(i).transpose() / svd.S(i));
  }
  return P;
}

/// Minimum-norm least-squares solution of min ‖Ax − b‖₂ with singular values
/// below rcond·σ_max treated as zero. Handles wide and rank-deficient A.
inline Vector min_norm_lstsq(const Matrix& A, const Vector& b, double rcond = 1e-12) {
#ifdef SIDDS_HAVE_LAPACKE
  {
    const lapack_int m = static_cast<lapack_int>(A.rows());
    const lapack_int n = static_cast<lapack_int>(A.cols());
    Matrix work = A;
    Vector rhs = Vector::Zero(std::max(A.rows(), A.cols()));
    rhs.head(A.rows()) = b;
    Vector sv(std::min(m, n));
    lapack_int rank = 0;
    const lapack_int info =
        LAPACKE_dgelsd(LAPACK_COL_MAJOR, m, n, 1, work.data(), m, rhs.data(),
                       static_cast<lapack_int>(rhs.size()), sv.data(), rcond, &rank);
    if (info == 0) return rhs.head(A.cols());
  }
#endif
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(A);
  cod.setThreshold(rcond);
  return cod.solve(b);
}

/// Numerical rank at a relative cutoff.
inline Index numerical_rank(const Vector& singular_values, double rel_cutoff) {
  if (singular_values.size() == 0) return 0;
  const double cutoff = rel_cutoff * singular_values(0);
  Index r = 0;
  while (r < singular_values.size() && singular_values(r) > cutoff) ++r;
  return r;
}

}  // namespace sidds
