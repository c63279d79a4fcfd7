#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "sidds/linalg.hpp"

namespace sidds {

/// Deterministic standard-normal stream (Box-Muller over mt19937_64),
/// bit-reproducible across standard library implementations.
class GaussianSampler {
 public:
  explicit GaussianSampler(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    const double u2 = (static_cast<double>(rng_() >> 11) + 0.5) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  Vector vector(Index n) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = next();
    return v;
  }

 private:
  std::mt19937_64 rng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Block-diagonal dm×dm symmetric operator built from m blocks of size d×d.
/// Used for both covariances Σ⃗ and mismatch weights M⃗.
class WeightMatrix {
 public:
  WeightMatrix() = default;
  explicit WeightMatrix(std::vector<Matrix> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw std::invalid_argument("WeightMatrix: no blocks");
    d_ = blocks_.front().rows();
    for (const auto& b : blocks_)
      if (b.rows() != d_ || b.cols() != d_)
        throw std::invalid_argument("WeightMatrix: inconsistent block sizes");
  }

  static WeightMatrix identity(Index m, Index d) {
    return uniform(Matrix::Identity(d, d), m);
  }

  static WeightMatrix uniform(const Matrix& block, Index m) {
    std::vector<Matrix> blocks(static_cast<size_t>(m), block);
    return WeightMatrix(std::move(blocks));
  }

  Index block_count() const { return static_cast<Index>(blocks_.size()); }
  Index block_dim() const { return d_; }
  Index rows() const { return block_count() * d_; }
  const Matrix& block(Index i) const { return blocks_[static_cast<size_t>(i)]; }

  Vector apply(const Vector& x) const {
    if (x.size() != rows()) throw std::invalid_argument("WeightMatrix::apply size mismatch");
    Vector y(x.size());
    for (Index i = 0; i < block_count(); ++i)
      y.segment(i * d_, d_) = blocks_[static_cast<size_t>(i)] * x.segment(i * d_, d_);
    return y;
  }

  double quadratic(const Vector& x) const { return x.dot(apply(x)); }

  /// Per-block inverse; throws on a singular block.
  WeightMatrix inverse() const {
    std::vector<Matrix> inv;
    inv.reserve(blocks_.size());
    for (const auto& b : blocks_) {
      Eigen::FullPivLU<Matrix> lu(b);
      if (!lu.isInvertible()) throw std::runtime_error("WeightMatrix::inverse: singular block");
      inv.push_back(lu.inverse());
    }
    return WeightMatrix(std::move(inv));
  }

  bool is_psd(double tol = 1e-12) const {
    for (const auto& b : blocks_) {
      if ((b - b.transpose()).cwiseAbs().maxCoeff() > tol * (1.0 + b.cwiseAbs().maxCoeff()))
        return false;
      Eigen::SelfAdjointEigenSolver<Matrix> es(b);
      if (es.eigenvalues().minCoeff() < -tol * (1.0 + b.cwiseAbs().maxCoeff())) return false;
    }
    return true;
  }

  SparseMatrix to_sparse() const {
    std::vector<Triplet> trips;
    trips.reserve(static_cast<size_t>(rows() * d_));
    for (Index b = 0; b < block_count(); ++b)
      for (Index r = 0; r < d_; ++r)
        for (Index c = 0; c < d_; ++c) {
          const double v = blocks_[static_cast<size_t>(b)](r, c);
          if (v != 0.0) trips.emplace_back(b * d_ + r, b * d_ + c, v);
        }
    SparseMatrix S(rows(), rows());
    S.setFromTriplets(trips.begin(), trips.end());
    return S;
  }

 private:
  std::vector<Matrix> blocks_;
  Index d_ = 0;
};

/// Measurement noise: i.i.d. N(0, σ²I) per sample, or correlation ρ between
/// the first two coordinates of each sample block.
struct NoiseModel {
  enum class Kind { iid, block_correlated };

  Kind kind = Kind::iid;
  double sigma = 0.0;
  double rho = 0.0;
  Index dim = 0;

  static NoiseModel make_iid(double sigma, Index dim) {
    if (sigma < 0) throw std::invalid_argument("NoiseModel: sigma must be >= 0");
    if (dim < 1) throw std::invalid_argument("NoiseModel: dim must be >= 1");
    return NoiseModel{Kind::iid, sigma, 0.0, dim};
  }

  static NoiseModel make_correlated(double sigma, double rho, Index dim) {
    if (sigma < 0) throw std::invalid_argument("NoiseModel: sigma must be >= 0");
    if (rho < 0.0 || rho >= 1.0) throw std::invalid_argument("NoiseModel: rho must lie in [0,1)");
    if (dim < 1) throw std::invalid_argument("NoiseModel: dim must be >= 1");
    return NoiseModel{Kind::block_correlated, sigma, rho, dim};
  }

  /// One d×d covariance block of Σ⃗.
  Matrix block() const {
    Matrix B = sigma * sigma * Matrix::Identity(dim, dim);
    if (kind == Kind::block_correlated && dim >= 2) {
      B(0, 1) = sigma * sigma * rho;
      B(1, 0) = sigma * sigma * rho;
    }
    return B;
  }

  WeightMatrix covariance(Index m) const { return WeightMatrix::uniform(block(), m); }
};

/// n⃗ ∼ N(0, Σ⃗), realized blockwise through the Cholesky factor of the
/// per-sample covariance. Deterministic for a given seed.
inline Vector sample_noise(const NoiseModel& model, Index m, Index d, std::uint64_t seed) {
  if (d != model.dim) throw std::invalid_argument("sample_noise: dimension mismatch");
  if (m < 1) throw std::invalid_argument("sample_noise: m must be >= 1");
  GaussianSampler gauss(seed);
  if (model.sigma == 0.0) {
    // consume nothing; exact zeros
    return Vector::Zero(m * d);
  }
  Eigen::LLT<Matrix> llt(model.block());
  if (llt.info() != Eigen::Success) throw std::runtime_error("sample_noise: covariance block not SPD");
  const Matrix L = llt.matrixL();
  Vector out(m * d);
  for (Index j = 0; j < m; ++j) out.segment(j * d, d) = L * gauss.vector(d);
  return out;
}

/// M⃗ = Σ⃗^{-1}, built per block.
inline WeightMatrix inverse_weight(const NoiseModel& model, Index m) {
  if (!(model.sigma > 0)) throw std::invalid_argument("inverse_weight: sigma must be positive");
  Eigen::FullPivLU<Matrix> lu(model.block());
  if (!lu.isInvertible()) throw std::runtime_error("inverse_weight: singular covariance block");
  return WeightMatrix::uniform(lu.inverse(), m);
}

struct Oversampled {
  Vector y;        // d·m↑
  WeightMatrix M;  // m↑ blocks
  Index samples;   // m↑ = r(m−1)+1
};

/// Inserts r−1 zero sample blocks between consecutive measurements and places
/// zero weight blocks at the inserted nodes, so the mismatch objective is
/// unchanged: M⃗↑ = diag(M₁, 0, …, 0, M₂, 0, …, M_m).
inline Oversampled oversample(const Vector& y, const WeightMatrix& M, Index factor) {
  if (factor < 1) throw std::invalid_argument("oversample: factor must be >= 1");
  const Index d = M.block_dim();
  const Index m = M.block_count();
  if (y.size() != m * d) throw std::invalid_argument("oversample: y/M size mismatch");

  const Index m_up = factor * (m - 1) + 1;
  Oversampled out;
  out.samples = m_up;
  out.y = Vector::Zero(m_up * d);
  std::vector<Matrix> blocks(static_cast<size_t>(m_up), Matrix::Zero(d, d));
  for (Index j = 0; j < m; ++j) {
    out.y.segment(j * factor * d, d) = y.segment(j * d, d);
    blocks[static_cast<size_t>(j * factor)] = M.block(j);
  }
  out.M = WeightMatrix(std::move(blocks));
  return out;
}

/// Values at the measurement nodes of an oversampled vector.
inline Vector restrict_oversampled(const Vector& v, Index factor, Index d) {
  const Index m_up = v.size() / d;
  const Index m = (m_up - 1) / factor + 1;
  Vector out(m * d);
  for (Index j = 0; j < m; ++j) out.segment(j * d, d) = v.segment(j * factor * d, d);
  return out;
}

}  // namespace sidds
