#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "sidds/linalg.hpp"

namespace sidds {

using MultiIndex = std::vector<int>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Integer power by repeated squaring.
inline double pow_int(double x, int e) {
  double r = 1.0, b = x;
  while (e > 0) {
    if (e & 1) r *= b;
    b *= b;
    e >>= 1;
  }
  return r;
}

/// Total-degree monomial dictionary over d variables, ordered graded-lex:
/// by total degree, then lexicographically with the leading variable first.
/// For d=2, p=2 this is [1, x1, x2, x1^2, x1*x2, x2^2].
struct BasisSpec {
  int dim = 0;
  int degree = 0;
  std::vector<MultiIndex> multi_indices;

  Index size() const { return static_cast<Index>(multi_indices.size()); }
};

namespace detail {

inline void enumerate_degree(int dim, int total, MultiIndex& partial,
                             std::vector<MultiIndex>& out) {
  if (static_cast<int>(partial.size()) == dim - 1) {
    partial.push_back(total);
    out.push_back(partial);
    partial.pop_back();
    return;
  }
  for (int a = total; a >= 0; --a) {
    partial.push_back(a);
    enumerate_degree(dim, total - a, partial, out);
    partial.pop_back();
  }
}

}  // namespace detail

inline BasisSpec enumerate_basis(int dim, int degree) {
  if (dim < 1) throw std::invalid_argument("enumerate_basis: dim must be >= 1");
  if (degree < 0) throw std::invalid_argument("enumerate_basis: degree must be >= 0");
  BasisSpec spec;
  spec.dim = dim;
  spec.degree = degree;
  for (int total = 0; total <= degree; ++total) {
    MultiIndex partial;
    detail::enumerate_degree(dim, total, partial, spec.multi_indices);
  }
  return spec;
}

/// A BasisSpec restricted to an explicit set of multi-indices (e.g. the two
/// linear terms of the harmonic oscillator without the constant).
inline BasisSpec subset_basis(const BasisSpec& spec, const std::vector<Index>& keep) {
  BasisSpec out;
  out.dim = spec.dim;
  out.degree = spec.degree;
  for (Index k : keep) out.multi_indices.push_back(spec.multi_indices.at(static_cast<size_t>(k)));
  return out;
}

inline double eval_monomial(const MultiIndex& alpha, const Eigen::Ref<const Vector>& x) {
  double v = 1.0;
  for (size_t i = 0; i < alpha.size(); ++i)
    if (alpha[i] > 0) v *= pow_int(x(static_cast<Index>(i)), alpha[i]);
  return v;
}

/// Φ(X): m×n matrix of basis evaluations along the rows of `states`.
inline Matrix eval_basis(const BasisSpec& spec, const Matrix& states) {
  if (states.cols() != spec.dim) throw std::invalid_argument("eval_basis: state dimension mismatch");
  const Index m = states.rows();
  const Index n = spec.size();
  Matrix Phi(m, n);
  for (Index j = 0; j < m; ++j) {
    const Vector x = states.row(j).transpose();
    for (Index k = 0; k < n; ++k)
      Phi(j, k) = eval_monomial(spec.multi_indices[static_cast<size_t>(k)], x);
  }
  return Phi;
}

/// Gradients of every basis function at one point: n×d matrix with
/// entry (k, i) = ∂φ_k/∂x_i.
inline Matrix eval_basis_gradient(const BasisSpec& spec, const Eigen::Ref<const Vector>& x) {
  const Index n = spec.size();
  const Index d = spec.dim;
  Matrix G = Matrix::Zero(n, d);
  for (Index k = 0; k < n; ++k) {
    const MultiIndex& alpha = spec.multi_indices[static_cast<size_t>(k)];
    for (Index i = 0; i < d; ++i) {
      const int ai = alpha[static_cast<size_t>(i)];
      if (ai == 0) continue;
      double v = ai * pow_int(x(i), ai - 1);
      for (Index j = 0; j < d; ++j) {
        if (j == i) continue;
        const int aj = alpha[static_cast<size_t>(j)];
        if (aj > 0) v *= pow_int(x(j), aj);
      }
      G(k, i) = v;
    }
  }
  return G;
}

/// Coefficient matrix C ∈ R^{n×d} with an optional sparsity mask
/// (true = free entry). Masked-out entries are held at exactly zero.
/// The vector view is the row-major vectorization of C.
struct Coefficients {
  Matrix matrix;             // n×d
  std::optional<Mask> mask;  // true = free

  Coefficients() = default;
  explicit Coefficients(Matrix C, std::optional<Mask> msk = std::nullopt)
      : matrix(std::move(C)), mask(std::move(msk)) {
    enforce_mask();
  }

  Index n() const { return matrix.rows(); }
  Index d() const { return matrix.cols(); }

  void enforce_mask() {
    if (!mask) return;
    if (mask->rows() != matrix.rows() || mask->cols() != matrix.cols())
      throw std::invalid_argument("Coefficients: mask shape mismatch");
    matrix = mask->select(matrix.array(), 0.0).matrix();
  }

  bool is_free(Index k, Index s) const { return !mask || (*mask)(k, s); }

  Index free_count() const {
    if (!mask) return matrix.size();
    return static_cast<Index>(mask->count());
  }

  /// Row-major positions (k, s) of the free entries, in c-vector order.
  std::vector<std::pair<Index, Index>> free_entries() const {
    std::vector<std::pair<Index, Index>> out;
    out.reserve(static_cast<size_t>(free_count()));
    for (Index k = 0; k < matrix.rows(); ++k)
      for (Index s = 0; s < matrix.cols(); ++s)
        if (is_free(k, s)) out.emplace_back(k, s);
    return out;
  }

  Vector vectorized() const { return vectorize(matrix); }

  Vector free_values() const {
    Vector v(free_count());
    Index i = 0;
    for (const auto& [k, s] : free_entries()) v(i++) = matrix(k, s);
    return v;
  }

  void set_free_values(const Vector& v) {
    const auto entries = free_entries();
    if (v.size() != static_cast<Index>(entries.size()))
      throw std::invalid_argument("Coefficients::set_free_values size mismatch");
    matrix.setZero();
    Index i = 0;
    for (const auto& [k, s] : entries) matrix(k, s) = v(i++);
  }

  static Coefficients from_vector(const Vector& c, Index n, Index d,
                                  std::optional<Mask> msk = std::nullopt) {
    Coefficients out(devectorize(c, n, d), std::move(msk));
    return out;
  }
};

/// ∇_{z⃗}[Φ⃗(z⃗)c⃗]: block diagonal with m blocks F(z_j; C) where
/// F(z, c⃗) = Σ_k c_k ∇φ_k(z)ᵀ, i.e. F(i,j) = Σ_k C(k,i) ∂φ_k/∂z_j.
inline BlockDiagMatrix grad_basis_contract(const BasisSpec& spec, const Vector& zvec,
                                           const Vector& cvec) {
  const Index d = spec.dim;
  const Index n = spec.size();
  if (zvec.size() % d != 0) throw std::invalid_argument("grad_basis_contract: z size mismatch");
  if (cvec.size() != n * d) throw std::invalid_argument("grad_basis_contract: c size mismatch");
  const Index m = zvec.size() / d;
  const Matrix C = devectorize(cvec, n, d);
  std::vector<Matrix> blocks;
  blocks.reserve(static_cast<size_t>(m));
  for (Index j = 0; j < m; ++j) {
    const Vector z = zvec.segment(j * d, d);
    const Matrix G = eval_basis_gradient(spec, z);  // n×d
    blocks.push_back(C.transpose() * G);            // d×d: F(i,l) = Σ_k C(k,i) G(k,l)
  }
  return BlockDiagMatrix(std::move(blocks));
}

inline void to_json(nlohmann::json& j, const BasisSpec& spec) {
  j = nlohmann::json{{"dim", spec.dim}, {"degree", spec.degree}, {"multi_indices", spec.multi_indices}};
}

inline void from_json(const nlohmann::json& j, BasisSpec& spec) {
  j.at("dim").get_to(spec.dim);
  j.at("degree").get_to(spec.degree);
  j.at("multi_indices").get_to(spec.multi_indices);
}

}  // namespace sidds
