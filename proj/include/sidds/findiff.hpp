#pragma once

#include <stdexcept>
#include <vector>

#include "sidds/linalg.hpp"

namespace sidds {

/// Fornberg weight generation: weights w_j with
/// f^(order)(x0) ≈ Σ_j w_j f(grid_j), for arbitrarily spaced grids.
inline Vector fornberg_weights(double x0, const std::vector<double>& grid, int order) {
  const int nd = static_cast<int>(grid.size()) - 1;
  if (nd < order) throw std::invalid_argument("fornberg_weights: need more than `order` points");
  const int mmax = order;
  // C(j, k): weight of grid_j for the k-th derivative.
  Matrix C = Matrix::Zero(nd + 1, mmax + 1);
  C(0, 0) = 1.0;
  double c1 = 1.0;
  double c4 = grid[0] - x0;
  for (int i = 1; i <= nd; ++i) {
    const int mn = std::min(i, mmax);
    double c2 = 1.0;
    double c5 = c4;
    c4 = grid[static_cast<size_t>(i)] - x0;
    for (int j = 0; j < i; ++j) {
      const double c3 = grid[static_cast<size_t>(i)] - grid[static_cast<size_t>(j)];
      c2 *= c3;
      if (j == i - 1) {
        for (int k = mn; k >= 1; --k)
          C(i, k) = c1 * (k * C(i - 1, k - 1) - c5 * C(i - 1, k)) / c2;
        C(i, 0) = -c1 * c5 * C(i - 1, 0) / c2;
      }
      for (int k = mn; k >= 1; --k) C(j, k) = (c4 * C(j, k) - k * C(j, k - 1)) / c3;
      C(j, 0) = c4 * C(j, 0) / c3;
    }
    c1 = c2;
  }
  return C.col(order);
}

/// Differentiation matrix D: q-point central rule in the interior,
/// order q-1 shifted stencils on the first and last (q-1)/2 rows.
struct FinDiffMatrix {
  Index m = 0;
  double delta = 0.0;
  Index points = 0;
  BandedMatrix D;

  Vector apply(const Vector& x) const { return D.apply(x); }
  Matrix apply(const Matrix& X) const { return D.apply(X); }
};

inline FinDiffMatrix make_findiff(Index m, double delta, Index points) {
  if (points < 3 || points % 2 == 0) throw std::invalid_argument("make_findiff: points must be odd and >= 3");
  if (m < points) throw std::invalid_argument("make_findiff: m must be >= points");
  if (!(delta > 0)) throw std::invalid_argument("make_findiff: delta must be positive");
  const Index q = points;
  const Index w = (q - 1) / 2;

  std::vector<double> unit_grid(static_cast<size_t>(q));
  for (Index j = 0; j < q; ++j) unit_grid[static_cast<size_t>(j)] = static_cast<double>(j);

  FinDiffMatrix out;
  out.m = m;
  out.delta = delta;
  out.points = q;
  out.D = BandedMatrix(m, q - 1, q - 1);

  // Shifted stencils over the first q nodes, evaluated at node i.
  std::vector<Vector> left(static_cast<size_t>(w));
  for (Index i = 0; i < w; ++i)
    left[static_cast<size_t>(i)] = fornberg_weights(static_cast<double>(i), unit_grid, 1) / delta;
  const Vector central =
      fornberg_weights(static_cast<double>(w), unit_grid, 1) / delta;

  for (Index i = 0; i < m; ++i) {
    Index base;
    const Vector* weights;
    Vector right_weights;
    if (i < w) {
      base = 0;
      weights = &left[static_cast<size_t>(i)];
    } else if (i >= m - w) {
      base = m - q;
      right_weights = fornberg_weights(static_cast<double>(i - base), unit_grid, 1) / delta;
      weights = &right_weights;
    } else {
      base = i - w;
      weights = &central;
    }
    for (Index j = 0; j < q; ++j) out.D.set(i, base + j, (*weights)(j));
  }
  return out;
}

/// 3-point second-derivative matrix [1, -2, 1]/δ²; the first and last rows
/// reuse the nearest interior stencil.
inline BandedMatrix make_second_diff(Index m, double delta) {
  if (m < 3) throw std::invalid_argument("make_second_diff: m must be >= 3");
  if (!(delta > 0)) throw std::invalid_argument("make_second_diff: delta must be positive");
  BandedMatrix D2(m, 2, 2);
  const double s = 1.0 / (delta * delta);
  for (Index i = 0; i < m; ++i) {
    const Index c = std::min(std::max<Index>(i, 1), m - 2);
    D2.add(i, c - 1, s);
    D2.add(i, c, -2.0 * s);
    D2.add(i, c + 1, s);
  }
  return D2;
}

/// D ⊗ I_d.
inline BandedMatrix kron_lift(const FinDiffMatrix& fd, Index d) {
  return fd.D.kron_identity(d);
}

}  // namespace sidds
