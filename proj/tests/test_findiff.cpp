#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "sidds/findiff.hpp"

using namespace sidds;

TEST_CASE("3-point matrix matches the explicit stencil") {
  const double delta = 0.1;
  const FinDiffMatrix fd = make_findiff(6, delta, 3);
  const double s = 1.0 / (2.0 * delta);

  Vector first(6), last(6);
  first << -3, 4, -1, 0, 0, 0;
  last << 0, 0, 0, 1, -4, 3;
  for (Index j = 0; j < 6; ++j) {
    CHECK(fd.D(0, j) == Catch::Approx(s * first(j)).margin(1e-14));
    CHECK(fd.D(5, j) == Catch::Approx(s * last(j)).margin(1e-14));
  }
  for (Index i = 1; i < 5; ++i) {
    CHECK(fd.D(i, i - 1) == Catch::Approx(-s).margin(1e-14));
    CHECK(fd.D(i, i) == Catch::Approx(0.0).margin(1e-14));
    CHECK(fd.D(i, i + 1) == Catch::Approx(s).margin(1e-14));
  }
}

TEST_CASE("rows sum to zero for every stencil width") {
  for (Index q : {3, 5, 7, 9, 11}) {
    const FinDiffMatrix fd = make_findiff(40, 0.05, q);
    const Vector ones = Vector::Ones(40);
    const Vector r = fd.apply(ones);
    CHECK(r.cwiseAbs().maxCoeff() < 1e-11);  // scaled by 1/δ
  }
}

TEST_CASE("3-point rule differentiates t^2 exactly") {
  const Index m = 30;
  const double delta = 0.02;
  const FinDiffMatrix fd = make_findiff(m, delta, 3);
  Vector t(m), t2(m);
  for (Index j = 0; j < m; ++j) {
    t(j) = delta * static_cast<double>(j);
    t2(j) = t(j) * t(j);
  }
  const Vector der = fd.apply(t2);
  for (Index j = 0; j < m; ++j) CHECK(der(j) == Catch::Approx(2.0 * t(j)).margin(1e-11));
}

TEST_CASE("polynomial exactness up to degree q-1 at all nodes") {
  const Index m = 100;
  const double delta = 0.01;
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (Index q : {3, 5, 7, 9, 11}) {
    const FinDiffMatrix fd = make_findiff(m, delta, q);
    std::vector<double> coef(static_cast<size_t>(q));
    for (auto& c : coef) c = dist(rng);
    Vector p(m), dp(m);
    for (Index j = 0; j < m; ++j) {
      const double t = delta * static_cast<double>(j);
      double v = 0, dv = 0;
      for (Index k = 0; k < q; ++k) {
        v += coef[static_cast<size_t>(k)] * std::pow(t, static_cast<double>(k));
        if (k > 0) dv += coef[static_cast<size_t>(k)] * k * std::pow(t, static_cast<double>(k - 1));
      }
      p(j) = v;
      dp(j) = dv;
    }
    const Vector err = fd.apply(p) - dp;
    CHECK(err.cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("interior convergence order is q-1 on sin(t)") {
  const double T = 2.0;
  for (Index q : {3, 5, 7}) {
    std::vector<double> deltas = {0.1, 0.05, 0.025};
    std::vector<double> errs;
    for (double delta : deltas) {
      const Index m = static_cast<Index>(std::round(T / delta)) + 1;
      const FinDiffMatrix fd = make_findiff(m, delta, q);
      Vector f(m), df(m);
      for (Index j = 0; j < m; ++j) {
        const double t = delta * static_cast<double>(j);
        f(j) = std::sin(t);
        df(j) = std::cos(t);
      }
      const Vector err = fd.apply(f) - df;
      const Index w = (q - 1) / 2;
      double emax = 0;
      for (Index j = w; j < m - w; ++j) emax = std::max(emax, std::abs(err(j)));
      errs.push_back(emax);
    }
    // least-squares slope of log(err) against log(delta)
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < deltas.size(); ++i) {
      const double x = std::log(deltas[i]);
      const double y = std::log(errs[i]);
      sx += x;
      sy += y;
      sxx += x * x;
      sxy += x * y;
    }
    const double n = static_cast<double>(deltas.size());
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(std::abs(slope - static_cast<double>(q - 1)) < 0.3);
  }
}

TEST_CASE("second difference matrix") {
  const Index m = 25;
  const double delta = 0.05;
  const BandedMatrix D2 = make_second_diff(m, delta);

  const Vector ones = Vector::Ones(m);
  CHECK(D2.apply(ones).cwiseAbs().maxCoeff() < 1e-11);

  Vector t(m), t2(m);
  for (Index j = 0; j < m; ++j) {
    t(j) = delta * static_cast<double>(j);
    t2(j) = t(j) * t(j);
  }
  CHECK(D2.apply(t).cwiseAbs().maxCoeff() < 1e-10);

  const Vector dd = D2.apply(t2);
  for (Index j = 1; j < m - 1; ++j) CHECK(dd(j) == Catch::Approx(2.0).margin(1e-9));

  CHECK_THROWS_AS(make_second_diff(2, delta), std::invalid_argument);
}

TEST_CASE("make_findiff rejects bad arguments") {
  CHECK_THROWS_AS(make_findiff(4, 0.1, 5), std::invalid_argument);
  CHECK_THROWS_AS(make_findiff(10, 0.1, 4), std::invalid_argument);
  CHECK_THROWS_AS(make_findiff(10, -0.1, 3), std::invalid_argument);
}

TEST_CASE("kron lift agrees with the dense Kronecker product") {
  const Index m = 10, d = 3;
  const FinDiffMatrix fd = make_findiff(m, 0.1, 5);
  const BandedMatrix Dv = kron_lift(fd, d);

  // dense Kronecker oracle
  const Matrix Dd = fd.D.to_dense();
  Matrix K = Matrix::Zero(m * d, m * d);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < m; ++j)
      for (Index r = 0; r < d; ++r) K(i * d + r, j * d + r) = Dd(i, j);

  std::mt19937 rng(2);
  std::normal_distribution<double> dist;
  Matrix X(m, d);
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < d; ++j) X(i, j) = dist(rng);

  const Vector lhs = Dv.apply(vectorize(X));
  const Vector oracle = K * vectorize(X);
  const Vector rhs = vectorize(fd.apply(X));
  CHECK((lhs - oracle).cwiseAbs().maxCoeff() == 0.0);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() == 0.0);

  // d = 1 is D itself
  const BandedMatrix D1 = kron_lift(fd, 1);
  CHECK((D1.to_dense() - Dd).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lifted bandwidth is d(q-1)") {
  const FinDiffMatrix fd = make_findiff(8, 0.1, 3);
  const BandedMatrix Dv = kron_lift(fd, 2);
  const SparseMatrix S = Dv.to_sparse();
  Index bw = 0;
  for (Index outer = 0; outer < S.outerSize(); ++outer)
    for (SparseMatrix::InnerIterator it(S, outer); it; ++it)
      if (it.value() != 0.0) bw = std::max<Index>(bw, std::abs(it.row() - it.col()));
  CHECK(bw == 4);
}
