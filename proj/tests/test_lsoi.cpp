#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "sidds/harness.hpp"
#include "sidds/lsoi.hpp"

using namespace sidds;

TEST_CASE("noise-free SHO recovery is limited only by the stencil bias") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 2000;
  const double delta = 0.01;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const FinDiffMatrix D = make_findiff(m, delta, 3);
  const LsoiResult r = lsoi_solve(truth.states, D, sho.spec);
  CHECK_FALSE(r.rank_deficient);
  CHECK((r.coeffs.matrix - sho.truth.matrix).cwiseAbs().maxCoeff() < 2e-4);
}

TEST_CASE("data satisfying the discrete dynamics exactly is recovered to machine precision") {
  // ramp data: D differentiates affine samples exactly, so DY = 1·c0 holds
  const Index m = 60;
  const double delta = 0.05;
  const double c0 = 0.8125;
  Matrix Y(m, 1);
  for (Index j = 0; j < m; ++j) Y(j, 0) = 0.25 + c0 * delta * static_cast<double>(j);
  const FinDiffMatrix D = make_findiff(m, delta, 3);

  const BasisSpec constant = enumerate_basis(1, 0);
  const LsoiResult r = lsoi_solve(Y, D, constant);
  CHECK(std::abs(r.coeffs.matrix(0, 0) - c0) < 1e-12);

  // adding the linear column keeps the consistent solution
  const BasisSpec affine = enumerate_basis(1, 1);
  const LsoiResult r2 = lsoi_solve(Y, D, affine);
  const Vector resid = D.apply(Y).col(0) -
                       eval_basis(affine, Y) * r2.coeffs.matrix.col(0);
  CHECK(resid.norm() < 1e-11);
}

TEST_CASE("fixed-sparsity LSOI at unit noise stays far from the truth") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 2000;
  const double delta = 0.01;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const FinDiffMatrix D = make_findiff(m, delta, 9);
  const NoiseModel model = NoiseModel::make_iid(1.0, 2);
  const Mask mask = sho.sparsity_mask();

  std::vector<double> errs;
  for (int seed = 0; seed < 21; ++seed) {
    const Vector y = vectorize(truth.states) + sample_noise(model, m, 2, 300 + seed);
    const LsoiResult r = lsoi_solve(devectorize(y, m, 2), D, sho.spec, mask);
    errs.push_back((r.coeffs.matrix - sho.truth.matrix).norm());
  }
  std::sort(errs.begin(), errs.end());
  CHECK(errs[10] > 1.0);
}

TEST_CASE("residual orthogonality of the least-squares solution") {
  std::mt19937 rng(5);
  std::normal_distribution<double> dist;
  const BasisSpec spec = enumerate_basis(2, 2);
  Matrix Y(80, 2);
  for (Index j = 0; j < Y.rows(); ++j)
    for (Index i = 0; i < 2; ++i) Y(j, i) = dist(rng);
  const FinDiffMatrix D = make_findiff(80, 0.02, 5);
  const LsoiResult r = lsoi_solve(Y, D, spec);
  const Matrix Phi = eval_basis(spec, Y);
  const Matrix R = D.apply(Y) - Phi * r.coeffs.matrix;
  const Matrix ortho = Phi.transpose() * R;
  CHECK(ortho.norm() / (1.0 + (Phi.transpose() * D.apply(Y)).norm()) < 1e-8);
}

TEST_CASE("weighted solve with the identity reproduces plain LSOI") {
  std::mt19937 rng(8);
  std::normal_distribution<double> dist;
  const BasisSpec spec = enumerate_basis(2, 2);
  const Index m = 40;
  Matrix Y(m, 2);
  for (Index j = 0; j < m; ++j)
    for (Index i = 0; i < 2; ++i) Y(j, i) = dist(rng);
  const FinDiffMatrix D = make_findiff(m, 0.05, 3);
  const LsoiResult plain = lsoi_solve(Y, D, spec);
  const LsoiResult weighted = weighted_lsoi_solve(Y, D, spec, Matrix::Identity(2 * m, 2 * m));
  CHECK((plain.coeffs.matrix - weighted.coeffs.matrix).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("whitened least squares attains the GLS covariance") {
  // linear-Gaussian synthetic problem min ‖Γ(y − Ac)‖ with Γ = Σ^{-1/2},
  // solved through the same orthogonal-decomposition route as the weighted
  // solver; empirical covariance vs (AᵀΣ⁻¹A)⁻¹.
  std::mt19937 rng(21);
  std::normal_distribution<double> dist;
  const Index n = 30, k = 3;
  Matrix A(n, k);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < k; ++j) A(i, j) = dist(rng);
  Matrix S = Matrix::Zero(n, n);
  for (Index i = 0; i < n; ++i) S(i, i) = 0.2 + 0.8 * (i % 5);
  for (Index i = 0; i + 1 < n; i += 2) {
    const double c = 0.3 * std::sqrt(S(i, i) * S(i + 1, i + 1));
    S(i, i + 1) = c;
    S(i + 1, i) = c;
  }
  const Eigen::SelfAdjointEigenSolver<Matrix> es(S);
  const Matrix Shalf = es.eigenvectors() * es.eigenvalues().cwiseSqrt().asDiagonal() *
                       es.eigenvectors().transpose();
  const Matrix Gamma = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                       es.eigenvectors().transpose();
  Vector ctrue(k);
  ctrue << 1.0, -0.5, 0.25;

  const Matrix GA = Gamma * A;
  Matrix sum2 = Matrix::Zero(k, k);
  Vector mean = Vector::Zero(k);
  const int trials = 10000;
  for (int t = 0; t < trials; ++t) {
    Vector g(n);
    for (Index i = 0; i < n; ++i) g(i) = dist(rng);
    const Vector y = A * ctrue + Shalf * g;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(GA);
    const Vector c = cod.solve(Gamma * y);
    mean += c;
    sum2 += c * c.transpose();
  }
  mean /= trials;
  const Matrix cov = (sum2 - trials * mean * mean.transpose()) / (trials - 1);
  const Matrix gls = (A.transpose() * Gamma * Gamma * A).inverse();
  CHECK((cov - gls).norm() / gls.norm() < 0.10);
}

TEST_CASE("weighted LSOI beats plain LSOI under correlated noise") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 200;
  const double delta = 0.01;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const FinDiffMatrix D = make_findiff(m, delta, 3);
  const NoiseModel model = NoiseModel::make_correlated(0.05, 0.8, 2);
  const Matrix Gamma = whitening_gamma(sho.spec, truth.states, sho.truth, D, model);

  std::vector<double> plain_errs, whitened_errs;
  for (int seed = 0; seed < 15; ++seed) {
    const Vector y = vectorize(truth.states) + sample_noise(model, m, 2, 900 + seed);
    const Matrix Y = devectorize(y, m, 2);
    plain_errs.push_back((lsoi_solve(Y, D, sho.spec).coeffs.matrix - sho.truth.matrix).norm());
    whitened_errs.push_back(
        (weighted_lsoi_solve(Y, D, sho.spec, Gamma).coeffs.matrix - sho.truth.matrix).norm());
  }
  std::sort(plain_errs.begin(), plain_errs.end());
  std::sort(whitened_errs.begin(), whitened_errs.end());
  CHECK(whitened_errs[7] <= plain_errs[7]);
}

TEST_CASE("pinv derivative reduces to the inverse derivative for square matrices") {
  std::mt19937 rng(31);
  std::normal_distribution<double> dist;
  Matrix A(4, 4), dA(4, 4);
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      A(i, j) = dist(rng);
      dA(i, j) = dist(rng);
    }
  A += 4.0 * Matrix::Identity(4, 4);  // well conditioned
  const Matrix expected = -A.inverse() * dA * A.inverse();
  CHECK((pinv_derivative(A, dA) - expected).norm() / expected.norm() < 1e-10);

  CHECK(pinv_derivative(A, Matrix::Zero(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("pinv derivative matches finite differences on a rectangular matrix") {
  std::mt19937 rng(37);
  std::normal_distribution<double> dist;
  Matrix A(8, 3), dA(8, 3);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 3; ++j) {
      A(i, j) = dist(rng);
      dA(i, j) = dist(rng);
    }
  const double h = 1e-6;
  const Matrix fd = (pinv(A + h * dA) - pinv(A - h * dA)) / (2 * h);
  CHECK((pinv_derivative(A, dA) - fd).norm() / (1.0 + fd.norm()) < 1e-5);
}

TEST_CASE("asymptotic covariance matches the fixed-sparsity Monte Carlo") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 2000;
  const double delta = 0.01;
  const double sigma = 1e-2;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const FinDiffMatrix D = make_findiff(m, delta, 3);
  const NoiseModel model = NoiseModel::make_iid(sigma, 2);
  const Mask mask = sho.sparsity_mask();
  Coefficients masked = sho.truth;
  masked.mask = mask;

  const LsoiAsymptotics asy = lsoi_asymptotics(sho.spec, truth.states, masked, D, model);

  const int trials = 2000;
  Matrix sum2 = Matrix::Zero(2, 2);
  Vector mean = Vector::Zero(2);
  for (int t = 0; t < trials; ++t) {
    const Vector y = vectorize(truth.states) + sample_noise(model, m, 2, 40 + t);
    const LsoiResult r = lsoi_solve(devectorize(y, m, 2), D, sho.spec, mask);
    Coefficients rc = r.coeffs;
    const Vector c = rc.free_values();
    mean += c;
    sum2 += c * c.transpose();
  }
  mean /= trials;
  const Matrix cov = (sum2 - trials * mean * mean.transpose()) / (trials - 1);
  CHECK((cov - asy.covariance).norm() / asy.covariance.norm() < 0.15);
}

TEST_CASE("larger stencils increase the LSOI asymptotic covariance") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 2000;
  const double delta = 0.01;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const NoiseModel model = NoiseModel::make_iid(1e-2, 2);
  Coefficients masked = sho.truth;
  masked.mask = sho.sparsity_mask();

  const double t3 =
      lsoi_asymptotics(sho.spec, truth.states, masked, make_findiff(m, delta, 3), model)
          .covariance.trace();
  const double t5 =
      lsoi_asymptotics(sho.spec, truth.states, masked, make_findiff(m, delta, 5), model)
          .covariance.trace();
  CHECK(t5 > t3);
}

TEST_CASE("zero noise zeroes the covariance but not the bias") {
  const TestProblem sho = make_test_problem("sho");
  const Index m = 400;
  const double delta = 0.01;
  const Trajectory& truth = cached_truth(sho, m, delta);
  const FinDiffMatrix D = make_findiff(m, delta, 3);
  Coefficients masked = sho.truth;
  masked.mask = sho.sparsity_mask();

  const LsoiAsymptotics zero =
      lsoi_asymptotics(sho.spec, truth.states, masked, D, NoiseModel::make_iid(0.0, 2));
  const LsoiAsymptotics unit =
      lsoi_asymptotics(sho.spec, truth.states, masked, D, NoiseModel::make_iid(1.0, 2));
  CHECK(zero.covariance.cwiseAbs().maxCoeff() == 0.0);
  CHECK((zero.bias - unit.bias).cwiseAbs().maxCoeff() == 0.0);
  CHECK(zero.bias.cwiseAbs().maxCoeff() > 0.0);

  // covariance symmetry and PSD
  CHECK((unit.covariance - unit.covariance.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::SelfAdjointEigenSolver<Matrix> es(unit.covariance);
  CHECK(es.eigenvalues().minCoeff() > -1e-12 * es.eigenvalues().maxCoeff());
}
