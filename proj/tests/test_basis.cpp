#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>

#include "sidds/basis.hpp"
#include "sidds/lsoi.hpp"

using namespace sidds;

namespace {

long binomial(int n, int k) {
  long r = 1;
  for (int i = 0; i < k; ++i) r = r * (n - i) / (i + 1);
  return r;
}

// independent oracle: every α ∈ {0..p}^d with |α| ≤ p, as a set
std::set<std::vector<int>> brute_force_indices(int d, int p) {
  std::set<std::vector<int>> out;
  std::vector<int> alpha(static_cast<size_t>(d), 0);
  while (true) {
    int total = 0;
    for (int a : alpha) total += a;
    if (total <= p) out.insert(alpha);
    int i = 0;
    for (; i < d; ++i) {
      if (alpha[static_cast<size_t>(i)] < p) {
        ++alpha[static_cast<size_t>(i)];
        break;
      }
      alpha[static_cast<size_t>(i)] = 0;
    }
    if (i == d) break;
  }
  return out;
}

double naive_monomial(const MultiIndex& alpha, const Vector& x) {
  double v = 1.0;
  for (size_t i = 0; i < alpha.size(); ++i) v *= std::pow(x(static_cast<Index>(i)), alpha[i]);
  return v;
}

}  // namespace

TEST_CASE("enumerate_basis matches the degree-2 listing in two dimensions") {
  const BasisSpec spec = enumerate_basis(2, 2);
  REQUIRE(spec.size() == 6);
  const std::vector<MultiIndex> expected = {{0, 0}, {1, 0}, {0, 1}, {2, 0}, {1, 1}, {0, 2}};
  CHECK(spec.multi_indices == expected);
}

TEST_CASE("enumerate_basis constant-only and brute-force counts") {
  CHECK(enumerate_basis(3, 0).size() == 1);
  CHECK(enumerate_basis(3, 0).multi_indices[0] == MultiIndex{0, 0, 0});

  const BasisSpec spec = enumerate_basis(3, 2);
  REQUIRE(spec.size() == 10);
  const auto oracle = brute_force_indices(3, 2);
  REQUIRE(oracle.size() == 10);
  std::set<std::vector<int>> got(spec.multi_indices.begin(), spec.multi_indices.end());
  CHECK(got == oracle);
}

TEST_CASE("enumerate_basis rejects dim = 0") {
  CHECK_THROWS_AS(enumerate_basis(0, 2), std::invalid_argument);
}

TEST_CASE("basis count equals binomial(d+p, p)") {
  for (int d = 1; d <= 6; ++d)
    for (int p = 0; p <= 5; ++p)
      CHECK(enumerate_basis(d, p).size() == binomial(d + p, p));
}

TEST_CASE("eval_basis on a single state") {
  const BasisSpec spec = enumerate_basis(2, 2);
  Matrix state(1, 2);
  state << 2.0, 3.0;
  const Matrix Phi = eval_basis(spec, state);
  Vector expected(6);
  expected << 1, 2, 3, 4, 6, 9;
  CHECK((Phi.row(0).transpose() - expected).cwiseAbs().maxCoeff() == 0.0);

  const Matrix Phi0 = eval_basis(spec, Matrix::Zero(1, 2));
  CHECK(Phi0(0, 0) == 1.0);
  CHECK(Phi0.row(0).tail(5).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("eval_basis matches the naive product oracle") {
  std::mt19937 rng(17);
  std::normal_distribution<double> dist;
  const BasisSpec spec = enumerate_basis(3, 4);
  Matrix states(20, 3);
  for (Index j = 0; j < states.rows(); ++j)
    for (Index i = 0; i < 3; ++i) states(j, i) = dist(rng);
  const Matrix Phi = eval_basis(spec, states);
  for (Index j = 0; j < states.rows(); ++j)
    for (Index k = 0; k < spec.size(); ++k) {
      const double ref = naive_monomial(spec.multi_indices[static_cast<size_t>(k)],
                                        states.row(j).transpose());
      CHECK(Phi(j, k) == Catch::Approx(ref).margin(1e-14).epsilon(1e-13));
    }
  CHECK_THROWS_AS(eval_basis(spec, Matrix::Zero(3, 2)), std::invalid_argument);
}

TEST_CASE("grad_basis_contract on a linear dictionary is constant in z") {
  // dictionary {x1, x2, x3}
  BasisSpec spec = enumerate_basis(3, 1);
  spec = subset_basis(spec, {1, 2, 3});
  REQUIRE(spec.size() == 3);

  std::mt19937 rng(3);
  std::normal_distribution<double> dist;
  Matrix C(3, 3);
  for (Index k = 0; k < 3; ++k)
    for (Index s = 0; s < 3; ++s) C(k, s) = dist(rng);
  const Vector cvec = vectorize(C);

  Vector z1(9), z2(9);
  for (Index i = 0; i < 9; ++i) {
    z1(i) = dist(rng);
    z2(i) = dist(rng);
  }
  const BlockDiagMatrix G1 = grad_basis_contract(spec, z1, cvec);
  const BlockDiagMatrix G2 = grad_basis_contract(spec, z2, cvec);
  for (Index b = 0; b < 3; ++b) {
    CHECK((G1.block(b) - G2.block(b)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((G1.block(b) - G1.block(0)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("grad_basis_contract matches finite differences of z ↦ Φ⃗(z⃗)c⃗") {
  std::mt19937 rng(11);
  std::normal_distribution<double> dist;
  const BasisSpec spec = enumerate_basis(2, 3);
  const Index d = 2, m = 7, n = spec.size();

  for (int trial = 0; trial < 100; ++trial) {
    Vector z(d * m), c(d * n);
    for (Index i = 0; i < z.size(); ++i) z(i) = dist(rng);
    for (Index i = 0; i < c.size(); ++i) c(i) = dist(rng);

    auto phi_c = [&](const Vector& zz) {
      const Matrix Z = devectorize(zz, m, d);
      const Matrix C = devectorize(c, n, d);
      return vectorize(eval_basis(spec, Z) * C);
    };

    const Matrix G = grad_basis_contract(spec, z, c).to_sparse().toDense();
    Matrix Gfd(d * m, d * m);
    for (Index r = 0; r < d * m; ++r) {
      const double h = 1e-6 * (1.0 + std::abs(z(r)));
      Vector zp = z, zm = z;
      zp(r) += h;
      zm(r) -= h;
      Gfd.col(r) = (phi_c(zp) - phi_c(zm)) / (2 * h);
    }
    const double rel = (G - Gfd).norm() / (1.0 + Gfd.norm());
    CHECK(rel < 1e-6);
  }

  // c⃗ = 0 gives the zero matrix
  const BlockDiagMatrix Z0 = grad_basis_contract(spec, Vector::Ones(d * m), Vector::Zero(d * n));
  for (Index b = 0; b < m; ++b) CHECK(Z0.block(b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("Kronecker identity: Φ⃗(z⃗)c⃗ = vectorize(Φ(Z)C)") {
  std::mt19937 rng(23);
  std::normal_distribution<double> dist;
  const BasisSpec spec = enumerate_basis(3, 2);
  const Index d = 3, m = 9, n = spec.size();
  for (int trial = 0; trial < 5; ++trial) {
    Matrix Z(m, d), C(n, d);
    for (Index j = 0; j < m; ++j)
      for (Index i = 0; i < d; ++i) Z(j, i) = dist(rng);
    for (Index k = 0; k < n; ++k)
      for (Index i = 0; i < d; ++i) C(k, i) = dist(rng);

    const Matrix PhiVec = build_phi_vec(spec, Z, all_entries(n, d));
    const Vector lhs = PhiVec * vectorize(C);
    const Vector rhs = vectorize(eval_basis(spec, Z) * C);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12 * (1.0 + rhs.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("Coefficients vector view round-trips and respects the mask") {
  Matrix C(3, 2);
  C << 1.5, -2.0, 0.25, 4.0, -1.0, 0.125;
  Coefficients coeffs(C);
  const Vector v = coeffs.vectorized();
  CHECK(devectorize(v, 3, 2) == C);

  Mask mask(3, 2);
  mask << true, false, false, true, true, false;
  Coefficients masked(C, mask);
  CHECK(masked.matrix(0, 1) == 0.0);
  CHECK(masked.matrix(1, 0) == 0.0);
  CHECK(masked.matrix(2, 1) == 0.0);
  CHECK(masked.free_count() == 3);
  const Vector free = masked.free_values();
  REQUIRE(free.size() == 3);
  CHECK(free(0) == 1.5);
  CHECK(free(1) == 4.0);
  CHECK(free(2) == -1.0);

  Coefficients rebuilt = masked;
  rebuilt.set_free_values(free);
  CHECK(rebuilt.matrix == masked.matrix);
}

TEST_CASE("BasisSpec JSON serialization round-trips") {
  const BasisSpec spec = enumerate_basis(2, 2);
  nlohmann::json j = spec;
  CHECK(j.at("dim") == 2);
  CHECK(j.at("degree") == 2);
  const BasisSpec back = j.get<BasisSpec>();
  CHECK(back.multi_indices == spec.multi_indices);
}
