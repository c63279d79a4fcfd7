#pragma once

#include <boost/numeric/odeint.hpp>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sidds/basis.hpp"
#include "sidds/linalg.hpp"

namespace sidds {

struct IntegrationError : std::runtime_error {
  double time;
  IntegrationError(const std::string& what, double t)
      : std::runtime_error(what + " at t=" + std::to_string(t)), time(t) {}
};

/// f(x; C) = Σ_k c_k φ_k(x) together with its state Jacobian
/// F(x, c⃗) = Σ_k c_k ∇φ_k(x)ᵀ.
struct VectorField {
  BasisSpec spec;
  Coefficients coeffs;

  Index dim() const { return spec.dim; }

  Vector eval(const Eigen::Ref<const Vector>& x) const {
    const Index n = spec.size();
    Vector phi(n);
    for (Index k = 0; k < n; ++k)
      phi(k) = eval_monomial(spec.multi_indices[static_cast<size_t>(k)], x);
    return coeffs.matrix.transpose() * phi;
  }

  Matrix jacobian(const Eigen::Ref<const Vector>& x) const {
    return coeffs.matrix.transpose() * eval_basis_gradient(spec, x);
  }

  /// ∇_{c⃗}f restricted to the free entries of the coefficient mask:
  /// column for free entry (k, s) is φ_k(x)·e_s.
  Matrix coeff_jacobian(const Eigen::Ref<const Vector>& x) const {
    const auto entries = coeffs.free_entries();
    Matrix J = Matrix::Zero(spec.dim, static_cast<Index>(entries.size()));
    Index col = 0;
    for (const auto& [k, s] : entries) {
      J(s, col) = eval_monomial(spec.multi_indices[static_cast<size_t>(k)], x);
      ++col;
    }
    return J;
  }
};

/// Uniformly sampled state history: states(j, :) ≈ x(jδ).
struct Trajectory {
  double delta = 0.0;
  Matrix states;  // m×d
  Vector origin;

  Index samples() const { return states.rows(); }
  Index dim() const { return states.cols(); }
};

/// Sensitivity snapshots V(jδ) = ∇_{c⃗}E^{jδ}, W(jδ) = ∇_{z₁}E^{jδ},
/// j = 0,…,m−1, integrated jointly with the state.
struct SensitivityBundle {
  Matrix states;              // m×d
  std::vector<Matrix> V;      // each d×n_c
  std::vector<Matrix> W;      // each d×d
};

namespace detail {

constexpr double kDivergenceBound = 1e6;

template <typename System>
inline void integrate_nodes(System&& sys, Vector& state, Index m, double delta, double rtol,
                            double atol, const std::function<void(Index, const Vector&)>& record) {
  namespace odeint = boost::numeric::odeint;
  using state_type = std::vector<double>;
  using error_stepper = odeint::runge_kutta_fehlberg78<state_type>;

  state_type u(state.data(), state.data() + state.size());
  auto system = [&sys](const state_type& x, state_type& dxdt, double t) {
    Eigen::Map<const Vector> xv(x.data(), static_cast<Index>(x.size()));
    Eigen::Map<Vector> dv(dxdt.data(), static_cast<Index>(dxdt.size()));
    sys(xv, dv, t);
  };

  auto check = [&](const state_type& x, double t) {
    for (double v : x) {
      if (!std::isfinite(v)) throw IntegrationError("non-finite state", t);
      if (std::abs(v) > kDivergenceBound) throw IntegrationError("state diverged", t);
    }
  };

  std::vector<double> times(static_cast<size_t>(m));
  for (Index j = 0; j < m; ++j) times[static_cast<size_t>(j)] = delta * static_cast<double>(j);

  Index node = 0;
  auto observer = [&](const state_type& x, double t) {
    check(x, t);
    Eigen::Map<const Vector> xv(x.data(), static_cast<Index>(x.size()));
    record(node, Vector(xv));
    ++node;
  };

  auto stepper = odeint::make_controlled<error_stepper>(atol, rtol);
  try {
    odeint::integrate_times(stepper, system, u, times.begin(), times.end(), delta, observer);
  } catch (const IntegrationError&) {
    throw;
  } catch (const std::exception& e) {
    const double t = node > 0 ? times[static_cast<size_t>(node - 1)] : 0.0;
    throw IntegrationError(std::string("integration failed (") + e.what() + ")", t);
  }
}

}  // namespace detail

inline Trajectory integrate_trajectory(const VectorField& field, const Vector& x0, Index m,
                                       double delta, double rtol = 1e-10, double atol = 1e-12) {
  if (x0.size() != field.dim()) throw std::invalid_argument("integrate_trajectory: x0 dimension mismatch");
  if (m < 1) throw std::invalid_argument("integrate_trajectory: m must be >= 1");
  if (!(rtol > 0) || !(atol > 0)) throw std::invalid_argument("integrate_trajectory: tolerances must be positive");

  Trajectory traj;
  traj.delta = delta;
  traj.origin = x0;
  traj.states.resize(m, field.dim());

  Vector state = x0;
  auto sys = [&field](const Eigen::Ref<const Vector>& x, Eigen::Ref<Vector> dxdt, double) {
    dxdt = field.eval(x);
  };
  detail::integrate_nodes(sys, state, m, delta, rtol, atol,
                          [&](Index j, const Vector& u) { traj.states.row(j) = u.transpose(); });
  return traj;
}

/// Integrates the coupled system
///   ż = f(z),  V̇ = F(z)V + ∇_{c⃗}f(z),  Ẇ = F(z)W,
/// with V(0) = 0 and W(0) = I, as one augmented ODE.
inline SensitivityBundle integrate_sensitivities(const VectorField& field, const Vector& x0,
                                                 Index m, double delta, double rtol = 1e-10,
                                                 double atol = 1e-12) {
  const Index d = field.dim();
  if (x0.size() != d) throw std::invalid_argument("integrate_sensitivities: x0 dimension mismatch");
  const Index nc = field.coeffs.free_count();
  const Index total = d + d * nc + d * d;

  Vector state = Vector::Zero(total);
  state.head(d) = x0;
  // V(0) = 0 already; W(0) = I.
  Eigen::Map<Matrix>(state.data() + d + d * nc, d, d) = Matrix::Identity(d, d);

  SensitivityBundle bundle;
  bundle.states.resize(m, d);
  bundle.V.resize(static_cast<size_t>(m));
  bundle.W.resize(static_cast<size_t>(m));

  auto sys = [&](const Eigen::Ref<const Vector>& u, Eigen::Ref<Vector> dudt, double) {
    const Vector z = u.head(d);
    const Matrix F = field.jacobian(z);
    Eigen::Map<const Matrix> V(u.data() + d, d, nc);
    Eigen::Map<const Matrix> W(u.data() + d + d * nc, d, d);
    dudt.head(d) = field.eval(z);
    Eigen::Map<Matrix>(dudt.data() + d, d, nc) = F * V + field.coeff_jacobian(z);
    Eigen::Map<Matrix>(dudt.data() + d + d * nc, d, d) = F * W;
  };

  detail::integrate_nodes(sys, state, m, delta, rtol, atol, [&](Index j, const Vector& u) {
    bundle.states.row(j) = u.head(d).transpose();
    bundle.V[static_cast<size_t>(j)] = Eigen::Map<const Matrix>(u.data() + d, d, nc);
    bundle.W[static_cast<size_t>(j)] = Eigen::Map<const Matrix>(u.data() + d + d * nc, d, d);
  });
  return bundle;
}

}  // namespace sidds
