#pragma once

#include <cmath>
#include <functional>
#include <limits>

#include "sidds/linalg.hpp"

namespace sidds {

using LinearOp = std::function<Vector(const Vector&)>;

struct MinresResult {
  Index iterations = 0;
  double rel_residual = 0.0;
  bool converged = false;
};

/// Preconditioned MINRES for symmetric (possibly indefinite) A with SPD
/// preconditioner P; solves A x = b monitoring the P^{-1}-norm residual.
/// `on_iterate`, when set, receives the current solution after every
/// iteration.
inline MinresResult minres(const LinearOp& apply_A, const LinearOp& apply_Pinv, const Vector& b,
                           Vector& x, double rtol, Index max_iter,
                           const std::function<void(Index, const Vector&)>& on_iterate = nullptr) {
  const Index n = b.size();
  x = Vector::Zero(n);
  MinresResult result;

  Vector r1 = b;
  Vector y = apply_Pinv(r1);
  double beta1 = r1.dot(y);
  if (beta1 < 0) throw std::runtime_error("minres: preconditioner is not positive definite");
  if (beta1 == 0.0) {
    result.converged = true;
    return result;
  }
  beta1 = std::sqrt(beta1);

  double oldb = 0.0, beta = beta1, dbar = 0.0, epsln = 0.0;
  double phibar = beta1, cs = -1.0, sn = 0.0;
  Vector w = Vector::Zero(n), w2 = Vector::Zero(n);
  Vector r2 = r1;

  for (Index itn = 1; itn <= max_iter; ++itn) {
    const double s = 1.0 / beta;
    Vector v = s * y;
    y = apply_A(v);
    if (itn >= 2) y -= (beta / oldb) * r1;
    const double alfa = v.dot(y);
    y -= (alfa / beta) * r2;
    r1 = r2;
    r2 = y;
    y = apply_Pinv(r2);
    oldb = beta;
    const double betasq = r2.dot(y);
    if (betasq < 0) throw std::runtime_error("minres: preconditioner is not positive definite");
    beta = std::sqrt(betasq);

    const double oldeps = epsln;
    const double delta = cs * dbar + sn * alfa;
    const double gbar = sn * dbar - cs * alfa;
    epsln = sn * beta;
    dbar = -cs * beta;

    double gamma = std::sqrt(gbar * gbar + beta * beta);
    gamma = std::max(gamma, std::numeric_limits<double>::epsilon());
    cs = gbar / gamma;
    sn = beta / gamma;
    const double phi = cs * phibar;
    phibar = sn * phibar;

    const Vector w1 = w2;
    w2 = w;
    w = (v - oldeps * w1 - delta * w2) / gamma;
    x += phi * w;

    result.iterations = itn;
    result.rel_residual = phibar / beta1;
    if (on_iterate) on_iterate(itn, x);
    if (result.rel_residual <= rtol) {
      result.converged = true;
      break;
    }
    if (beta <= std::numeric_limits<double>::epsilon() * beta1) {
      result.converged = true;
      break;
    }
  }
  return result;
}

}  // namespace sidds
