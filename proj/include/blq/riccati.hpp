/*
 Copyright 2026 The blq-turnpike Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/

#pragma once

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "blq/errors.hpp"
#include "blq/linalg.hpp"
#include "blq/numerics.hpp"
#include "blq/problem.hpp"

namespace blq {

/// Steady solutions of the two mutually inverse algebraic Riccati equations
///   P A + A^T P + Q - P B R^-1 B^T P - P C (N + P)^-1 C^T P = 0,
///   Sigma A^T + A Sigma + Sigma Q Sigma - B R^-1 B^T - C (I + Sigma N)^-1 Sigma C^T = 0,
/// with Sigma = P^-1.
struct ArePair {
  Matrix P;
  Matrix Sigma;
  double residP = 0.0;
  double residSigma = 0.0;
  double inverseGap = 0.0;
  int newtonIterations = 0;
  std::string initialGain;  // "zero" or "riccati-flow"
};

/// Residual matrix of the P-equation.
inline Matrix are_p_residual(const ProblemData& p, const Matrix& P) {
  const Matrix RinvBt = p.R.llt().solve(p.B.transpose());
  const Matrix NP = p.N + P;
  return P * p.A + p.A.transpose() * P + p.Q - P * p.B * RinvBt * P -
         P * p.C * NP.partialPivLu().solve(p.C.transpose() * P);
}

/// Residual matrix of the Sigma-equation.
inline Matrix are_sigma_residual(const ProblemData& p, const Matrix& S) {
  const Eigen::Index n = p.n;
  const Matrix BRB = p.B * p.R.llt().solve(p.B.transpose());
  const Matrix IS = Matrix::Identity(n, n) + S * p.N;
  return S * p.A.transpose() + p.A * S + S * p.Q * S - BRB -
         p.C * IS.partialPivLu().solve(S) * p.C.transpose();
}

/// Right-hand side of the forward Riccati flow in time-to-go s,
///   dS/ds = -S A^T - A S - S Q S + B R^-1 B^T + C (I + S N)^-1 S C^T,
/// whose solution from S(0) = 0 is S(s) = Sigma_T(T - s). `rcond` receives the
/// reciprocal condition estimate of I + S N.
class RiccatiFlow {
 public:
  explicit RiccatiFlow(const ProblemData& p)
      : p_(p), BRB_(p.B * p.R.llt().solve(p.B.transpose())), I_(Matrix::Identity(p.n, p.n)) {}

  Matrix operator()(const Matrix& S, double* rcond = nullptr) const {
    Eigen::PartialPivLU<Matrix> lu(I_ + S * p_.N);
    if (rcond) *rcond = lu.rcond();
    const Matrix KS = lu.solve(S);
    return symmetrized(-S * p_.A.transpose() - p_.A * S - S * p_.Q * S + BRB_ +
                       p_.C * KS * p_.C.transpose());
  }

  Matrix rk4_step(const Matrix& S, double h, double* rcond = nullptr) const {
    const Matrix k1 = (*this)(S, rcond);
    const Matrix k2 = (*this)(S + 0.5 * h * k1);
    const Matrix k3 = (*this)(S + 0.5 * h * k2);
    const Matrix k4 = (*this)(S + h * k3);
    return symmetrized(S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
  }

 private:
  const ProblemData& p_;
  Matrix BRB_;
  Matrix I_;
};

namespace detail {

inline void require_h2(const ProblemData& p) {
  if (lambda_min(p.Q) <= 0.0) throw ValidationError("Q", "not positive definite");
  if (lambda_min(p.N) <= 0.0) throw ValidationError("N", "not positive definite");
  if (lambda_min(p.R) <= 0.0) throw ValidationError("R", "not positive definite");
}

/// Optimal gain of the forward problem with inputs (u, z) for a given P.
inline Matrix feedback_gain(const ProblemData& p, const Matrix& P) {
  const Eigen::Index n = p.n, m = p.m;
  Matrix K(m + n, n);
  K.topRows(m) = -p.R.llt().solve(p.B.transpose() * P);
  K.bottomRows(n) = -(p.N + P).llt().solve(p.C.transpose() * P);
  return K;
}

/// Runs the forward Riccati flow from zero until it is stationary and returns
/// its limit. Throws if the flow blows up or stalls.
inline Matrix riccati_flow_limit(const ProblemData& p) {
  RiccatiFlow flow(p);
  Matrix S = Matrix::Zero(p.n, p.n);
  double h = 1e-3;
  double s = 0.0;
  for (long step = 0; step < 5'000'000; ++step) {
    const Matrix dS = flow(S);
    const double scale = std::max(1.0, S.norm());
    if (dS.norm() <= 1e-10 * scale) return S;
    if (scale > 1e12 || !S.allFinite())
      throw SolverError("no-stabilizing-solution",
                        "Riccati flow diverges at s = " + std::to_string(s));
    Matrix next = flow.rk4_step(S, h);
    if (!next.allFinite() || (next - S).norm() > 0.05 * scale) {
      h *= 0.5;
      if (h < 1e-14)
        throw SolverError("no-stabilizing-solution", "Riccati flow step underflow");
      continue;
    }
    S = std::move(next);
    s += h;
    h = std::min(1.2 * h, 0.1);
    if (s > 1e6) break;
  }
  throw SolverError("no-stabilizing-solution", "Riccati flow did not become stationary");
}

}  // namespace detail

/// Solves both AREs. Newton-Kleinman policy iteration on the forward form
/// with inputs v = (u, z), control matrix (B C) and diffusion matrix (0 I):
/// each step solves the generalized Lyapunov equation of the current
/// closed loop. The initial stabilizing gain is zero when [A, 0] is
/// mean-square stable, else the gain induced by the stationary Riccati flow.
/// Throws SolverError("no-stabilizing-solution") on failure.
inline ArePair solve_are(const ProblemData& p, int maxIterations = 100) {
  p.validate();
  detail::require_h2(p);
  const Eigen::Index n = p.n, m = p.m;
  Matrix Btil(n, m + n);
  Btil << p.B, p.C;

  ArePair out;
  Matrix K;
  const Matrix zero = Matrix::Zero(n, n);
  if (lyapunov_certificate({p.A, zero, {}, {}})) {
    K = Matrix::Zero(m + n, n);
    out.initialGain = "zero";
  } else {
    const Matrix S = detail::riccati_flow_limit(p);
    if (lambda_min(S) <= 1e-12 * std::max(1.0, S.norm()))
      throw SolverError("no-stabilizing-solution", "stationary Riccati flow limit is singular");
    K = detail::feedback_gain(p, symmetrized(S.inverse()));
    out.initialGain = "riccati-flow";
  }

  Matrix P;
  Matrix Rtil = Matrix::Zero(m + n, m + n);
  Rtil.topLeftCorner(m, m) = p.R;
  Rtil.bottomRightCorner(n, n) = p.N;
  for (int it = 1; it <= maxIterations; ++it) {
    const Matrix Acl = p.A + Btil * K;
    const Matrix Dcl = K.bottomRows(n);
    if (!lyapunov_certificate({Acl, Dcl, {}, {}}))
      throw SolverError("no-stabilizing-solution",
                        "Newton iterate " + std::to_string(it) + " is not mean-square stabilizing");
    auto next = solve_generalized_lyapunov(Acl, Dcl, p.Q + K.transpose() * Rtil * K);
    if (!next || lambda_min(*next) <= 0.0)
      throw SolverError("no-stabilizing-solution",
                        "Newton iterate " + std::to_string(it) + " is not positive definite");
    const double change = P.size() ? (*next - P).norm() : std::numeric_limits<double>::infinity();
    P = std::move(*next);
    out.newtonIterations = it;
    K = detail::feedback_gain(p, P);
    if (change <= 1e-14 * std::max(1.0, P.norm())) break;
    if (it == maxIterations && are_p_residual(p, P).norm() > 1e-8)
      throw SolverError("no-stabilizing-solution", "Newton iteration did not converge");
  }
  out.P = P;
  out.Sigma = symmetrized(P.llt().solve(Matrix::Identity(n, n)));
  out.residP = are_p_residual(p, out.P).norm();
  out.residSigma = are_sigma_residual(p, out.Sigma).norm();
  out.inverseGap = (out.P * out.Sigma - Matrix::Identity(n, n)).norm();
  return out;
}

/// Closed-loop matrices -(A + S Q)^T and -[C (I + S N)^-1]^T for a given S.
inline std::pair<Matrix, Matrix> closed_loop(const ProblemData& p, const Matrix& S) {
  const Matrix I = Matrix::Identity(p.n, p.n);
  Matrix Acl = -(p.A + S * p.Q).transpose();
  Matrix Ccl = -(p.C * (I + S * p.N).inverse()).transpose();
  return {std::move(Acl), std::move(Ccl)};
}

/// Largest eigenvalue of Sigma A_Sigma + A_Sigma^T Sigma + C_Sigma^T Sigma C_Sigma.
/// Strictly negative values certify L2-stability of [A_Sigma, C_Sigma].
inline double stability_margin(const ProblemData& p, const Matrix& Sigma) {
  const auto [As, Cs] = closed_loop(p, Sigma);
  return lambda_max(Sigma * As + As.transpose() * Sigma + Cs.transpose() * Sigma * Cs);
}

/// Sigma_T(.) sampled on a uniform grid of [0, T], with the closed-loop
/// matrices along it and the steady pair attached.
struct RiccatiTrajectory {
  ProblemData problem;
  UniformGrid grid;
  HermiteSeries SigmaT;  // derivatives are d/dt
  std::vector<Matrix> A_T;
  std::vector<Matrix> C_T;
  Matrix ASigma;
  Matrix CSigma;
  ArePair are;
  bool positiveDefiniteInterior = true;
  double minEigen = 0.0;          // min over grid of lambda_min(Sigma_T)
  double monotoneSlack = 0.0;     // min lambda_min(Sigma_T(t_k) - Sigma_T(t_{k+1}))
  double sandwichSlack = 0.0;     // min lambda_min(Sigma - Sigma_T(t_k))
  std::vector<std::string> warnings;

  double T() const { return grid.T; }
  std::size_t size() const { return grid.size(); }
  const Matrix& Sigma() const { return are.Sigma; }
  const Matrix& at_node(int j) const { return SigmaT.value(j); }
};

/// Integrates the differential Riccati equation backward from Sigma_T(T) = 0
/// with classical RK4 on `steps` uniform steps and checks the monotonicity
/// and sandwich invariants.
inline RiccatiTrajectory integrate_driccati(const ProblemData& p, double T, int steps) {
  if (!(T > 0.0)) throw UsageError("horizon T must be positive");
  if (steps < 2) throw UsageError("at least 2 Riccati steps required");
  RiccatiTrajectory traj;
  traj.are = solve_are(p);
  traj.problem = p;
  traj.grid = {T, steps};
  const double h = traj.grid.step();
  RiccatiFlow flow(p);

  std::vector<Matrix> vals(steps + 1), ders(steps + 1);
  Matrix S = Matrix::Zero(p.n, p.n);
  std::set<std::string> warned;
  for (int k = 0; k <= steps; ++k) {
    const int j = steps - k;
    double rcond = 1.0;
    const Matrix dS = flow(S, &rcond);
    if (rcond < 1e-8 && warned.insert("cond").second)
      traj.warnings.push_back("I + Sigma_T N condition number above 1e8 near t = " +
                              std::to_string(traj.grid.at(j)));
    vals[j] = S;
    ders[j] = -dS;
    if (k == steps) break;
    S = flow.rk4_step(S, h);
    if (!S.allFinite())
      throw SolverError("riccati-blowup",
                        "non-finite Sigma_T at t = " + std::to_string(traj.grid.at(j - 1)));
  }
  traj.SigmaT = HermiteSeries(traj.grid, std::move(vals), std::move(ders));

  traj.A_T.resize(steps + 1);
  traj.C_T.resize(steps + 1);
  for (int j = 0; j <= steps; ++j) std::tie(traj.A_T[j], traj.C_T[j]) = closed_loop(p, traj.at_node(j));
  std::tie(traj.ASigma, traj.CSigma) = closed_loop(p, traj.Sigma());

  const double sandTol = 1e-8 * std::max(1.0, traj.Sigma().norm());
  traj.minEigen = std::numeric_limits<double>::infinity();
  traj.monotoneSlack = std::numeric_limits<double>::infinity();
  traj.sandwichSlack = std::numeric_limits<double>::infinity();
  for (int j = 0; j <= steps; ++j) {
    const double lm = lambda_min(traj.at_node(j));
    traj.minEigen = std::min(traj.minEigen, lm);
    if (j < steps && lm <= 0.0) traj.positiveDefiniteInterior = false;
    traj.sandwichSlack = std::min(traj.sandwichSlack, lambda_min(traj.Sigma() - traj.at_node(j)));
    if (j < steps)
      traj.monotoneSlack =
          std::min(traj.monotoneSlack, lambda_min(traj.at_node(j) - traj.at_node(j + 1)));
  }
  std::ostringstream why;
  if (traj.minEigen < -1e-9) why << "Sigma_T not positive semidefinite (" << traj.minEigen << "); ";
  if (traj.monotoneSlack < -1e-9) why << "monotonicity violated (" << traj.monotoneSlack << "); ";
  if (traj.sandwichSlack < -sandTol) why << "Sigma_T exceeds Sigma (" << traj.sandwichSlack << "); ";
  if (!why.str().empty()) throw SolverError("riccati-invariant", why.str());
  return traj;
}

/// Fitted model ||Sigma - Sigma_T(t)|| ~ K4hat * exp(-2 sigmaHat (T - t)).
struct DecayFit {
  double K4hat = 0.0;
  double sigmaHat = 0.0;
  double r2 = 0.0;
  double windowStart = 0.0;  // in time-to-go T - t
  double windowEnd = 0.0;
  std::size_t points = 0;
  bool inconclusive = true;
};

/// Log-linear fit of residuals against time-to-go over the points where the
/// residual lies in [1e-11, upper].
inline DecayFit fit_decay_residuals(std::span<const double> timeToGo,
                                    std::span<const double> residual, double upper) {
  DecayFit fit;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < residual.size(); ++i) {
    if (residual[i] >= 1e-11 && residual[i] <= upper) {
      x.push_back(timeToGo[i]);
      y.push_back(std::log(residual[i]));
    }
  }
  fit.points = x.size();
  if (x.size() < 10) return fit;
  const LineFit lf = fit_line(x, y);
  fit.sigmaHat = -0.5 * lf.slope;
  fit.K4hat = std::exp(lf.intercept);
  fit.r2 = lf.r2;
  fit.windowStart = *std::min_element(x.begin(), x.end());
  fit.windowEnd = *std::max_element(x.begin(), x.end());
  fit.inconclusive = !(fit.r2 >= 0.99 && fit.sigmaHat > 0.0);
  return fit;
}

inline DecayFit fit_exponential_decay(const RiccatiTrajectory& traj, const Matrix& Sigma) {
  std::vector<double> x(traj.size()), r(traj.size());
  for (std::size_t j = 0; j < traj.size(); ++j) {
    x[j] = traj.T() - traj.grid.at(static_cast<int>(j));
    r[j] = (Sigma - traj.at_node(static_cast<int>(j))).norm();
  }
  return fit_decay_residuals(x, r, 0.5 * Sigma.norm());
}

}  // namespace blq
