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
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "blq/errors.hpp"
#include "blq/numerics.hpp"
#include "blq/problem.hpp"
#include "blq/riccati.hpp"
#include "blq/static_opt.hpp"

namespace blq {

/// Linear BSDE driven by the Riccati trajectory,
///   d phi = [M(t) phi + L(t) beta + c(t)] dt + beta dW,  phi(T) = offset - xi,
/// with M = A + Sigma_T Q, L = C (I + Sigma_T N)^-1 and a forcing c that
/// depends on t only through Sigma_T(t).
struct LinearDriver {
  ProblemData problem;
  Vector offset;
  std::function<Vector(const Matrix&)> forcing;

  Matrix M(const Matrix& S) const { return problem.A + S * problem.Q; }
  Matrix L(const Matrix& S) const {
    const Matrix I = Matrix::Identity(problem.n, problem.n);
    return problem.C * (I + S * problem.N).inverse();
  }
  Vector c(const Matrix& S) const { return forcing(S); }
};

/// Correction BSDE of the shifted problem: forcing L (Sigma - Sigma_T) Sigma^-1 z*
/// and terminal value y* - xi.
inline LinearDriver adjoint_driver(const RiccatiTrajectory& traj, const StaticSolution& st) {
  LinearDriver d;
  d.problem = traj.problem;
  d.offset = st.yStar;
  const Matrix Sigma = traj.Sigma();
  const Vector Pz = traj.are.P * st.zStar;
  const Matrix C = traj.problem.C, N = traj.problem.N;
  d.forcing = [Sigma, Pz, C, N](const Matrix& S) -> Vector {
    const Matrix I = Matrix::Identity(S.rows(), S.cols());
    return C * (I + S * N).partialPivLu().solve((Sigma - S) * Pz);
  };
  return d;
}

/// BSDE of the original problem whose solution enters the value formula:
/// forcing -Sigma_T q - b + C (I + Sigma_T N)^-1 Sigma_T nvec + B R^-1 r and
/// terminal value -xi.
inline LinearDriver value_driver(const ProblemData& p) {
  LinearDriver d;
  d.problem = p;
  d.offset = Vector::Zero(p.n);
  const Vector BRr = p.B * p.R.llt().solve(p.r);
  d.forcing = [p, BRr](const Matrix& S) -> Vector {
    const Matrix I = Matrix::Identity(S.rows(), S.cols());
    return -S * p.q - p.b + p.C * (I + S * p.N).partialPivLu().solve(S * p.nvec) + BRr;
  };
  return d;
}

/// First and second moments of (phi, beta) at a grid time.
struct BsdeMoments {
  Vector meanPhi, meanBeta;
  Matrix phiPhi, betaBeta;  // E[phi phi^T], E[beta beta^T]
};

/// Solution (phi, beta) of a LinearDriver BSDE, either through the affine
/// ansatz phi = a(t) + G(t) W_t, beta = G(t), or as a field phi = u(t, W_t),
/// beta = u_w(t, W_t) on a truncated w-grid.
struct BsdeSolution {
  enum class Kind { AffineClosedForm, MarkovianGrid };

  Kind kind = Kind::AffineClosedForm;
  UniformGrid grid;
  std::vector<Vector> a, G, aDot, GDot;
  std::vector<double> wGrid;
  std::vector<Matrix> u, ux;  // n x Jw per time node
  bool outsideBoundedClass = false;
  std::vector<std::string> warnings;

  Eigen::Index dim() const {
    return kind == Kind::AffineClosedForm ? a.front().size() : u.front().rows();
  }

  Vector phi(int j, double w) const {
    if (kind == Kind::AffineClosedForm) return a[j] + w * G[j];
    return field_value(j, w);
  }
  Vector beta(int j, double w) const {
    if (kind == Kind::AffineClosedForm) return G[j];
    return field_slope(j, w);
  }

  /// Values between time nodes by linear interpolation.
  Vector phi_at(double t, double w) const {
    const auto [j, s] = grid.locate(t);
    if (s == 0.0) return phi(j, w);
    return (1.0 - s) * phi(j, w) + s * phi(j + 1, w);
  }
  Vector beta_at(double t, double w) const {
    const auto [j, s] = grid.locate(t);
    if (s == 0.0) return beta(j, w);
    return (1.0 - s) * beta(j, w) + s * beta(j + 1, w);
  }

  /// Moments over W_t ~ N(0, t): exact for the affine kind, Gauss-Hermite
  /// quadrature for the field kind.
  BsdeMoments moments(int j, const GaussHermite& gh) const {
    const double t = grid.at(j);
    BsdeMoments m;
    if (kind == Kind::AffineClosedForm) {
      m.meanPhi = a[j];
      m.meanBeta = G[j];
      m.phiPhi = a[j] * a[j].transpose() + t * G[j] * G[j].transpose();
      m.betaBeta = G[j] * G[j].transpose();
      return m;
    }
    const Eigen::Index n = dim();
    m.meanPhi = Vector::Zero(n);
    m.meanBeta = Vector::Zero(n);
    m.phiPhi = Matrix::Zero(n, n);
    m.betaBeta = Matrix::Zero(n, n);
    if (t == 0.0) {  // W_0 = 0
      m.meanPhi = field_value(j, 0.0);
      m.meanBeta = field_slope(j, 0.0);
      m.phiPhi = m.meanPhi * m.meanPhi.transpose();
      m.betaBeta = m.meanBeta * m.meanBeta.transpose();
      return m;
    }
    const double sd = std::sqrt(t);
    for (std::size_t k = 0; k < gh.nodes.size(); ++k) {
      const double w = sd * gh.nodes[k];
      const Vector ph = field_value(j, w), be = field_slope(j, w);
      m.meanPhi += gh.weights[k] * ph;
      m.meanBeta += gh.weights[k] * be;
      m.phiPhi += gh.weights[k] * ph * ph.transpose();
      m.betaBeta += gh.weights[k] * be * be.transpose();
    }
    return m;
  }

 private:
  std::pair<Eigen::Index, double> locate_w(double w) const {
    const double w0 = wGrid.front(), dw = wGrid[1] - wGrid[0];
    const auto last = static_cast<Eigen::Index>(wGrid.size()) - 1;
    double x = (w - w0) / dw;
    if (x <= 0.0) return {0, 0.0};
    if (x >= static_cast<double>(last)) return {last - 1, 1.0};
    const auto i = std::min(static_cast<Eigen::Index>(x), last - 1);
    return {i, x - static_cast<double>(i)};
  }

  // Cubic Hermite in w with the stored slopes; constant beyond the grid.
  Vector field_value(int j, double w) const {
    const auto [i, s] = locate_w(w);
    const double h = wGrid[1] - wGrid[0];
    const double s2 = s * s, s3 = s2 * s;
    return (2 * s3 - 3 * s2 + 1) * u[j].col(i) + ((s3 - 2 * s2 + s) * h) * ux[j].col(i) +
           (-2 * s3 + 3 * s2) * u[j].col(i + 1) + ((s3 - s2) * h) * ux[j].col(i + 1);
  }
  Vector field_slope(int j, double w) const {
    const auto [i, s] = locate_w(w);
    return (1.0 - s) * ux[j].col(i) + s * ux[j].col(i + 1);
  }
};

/// Backward RK4 for the affine ansatz: G' = M G, G(T) = -xi1 and
/// a' = M a + L G + c, a(T) = offset - xi0. Sigma_T at half steps comes from
/// the Hermite interpolant of the trajectory.
inline BsdeSolution solve_affine_bsde(const RiccatiTrajectory& traj, const LinearDriver& drv,
                                      const TerminalCondition& xi) {
  if (xi.kind == TerminalCondition::Kind::BoundedMarkovian)
    throw UsageError("affine BSDE solver needs a deterministic or affine terminal condition");
  const Eigen::Index n = traj.problem.n;
  xi.validate(n);
  const int K = traj.grid.steps;
  const double h = traj.grid.step();

  BsdeSolution sol;
  sol.kind = BsdeSolution::Kind::AffineClosedForm;
  sol.grid = traj.grid;
  sol.outsideBoundedClass = xi.outside_bounded_class();
  if (sol.outsideBoundedClass)
    sol.warnings.push_back("terminal condition affine in W_T lies outside the bounded class");
  sol.a.resize(K + 1);
  sol.G.resize(K + 1);
  sol.aDot.resize(K + 1);
  sol.GDot.resize(K + 1);

  auto rhs = [&](const Matrix& S, const Vector& a, const Vector& G, Vector& da, Vector& dG) {
    const Matrix M = drv.M(S);
    dG = M * G;
    da = M * a + drv.L(S) * G + drv.c(S);
  };

  Vector a = drv.offset - xi.xi0;
  Vector G = xi.kind == TerminalCondition::Kind::AffineInBrownian ? Vector(-xi.xi1)
                                                                  : Vector(Vector::Zero(n));
  for (int j = K;; --j) {
    const double t = traj.grid.at(j);
    Vector da, dG;
    rhs(traj.at_node(j), a, G, da, dG);
    sol.a[j] = a;
    sol.G[j] = G;
    sol.aDot[j] = da;
    sol.GDot[j] = dG;
    if (j == 0) break;
    // step from t to t - h
    const Matrix Smid = traj.SigmaT.cubic(t - 0.5 * h);
    const Matrix& Send = traj.at_node(j - 1);
    Vector ka2, kG2, ka3, kG3, ka4, kG4;
    rhs(Smid, a - 0.5 * h * da, G - 0.5 * h * dG, ka2, kG2);
    rhs(Smid, a - 0.5 * h * ka2, G - 0.5 * h * kG2, ka3, kG3);
    rhs(Send, a - h * ka3, G - h * kG3, ka4, kG4);
    a -= (h / 6.0) * (da + 2.0 * ka2 + 2.0 * ka3 + ka4);
    G -= (h / 6.0) * (dG + 2.0 * kG2 + 2.0 * kG3 + kG4);
    if (!a.allFinite() || !G.allFinite())
      throw SolverError("bsde-blowup", "non-finite affine BSDE coefficients at t = " +
                                           std::to_string(traj.grid.at(j - 1)));
  }
  return sol;
}

/// Correction BSDE with the affine ansatz.
inline BsdeSolution solve_affine_bsde(const RiccatiTrajectory& traj, const StaticSolution& st,
                                      const TerminalCondition& xi) {
  return solve_affine_bsde(traj, adjoint_driver(traj, st), xi);
}

namespace detail {

// Block-tridiagonal system lower_i x_{i-1} + diag_i x_i + upper_i x_{i+1} = r_i
// with the same blocks on every interior row and separate first/last rows.
struct BlockTridiagonal {
  Matrix lower, diag, upper;        // interior rows
  Matrix diagEdge, upperEdge;       // row 0 (lower of row J-1 mirrors upperEdge)

  // rhs and result are n x J; column i is node i.
  Matrix solve(const Matrix& rhs) const {
    const Eigen::Index n = rhs.rows(), J = rhs.cols();
    std::vector<Matrix> cp(J);
    Matrix rp(n, J);
    Eigen::PartialPivLU<Matrix> lu(diagEdge);
    cp[0] = lu.solve(upperEdge);
    rp.col(0) = lu.solve(rhs.col(0));
    for (Eigen::Index i = 1; i < J; ++i) {
      const bool last = i == J - 1;
      const Matrix& lo = last ? upperEdge : lower;
      const Matrix& di = last ? diagEdge : diag;
      Eigen::PartialPivLU<Matrix> den(di - lo * cp[i - 1]);
      if (!last) cp[i] = den.solve(upper);
      rp.col(i) = den.solve(rhs.col(i) - lo * rp.col(i - 1));
    }
    Matrix x(n, J);
    x.col(J - 1) = rp.col(J - 1);
    for (Eigen::Index i = J - 2; i >= 0; --i) x.col(i) = rp.col(i) - cp[i] * x.col(i + 1);
    return x;
  }
};

// Spatial operator L u = 1/2 u_ww - M u - Lc u_w with reflecting (Neumann) ends.
inline Matrix apply_operator(const Matrix& U, const Matrix& M, const Matrix& Lc, double dw) {
  const Eigen::Index J = U.cols();
  Matrix out(U.rows(), J);
  const double d2 = 1.0 / (dw * dw);
  out.col(0) = d2 * (U.col(1) - U.col(0)) - M * U.col(0);
  out.col(J - 1) = d2 * (U.col(J - 2) - U.col(J - 1)) - M * U.col(J - 1);
  for (Eigen::Index i = 1; i + 1 < J; ++i)
    out.col(i) = 0.5 * d2 * (U.col(i + 1) - 2.0 * U.col(i) + U.col(i - 1)) - M * U.col(i) -
                 Lc * ((U.col(i + 1) - U.col(i - 1)) / (2.0 * dw));
  return out;
}

inline Matrix central_slope(const Matrix& U, double dw) {
  const Eigen::Index J = U.cols();
  Matrix D = Matrix::Zero(U.rows(), J);
  for (Eigen::Index i = 1; i + 1 < J; ++i) D.col(i) = (U.col(i + 1) - U.col(i - 1)) / (2.0 * dw);
  return D;
}

}  // namespace detail

/// Field solution of the BSDE for a terminal condition g(W_T): u solves the
/// backward parabolic system u_t + 1/2 u_ww = M u + L u_w + c with
/// u(T, w) = offset - g(w), discretized by Crank-Nicolson in time on the
/// trajectory grid and central differences on [-wTrunc, wTrunc] with
/// reflecting ends. The slope field is taken by central differences.
inline BsdeSolution solve_markovian_bsde(const RiccatiTrajectory& traj, const LinearDriver& drv,
                                         const TerminalCondition& xi, double wTrunc, int wPoints) {
  if (xi.kind != TerminalCondition::Kind::BoundedMarkovian)
    throw UsageError("field BSDE solver needs a tabulated bounded terminal condition");
  const Eigen::Index n = traj.problem.n;
  xi.validate(n);
  if (!(wTrunc > 0.0)) throw UsageError("w truncation must be positive");
  if (wPoints < 5) throw UsageError("at least 5 w points required");
  const int K = traj.grid.steps;
  const double h = traj.grid.step();

  BsdeSolution sol;
  sol.kind = BsdeSolution::Kind::MarkovianGrid;
  sol.grid = traj.grid;
  if (wTrunc < 4.0 * std::sqrt(traj.T()))
    sol.warnings.push_back("w truncation below 4 sqrt(T)");
  if (wPoints < 201) sol.warnings.push_back("fewer than 201 w points");
  sol.wGrid.resize(wPoints);
  const double dw = 2.0 * wTrunc / (wPoints - 1);
  for (int i = 0; i < wPoints; ++i) sol.wGrid[i] = -wTrunc + dw * i;
  sol.u.resize(K + 1);
  sol.ux.resize(K + 1);

  Matrix U(n, wPoints);
  for (int i = 0; i < wPoints; ++i) U.col(i) = drv.offset - xi.at(sol.wGrid[i]);

  const Matrix I = Matrix::Identity(n, n);
  const double d2 = 1.0 / (dw * dw);
  bool warned = false;
  auto implicit_system = [&](const Matrix& M, const Matrix& Lc) {
    const double k = 0.5 * h;
    detail::BlockTridiagonal sys;
    sys.lower = -k * (0.5 * d2 * I + Lc / (2.0 * dw));
    sys.diag = I - k * (-d2 * I - M);
    sys.upper = -k * (0.5 * d2 * I - Lc / (2.0 * dw));
    sys.diagEdge = sys.diag;
    sys.upperEdge = -k * d2 * I;
    return sys;
  };

  sol.u[K] = U;
  sol.ux[K] = detail::central_slope(U, dw);
  for (int j = K; j > 0; --j) {
    const Matrix& Sold = traj.at_node(j);
    const Matrix& Snew = traj.at_node(j - 1);
    const Matrix Mo = drv.M(Sold), Lo = drv.L(Sold), Mn = drv.M(Snew), Ln = drv.L(Snew);
    if (!warned && Mn.norm() * h > 0.5) {
      sol.warnings.push_back("||M|| dt exceeds 0.5");
      warned = true;
    }
    const Vector cbar = 0.5 * (drv.c(Sold) + drv.c(Snew));
    Matrix rhs = U + 0.5 * h * detail::apply_operator(U, Mo, Lo, dw);
    rhs.colwise() -= h * cbar;
    U = implicit_system(Mn, Ln).solve(rhs);
    if (!U.allFinite())
      throw SolverError("bsde-blowup",
                        "non-finite field at t = " + std::to_string(traj.grid.at(j - 1)));
    sol.u[j - 1] = U;
    sol.ux[j - 1] = detail::central_slope(U, dw);
  }
  return sol;
}

inline BsdeSolution solve_markovian_bsde(const RiccatiTrajectory& traj, const StaticSolution& st,
                                         const TerminalCondition& xi, double wTrunc, int wPoints) {
  return solve_markovian_bsde(traj, adjoint_driver(traj, st), xi, wTrunc, wPoints);
}

/// Dispatches on the terminal class.
inline BsdeSolution solve_bsde(const RiccatiTrajectory& traj, const LinearDriver& drv,
                               const TerminalCondition& xi, double wTrunc, int wPoints) {
  if (xi.kind == TerminalCondition::Kind::BoundedMarkovian)
    return solve_markovian_bsde(traj, drv, xi, wTrunc, wPoints);
  return solve_affine_bsde(traj, drv, xi);
}

/// Fitted E|phi(t)|^2 <= K5hat exp(-2 thetaHat (T - t)) and the time
/// integral of E|beta|^2.
struct PhiDecayMetrics {
  double K5hat = 0.0;
  double thetaHat = 0.0;
  double r2 = 0.0;
  double betaL2 = 0.0;
  bool exactZero = false;
  bool inconclusive = true;
  std::vector<double> phiSecondMoment;  // E|phi(t_j)|^2
};

inline PhiDecayMetrics phi_decay_metrics(const BsdeSolution& sol, const GaussHermite& gh = GaussHermite()) {
  PhiDecayMetrics out;
  const int K = sol.grid.steps;
  const double T = sol.grid.T;
  std::vector<double> beta2(K + 1);
  out.phiSecondMoment.resize(K + 1);
  double peak = 0.0;
  for (int j = 0; j <= K; ++j) {
    const BsdeMoments m = sol.moments(j, gh);
    out.phiSecondMoment[j] = m.phiPhi.trace();
    beta2[j] = m.betaBeta.trace();
    peak = std::max({peak, out.phiSecondMoment[j], beta2[j]});
  }
  out.betaL2 = trapezoid(beta2, sol.grid.step());
  if (peak == 0.0) {
    out.exactZero = true;
    out.inconclusive = false;
    out.thetaHat = std::numeric_limits<double>::infinity();
    return out;
  }
  std::vector<double> x, y;
  for (int j = 0; j <= K; ++j) {
    const double t = sol.grid.at(j);
    if (t < 0.25 * T || t > 0.75 * T || !(out.phiSecondMoment[j] > 0.0)) continue;
    x.push_back(T - t);
    y.push_back(std::log(out.phiSecondMoment[j]));
  }
  if (x.size() < 3) return out;
  const LineFit f = fit_line(x, y);
  out.thetaHat = -0.5 * f.slope;
  out.K5hat = std::exp(f.intercept);
  out.r2 = f.r2;
  out.inconclusive = !(f.r2 >= 0.99 && out.thetaHat > 0.0);
  return out;
}

}  // namespace blq
