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

#include "blq/errors.hpp"
#include "blq/linalg.hpp"
#include "blq/problem.hpp"

namespace blq {

/// Minimizer of the static problem
///   F(y, z, u) = 1/2 [<Qy,y> + <(N + Sigma^-1) z,z> + <Ru,u> + 2<q,y> + 2<nvec,z> + 2<r,u>]
/// subject to A y + B u + C z + b = 0, with its multiplier.
struct StaticSolution {
  Vector yStar, zStar, uStar, lambdaStar;
  double V = 0.0;
  double feasResid = 0.0;
  double kktResid = 0.0;  // max over the three stationarity lines
};

/// Objective F at an arbitrary point, with P = Sigma^-1.
inline double static_objective(const ProblemData& p, const Matrix& P, const Vector& y,
                               const Vector& z, const Vector& u) {
  return 0.5 * (y.dot(p.Q * y) + z.dot((p.N + P) * z) + u.dot(p.R * u) + 2.0 * p.q.dot(y) +
                2.0 * p.nvec.dot(z) + 2.0 * p.r.dot(u));
}

/// Solves the static problem through the n x n Schur complement of the
/// block-diagonal weight H = diag(Q, N + P, R) with constraint map (A, C, B).
/// `P` must be the inverse of the steady Sigma.
inline StaticSolution solve_static(const ProblemData& p, const Matrix& P) {
  p.validate();
  Eigen::LLT<Matrix> llQ(p.Q), llZ(p.N + P), llR(p.R);
  if (llQ.info() != Eigen::Success) throw ValidationError("Q", "not positive definite");
  if (llZ.info() != Eigen::Success) throw ValidationError("N", "N + Sigma^-1 not positive definite");
  if (llR.info() != Eigen::Success) throw ValidationError("R", "not positive definite");

  const Matrix At = p.A.transpose(), Ct = p.C.transpose(), Bt = p.B.transpose();
  const Matrix S = p.A * llQ.solve(At) + p.C * llZ.solve(Ct) + p.B * llR.solve(Bt);
  const Vector rhs = p.b - p.A * llQ.solve(p.q) - p.C * llZ.solve(p.nvec) - p.B * llR.solve(p.r);
  Eigen::LLT<Matrix> llS(symmetrized(S));
  if (llS.info() != Eigen::Success)
    throw SolverError("rank-deficiency",
                      "Schur complement singular; (A, C, B) lacks full row rank (Hautus precondition)");

  StaticSolution s;
  s.lambdaStar = llS.solve(rhs);
  s.yStar = -llQ.solve(p.q + At * s.lambdaStar);
  s.zStar = -llZ.solve(p.nvec + Ct * s.lambdaStar);
  s.uStar = -llR.solve(p.r + Bt * s.lambdaStar);
  s.V = static_objective(p, P, s.yStar, s.zStar, s.uStar);
  s.feasResid = (p.A * s.yStar + p.B * s.uStar + p.C * s.zStar + p.b).norm();
  s.kktResid = std::max({(p.Q * s.yStar + At * s.lambdaStar + p.q).norm(),
                         ((p.N + P) * s.zStar + Ct * s.lambdaStar + p.nvec).norm(),
                         (p.R * s.uStar + Bt * s.lambdaStar + p.r).norm()});
  return s;
}

}  // namespace blq
