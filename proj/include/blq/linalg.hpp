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

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>

namespace blq {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix symmetrized(const Matrix& M) { return 0.5 * (M + M.transpose()); }

inline double asymmetry(const Matrix& M) {
  return (M - M.transpose()).cwiseAbs().maxCoeff();
}

inline double lambda_min(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(S), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline double lambda_max(const Matrix& S) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(S), Eigen::EigenvaluesOnly);
  return es.eigenvalues()(es.eigenvalues().size() - 1);
}

inline bool all_finite(const Matrix& M) { return M.allFinite(); }

/// Row-major flattening; the CSV dumps use this ordering.
inline Vector vec_row_major(const Matrix& M) {
  Vector v(M.size());
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) v(i * M.cols() + j) = M(i, j);
  return v;
}

/// Solves X * A + A^T * X + C^T * X * C + W = 0 for X by vectorizing into an
/// n^2 x n^2 system. Returns nothing if the Kronecker operator is singular.
inline std::optional<Matrix> solve_generalized_lyapunov(const Matrix& A, const Matrix& C,
                                                        const Matrix& W) {
  const Eigen::Index n = A.rows();
  const Matrix I = Matrix::Identity(n, n);
  // Column-major vec: vec(XA) = (A^T kron I) vec(X), vec(A^T X) = (I kron A^T) vec(X),
  // vec(C^T X C) = (C^T kron C^T) vec(X).
  Matrix op(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      auto blk = op.block(i * n, j * n, n, n);
      blk = A(j, i) * I + C(j, i) * C.transpose();
      if (i == j) blk += A.transpose();
    }
  }
  Eigen::FullPivLU<Matrix> lu(op);
  if (!lu.isInvertible()) return std::nullopt;
  const Vector rhs = -Eigen::Map<const Vector>(W.data(), n * n);
  const Vector x = lu.solve(rhs);
  if (!x.allFinite()) return std::nullopt;
  Matrix X = Eigen::Map<const Matrix>(x.data(), n, n);
  return symmetrized(X);
}

}  // namespace blq
