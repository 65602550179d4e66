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

#include <complex>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "blq/errors.hpp"
#include "blq/linalg.hpp"

namespace blq {

/// Constant coefficients of the backward state equation
///   dY = (A Y + B u + C Z + b) dt + Z dW,  Y(T) = xi
/// and of the running cost
///   1/2 E int <QY,Y> + <NZ,Z> + <Ru,u> + 2<q,Y> + 2<nvec,Z> + 2<r,u> dt.
struct ProblemData {
  Eigen::Index n = 0;
  Eigen::Index m = 0;
  Matrix A, B, C;
  Vector b;
  Matrix Q, N, R;
  Vector q, nvec, r;

  /// Throws ValidationError naming the first inconsistent field.
  void validate() const {
    if (n <= 0) throw ValidationError("n", "state dimension must be positive");
    if (m <= 0) throw ValidationError("m", "control dimension must be positive");
    auto mat = [](const char* name, const Matrix& M, Eigen::Index rows, Eigen::Index cols) {
      if (M.rows() != rows || M.cols() != cols)
        throw ValidationError(name, "expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                                        ", got " + std::to_string(M.rows()) + "x" +
                                        std::to_string(M.cols()));
      if (!M.allFinite()) throw ValidationError(name, "non-finite entry");
    };
    auto vec = [](const char* name, const Vector& v, Eigen::Index size) {
      if (v.size() != size)
        throw ValidationError(name, "expected length " + std::to_string(size) + ", got " +
                                        std::to_string(v.size()));
      if (!v.allFinite()) throw ValidationError(name, "non-finite entry");
    };
    mat("A", A, n, n);
    mat("B", B, n, m);
    mat("C", C, n, n);
    vec("b", b, n);
    mat("Q", Q, n, n);
    mat("N", N, n, n);
    mat("R", R, m, m);
    vec("q", q, n);
    vec("nvec", nvec, n);
    vec("r", r, m);
  }

  /// Replaces Q, N, R by their symmetric parts. Returns a warning per weight
  /// whose asymmetry exceeds 1e-12.
  std::vector<std::string> symmetrize() {
    std::vector<std::string> warnings;
    auto fix = [&](const char* name, Matrix& M) {
      const double gap = asymmetry(M);
      if (gap > 1e-12)
        warnings.push_back(std::string(name) + " asymmetric by " + std::to_string(gap) +
                           "; symmetrized");
      M = symmetrized(M);
    };
    fix("Q", Q);
    fix("N", N);
    fix("R", R);
    return warnings;
  }

  /// Zero linear data and zero offsets, given the matrices.
  static ProblemData homogeneous(Matrix A, Matrix B, Matrix C, Matrix Q, Matrix N, Matrix R) {
    ProblemData p;
    p.n = A.rows();
    p.m = B.cols();
    p.A = std::move(A);
    p.B = std::move(B);
    p.C = std::move(C);
    p.Q = std::move(Q);
    p.N = std::move(N);
    p.R = std::move(R);
    p.b = Vector::Zero(p.n);
    p.q = Vector::Zero(p.n);
    p.nvec = Vector::Zero(p.n);
    p.r = Vector::Zero(p.m);
    return p;
  }

  /// Scalar problem with every coefficient given explicitly (n = m = 1).
  static ProblemData scalar(double A, double B, double C, double Q, double N, double R,
                            double b = 0.0, double q = 0.0, double nvec = 0.0, double r = 0.0) {
    auto s = [](double x) { return Matrix::Constant(1, 1, x); };
    ProblemData p = homogeneous(s(A), s(B), s(C), s(Q), s(N), s(R));
    p.b(0) = b;
    p.q(0) = q;
    p.nvec(0) = nvec;
    p.r(0) = r;
    return p;
  }
};

/// Terminal state xi. Three classes are supported:
///  - Deterministic: xi = xi0;
///  - AffineInBrownian: xi = xi0 + xi1 * W_T (unbounded, flagged);
///  - BoundedMarkovian: xi = g(W_T), g tabulated on an increasing grid and
///    held constant beyond its ends.
struct TerminalCondition {
  enum class Kind { Deterministic, AffineInBrownian, BoundedMarkovian };

  Kind kind = Kind::Deterministic;
  Vector xi0;
  Vector xi1;
  std::vector<double> gGrid;
  Matrix gValues;  // gGrid.size() x n

  static TerminalCondition deterministic(Vector xi0) {
    TerminalCondition tc;
    tc.kind = Kind::Deterministic;
    tc.xi1 = Vector::Zero(xi0.size());
    tc.xi0 = std::move(xi0);
    return tc;
  }

  static TerminalCondition affine(Vector xi0, Vector xi1) {
    TerminalCondition tc;
    tc.kind = Kind::AffineInBrownian;
    tc.xi0 = std::move(xi0);
    tc.xi1 = std::move(xi1);
    return tc;
  }

  static TerminalCondition markovian(std::vector<double> grid, Matrix values) {
    TerminalCondition tc;
    tc.kind = Kind::BoundedMarkovian;
    tc.gGrid = std::move(grid);
    tc.gValues = std::move(values);
    tc.xi0 = Vector::Zero(tc.gValues.cols());
    tc.xi1 = Vector::Zero(tc.gValues.cols());
    tc.validate(tc.gValues.cols());
    return tc;
  }

  /// Tabulates `g` on `points` equispaced nodes of [wmin, wmax].
  static TerminalCondition markovian(const std::function<Vector(double)>& g, double wmin,
                                     double wmax, int points) {
    std::vector<double> grid(points);
    const Vector first = g(wmin);
    Matrix values(points, first.size());
    for (int j = 0; j < points; ++j) {
      grid[j] = wmin + (wmax - wmin) * j / (points - 1);
      values.row(j) = g(grid[j]).transpose();
    }
    return markovian(std::move(grid), std::move(values));
  }

  std::size_t dim() const {
    return static_cast<std::size_t>(kind == Kind::BoundedMarkovian ? gValues.cols() : xi0.size());
  }

  /// True for the affine class, which lies outside the bounded-terminal setting.
  bool outside_bounded_class() const { return kind == Kind::AffineInBrownian; }

  void validate(Eigen::Index n) const {
    switch (kind) {
      case Kind::Deterministic:
        if (xi0.size() != n) throw ValidationError("terminal.xi0", "wrong length");
        if (xi1.size() != 0 && !xi1.isZero(0.0))
          throw ValidationError("terminal.xi1", "must be zero for a deterministic terminal");
        if (!gGrid.empty()) throw ValidationError("terminal.g_grid", "not allowed here");
        break;
      case Kind::AffineInBrownian:
        if (xi0.size() != n) throw ValidationError("terminal.xi0", "wrong length");
        if (xi1.size() != n) throw ValidationError("terminal.xi1", "wrong length");
        break;
      case Kind::BoundedMarkovian: {
        if (gGrid.size() < 2) throw ValidationError("terminal.g_grid", "needs at least 2 nodes");
        if (gValues.rows() != static_cast<Eigen::Index>(gGrid.size()) || gValues.cols() != n)
          throw ValidationError("terminal.g_grid.values", "shape does not match grid and n");
        if (!gValues.allFinite()) throw ValidationError("terminal.g_grid.values", "non-finite");
        for (std::size_t j = 1; j < gGrid.size(); ++j)
          if (!(gGrid[j] > gGrid[j - 1]))
            throw ValidationError("terminal.g_grid.w", "must be strictly increasing");
        break;
      }
    }
  }

  /// xi as a function of the terminal Brownian value.
  Vector at(double w) const {
    switch (kind) {
      case Kind::Deterministic:
        return xi0;
      case Kind::AffineInBrownian:
        return xi0 + w * xi1;
      case Kind::BoundedMarkovian:
        break;
    }
    if (w <= gGrid.front()) return gValues.row(0).transpose();
    if (w >= gGrid.back()) return gValues.row(gValues.rows() - 1).transpose();
    const auto it = std::upper_bound(gGrid.begin(), gGrid.end(), w);
    const auto j = static_cast<Eigen::Index>(it - gGrid.begin());
    const double s = (w - gGrid[j - 1]) / (gGrid[j] - gGrid[j - 1]);
    return ((1.0 - s) * gValues.row(j - 1) + s * gValues.row(j)).transpose();
  }
};

/// Coefficients of dX = (Acal X + Bcal v) dt + (Ccal X + Dcal v) dW. The
/// uncontrolled system [Acal, Ccal] leaves Bcal and Dcal empty.
struct StabilityQuery {
  Matrix Acal;
  Matrix Ccal;
  Matrix Bcal;
  Matrix Dcal;
};

/// Numerical rank with threshold 1e-9 relative to the largest singular value.
inline Eigen::Index numerical_rank(const Eigen::MatrixXcd& M) {
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(M);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  const double tol = 1e-9 * s(0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > tol) ++rank;
  return rank;
}

/// Hautus test: (A - lambda I, B, C) has full row rank at every eigenvalue
/// lambda of A with nonnegative real part. Necessary for stabilizability of
/// [A, 0; (B C), (0 I)].
inline bool hautus_test(const Matrix& A, const Matrix& B, const Matrix& C) {
  const Eigen::Index n = A.rows();
  if (A.cols() != n) throw ValidationError("A", "must be square");
  if (B.rows() != n) throw ValidationError("B", "row count must match A");
  if (C.rows() != n || C.cols() != n) throw ValidationError("C", "must match A");
  Eigen::EigenSolver<Matrix> es(A, false);
  const Eigen::VectorXcd eig = es.eigenvalues();
  for (Eigen::Index k = 0; k < eig.size(); ++k) {
    if (eig(k).real() < 0.0) continue;
    Eigen::MatrixXcd H(n, n + B.cols() + n);
    H.leftCols(n) = A.cast<std::complex<double>>() -
                    eig(k) * Eigen::MatrixXcd::Identity(n, n);
    H.middleCols(n, B.cols()) = B.cast<std::complex<double>>();
    H.rightCols(n) = C.cast<std::complex<double>>();
    if (numerical_rank(H) < n) return false;
  }
  return true;
}

/// Solves P Acal + Acal^T P + Ccal^T P Ccal = -I. A positive definite solution
/// certifies mean-square exponential stability of [Acal, Ccal].
inline std::optional<Matrix> lyapunov_certificate(const StabilityQuery& sq) {
  const Eigen::Index n = sq.Acal.rows();
  if (sq.Acal.cols() != n) throw ValidationError("Acal", "must be square");
  if (sq.Ccal.rows() != n || sq.Ccal.cols() != n) throw ValidationError("Ccal", "must match Acal");
  auto P = solve_generalized_lyapunov(sq.Acal, sq.Ccal, Matrix::Identity(n, n));
  if (!P || lambda_min(*P) <= 0.0) return std::nullopt;
  return P;
}

}  // namespace blq
