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
#include <cstdint>
#include <random>

#include "blq.hpp"

namespace blq::testing {

inline const double kSqrt2 = std::sqrt(2.0);

/// A = -1, B = 1, C = 0, Q = N = R = 1.
inline ProblemData scalar_example(double b = 0.0) { return ProblemData::scalar(-1, 1, 0, 1, 1, 1, b); }

/// Same weights with C = 1 and b = 1, so that z* != 0.
inline ProblemData scalar_c1() { return ProblemData::scalar(-1, 1, 1, 1, 1, 1, 1.0); }

inline TerminalCondition tanh_terminal(double scale = 1.0) {
  return TerminalCondition::markovian(
      [scale](double w) { return Vector::Constant(1, scale * std::tanh(w)); }, -40.0, 40.0, 4001);
}

inline TerminalCondition scalar_terminal(double xi0) { return TerminalCondition::deterministic(Vector::Constant(1, xi0)); }

inline ProblemData planar() {
  ProblemData p = ProblemData::homogeneous(Matrix(2, 2), Matrix(2, 1), Matrix(2, 2), Matrix(2, 2), Matrix(2, 2),
                                           Matrix::Identity(1, 1));
  p.A << -1.0, 0.5, 0.0, -0.5;
  p.B << 1.0, 0.5;
  p.C << 0.3, 0.0, 0.1, 0.2;
  p.Q << 2.0, 0.3, 0.3, 1.0;
  p.N << 1.0, 0.2, 0.2, 1.5;
  p.b << 1.0, -0.5;
  p.q << 0.2, 0.0;
  p.nvec << 0.0, 0.1;
  p.r << 0.1;
  return p;
}

inline TerminalCondition planar_terminal() {
  Vector xi0(2), xi1(2);
  xi0 << 0.3, -0.2;
  xi1 << 0.1, 0.05;
  return TerminalCondition::affine(xi0, xi1);
}

inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index n, double floor = 0.2) {
  std::normal_distribution<double> g;
  Matrix M(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) M(i, j) = g(rng);
  return M * M.transpose() / static_cast<double>(n) + floor * Matrix::Identity(n, n);
}

/// Random n-dimensional problem with SPD weights, Hurwitz-leaning drift and
/// small diffusion coupling.
inline ProblemData random_problem(std::uint64_t seed, Eigen::Index n = 2, Eigen::Index m = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  auto gauss = [&](Eigen::Index r, Eigen::Index c, double s) {
    Matrix M(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) M(i, j) = s * g(rng);
    return M;
  };
  ProblemData p = ProblemData::homogeneous(gauss(n, n, 0.5) - Matrix::Identity(n, n), gauss(n, m, 1.0),
                                           gauss(n, n, 0.3), random_spd(rng, n), random_spd(rng, n),
                                           random_spd(rng, m));
  p.b = gauss(n, 1, 1.0);
  return p;
}

}  // namespace blq::testing
