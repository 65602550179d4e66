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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "blq/linalg.hpp"

namespace blq {

/// Uniform time grid t_j = j * T / steps, j = 0..steps.
struct UniformGrid {
  double T = 0.0;
  int steps = 0;

  double step() const { return T / steps; }
  double at(int j) const { return j == steps ? T : T * j / steps; }
  std::size_t size() const { return static_cast<std::size_t>(steps) + 1; }

  /// Cell index j with t in [t_j, t_{j+1}] and the local coordinate in [0, 1].
  std::pair<int, double> locate(double t) const {
    const double x = t / step();
    int j = static_cast<int>(std::floor(x));
    if (j < 0) j = 0;
    if (j > steps - 1) j = steps - 1;
    double theta = x - j;
    theta = std::clamp(theta, 0.0, 1.0);
    return {j, theta};
  }

  std::vector<double> times() const {
    std::vector<double> out(size());
    for (int j = 0; j <= steps; ++j) out[j] = at(j);
    return out;
  }
};

/// Values and time derivatives of a matrix-valued function sampled on a
/// uniform grid. Evaluation between nodes is cubic Hermite (fourth order) or
/// linear.
class HermiteSeries {
 public:
  HermiteSeries() = default;
  HermiteSeries(UniformGrid grid, std::vector<Matrix> values, std::vector<Matrix> derivatives)
      : grid_(grid), values_(std::move(values)), derivatives_(std::move(derivatives)) {}

  const UniformGrid& grid() const { return grid_; }
  const Matrix& value(int j) const { return values_[j]; }
  const Matrix& derivative(int j) const { return derivatives_[j]; }
  const std::vector<Matrix>& values() const { return values_; }
  bool empty() const { return values_.empty(); }

  Matrix cubic(double t) const {
    const auto [j, s] = grid_.locate(t);
    if (s == 0.0) return values_[j];
    if (s == 1.0) return values_[j + 1];
    const double h = grid_.step();
    const double s2 = s * s, s3 = s2 * s;
    const double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s;
    const double h01 = -2 * s3 + 3 * s2, h11 = s3 - s2;
    return h00 * values_[j] + (h10 * h) * derivatives_[j] + h01 * values_[j + 1] +
           (h11 * h) * derivatives_[j + 1];
  }

  Matrix linear(double t) const {
    const auto [j, s] = grid_.locate(t);
    if (s == 0.0) return values_[j];
    if (s == 1.0) return values_[j + 1];
    return (1.0 - s) * values_[j] + s * values_[j + 1];
  }

 private:
  UniformGrid grid_;
  std::vector<Matrix> values_;
  std::vector<Matrix> derivatives_;
};

/// Composite trapezoid rule on a uniform grid.
inline double trapezoid(std::span<const double> y, double h) {
  if (y.size() < 2) return 0.0;
  double s = 0.5 * (y.front() + y.back());
  for (std::size_t i = 1; i + 1 < y.size(); ++i) s += y[i];
  return s * h;
}

/// Gauss quadrature for E[f(Z)], Z ~ N(0, 1) (probabilists' Hermite weight),
/// via the Golub-Welsch eigenvalue problem.
struct GaussHermite {
  std::vector<double> nodes;
  std::vector<double> weights;

  explicit GaussHermite(int points = 48) {
    Matrix J = Matrix::Zero(points, points);
    for (int k = 1; k < points; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Matrix> es(J);
    nodes.resize(points);
    weights.resize(points);
    for (int i = 0; i < points; ++i) {
      nodes[i] = es.eigenvalues()(i);
      const double v0 = es.eigenvectors()(0, i);
      weights[i] = v0 * v0;
    }
  }
};

/// Ordinary least squares line y = slope * x + intercept.
struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::size_t points = 0;
};

inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
  LineFit f;
  f.points = x.size();
  if (x.size() < 2) return f;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    sse += e * e;
  }
  f.r2 = syy > 0 ? 1.0 - sse / syy : 1.0;
  return f;
}

/// Minimizes a unimodal function on [lo, hi] by golden-section search.
template <class F>
double golden_section_minimize(F&& f, double lo, double hi, double tol = 1e-10) {
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, b = hi;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol * (1.0 + std::abs(a) + std::abs(b))) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

/// Global-then-local minimization over a log-spaced scan followed by golden
/// section inside the best bracket. Deterministic.
template <class F>
double scan_then_golden(F&& f, double lo, double hi, int scan = 200) {
  std::vector<double> xs(scan);
  const double la = std::log(lo), lb = std::log(hi);
  int best = 0;
  double fbest = std::numeric_limits<double>::infinity();
  for (int i = 0; i < scan; ++i) {
    xs[i] = std::exp(la + (lb - la) * i / (scan - 1));
    const double v = f(xs[i]);
    if (v < fbest) {
      fbest = v;
      best = i;
    }
  }
  const double a = xs[std::max(best - 1, 0)];
  const double b = xs[std::min(best + 1, scan - 1)];
  return golden_section_minimize(f, a, b);
}

/// Two-sided critical z for `tests` simultaneous comparisons at family-wise
/// level `alpha` (Sidak). Never below the single-comparison value for alpha.
inline double simultaneous_z(std::size_t tests, double alpha = 0.0027) {
  const double m = static_cast<double>(std::max<std::size_t>(tests, 1));
  const double each = -std::expm1(std::log1p(-alpha) / m);
  double lo = 0.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double z = 0.5 * (lo + hi);
    (std::erfc(z / std::sqrt(2.0)) > each ? lo : hi) = z;
  }
  return 0.5 * (lo + hi);
}

}  // namespace blq
