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


#include <gtest/gtest.h>

#include "common.hpp"

namespace blq {
namespace {

struct Stack {
  ProblemData p;
  RiccatiTrajectory tr;
  StaticSolution st;
  BsdeSolution sol;
};

Stack stack(const ProblemData& p, const TerminalCondition& xi, double T) {
  Stack s{p, integrate_driccati(p, T, static_cast<int>(std::lround(200 * T))), {}, {}};
  s.st = solve_static(p, s.tr.are.P);
  s.sol = solve_bsde(s.tr, adjoint_driver(s.tr, s.st), xi, 6.0 * std::sqrt(T), 401);
  return s;
}

SimulationResult simulate(const Stack& s, std::size_t paths, double dt, std::uint64_t seed, unsigned threads = 1) {
  SimulationOptions o;
  o.nPaths = paths;
  o.dt = dt;
  o.seed = seed;
  o.threads = threads;
  return simulate_paths(s.tr, s.sol, s.st, o);
}

Stack noisy_scalar(double T) {
  return stack(testing::scalar_c1(), TerminalCondition::affine(Vector::Constant(1, 0.3), Vector::Constant(1, 0.4)), T);
}

TEST(MomentOde, SecondMomentInvariants) {
  for (const Stack& s : {noisy_scalar(4.0), stack(testing::planar(), testing::planar_terminal(), 4.0)}) {
    const TrajectoryBundle b = moment_trajectories(s.tr, s.sol, s.st);
    for (int j = 0; j <= b.grid.steps; ++j) {
      EXPECT_LT(asymmetry(b.m2[j]), 1e-12);
      EXPECT_GE(lambda_min(b.m2[j] - b.m1[j] * b.m1[j].transpose()), -1e-8);
      EXPECT_NEAR(b.w_variance(j), b.grid.at(j), 1e-9);
    }
  }
}

TEST(MomentOde, MeansAgreeWithMeanOde) {
  const Stack s = stack(testing::planar(), testing::planar_terminal(), 4.0);
  const TrajectoryBundle b = moment_trajectories(s.tr, s.sol, s.st);
  const MeanPaths mp = mean_adjoint_trajectory(s.tr, s.sol, s.st);
  for (int j = 0; j <= b.grid.steps; j += 50) {
    EXPECT_LT((b.meanXhat[j] - mp.meanXhat[j]).norm(), 1e-8);
    EXPECT_LT((b.meanY[j] - mp.meanY[j]).norm(), 1e-8);
    EXPECT_LT((b.meanU[j] - mp.meanU[j]).norm(), 1e-8);
    EXPECT_LT((b.meanZdev[j] - mp.meanZdev[j]).norm(), 1e-8);
  }
}

TEST(MomentOde, ReferenceMeanVanishes) {
  const Stack s = noisy_scalar(3.0);
  const ReferenceBundle r = reference_from_moments(moment_trajectories(s.tr, s.sol, s.st), 1);
  for (const Vector& m : r.xstarMean) EXPECT_EQ(m.norm(), 0.0);
}

TEST(MomentOde, RejectsFieldSolutions) {
  const Stack s = stack(testing::scalar_c1(), testing::tanh_terminal(), 1.0);
  EXPECT_THROW(moment_trajectories(s.tr, s.sol, s.st), UsageError);
  EXPECT_THROW(euler_moment_chain(s.tr, s.sol, s.st, 1e-3), UsageError);
}

TEST(EulerChain, ConvergesToMomentOdeAtFirstOrder) {
  const Stack s = noisy_scalar(3.0);
  const TrajectoryBundle ode = moment_trajectories(s.tr, s.sol, s.st);
  std::vector<double> err;
  for (double dt : {5e-3, 2.5e-3, 1.25e-3}) {
    const EulerChain c = euler_moment_chain(s.tr, s.sol, s.st, dt);
    double e = 0.0;
    for (int j = 0; j <= ode.grid.steps; ++j) e = std::max(e, std::abs(c.bundle.diffX[j] - ode.diffX[j]));
    err.push_back(e);
  }
  EXPECT_NEAR(std::log2(err[0] / err[1]), 1.0, 0.15);
  EXPECT_NEAR(std::log2(err[1] / err[2]), 1.0, 0.15);
}

TEST(Simulation, ZeroDataStaysZero) {
  const ProblemData p = ProblemData::homogeneous(testing::planar().A, testing::planar().B, testing::planar().C,
                                                 testing::planar().Q, testing::planar().N, Matrix::Identity(1, 1));
  const Stack s = stack(p, TerminalCondition::deterministic(Vector::Zero(2)), 2.0);
  const SimulationResult r = simulate(s, 500, 1e-2, 9);
  for (int j = 0; j <= r.bundle.grid.steps; ++j) {
    EXPECT_EQ(r.bundle.meanXhat[j].norm(), 0.0);
    EXPECT_EQ(r.bundle.xhatSq[j], 0.0);
    EXPECT_EQ(r.bundle.diffY[j] + r.bundle.diffU[j] + r.bundle.diffZ[j], 0.0);
    EXPECT_EQ(r.reference.xstarSq[j], 0.0);
  }
  EXPECT_EQ(r.costMean, 0.0);
}

TEST(Simulation, DeterministicCaseEqualsEulerChainExactly) {
  // xi = y* and z* = 0: every path coincides with the Euler chain mean.
  const ProblemData p = testing::scalar_example(1.0);
  const Stack s = stack(p, TerminalCondition::deterministic(Vector::Constant(1, 0.5)), 4.0);
  const SimulationResult r = simulate(s, 64, 2e-3, 42);
  const EulerChain c = euler_moment_chain(s.tr, s.sol, s.st, 2e-3);
  for (int j = 0; j <= r.bundle.grid.steps; ++j) {
    EXPECT_NEAR(r.bundle.meanXhat[j](0), c.bundle.meanXhat[j](0), 1e-12);
    EXPECT_NEAR(r.bundle.diffX[j], c.bundle.diffX[j], 1e-12);
    EXPECT_EQ(r.reference.xstarMean[j](0), 0.0);
  }
  EXPECT_NEAR(r.costMean, c.cost, 1e-10);
  for (double t : {1.0, 2.0, 3.0}) {
    const int j = static_cast<int>(std::lround(t / s.tr.grid.step()));
    EXPECT_NEAR(r.bundle.diffX[j], moment_trajectories(s.tr, s.sol, s.st).diffX[j], 5e-3);
  }
}

TEST(Simulation, NoisyCaseMatchesEulerChainWithinStandardErrors) {
  const Stack s = noisy_scalar(4.0);
  const double dt = 2.5e-3;
  const SimulationResult r = simulate(s, 20000, dt, 42);
  const EulerChain c = euler_moment_chain(s.tr, s.sol, s.st, dt);
  const TrajectoryBundle& b = r.bundle;
  const std::size_t nodes = b.grid.size();
  const double z = simultaneous_z(3 * nodes);
  for (int j = 0; j <= b.grid.steps; ++j) {
    EXPECT_LE(std::abs(b.meanXhat[j](0) - c.bundle.meanXhat[j](0)), z * b.seMeanXhat[j](0) + 1e-12) << j;
    EXPECT_LE(std::abs(b.xhatSq[j] - c.bundle.xhatSq[j]), z * b.seXhatSq[j] + 1e-12) << j;
    EXPECT_LE(std::abs(b.diffX[j] - c.bundle.diffX[j]), z * b.seDiffX[j] + 1e-12) << j;
    EXPECT_LE(std::abs(r.closureMean[j](0) - c.closure[j](0)), simultaneous_z(nodes) * r.closureSE[j](0) + 1e-9);
  }
  for (double t : {1.0, 2.0, 3.0}) {  // single-time checks at the plain 3 SE level
    const int j = static_cast<int>(std::lround(t / s.tr.grid.step()));
    EXPECT_LE(std::abs(b.diffX[j] - c.bundle.diffX[j]), 3.0 * b.seDiffX[j]);
    EXPECT_LE(std::abs(r.reference.xstarMean[j](0)), 3.0 * r.reference.seXstarMean[j](0));
    EXPECT_LE(std::abs(b.w_variance(j) - t), 3.0 * std::sqrt(2.0) * t / std::sqrt(20000.0));
  }
  EXPECT_LE(std::abs(r.costMean - c.cost), 3.0 * r.costSE);
}

TEST(Simulation, ClosureBiasShrinksWithStep) {
  const Stack s = noisy_scalar(3.0);
  double m1 = 0.0, m2 = 0.0;
  const EulerChain c1 = euler_moment_chain(s.tr, s.sol, s.st, 5e-3), c2 = euler_moment_chain(s.tr, s.sol, s.st, 2.5e-3);
  for (std::size_t j = 0; j < c1.closure.size(); ++j) {
    m1 = std::max(m1, c1.closure[j].cwiseAbs().maxCoeff());
    m2 = std::max(m2, c2.closure[j].cwiseAbs().maxCoeff());
  }
  EXPECT_GE(std::log2(m1 / m2), 0.8);
}

TEST(Simulation, FieldMeansMatchMeanOde) {
  const Stack s = stack(testing::scalar_c1(), testing::tanh_terminal(), 3.0);
  const SimulationResult r = simulate(s, 20000, 2.5e-3, 5);
  const MeanPaths mp = mean_adjoint_trajectory(s.tr, s.sol, s.st);
  for (double t : {0.75, 1.5, 2.25}) {
    const int j = static_cast<int>(std::lround(t / s.tr.grid.step()));
    EXPECT_LE(std::abs(r.bundle.meanXhat[j](0) - mp.meanXhat[j](0)), 3.0 * r.bundle.seMeanXhat[j](0)) << t;
  }
}

TEST(Simulation, IndependentOfThreadCount) {
  const Stack s = noisy_scalar(1.0);
  SimulationOptions o;
  o.nPaths = 3000;
  o.dt = 5e-3;
  o.seed = 11;
  o.chunk = 256;
  o.threads = 1;
  const SimulationResult a = simulate_paths(s.tr, s.sol, s.st, o);
  o.threads = 4;
  const SimulationResult b = simulate_paths(s.tr, s.sol, s.st, o);
  for (int j = 0; j <= a.bundle.grid.steps; ++j) {
    EXPECT_EQ(a.bundle.m2[j], b.bundle.m2[j]);
    EXPECT_EQ(a.bundle.diffY[j], b.bundle.diffY[j]);
  }
  EXPECT_EQ(a.costMean, b.costMean);
  o.seed = 12;
  EXPECT_NE(simulate_paths(s.tr, s.sol, s.st, o).costMean, a.costMean);
}

TEST(Simulation, StrongOrderAboveFloor) {
  const Stack s = noisy_scalar(2.0);
  const StrongOrderStudy st = strong_order_study(s.tr, s.sol, s.st, 2000, {1, 2}, 3);
  EXPECT_GE(st.observedOrder, 0.4);
}

TEST(Simulation, RejectsBadOptions) {
  const Stack s = noisy_scalar(1.0);
  EXPECT_THROW(simulate(s, 0, 1e-3, 1), UsageError);
}

TEST(ReferenceBound, ScalarDiffusionCase) {
  const Stack s = noisy_scalar(6.0);
  const auto ode = moment_trajectories(s.tr, s.sol, s.st);
  const ReferenceBoundReport r = check_reference_bound(reference_from_moments(ode, 1), s.tr.Sigma(), s.tr.ASigma,
                                                       s.tr.CSigma, s.st);
  EXPECT_GT(r.k71, 0.0);
  EXPECT_GT(r.supSecondMoment, 0.0);
  EXPECT_TRUE(r.pass) << r.supSecondMoment << " vs " << r.K7;
  EXPECT_DOUBLE_EQ(r.K7Scaled, r.K7);  // kappa = 1 for scalars
}

}  // namespace
}  // namespace blq
