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

#include <filesystem>
#include <fstream>

#include "common.hpp"

namespace blq {
namespace {

using testing::scalar_example;

TEST(ProblemData, ScalarExampleValidates) {
  EXPECT_NO_THROW(scalar_example().validate());
}

TEST(ProblemData, WrongShapeNamesField) {
  ProblemData p = scalar_example();
  p.B = Matrix::Ones(2, 1);
  try {
    p.validate();
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "B");
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
  }
  p = scalar_example();
  p.r = Vector::Zero(3);
  EXPECT_THROW(p.validate(), ValidationError);
}

TEST(ProblemData, SymmetrizeWarnsOnlyWhenNeeded) {
  ProblemData p = testing::planar();
  EXPECT_TRUE(p.symmetrize().empty());
  p.Q(0, 1) += 1e-3;
  const auto w = p.symmetrize();
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NE(w[0].find("Q"), std::string::npos);
  EXPECT_DOUBLE_EQ(p.Q(0, 1), p.Q(1, 0));
}

TEST(Hypotheses, ScalarExampleHoldsBoth) {
  const HypothesisReport h = validate_hypotheses(scalar_example());
  EXPECT_TRUE(h.h2);
  EXPECT_TRUE(h.h1Necessary);
  EXPECT_TRUE(h.h1Sufficient);
  EXPECT_TRUE(h.verified());
  EXPECT_LT(h.stabilityMargin, -1e-10);
}

TEST(Hypotheses, ZeroStateWeightFailsH2) {
  ProblemData p = scalar_example();
  p.Q(0, 0) = 0.0;
  const HypothesisReport h = validate_hypotheses(p);
  EXPECT_FALSE(h.h2);
  EXPECT_FALSE(h.verified());
}

TEST(Hypotheses, UncontrolledUnstableFailsH1) {
  const HypothesisReport h = validate_hypotheses(ProblemData::scalar(1, 0, 0, 1, 1, 1));
  EXPECT_TRUE(h.h2);
  EXPECT_FALSE(h.h1Necessary);
  EXPECT_FALSE(h.h1Sufficient);
}

TEST(Hautus, RankConditions) {
  auto s = [](double x) { return Matrix::Constant(1, 1, x); };
  EXPECT_TRUE(hautus_test(s(-1), s(0), s(0)));  // Hurwitz: vacuous
  EXPECT_FALSE(hautus_test(s(1), s(0), s(0)));
  EXPECT_TRUE(hautus_test(s(1), s(1), s(0)));
  EXPECT_TRUE(hautus_test(s(1), s(0), s(1)));  // diffusion channel alone
  EXPECT_THROW(hautus_test(s(1), Matrix::Ones(2, 1), s(0)), ValidationError);
}

TEST(Lyapunov, ScalarCertificateClosedForm) {
  // 2 a P + c^2 P = -1  =>  P = 1 / (-2a - c^2)
  StabilityQuery q{Matrix::Constant(1, 1, -1.0), Matrix::Constant(1, 1, 0.5), Matrix(), Matrix()};
  const auto P = lyapunov_certificate(q);
  ASSERT_TRUE(P.has_value());
  EXPECT_NEAR((*P)(0, 0), 1.0 / (2.0 - 0.25), 1e-12);
  q.Ccal(0, 0) = 2.0;  // mean-square unstable
  EXPECT_FALSE(lyapunov_certificate(q).has_value());
}

TEST(Lyapunov, RandomPositiveDefiniteSolutionsSatisfyEquation) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const ProblemData p = testing::random_problem(seed, 3);
    const Matrix A = p.A - 2.0 * Matrix::Identity(3, 3), C = 0.3 * p.C;
    const auto P = solve_generalized_lyapunov(A, C, Matrix::Identity(3, 3));
    ASSERT_TRUE(P.has_value());
    const Matrix res = P->operator*(A) + A.transpose() * *P + C.transpose() * *P * C + Matrix::Identity(3, 3);
    EXPECT_LT(res.norm(), 1e-10) << "seed " << seed;
  }
}

TEST(Terminal, MarkovianInterpolatesAndClamps) {
  const TerminalCondition t = TerminalCondition::markovian(std::vector<double>{-1.0, 0.0, 2.0},
                                                           (Matrix(3, 1) << 1.0, 3.0, 7.0).finished());
  EXPECT_DOUBLE_EQ(t.at(-0.5)(0), 2.0);
  EXPECT_DOUBLE_EQ(t.at(1.0)(0), 5.0);
  EXPECT_DOUBLE_EQ(t.at(-10.0)(0), 1.0);
  EXPECT_DOUBLE_EQ(t.at(10.0)(0), 7.0);
  EXPECT_FALSE(t.outside_bounded_class());
}

TEST(Terminal, RejectsBadTables) {
  EXPECT_THROW(TerminalCondition::markovian(std::vector<double>{0.0, 0.0}, Matrix::Zero(2, 1)), ValidationError);
  EXPECT_THROW(TerminalCondition::markovian(std::vector<double>{0.0, 1.0}, Matrix::Zero(3, 1)), ValidationError);
  EXPECT_TRUE(testing::planar_terminal().outside_bounded_class());
}

TEST(Io, ParsesWithDefaultsAndSymmetrizes) {
  const Json j = Json::parse(R"({"n":1,"m":1,"A":[[-1]],"B":[[1]],"C":[[0]],"Q":[[1]],"N":[[1]],"R":[[1]]})");
  const ProblemFile f = parse_problem(j);
  EXPECT_EQ(f.data.b(0), 0.0);
  EXPECT_EQ(f.data.r(0), 0.0);
  EXPECT_EQ(f.terminal.kind, TerminalCondition::Kind::Deterministic);
  EXPECT_EQ(f.terminal.xi0(0), 0.0);
}

TEST(Io, FieldNamedErrors) {
  auto field_of = [](const char* text) {
    try {
      parse_problem(Json::parse(text));
    } catch (const ValidationError& e) {
      return e.field();
    }
    return std::string("none");
  };
  EXPECT_EQ(field_of(R"({"m":1})"), "n");
  EXPECT_EQ(field_of(R"({"n":1,"m":1,"A":[[-1]],"B":[[1],[2]],"C":[[0]],"Q":[[1]],"N":[[1]],"R":[[1]]})"), "B");
  EXPECT_EQ(field_of(R"({"n":1,"m":1,"A":[[-1]],"B":[[1]],"C":[[0]],"Q":[[1]],"N":[[1]],"R":[[1]],
                        "terminal":{"kind":"markovian"}})"),
            "terminal.g_grid");
}

TEST(Io, RoundTripThroughJson) {
  ProblemData p = testing::planar();
  Json j = to_json(p);
  j["terminal"] = to_json(testing::planar_terminal());
  const ProblemFile f = parse_problem(j);
  EXPECT_EQ((f.data.A - p.A).norm(), 0.0);
  EXPECT_EQ((f.data.nvec - p.nvec).norm(), 0.0);
  EXPECT_EQ(f.terminal.kind, TerminalCondition::Kind::AffineInBrownian);
  EXPECT_FALSE(f.warnings.empty());  // affine terminal is flagged
}

TEST(Io, FileErrorsCarryKinds) {
  const auto dir = std::filesystem::temp_directory_path() / "blq_test_problem";
  std::filesystem::create_directories(dir);
  try {
    load_problem(dir / "missing.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
  }
  std::ofstream(dir / "bad.json") << "{ not json";
  try {
    load_problem(dir / "bad.json");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "json");
  }
}

TEST(Io, ShippedProblemsLoad) {
  for (const char* name : {"scalar.json", "scalar_b1.json", "scalar_c1_tanh.json", "planar_affine.json",
                           "unstable_uncontrolled.json"}) {
    EXPECT_NO_THROW(load_problem(std::filesystem::path(BLQ_PROBLEMS_DIR) / name)) << name;
  }
}

TEST(Numerics, SimultaneousCriticalValue) {
  EXPECT_NEAR(simultaneous_z(1), 3.0, 1e-3);
  EXPECT_GT(simultaneous_z(1000), simultaneous_z(10));
  EXPECT_NEAR(std::erfc(simultaneous_z(100, 0.05) / std::sqrt(2.0)), 1.0 - std::pow(0.95, 0.01), 1e-12);
}

TEST(Numerics, GaussHermiteMoments) {
  const GaussHermite gh(20);
  double m0 = 0, m2 = 0, m4 = 0;
  for (std::size_t i = 0; i < gh.nodes.size(); ++i) {
    const double x = gh.nodes[i], w = gh.weights[i];
    m0 += w;
    m2 += w * x * x;
    m4 += w * x * x * x * x;
  }
  EXPECT_NEAR(m0, 1.0, 1e-13);
  EXPECT_NEAR(m2, 1.0, 1e-12);
  EXPECT_NEAR(m4, 3.0, 1e-11);
}

TEST(Numerics, LineFitExactOnLine) {
  const std::vector<double> x{0, 1, 2, 3}, y{1, 3, 5, 7};
  const LineFit f = fit_line(x, y);
  EXPECT_NEAR(f.slope, 2.0, 1e-14);
  EXPECT_NEAR(f.intercept, 1.0, 1e-14);
  EXPECT_NEAR(f.r2, 1.0, 1e-14);
}

}  // namespace
}  // namespace blq
