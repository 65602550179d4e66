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

#include <optional>
#include <string>
#include <vector>

#include "blq/riccati.hpp"

namespace blq {

/// Outcome of the standing-hypothesis checks.
///  - h2: Q, N, R positive definite.
///  - h1Necessary: Hautus rank condition on (A - lambda I, B, C).
///  - h1Sufficient: both AREs solved and the closed loop [A_Sigma, C_Sigma]
///    carries a strict Lyapunov certificate.
/// Stabilizability counts as verified only through the sufficient flag.
struct HypothesisReport {
  bool h2 = false;
  bool h1Necessary = false;
  bool h1Sufficient = false;
  double stabilityMargin = 0.0;  // lambda_max of the certificate matrix
  std::optional<ArePair> are;
  std::vector<std::string> warnings;

  bool verified() const { return h2 && h1Sufficient; }
};

inline HypothesisReport validate_hypotheses(const ProblemData& p) {
  p.validate();
  HypothesisReport rep;
  rep.h2 = lambda_min(p.Q) > 0.0 && lambda_min(p.N) > 0.0 && lambda_min(p.R) > 0.0;
  rep.h1Necessary = hautus_test(p.A, p.B, p.C);
  if (!rep.h2) {
    rep.warnings.push_back("weights not positive definite; Riccati solve skipped");
    return rep;
  }
  try {
    rep.are = solve_are(p);
    rep.stabilityMargin = stability_margin(p, rep.are->Sigma);
    rep.h1Sufficient = rep.stabilityMargin <= -1e-10;
    if (!rep.h1Sufficient)
      rep.warnings.push_back("closed-loop certificate failed: margin " +
                             std::to_string(rep.stabilityMargin));
  } catch (const SolverError& e) {
    rep.warnings.push_back(e.what());
  }
  return rep;
}

}  // namespace blq
