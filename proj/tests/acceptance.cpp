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


// Acceptance criteria AC1-AC11. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "../tests/common.hpp"

namespace {

using namespace blq;
using blq::testing::kSqrt2;

struct Line {
  bool pass;
  std::string detail;
};

std::string f(double x, int digits = 6) {
  std::ostringstream os;
  os << std::setprecision(digits) << x;
  return os.str();
}

struct Horizon {
  RiccatiTrajectory tr;
  StaticSolution st;
  BsdeSolution sol;
};

Horizon horizon(const ProblemData& p, const TerminalCondition& xi, double T) {
  Horizon h{integrate_driccati(p, T, static_cast<int>(std::lround(200 * T))), {}, {}};
  h.st = solve_static(p, h.tr.are.P);
  h.sol = solve_bsde(h.tr, adjoint_driver(h.tr, h.st), xi, 6.0 * std::sqrt(T), 801);
  return h;
}

SimulationResult simulate(const Horizon& h, std::size_t paths, double dt, std::uint64_t seed) {
  SimulationOptions o;
  o.nPaths = paths;
  o.dt = dt;
  o.seed = seed;
  return simulate_paths(h.tr, h.sol, h.st, o);
}

double default_dt(double T) { return std::min(T / 2000.0, 1e-2); }

double scalar_sigma(double s) {
  const double rp = 1.0 + kSqrt2, rm = 1.0 - kSqrt2;
  const double k = (rp / rm) * std::exp(-2.0 * kSqrt2 * s);
  return (rp - k * rm) / (1.0 - k);
}

Line ac1() {
  const ArePair a = solve_are(testing::scalar_example());
  const double eS = std::abs(a.Sigma(0, 0) - (1.0 + kSqrt2)), eP = std::abs(a.P(0, 0) - (kSqrt2 - 1.0));
  return {eS <= 1e-10 && eP <= 1e-10 && a.inverseGap <= 1e-10,
          "|Sigma - (1+sqrt2)| = " + f(eS) + ", |P - (sqrt2-1)| = " + f(eP) + ", inverseGap = " + f(a.inverseGap)};
}

Line ac2() {
  const RiccatiTrajectory tr = integrate_driccati(testing::scalar_example(), 10.0, 2000);
  const double e9 = std::abs(tr.at_node(1800)(0, 0) - scalar_sigma(1.0));
  const DecayFit fit = fit_exponential_decay(tr, tr.Sigma());
  const double rel = std::abs(2.0 * fit.sigmaHat - 2.0 * kSqrt2) / (2.0 * kSqrt2);
  const bool inv = tr.positiveDefiniteInterior && tr.monotoneSlack >= -1e-12 && tr.sandwichSlack >= -1e-12;
  return {e9 <= 1e-6 && !fit.inconclusive && rel <= 0.05 && inv,
          "|Sigma_T(9) - " + f(scalar_sigma(1.0), 8) + "| = " + f(e9) + ", 2 sigmaHat = " + f(2 * fit.sigmaHat) +
              " (rel. err " + f(rel, 3) + "), monotone slack " + f(tr.monotoneSlack, 3) + ", sandwich slack " +
              f(tr.sandwichSlack, 3)};
}

Line ac3() {
  std::vector<ProblemData> problems{testing::scalar_example(), testing::scalar_example(1.0), testing::scalar_c1()};
  for (std::uint64_t seed = 1; seed <= 50; ++seed) problems.push_back(testing::random_problem(1000 + seed, 2, 1));
  int solved = 0, certified = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& p : problems) {
    ArePair a;
    try {
      a = solve_are(p);
    } catch (const SolverError&) {
      continue;
    }
    ++solved;
    const double lam = stability_margin(p, a.Sigma);
    worst = std::max(worst, lam);
    if (lam <= -1e-10) ++certified;
  }
  return {solved > 0 && certified == solved,
          std::to_string(certified) + "/" + std::to_string(solved) + " solved problems certified (" +
              std::to_string(problems.size()) + " posed), worst lambda_max " + f(worst)};
}

Line ac4() {
  const ProblemData p = testing::scalar_example(1.0);
  const Matrix P = solve_are(p).P;
  const StaticSolution s = solve_static(p, P);
  const double e = std::max({std::abs(s.yStar(0) - 0.5), std::abs(s.uStar(0) + 0.5), std::abs(s.lambdaStar(0) - 0.5),
                             std::abs(s.V - 0.25)});
  double best = std::numeric_limits<double>::infinity(), arg = 0.0;
  for (int k = -3000; k <= 3000; ++k) {
    const double y = 1e-3 * k;
    const double v = static_objective(p, P, Vector::Constant(1, y), Vector::Zero(1), Vector::Constant(1, y - 1.0));
    if (v < best) best = v, arg = y;
  }
  return {e <= 1e-10 && std::abs(arg - s.yStar(0)) <= 1e-3 && s.V <= best + 1e-12,
          "max error vs (1/2, -1/2, 1/2, 1/4) = " + f(e) + "; grid minimizer y = " + f(arg) + ", grid min " + f(best)};
}

Line ac5() {
  const double T = 5.0, L = 6.0 * std::sqrt(T);
  const Horizon h = horizon(testing::scalar_example(1.0), testing::scalar_terminal(0.0), T);
  const TerminalCondition xi = TerminalCondition::affine(Vector::Constant(1, 0.2), Vector::Ones(1));
  const BsdeSolution aff = solve_affine_bsde(h.tr, h.st, xi);
  const auto tab = TerminalCondition::markovian([&](double w) { return Vector(xi.at(w)); }, -L, L, 801);
  const BsdeSolution pde = solve_markovian_bsde(h.tr, h.st, tab, L, 801);
  double err = 0.0;
  for (int j = 0; j <= h.tr.grid.steps; ++j)
    for (std::size_t i = 0; i < pde.wGrid.size(); ++i)
      if (std::abs(pde.wGrid[i]) <= 0.5 * L)
        err = std::max(err, std::abs(pde.u[j](0, static_cast<Eigen::Index>(i)) - aff.phi(j, pde.wGrid[i])(0)));
  // spatial order on the C = 1 tanh problem, terminal table on the solver grid
  const Horizon hc = horizon(testing::scalar_c1(), testing::scalar_terminal(0.0), T);
  std::vector<double> v;
  for (int J : {101, 201, 401, 801}) {
    const auto g = TerminalCondition::markovian([](double w) { return Vector::Constant(1, std::tanh(w)); }, -L, L, J);
    v.push_back(solve_markovian_bsde(hc.tr, hc.st, g, L, J).phi(0, 0.0)(0));
  }
  const double o1 = std::log2(std::abs(v[0] - v[1]) / std::abs(v[1] - v[2]));
  const double o2 = std::log2(std::abs(v[1] - v[2]) / std::abs(v[2] - v[3]));
  return {err <= 1e-4 && std::min(o1, o2) >= 1.8,
          "interior sup |PDE - affine| = " + f(err) + " (|w| <= L/2); Crank-Nicolson orders " + f(o1, 4) + ", " +
              f(o2, 4)};
}

struct MomentComparison {
  std::size_t checked = 0, failures = 0, literal = 0, familyWise = 0;
  double worstZChain = 0.0;
};

MomentComparison compare_moments(const Horizon& h, std::size_t paths, std::uint64_t seed) {
  const double dt = default_dt(h.tr.T());
  const SimulationResult r = simulate(h, paths, dt, seed);
  const TrajectoryBundle ode = moment_trajectories(h.tr, h.sol, h.st);
  const EulerChain chain = euler_moment_chain(h.tr, h.sol, h.st, r.bundle.dt);
  const TrajectoryBundle& b = r.bundle;
  MomentComparison c;
  const auto tests = static_cast<std::size_t>((b.grid.steps + 1) * (b.meanXhat[0].size() + 2));
  const double zf = simultaneous_z(tests);
  auto cmp = [&](double mc, double se, double exact, double euler) {
    ++c.checked;
    const double d = std::abs(mc - exact);
    if (d > 3.0 * se + std::abs(euler - exact) + 1e-12) ++c.failures;
    if (d > 3.0 * se) ++c.literal;
    if (d > zf * se + std::abs(euler - exact) + 1e-12) ++c.familyWise;
    if (se > 0.0) c.worstZChain = std::max(c.worstZChain, std::abs(mc - euler) / se);
  };
  for (int j = 0; j <= b.grid.steps; ++j) {
    for (Eigen::Index i = 0; i < b.meanXhat[j].size(); ++i)
      cmp(b.meanXhat[j](i), b.seMeanXhat[j](i), ode.meanXhat[j](i), chain.bundle.meanXhat[j](i));
    cmp(b.xhatSq[j], b.seXhatSq[j], ode.xhatSq[j], chain.bundle.xhatSq[j]);
    cmp(b.diffX[j], b.seDiffX[j], ode.diffX[j], chain.bundle.diffX[j]);
  }
  return c;
}

Line ac6() {
  const Horizon s = horizon(testing::scalar_example(1.0), testing::scalar_terminal(0.5), 5.0);
  const Horizon q = horizon(testing::planar(), testing::planar_terminal(), 5.0);
  const MomentComparison a = compare_moments(s, 100000, 42), b = compare_moments(q, 100000, 42);
  return {a.failures == 0 && b.failures == 0,
          "beyond 3 SE + exact Euler bias: scalar " + std::to_string(a.failures) + "/" + std::to_string(a.checked) +
              ", 2-D " + std::to_string(b.failures) + "/" + std::to_string(b.checked) +
              "; beyond 3 SE alone: scalar " + std::to_string(a.literal) + ", 2-D " + std::to_string(b.literal) +
              "; worst |MC - Euler chain| / SE (2-D) " + f(b.worstZChain, 3) +
              "; beyond the 99.73% family-wise z instead of 3: " + std::to_string(a.familyWise + b.familyWise)};
}

std::vector<Horizon>& scalar_b1_horizons() {
  static std::vector<Horizon> hs = [] {
    std::vector<Horizon> v;
    for (double T : {5.0, 10.0, 20.0})
      v.push_back(horizon(testing::scalar_example(1.0), testing::scalar_terminal(0.5), T));
    return v;
  }();
  return hs;
}

Line ac7() {
  std::vector<MeanPaths> means;
  for (const auto& h : scalar_b1_horizons()) means.push_back(mean_adjoint_trajectory(h.tr, h.sol, h.st));
  const EnvelopeReport r = weak_report(means);
  const double ratio = r.horizons[2].midpoint / r.horizons[1].midpoint;
  return {r.dominates && r.rate > 0.0 && r.spread <= 1.2 && ratio <= 0.05,
          "K1hat " + f(r.K) + ", muHat " + f(r.rate) + " (sqrt2 = " + f(kSqrt2) + "), K spread " + f(r.spread, 4) +
              ", D_20(10)/D_10(5) = " + f(ratio, 4) + " (exp(-5 sqrt2) = " + f(std::exp(-5 * kSqrt2), 4) + ")"};
}

Line ac8() {
  std::vector<TrajectoryBundle> bundles;
  for (const auto& h : scalar_b1_horizons()) bundles.push_back(moment_trajectories(h.tr, h.sol, h.st));
  const EnvelopeReport r = strong_report(bundles);
  const double factor = r.horizons[1].midpoint / r.horizons[2].midpoint;
  return {factor >= 10.0 && r.rate > 0.0 && r.r2 >= 0.99,
          "S_10(5)/S_20(10) = " + f(factor, 4) + ", zetaHat " + f(r.rate) + ", r2 " + f(r.r2, 6)};
}

struct Ac9Data {
  SimulationResult sim;
  Horizon h;
};

Ac9Data& ac9_simulation() {
  static Ac9Data d = [] {
    Ac9Data x{{}, horizon(testing::scalar_c1(), testing::tanh_terminal(), 10.0)};
    x.sim = simulate(x.h, 100000, default_dt(10.0), 42);
    return x;
  }();
  return d;
}

Line ac9() {
  const ProblemData p = testing::scalar_c1();
  const TerminalCondition xi = testing::tanh_terminal();
  const ValueGapReport r = value_gap_report(p, xi, {5.0, 10.0, 20.0, 40.0});
  bool dominated = true;
  for (const auto& row : r.rows) dominated = dominated && row.gap <= r.K2hat * (1.0 / row.T + 1.0 / std::sqrt(row.T)) * (1 + 1e-12);
  // The Euler cost carries an O(dt) bias of about 1.5 SE at 1e5 paths; it is
  // removed by Richardson extrapolation over two independent runs at dt, dt/2.
  const Ac9Data& d = ac9_simulation();
  const double dt = default_dt(10.0);
  const SimulationResult half = simulate(d.h, 100000, 0.5 * dt, 42);
  const double rich = 2.0 * half.costMean - d.sim.costMean;
  const double richSE = std::hypot(2.0 * half.costSE, d.sim.costSE);
  const BsdeSolution vb = solve_bsde(d.h.tr, value_driver(p), xi, 6.0 * std::sqrt(10.0), 801);
  const double V10 = value_of_T(p, d.h.tr, vb);
  const double gap = std::abs(V10 - rich);
  return {dominated && r.slope <= -0.45 && gap <= 3.0 * richSE,
          "K2hat " + f(r.K2hat) + ", log-log slope " + f(r.slope, 4) + "; V_10 = " + f(V10) +
              " vs extrapolated MC " + f(rich) + " +- " + f(richSE, 3) + " (" + f(gap / richSE, 3) +
              " SE); raw MC at dt " + f(dt) + ": " + f(d.sim.costMean) + " +- " + f(d.sim.costSE, 3) + " (" +
              f(std::abs(V10 - d.sim.costMean) / d.sim.costSE, 3) + " SE), at dt/2: " + f(half.costMean)};
}

Line ac10() {
  const Horizon h = horizon(testing::scalar_c1(), testing::scalar_terminal(0.0), 10.0);
  const auto ode = check_reference_bound(reference_from_moments(moment_trajectories(h.tr, h.sol, h.st), 1),
                                         h.tr.Sigma(), h.tr.ASigma, h.tr.CSigma, h.st);
  const Ac9Data& d = ac9_simulation();
  const auto mc = check_reference_bound(d.sim.reference, d.h.tr.Sigma(), d.h.tr.ASigma, d.h.tr.CSigma, d.h.st);
  return {ode.pass && mc.pass && ode.supSecondMoment > 0.0,
          "K7 = " + f(ode.K7) + "; moment ODE sup E|X*|^2 = " + f(ode.supSecondMoment) + "; MC sup + 3 SE = " +
              f(mc.supSecondMoment + 3.0 * mc.seAtSup)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Line ac11() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "blq_acceptance_ac11";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path problem = fs::path(BLQ_PROBLEMS_DIR) / "scalar_c1_tanh.json";
  int status[2];
  for (int k = 0; k < 2; ++k) {
    const fs::path out = root / (k == 0 ? "a" : "b");
    const std::string cmd = std::string("TURNPIKE_LOG=quiet '") + BLQ_CLI_PATH + "' run --problem '" +
                            problem.string() + "' --command all --horizons 5,10,20 --seed 42 --out '" + out.string() +
                            "' >/dev/null 2>&1";
    const int raw = std::system(cmd.c_str());
    status[k] = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  }
  const std::string a = slurp(root / "a" / "report.json"), b = slurp(root / "b" / "report.json");
  return {!a.empty() && a == b && status[0] == status[1] && status[0] == 0,
          "report.json " + std::to_string(a.size()) + " bytes, identical: " + (a == b ? "yes" : "no") +
              "; exit codes " + std::to_string(status[0]) + ", " + std::to_string(status[1])};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Line()>>> criteria = {
      {"AC1 ARE exactness (scalar)", ac1},
      {"AC2 Riccati ODE convergence", ac2},
      {"AC3 closed-loop Lyapunov certificate", ac3},
      {"AC4 static KKT", ac4},
      {"AC5 BSDE duality and spatial order", ac5},
      {"AC6 moment/Monte Carlo equivalence", ac6},
      {"AC7 weak turnpike", ac7},
      {"AC8 strong turnpike", ac8},
      {"AC9 value convergence", ac9},
      {"AC10 reference bound", ac10},
      {"AC11 determinism", ac11},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Line line{false, ""};
    try {
      line = check();
    } catch (const std::exception& e) {
      line = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (line.pass ? "PASS " : "FAIL ") << name << " — " << line.detail << " [" << f(secs, 3) << " s]"
              << std::endl;
    failed += line.pass ? 0 : 1;
  }
  std::cout << (failed == 0 ? "all acceptance criteria passed" : std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
