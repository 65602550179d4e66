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


#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>

#include "blq/cli.hpp"

namespace {

std::vector<double> parse_horizons(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      throw blq::UsageError("bad horizon '" + item + "'");
    }
    if (pos != item.size()) throw blq::UsageError("bad horizon '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Numerical lab for backward stochastic LQ turnpike problems"};
  app.set_version_flag("--version", std::string(blq::kVersion));
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run a pipeline stage on a problem file");
  std::string problem, command = "all", horizons, out = "out";
  int gridSteps = 0, wPoints = 801;
  double dt = 0.0, wTrunc = 0.0;
  std::size_t paths = 10000;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  run->add_option("--problem", problem, "Problem JSON file")->required();
  run->add_option("--command", command, "check|are|riccati|static|bsde|simulate|turnpike|value-gap|all")
      ->capture_default_str();
  run->add_option("--horizons", horizons, "Comma-separated horizons T");
  auto* gridOpt = run->add_option("--grid-steps", gridSteps, "Time steps per horizon (default 200 T)");
  auto* dtOpt = run->add_option("--dt", dt, "Monte Carlo step (default min(T/2000, 1e-2))");
  run->add_option("--paths", paths, "Monte Carlo paths; 0 skips simulation")->capture_default_str();
  auto* seedOpt = run->add_option("--seed", seed, "Random seed");
  auto* wTruncOpt = run->add_option("--w-trunc", wTrunc, "Brownian truncation (default 6 sqrt T)");
  run->add_option("--w-points", wPoints, "Brownian grid points")->capture_default_str();
  run->add_option("--out", out, "Output directory")->capture_default_str();
  run->add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    blq::RunConfig cfg;
    cfg.problemPath = problem;
    cfg.command = blq::parse_command(command);
    cfg.horizons = parse_horizons(horizons);
    if (*gridOpt) cfg.gridSteps = gridSteps;
    if (*dtOpt) cfg.dt = dt;
    cfg.nPaths = paths;
    if (*seedOpt) cfg.seed = seed;
    if (*wTruncOpt) cfg.wTrunc = wTrunc;
    cfg.wPoints = wPoints;
    cfg.outDir = out;
    cfg.threads = threads;
    return blq::run(cfg);
  } catch (const blq::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  }
}
