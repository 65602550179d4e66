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
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blq/errors.hpp"
#include "blq/hypotheses.hpp"
#include "blq/problem.hpp"
#include "blq/turnpike.hpp"

namespace blq {

using Json = nlohmann::json;

/// Problem file contents: coefficients, terminal condition and the warnings
/// raised while reading them.
struct ProblemFile {
  ProblemData data;
  TerminalCondition terminal;
  std::vector<std::string> warnings;
};

namespace detail {

inline Matrix json_matrix(const Json& j, const std::string& field, Eigen::Index rows, Eigen::Index cols) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ValidationError(field, "expected " + std::to_string(rows) + " rows");
  Matrix M(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ValidationError(field, "row " + std::to_string(r) + ": expected " + std::to_string(cols) +
                                       " entries");
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Json& v = row[static_cast<std::size_t>(c)];
      if (!v.is_number()) throw ValidationError(field, "non-numeric entry");
      M(r, c) = v.get<double>();
    }
  }
  return M;
}

inline Vector json_vector(const Json& j, const std::string& field, Eigen::Index size) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size)
    throw ValidationError(field, "expected length " + std::to_string(size));
  Vector v(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    const Json& x = j[static_cast<std::size_t>(i)];
    if (!x.is_number()) throw ValidationError(field, "non-numeric entry");
    v(i) = x.get<double>();
  }
  return v;
}

inline Eigen::Index json_dim(const Json& j, const char* field) {
  if (!j.contains(field)) throw ValidationError(field, "missing");
  const Json& v = j.at(field);
  if (!v.is_number_integer() || v.get<long long>() <= 0)
    throw ValidationError(field, "must be a positive integer");
  return static_cast<Eigen::Index>(v.get<long long>());
}

}  // namespace detail

/// Reads the problem schema
///   {"n", "m", "A", "B", "C", "b", "Q", "N", "R", "q", "nvec", "r",
///    "terminal": {"kind", "xi0", "xi1", "g_grid": {"w", "values"}}}
/// with row-major matrices. The linear data b, q, nvec, r default to zero
/// and a missing terminal to the deterministic xi = 0. Weights are
/// symmetrized with a warning.
inline ProblemFile parse_problem(const Json& j) {
  if (!j.is_object()) throw ValidationError("json", "top level must be an object");
  ProblemFile f;
  ProblemData& p = f.data;
  p.n = detail::json_dim(j, "n");
  p.m = detail::json_dim(j, "m");
  const Eigen::Index n = p.n, m = p.m;
  auto need = [&](const char* k) -> const Json& {
    if (!j.contains(k)) throw ValidationError(k, "missing");
    return j.at(k);
  };
  auto vec_or_zero = [&](const char* k, Eigen::Index size) {
    return j.contains(k) ? detail::json_vector(j.at(k), k, size) : Vector(Vector::Zero(size));
  };
  p.A = detail::json_matrix(need("A"), "A", n, n);
  p.B = detail::json_matrix(need("B"), "B", n, m);
  p.C = detail::json_matrix(need("C"), "C", n, n);
  p.Q = detail::json_matrix(need("Q"), "Q", n, n);
  p.N = detail::json_matrix(need("N"), "N", n, n);
  p.R = detail::json_matrix(need("R"), "R", m, m);
  p.b = vec_or_zero("b", n);
  p.q = vec_or_zero("q", n);
  p.nvec = vec_or_zero("nvec", n);
  p.r = vec_or_zero("r", m);
  p.validate();
  f.warnings = p.symmetrize();

  if (!j.contains("terminal")) {
    f.terminal = TerminalCondition::deterministic(Vector::Zero(n));
    return f;
  }
  const Json& t = j.at("terminal");
  if (!t.is_object() || !t.contains("kind") || !t.at("kind").is_string())
    throw ValidationError("terminal.kind", "missing");
  const std::string kind = t.at("kind").get<std::string>();
  if (kind == "deterministic") {
    if (!t.contains("xi0")) throw ValidationError("terminal.xi0", "missing");
    f.terminal = TerminalCondition::deterministic(detail::json_vector(t.at("xi0"), "terminal.xi0", n));
  } else if (kind == "affine") {
    if (!t.contains("xi0")) throw ValidationError("terminal.xi0", "missing");
    if (!t.contains("xi1")) throw ValidationError("terminal.xi1", "missing");
    f.terminal = TerminalCondition::affine(detail::json_vector(t.at("xi0"), "terminal.xi0", n),
                                           detail::json_vector(t.at("xi1"), "terminal.xi1", n));
    f.warnings.push_back("terminal affine in W_T lies outside the bounded class");
  } else if (kind == "markovian") {
    if (!t.contains("g_grid")) throw ValidationError("terminal.g_grid", "missing");
    const Json& g = t.at("g_grid");
    if (!g.is_object() || !g.contains("w") || !g.contains("values"))
      throw ValidationError("terminal.g_grid", "needs w and values");
    const Json& w = g.at("w");
    if (!w.is_array()) throw ValidationError("terminal.g_grid.w", "must be an array");
    const Vector wv = detail::json_vector(w, "terminal.g_grid.w", static_cast<Eigen::Index>(w.size()));
    std::vector<double> grid(wv.data(), wv.data() + wv.size());
    Matrix values = detail::json_matrix(g.at("values"), "terminal.g_grid.values", wv.size(), n);
    f.terminal = TerminalCondition::markovian(std::move(grid), std::move(values));
  } else {
    throw ValidationError("terminal.kind", "unknown kind '" + kind + "'");
  }
  f.terminal.validate(n);
  return f;
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ValidationError("json", std::string("malformed: ") + e.what());
  }
}

inline ProblemFile load_problem(const std::filesystem::path& path) {
  return parse_problem(read_json_file(path));
}

/// 64-bit FNV-1a, used as a content hash of inputs.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

// ---- JSON encoders -------------------------------------------------------

/// Non-finite doubles become null.
inline Json num(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

inline Json to_json(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

inline Json to_json(const Matrix& M) {
  Json a = Json::array();
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    Json row = Json::array();
    for (Eigen::Index c = 0; c < M.cols(); ++c) row.push_back(num(M(r, c)));
    a.push_back(std::move(row));
  }
  return a;
}

inline Json to_json(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline Json to_json(const ProblemData& p) {
  return Json{{"n", p.n},           {"m", p.m},           {"A", to_json(p.A)}, {"B", to_json(p.B)},
              {"C", to_json(p.C)},  {"b", to_json(p.b)},  {"Q", to_json(p.Q)}, {"N", to_json(p.N)},
              {"R", to_json(p.R)},  {"q", to_json(p.q)},  {"nvec", to_json(p.nvec)},
              {"r", to_json(p.r)}};
}

inline Json to_json(const TerminalCondition& t) {
  switch (t.kind) {
    case TerminalCondition::Kind::Deterministic:
      return Json{{"kind", "deterministic"}, {"xi0", to_json(t.xi0)}};
    case TerminalCondition::Kind::AffineInBrownian:
      return Json{{"kind", "affine"}, {"xi0", to_json(t.xi0)}, {"xi1", to_json(t.xi1)}};
    case TerminalCondition::Kind::BoundedMarkovian:
      break;
  }
  return Json{{"kind", "markovian"}, {"g_grid", {{"w", to_json(t.gGrid)}, {"values", to_json(t.gValues)}}}};
}

inline Json to_json(const HypothesisReport& h) {
  Json j{{"H1", h.h1Sufficient},
         {"H2", h.h2},
         {"h1Necessary", h.h1Necessary},
         {"verified", h.verified()},
         {"stabilityMargin", num(h.stabilityMargin)},
         {"warnings", h.warnings}};
  return j;
}

inline Json to_json(const ArePair& a) {
  return Json{{"P", to_json(a.P)},
              {"Sigma", to_json(a.Sigma)},
              {"residP", num(a.residP)},
              {"residSigma", num(a.residSigma)},
              {"inverseGap", num(a.inverseGap)},
              {"newtonIterations", a.newtonIterations},
              {"initialGain", a.initialGain}};
}

inline Json to_json(const StaticSolution& s) {
  return Json{{"y_star", to_json(s.yStar)},  {"z_star", to_json(s.zStar)},
              {"u_star", to_json(s.uStar)},  {"lambda_star", to_json(s.lambdaStar)},
              {"V", num(s.V)},               {"feasResid", num(s.feasResid)},
              {"kktResid", num(s.kktResid)}};
}

inline Json to_json(const DecayFit& f) {
  return Json{{"K4hat", num(f.K4hat)},     {"sigmaHat", num(f.sigmaHat)},
              {"r2", num(f.r2)},           {"windowStart", num(f.windowStart)},
              {"windowEnd", num(f.windowEnd)}, {"points", f.points},
              {"inconclusive", f.inconclusive}};
}

inline Json to_json(const PhiDecayMetrics& m) {
  return Json{{"K5hat", num(m.K5hat)}, {"thetaHat", num(m.thetaHat)}, {"r2", num(m.r2)},
              {"betaL2", num(m.betaL2)}, {"exactZero", m.exactZero},
              {"inconclusive", m.inconclusive}};
}

inline Json to_json(const ReferenceBoundReport& r) {
  return Json{{"k71", num(r.k71)},
              {"K7", num(r.K7)},
              {"K7Scaled", num(r.K7Scaled)},
              {"supSecondMoment", num(r.supSecondMoment)},
              {"seAtSup", num(r.seAtSup)},
              {"margin", num(r.margin)},
              {"pass", r.pass}};
}

inline Json to_json(const EnvelopeReport& e) {
  Json hs = Json::array();
  for (const auto& h : e.horizons)
    hs.push_back(Json{{"T", num(h.T)},
                      {"K", num(h.K)},
                      {"leftAmplitude", num(h.leftAmplitude)},
                      {"rightAmplitude", num(h.rightAmplitude)},
                      {"midpoint", num(h.midpoint)},
                      {"maxMargin", num(h.maxMargin)},
                      {"fittedPoints", h.fitted}});
  return Json{{"K", num(e.K)},
              {"rate", num(e.rate)},
              {"r2", num(e.r2)},
              {"spread", num(e.spread)},
              {"spreadLong", num(e.spreadLong)},
              {"horizons", hs},
              {"trivial", e.trivial},
              {"inconclusive", e.inconclusive},
              {"dominates", e.dominates},
              {"pass", e.pass},
              {"notes", e.notes}};
}

inline Json to_json(const IntegralReport& r) {
  Json rows = Json::array();
  for (const auto& x : r.rows)
    rows.push_back(Json{{"T", num(x.T)}, {"IY", num(x.IY)}, {"IU", num(x.IU)}, {"IZ", num(x.IZ)}});
  return Json{{"rows", rows},
              {"spreadY", num(r.spreadY)},
              {"spreadU", num(r.spreadU)},
              {"K6hat", num(r.K6hat)},
              {"pass", r.pass}};
}

inline Json to_json(const ValueGapReport& r) {
  Json rows = Json::array();
  for (const auto& x : r.rows)
    rows.push_back(
        Json{{"T", num(x.T)}, {"VT", num(x.VT)}, {"VTperT", num(x.VTperT)}, {"gap", num(x.gap)}});
  return Json{{"rows", rows},          {"V", num(r.V)},
              {"slope", num(r.slope)}, {"r2", num(r.r2)},
              {"threshold", num(r.threshold)}, {"K2hat", num(r.K2hat)},
              {"structuralFast", r.structuralFast}, {"trivial", r.trivial},
              {"pass", r.pass}};
}

// ---- CSV -----------------------------------------------------------------

/// Comma-separated table with a header line; numbers in round-trip precision.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path), path_(path) {
    if (!out_) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out_ << std::setprecision(17);
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
  }

  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << values[i];
    out_ << '\n';
    if (!out_) throw Error(ErrorKind::Io, "write failed on " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

/// Column names "name_i" or "name_i_j" for a vector or a row-major matrix.
inline std::vector<std::string> indexed_columns(const std::string& name, Eigen::Index rows,
                                                Eigen::Index cols = 0) {
  std::vector<std::string> out;
  if (cols == 0) {
    for (Eigen::Index i = 0; i < rows; ++i) out.push_back(name + "_" + std::to_string(i));
    return out;
  }
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      out.push_back(name + "_" + std::to_string(i) + "_" + std::to_string(j));
  return out;
}

inline void append(std::vector<double>& row, const Matrix& M) {
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Io, "write failed on " + path.string());
}

}  // namespace blq
