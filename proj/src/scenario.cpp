#include "relsync/scenario.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <utility>

namespace relsync {

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

LogLevel parse_log_env() {
  const char* v = std::getenv("RELSYNC_LOG");
  if (!v) return LogLevel::error;
  const std::string s(v);
  if (s == "debug") return LogLevel::debug;
  if (s == "info") return LogLevel::info;
  return LogLevel::error;
}

}  // namespace

LogLevel log_level() {
  static const LogLevel lvl = parse_log_env();
  return lvl;
}

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::cerr << "relsync: " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::cerr << "relsync[debug]: " << msg << "\n";
}

// ---------------------------------------------------------------------------
// config parsing
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

const json& require_field(const json& obj, const std::string& path, const char* key) {
  if (!obj.is_object()) fail(path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) fail(path + "." + key, "missing required field");
  return *it;
}

double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  return j.get<double>();
}

long as_integer(const json& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path, "expected an integer");
  return j.get<long>();
}

double number_or(const json& obj, const std::string& path, const char* key, double def) {
  if (!obj.is_object()) fail(path, "expected an object");
  const auto it = obj.find(key);
  return it == obj.end() ? def : as_number(*it, path + "." + key);
}

long integer_or(const json& obj, const std::string& path, const char* key, long def) {
  if (!obj.is_object()) fail(path, "expected an object");
  const auto it = obj.find(key);
  return it == obj.end() ? def : as_integer(*it, path + "." + key);
}

bool bool_or(const json& obj, const std::string& path, const char* key, bool def) {
  if (!obj.is_object()) fail(path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) return def;
  if (!it->is_boolean()) fail(path + "." + key, "expected a boolean");
  return it->get<bool>();
}

std::string string_or(const json& obj, const std::string& path, const char* key,
                      const std::string& def) {
  if (!obj.is_object()) fail(path, "expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) return def;
  if (!it->is_string()) fail(path + "." + key, "expected a string");
  return it->get<std::string>();
}

Mat parse_matrix(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array of rows");
  const Index rows = static_cast<Index>(j.size());
  if (rows == 0) return Mat(0, 0);
  if (!j[0].is_array()) fail(path + "[0]", "expected an array of numbers");
  const Index cols = static_cast<Index>(j[0].size());
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    const std::string rpath = path + "[" + std::to_string(r) + "]";
    if (!row.is_array()) fail(rpath, "expected an array of numbers");
    if (static_cast<Index>(row.size()) != cols) fail(rpath, "ragged row");
    for (Index c = 0; c < cols; ++c) {
      m(r, c) = as_number(row[static_cast<std::size_t>(c)], rpath);
    }
  }
  if (!m.allFinite()) fail(path, "nonfinite entries");
  return m;
}

Vec parse_vector(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, "expected an array of numbers");
  Vec v(static_cast<Index>(j.size()));
  for (Index i = 0; i < v.size(); ++i) {
    v(i) = as_number(j[static_cast<std::size_t>(i)], path + "[" + std::to_string(i) + "]");
  }
  return v;
}

Topology parse_topology(const std::string& s, const std::string& path) {
  if (s == "complete") return Topology::complete;
  if (s == "ring") return Topology::ring;
  if (s == "path") return Topology::path;
  fail(path, "expected one of complete|ring|path");
}

SimMode parse_mode(const std::string& s, const std::string& path) {
  if (s == "ode") return SimMode::ode;
  if (s == "closedform") return SimMode::closedform;
  if (s == "closedloop") return SimMode::closedloop;
  fail(path, "expected one of ode|closedform|closedloop");
}

ArraySpec<double> parse_inline_spec(const json& jspec) {
  ArraySpec<double> spec;
  spec.q = static_cast<int>(as_integer(require_field(jspec, "spec", "q"), "spec.q"));
  spec.n = static_cast<int>(as_integer(require_field(jspec, "spec", "n"), "spec.n"));
  if (spec.q < 2) fail("spec.q", "must be >= 2");
  if (spec.n < 1) fail("spec.n", "must be >= 1");
  spec.A = parse_matrix(require_field(jspec, "spec", "A"), "spec.A");
  if (spec.A.rows() != spec.n || spec.A.cols() != spec.n) {
    fail("spec.A", "expected " + std::to_string(spec.n) + "x" + std::to_string(spec.n) +
                       ", got " + std::to_string(spec.A.rows()) + "x" +
                       std::to_string(spec.A.cols()));
  }
  const auto it = jspec.find("couplings");
  if (it == jspec.end()) return spec;
  if (!it->is_array()) fail("spec.couplings", "expected an array");
  std::vector<std::pair<int, int>> seen;
  for (std::size_t idx = 0; idx < it->size(); ++idx) {
    const json& jc = (*it)[idx];
    const std::string path = "spec.couplings[" + std::to_string(idx) + "]";
    Coupling<double> c;
    c.i = static_cast<int>(as_integer(require_field(jc, path, "i"), path + ".i"));
    c.j = static_cast<int>(as_integer(require_field(jc, path, "j"), path + ".j"));
    if (c.i < 1 || c.j > spec.q || c.i >= c.j) {
      fail(path, "pair indices must satisfy 1 <= i < j <= q");
    }
    if (std::find(seen.begin(), seen.end(), std::make_pair(c.i, c.j)) != seen.end()) {
      fail(path, "duplicate pair (" + std::to_string(c.i) + "," + std::to_string(c.j) + ")");
    }
    seen.emplace_back(c.i, c.j);
    if (jc.contains("B")) {
      Mat b = parse_matrix(jc.at("B"), path + ".B");
      if (b.size() == 0) b = Mat(spec.n, 0);
      if (b.rows() != spec.n) {
        fail(path + ".B", "expected " + std::to_string(spec.n) + " row(s), got " +
                              std::to_string(b.rows()));
      }
      c.B = std::move(b);
    } else {
      c.B = Mat(spec.n, 0);
    }
    if (jc.contains("C")) {
      Mat cc = parse_matrix(jc.at("C"), path + ".C");
      if (cc.size() == 0) cc = Mat(0, spec.n);
      if (cc.cols() != spec.n) {
        fail(path + ".C", "expected " + std::to_string(spec.n) + " column(s), got " +
                              std::to_string(cc.cols()));
      }
      c.C = std::move(cc);
    } else {
      c.C = Mat(0, spec.n);
    }
    spec.couplings.push_back(std::move(c));
  }
  return spec;
}

}  // namespace

SynthParams<double> effective_params(const ScenarioConfig& cfg) {
  SynthParams<double> p = cfg.params;
  if (cfg.limit_gains) {
    p.tau_c = std::numeric_limits<double>::infinity();
    p.tau_o = std::numeric_limits<double>::infinity();
  }
  return p;
}

ScenarioConfig parse_config(const std::string& text) { return parse_config(text, std::nullopt); }

ScenarioConfig parse_config(const std::string& text,
                            std::optional<std::uint64_t> seed_override) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");

  ScenarioConfig cfg;
  if (const auto it = root.find("seed"); it != root.end()) {
    if (!it->is_number_unsigned() && !it->is_number_integer()) {
      fail("seed", "expected an unsigned integer");
    }
    if (it->is_number_integer() && it->get<long long>() < 0) fail("seed", "must be >= 0");
    cfg.seed = it->get<std::uint64_t>();
  }
  if (seed_override) cfg.seed = *seed_override;

  const json& jspec = require_field(root, "config", "spec");
  if (jspec.is_object() && jspec.contains("random")) {
    const json& jr = jspec.at("random");
    const int q = static_cast<int>(as_integer(require_field(jr, "spec.random", "q"), "spec.random.q"));
    const int n = static_cast<int>(as_integer(require_field(jr, "spec.random", "n"), "spec.random.n"));
    const Topology topo =
        parse_topology(string_or(jr, "spec.random", "topology", "complete"), "spec.random.topology");
    const int p = static_cast<int>(integer_or(jr, "spec.random", "p", 1));
    const int m = static_cast<int>(integer_or(jr, "spec.random", "m", 1));
    const double amp = number_or(jr, "spec.random", "amp", 1.0);
    try {
      cfg.spec = gen_random(q, n, topo, p, m, amp, cfg.seed);
    } catch (const std::invalid_argument& e) {
      fail("spec.random", e.what());
    }
  } else {
    cfg.spec = parse_inline_spec(jspec);
  }
  try {
    cfg.spec.validate();
  } catch (const std::invalid_argument& e) {
    fail("spec", e.what());
  }

  cfg.params.N_c = cfg.spec.n;
  cfg.params.N_o = cfg.spec.n;
  cfg.params.tau_c = 1.0;
  cfg.params.tau_o = 1.0;
  if (const auto it = root.find("params"); it != root.end()) {
    const json& jp = *it;
    cfg.params.N_c = static_cast<int>(integer_or(jp, "params", "N_c", cfg.spec.n));
    cfg.params.N_o = static_cast<int>(integer_or(jp, "params", "N_o", cfg.spec.n));
    cfg.params.tau_c = number_or(jp, "params", "tau_c", 1.0);
    cfg.params.tau_o = number_or(jp, "params", "tau_o", 1.0);
    cfg.params.schur_margin = number_or(jp, "params", "schur_margin", 1e-6);
    cfg.limit_gains = bool_or(jp, "params", "limit_gains", false);
  }
  try {
    cfg.params.validate(cfg.spec.n);
  } catch (const std::invalid_argument& e) {
    fail("params", e.what());
  }
  if (!(cfg.params.tau_c > 0)) fail("params.tau_c", "must be > 0");
  if (!(cfg.params.tau_o > 0)) fail("params.tau_o", "must be > 0");
  if (std::isinf(cfg.params.tau_c) || std::isinf(cfg.params.tau_o)) {
    fail("params", "use limit_gains instead of infinite tau");
  }

  cfg.h = number_or(root, "config", "h", 0.0);
  if (cfg.h < 0 || !std::isfinite(cfg.h)) fail("h", "must be a finite number >= 0");
  cfg.rank_tol = number_or(root, "config", "rank_tol", 1e-9);
  if (!(cfg.rank_tol > 0 && cfg.rank_tol < 1)) fail("rank_tol", "must lie in (0, 1)");

  const Index qn = static_cast<Index>(cfg.spec.q) * cfg.spec.n;
  if (const auto it = root.find("sim"); it != root.end()) {
    const json& js = *it;
    cfg.sim.steps = integer_or(js, "sim", "steps", 100);
    if (cfg.sim.steps < 1) fail("sim.steps", "must be >= 1");
    cfg.sim.mode = parse_mode(string_or(js, "sim", "mode", "closedform"), "sim.mode");
    if (const auto jx = js.find("x0"); jx != js.end()) {
      if (jx->is_string()) {
        if (jx->get<std::string>() != "random") fail("sim.x0", "expected an array or \"random\"");
      } else {
        Vec v = parse_vector(*jx, "sim.x0");
        if (v.size() != qn) {
          fail("sim.x0", "expected length " + std::to_string(qn) + ", got " +
                             std::to_string(v.size()));
        }
        cfg.sim.x0 = std::move(v);
      }
    }
    cfg.sim.x0_scale = number_or(js, "sim", "x0_scale", 1.0);
    if (const auto jx = js.find("xhat0"); jx != js.end()) {
      if (jx->is_string()) {
        const std::string s = jx->get<std::string>();
        if (s == "random") {
          cfg.sim.xhat0_random = true;
        } else if (s != "zero") {
          fail("sim.xhat0", "expected an array, \"zero\" or \"random\"");
        }
      } else {
        Vec v = parse_vector(*jx, "sim.xhat0");
        if (v.size() != qn) {
          fail("sim.xhat0", "expected length " + std::to_string(qn) + ", got " +
                                std::to_string(v.size()));
        }
        cfg.sim.xhat0 = std::move(v);
      }
    }
    cfg.sim.xhat0_scale = number_or(js, "sim", "xhat0_scale", 1.0);
  }
  if (cfg.limit_gains && cfg.sim.mode == SimMode::ode) {
    fail("sim.mode", "ode mode cannot integrate the limit gains (limit_gains=true)");
  }

  if (const auto it = root.find("outputs"); it != root.end()) {
    cfg.outputs.trace = string_or(*it, "outputs", "trace", cfg.outputs.trace);
    cfg.outputs.report = string_or(*it, "outputs", "report", cfg.outputs.report);
  }

  if (const auto it = root.find("sweep"); it != root.end()) {
    const json& jt = require_field(*it, "sweep", "tau_list");
    if (!jt.is_array() || jt.empty()) fail("sweep.tau_list", "expected a nonempty array");
    for (std::size_t i = 0; i < jt.size(); ++i) {
      const double tau = as_number(jt[i], "sweep.tau_list[" + std::to_string(i) + "]");
      if (!(tau > 0)) fail("sweep.tau_list[" + std::to_string(i) + "]", "must be > 0");
      cfg.sweep_taus.push_back(tau);
    }
  }
  return cfg;
}

namespace {

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_to_json(const Vec& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

}  // namespace

std::string serialize_config(const ScenarioConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  ordered_json jspec;
  jspec["q"] = cfg.spec.q;
  jspec["n"] = cfg.spec.n;
  jspec["A"] = matrix_to_json(cfg.spec.A);
  ordered_json jcoup = ordered_json::array();
  for (const auto& c : cfg.spec.couplings) {
    ordered_json jc;
    jc["i"] = c.i;
    jc["j"] = c.j;
    jc["B"] = matrix_to_json(c.B);
    jc["C"] = matrix_to_json(c.C);
    jcoup.push_back(std::move(jc));
  }
  jspec["couplings"] = std::move(jcoup);
  j["spec"] = std::move(jspec);

  ordered_json jp;
  jp["N_c"] = cfg.params.N_c;
  jp["N_o"] = cfg.params.N_o;
  jp["tau_c"] = cfg.params.tau_c;
  jp["tau_o"] = cfg.params.tau_o;
  jp["schur_margin"] = cfg.params.schur_margin;
  jp["limit_gains"] = cfg.limit_gains;
  j["params"] = std::move(jp);

  j["h"] = cfg.h;
  j["rank_tol"] = cfg.rank_tol;

  ordered_json js;
  js["steps"] = cfg.sim.steps;
  js["mode"] = to_string(cfg.sim.mode);
  if (cfg.sim.x0) {
    js["x0"] = vector_to_json(*cfg.sim.x0);
  } else {
    js["x0"] = "random";
  }
  js["x0_scale"] = cfg.sim.x0_scale;
  if (cfg.sim.xhat0) {
    js["xhat0"] = vector_to_json(*cfg.sim.xhat0);
  } else {
    js["xhat0"] = cfg.sim.xhat0_random ? "random" : "zero";
  }
  js["xhat0_scale"] = cfg.sim.xhat0_scale;
  j["sim"] = std::move(js);

  ordered_json jo;
  jo["trace"] = cfg.outputs.trace;
  jo["report"] = cfg.outputs.report;
  j["outputs"] = std::move(jo);

  if (!cfg.sweep_taus.empty()) {
    j["sweep"] = ordered_json{{"tau_list", cfg.sweep_taus}};
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// random arrays and seeded vectors
// ---------------------------------------------------------------------------

namespace {

double next_u01(std::mt19937_64& eng) {
  // 53 uniform mantissa bits; identical on every platform, unlike
  // std::uniform_real_distribution
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

double next_uniform(std::mt19937_64& eng, double lo, double hi) {
  return lo + (hi - lo) * next_u01(eng);
}

Mat uniform_matrix(std::mt19937_64& eng, Index rows, Index cols, double lo, double hi) {
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = next_uniform(eng, lo, hi);
  }
  return m;
}

std::vector<std::pair<int, int>> topology_edges(int q, Topology t) {
  std::vector<std::pair<int, int>> edges;
  switch (t) {
    case Topology::complete:
      for (int i = 1; i <= q; ++i) {
        for (int j = i + 1; j <= q; ++j) edges.emplace_back(i, j);
      }
      break;
    case Topology::ring:
      for (int i = 1; i < q; ++i) edges.emplace_back(i, i + 1);
      if (q >= 3) edges.emplace_back(1, q);
      break;
    case Topology::path:
      for (int i = 1; i < q; ++i) edges.emplace_back(i, i + 1);
      break;
  }
  return edges;
}

}  // namespace

ArraySpec<double> gen_random(int q, int n, Topology topology, int p, int m, double amp,
                             std::uint64_t seed) {
  if (q < 2) throw std::invalid_argument("gen_random: q must be >= 2");
  if (n < 1) throw std::invalid_argument("gen_random: n must be >= 1");
  if (p < 0 || m < 0) throw std::invalid_argument("gen_random: p and m must be >= 0");
  if (!(amp > 0)) throw std::invalid_argument("gen_random: amp must be > 0");

  std::mt19937_64 eng(seed);
  ArraySpec<double> spec;
  spec.q = q;
  spec.n = n;
  spec.A = uniform_matrix(eng, n, n, -amp, amp);
  const auto edges = topology_edges(q, topology);

  for (int attempt = 0; attempt < 100; ++attempt) {
    spec.couplings.clear();
    for (const auto& [i, j] : edges) {
      Coupling<double> c;
      c.i = i;
      c.j = j;
      c.B = uniform_matrix(eng, n, p, -1.0, 1.0);
      c.C = uniform_matrix(eng, m, n, -1.0, 1.0);
      spec.couplings.push_back(std::move(c));
    }
    const auto sys = assemble(spec);
    if (is_controllable(sys) && is_observable(sys)) {
      log_debug("gen_random: certified after " + std::to_string(attempt + 1) + " attempt(s)");
      return spec;
    }
  }
  throw GenerationFailedError("gen_random: no certifiable couplings after 100 resamples");
}

Vec seeded_vector(std::uint64_t seed, int stream, Index size, double scale) {
  std::mt19937_64 eng(seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(stream + 1));
  Vec v(size);
  for (Index i = 0; i < size; ++i) v(i) = next_uniform(eng, -scale, scale);
  return v;
}

// ---------------------------------------------------------------------------
// report / trace serialization
// ---------------------------------------------------------------------------

namespace {

ordered_json tau_to_json(double tau) {
  if (std::isinf(tau)) return "inf";
  return tau;
}

double fit_decay_rate(const std::vector<double>& delta) {
  // least-squares slope of log(delta) over the second half of the trace
  const std::size_t lo = delta.size() / 2;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  long count = 0;
  for (std::size_t k = lo; k < delta.size(); ++k) {
    if (!(delta[k] > 1e-300)) continue;
    const double x = static_cast<double>(k);
    const double y = std::log(delta[k]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
    ++count;
  }
  if (count < 2) return 0.0;
  const double denom = count * sxx - sx * sx;
  if (denom == 0) return 0.0;
  return std::exp((count * sxy - sx * sy) / denom);
}

}  // namespace

std::string report_to_json(const Report& rep) {
  ordered_json j;
  j["command"] = rep.command;
  j["seed"] = rep.seed;
  {
    ordered_json a;
    a["q"] = rep.q;
    a["n"] = rep.n;
    a["pairs"] = rep.pairs;
    a["input_dim"] = rep.input_dim;
    a["output_dim"] = rep.output_dim;
    j["array"] = std::move(a);
  }
  {
    ordered_json c;
    c["controllable"] = rep.controllable;
    c["observable"] = rep.observable;
    c["rank_ctrb"] = rep.rank_ctrb;
    c["rank_obsv"] = rep.rank_obsv;
    c["rank_required"] = rep.rank_required;
    c["rank_tol"] = rep.rank_tol;
    j["certification"] = std::move(c);
  }
  if (rep.params) {
    ordered_json p;
    p["N_c"] = rep.params->N_c;
    p["N_o"] = rep.params->N_o;
    p["tau_c"] = tau_to_json(rep.params->tau_c);
    p["tau_o"] = tau_to_json(rep.params->tau_o);
    p["schur_margin"] = rep.params->schur_margin;
    p["limit_gains"] = rep.limit_gains;
    p["h"] = rep.h;
    j["params"] = std::move(p);
  }
  if (!rep.spectra.empty()) {
    ordered_json s;
    for (const auto& [name, entry] : rep.spectra) {
      ordered_json e;
      e["radius"] = entry.radius;
      e["abscissa"] = entry.abscissa;
      s[name] = std::move(e);
    }
    j["spectra"] = std::move(s);
  }
  if (rep.tau_c_threshold || rep.tau_o_threshold) {
    ordered_json t;
    t["control"] = rep.tau_c_threshold ? ordered_json(*rep.tau_c_threshold) : ordered_json();
    t["observe"] = rep.tau_o_threshold ? ordered_json(*rep.tau_o_threshold) : ordered_json();
    j["tau_thresholds"] = std::move(t);
  }
  if (rep.gain_norm_K || rep.gain_norm_L) {
    ordered_json g;
    if (rep.gain_norm_K) g["K"] = *rep.gain_norm_K;
    if (rep.gain_norm_L) g["L"] = *rep.gain_norm_L;
    j["gain_norms"] = std::move(g);
  }
  if (rep.convergence) {
    ordered_json c;
    c["steps"] = rep.convergence->steps;
    c["delta_start"] = rep.convergence->delta_start;
    c["delta_end"] = rep.convergence->delta_end;
    c["decay_rate"] = rep.convergence->decay_rate;
    j["convergence"] = std::move(c);
  }
  if (rep.max_rel_gap) {
    j["compare"] = ordered_json{{"max_rel_gap", *rep.max_rel_gap}};
  }
  return j.dump(2) + "\n";
}

namespace {

void append_number(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
}

}  // namespace

std::string trace_to_csv(const SimTrace<double>& trace) {
  const Index qn = trace.x.empty() ? 0 : trace.x.front().size();
  std::string out = "k,delta,avg_residual";
  for (Index i = 0; i < qn; ++i) out += ",x" + std::to_string(i);
  for (Index i = 0; i < qn; ++i) out += ",xhat" + std::to_string(i);
  out += "\n";
  for (std::size_t k = 0; k < trace.x.size(); ++k) {
    out += std::to_string(k);
    out += ',';
    append_number(out, trace.delta[k]);
    out += ',';
    append_number(out, k < trace.avg_residual.size() ? trace.avg_residual[k] : 0.0);
    for (Index i = 0; i < qn; ++i) {
      out += ',';
      append_number(out, trace.x[k](i));
    }
    for (Index i = 0; i < qn; ++i) {
      out += ',';
      append_number(out, trace.xhat[k](i));
    }
    out += '\n';
  }
  return out;
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// command drivers
// ---------------------------------------------------------------------------

namespace {

struct Certification {
  BigSystem<double> sys;
  ProjectionBasis<double> basis;
  Index rank_c = 0;
  Index rank_o = 0;
  Index required = 0;
  bool certified() const { return rank_c == required && rank_o == required; }
};

Certification certify(const ScenarioConfig& cfg) {
  Certification c;
  c.sys = assemble(cfg.spec);
  c.basis = make_projection_basis<double>(cfg.spec.q, cfg.spec.n);
  c.required = static_cast<Index>(cfg.spec.q - 1) * cfg.spec.n;
  c.rank_c = rank(controllability_matrix(c.sys, cfg.spec.n), cfg.rank_tol);
  c.rank_o = rank(observability_matrix(c.sys, cfg.spec.n), cfg.rank_tol);
  return c;
}

Report base_report(const char* command, const ScenarioConfig& cfg, const Certification& c) {
  Report rep;
  rep.command = command;
  rep.seed = cfg.seed;
  rep.q = cfg.spec.q;
  rep.n = cfg.spec.n;
  rep.pairs = static_cast<long>(c.sys.blocks.size());
  rep.input_dim = c.sys.input_dim();
  rep.output_dim = c.sys.output_dim();
  rep.rank_ctrb = c.rank_c;
  rep.rank_obsv = c.rank_o;
  rep.rank_required = c.required;
  rep.controllable = c.rank_c == c.required;
  rep.observable = c.rank_o == c.required;
  rep.rank_tol = cfg.rank_tol;
  return rep;
}

SpectrumEntry entry_of(const Mat& m) {
  const auto rep = spectrum(m);
  return {rep.spectral_radius, rep.spectral_abscissa};
}

/// Fills gains, spectra and thresholds into the report. Returns false when
/// the threshold search failed for either direction.
bool fill_synthesis(Report& rep, const ScenarioConfig& cfg, const Certification& cert,
                    GainSet<double>& gains) {
  const SynthParams<double> params = effective_params(cfg);
  gains = synthesize(cert.sys, cert.basis, params);
  rep.params = params;
  rep.limit_gains = cfg.limit_gains;
  rep.h = cfg.h;
  rep.spectra.emplace_back("Lambda", entry_of(gains.Lambda));
  rep.spectra.emplace_back("neg_Gamma", entry_of(Mat(-gains.Gamma)));
  rep.spectra.emplace_back("H_c", entry_of(gains.H_c));
  rep.spectra.emplace_back("H_o", entry_of(gains.H_o));
  rep.spectra.emplace_back("Phi_r", entry_of(gains.Phi_r));
  rep.gain_norm_K = gains.K.norm();
  rep.gain_norm_L = gains.L.norm();

  ThresholdOptions<double> opt;
  opt.margin = cfg.params.schur_margin;
  bool ok = true;
  try {
    rep.tau_c_threshold =
        find_tau_threshold(TauKind::control, cert.sys, cert.basis, params, opt);
    log_info("tau_c threshold: " + std::to_string(*rep.tau_c_threshold));
  } catch (const NoThresholdError& e) {
    std::cerr << "relsync: control threshold: " << e.what() << "\n";
    ok = false;
  }
  try {
    rep.tau_o_threshold =
        find_tau_threshold(TauKind::observe, cert.sys, cert.basis, params, opt);
    log_info("tau_o threshold: " + std::to_string(*rep.tau_o_threshold));
  } catch (const NoThresholdError& e) {
    std::cerr << "relsync: observer threshold: " << e.what() << "\n";
    ok = false;
  }
  return ok;
}

Vec resolve_x0(const ScenarioConfig& cfg, Index qn) {
  if (cfg.sim.x0) return *cfg.sim.x0;
  return seeded_vector(cfg.seed, 1, qn, cfg.sim.x0_scale);
}

Vec resolve_xhat0(const ScenarioConfig& cfg, Index qn) {
  if (cfg.sim.xhat0) return *cfg.sim.xhat0;
  if (cfg.sim.xhat0_random) return seeded_vector(cfg.seed, 2, qn, cfg.sim.xhat0_scale);
  return Vec::Zero(qn);
}

int finish_certification_failure(const Report& rep, const ScenarioConfig& cfg,
                                 const fs::path& out_dir) {
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  std::cerr << "relsync: certification failed (controllable="
            << (rep.controllable ? "true" : "false")
            << ", observable=" << (rep.observable ? "true" : "false") << ")\n";
  return 2;
}

}  // namespace

int cmd_check(const ScenarioConfig& cfg, const fs::path& out_dir) {
  const Certification cert = certify(cfg);
  const Report rep = base_report("check", cfg, cert);
  if (!cert.certified()) return finish_certification_failure(rep, cfg, out_dir);
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  std::cout << "check: controllable=true observable=true (rank " << cert.rank_c << "/"
            << cert.required << ")\n";
  return 0;
}

int cmd_synth(const ScenarioConfig& cfg, const fs::path& out_dir) {
  const Certification cert = certify(cfg);
  Report rep = base_report("synth", cfg, cert);
  if (!cert.certified()) return finish_certification_failure(rep, cfg, out_dir);
  GainSet<double> gains;
  const bool thresholds_ok = fill_synthesis(rep, cfg, cert, gains);
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  if (!thresholds_ok) return 2;
  std::cout << "synth: rho(Phi_r)=" << gains.rho_phi << " tau thresholds ("
            << *rep.tau_c_threshold << ", " << *rep.tau_o_threshold << ")\n";
  return 0;
}

int cmd_simulate(const ScenarioConfig& cfg, const fs::path& out_dir) {
  const Certification cert = certify(cfg);
  Report rep = base_report("simulate", cfg, cert);
  if (!cert.certified()) return finish_certification_failure(rep, cfg, out_dir);
  GainSet<double> gains;
  const bool thresholds_ok = fill_synthesis(rep, cfg, cert, gains);

  const Index qn = cert.sys.state_dim();
  const SynthParams<double> params = effective_params(cfg);
  try {
    const auto plan = make_sim_plan(cert.sys, cert.basis, params, cfg.sim.mode);
    SimTrace<double> trace =
        run(plan, resolve_x0(cfg, qn), resolve_xhat0(cfg, qn), cfg.sim.steps, cfg.h);
    trace.seed = cfg.seed;
    ConvergenceSummary conv;
    conv.steps = trace.steps();
    conv.delta_start = trace.delta.front();
    conv.delta_end = trace.delta.back();
    conv.decay_rate = fit_decay_rate(trace.delta);
    rep.convergence = conv;
    write_atomic(out_dir / cfg.outputs.trace, trace_to_csv(trace));
  } catch (const DivergenceError& e) {
    write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
    std::cerr << "relsync: " << e.what() << "\n";
    return 3;
  }
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  if (!thresholds_ok) return 2;
  std::cout << "simulate: mode=" << to_string(cfg.sim.mode) << " steps=" << cfg.sim.steps
            << " delta_end=" << rep.convergence->delta_end << "\n";
  return 0;
}

int cmd_compare(const ScenarioConfig& cfg, const fs::path& out_dir) {
  if (cfg.limit_gains) {
    throw ConfigError("params.limit_gains: compare needs finite tau (the ode path integrates)");
  }
  const Certification cert = certify(cfg);
  Report rep = base_report("compare", cfg, cert);
  if (!cert.certified()) return finish_certification_failure(rep, cfg, out_dir);
  GainSet<double> gains;
  const bool thresholds_ok = fill_synthesis(rep, cfg, cert, gains);

  const Index qn = cert.sys.state_dim();
  const Vec x0 = resolve_x0(cfg, qn);
  const Vec xhat0 = resolve_xhat0(cfg, qn);
  const SynthParams<double> params = effective_params(cfg);
  try {
    const SimTrace<double> ode =
        run(cert.sys, cert.basis, params, SimMode::ode, x0, xhat0, cfg.sim.steps, cfg.h);
    const SimTrace<double> closed =
        run(cert.sys, cert.basis, params, SimMode::closedform, x0, xhat0, cfg.sim.steps, cfg.h);
    double gap = 0;
    for (std::size_t k = 0; k < ode.x.size(); ++k) {
      const double scale =
          1.0 + std::max(closed.x[k].norm(), closed.xhat[k].norm());
      gap = std::max(gap, (ode.x[k] - closed.x[k]).norm() / scale);
      gap = std::max(gap, (ode.xhat[k] - closed.xhat[k]).norm() / scale);
    }
    rep.max_rel_gap = gap;
  } catch (const DivergenceError& e) {
    write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
    std::cerr << "relsync: " << e.what() << "\n";
    return 3;
  }
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  if (!thresholds_ok) return 2;
  std::cout << "compare: max_rel_gap=" << *rep.max_rel_gap << " over " << cfg.sim.steps
            << " steps\n";
  return 0;
}

int cmd_sweep(const ScenarioConfig& cfg, const fs::path& out_dir) {
  const Certification cert = certify(cfg);
  Report rep = base_report("sweep", cfg, cert);
  if (!cert.certified()) return finish_certification_failure(rep, cfg, out_dir);

  const SynthParams<double> params = effective_params(cfg);
  const auto cplan = make_ctrl_plan(cert.sys, cert.basis, params.N_c);
  const auto oplan = make_obsv_plan(cert.sys, cert.basis, params.N_o);
  const auto red = reduce(cert.sys, cert.basis);
  const auto kleinman = kleinman_gains(red, params.N_c, params.N_o);

  std::vector<double> taus = cfg.sweep_taus;
  if (taus.empty()) {
    for (double tau = 0.25; tau <= 32.0; tau *= 2) taus.push_back(tau);
  }
  std::string csv = "tau,radius_ctrl,radius_obsv\n";
  for (const double tau : taus) {
    const double rc =
        spectrum(Mat(kleinman.first + theta_ctrl(cplan, tau))).spectral_radius;
    const double ro =
        spectrum(Mat(kleinman.second + theta_obsv(oplan, tau))).spectral_radius;
    append_number(csv, tau);
    csv += ',';
    append_number(csv, rc);
    csv += ',';
    append_number(csv, ro);
    csv += '\n';
  }
  rep.params = params;
  rep.limit_gains = cfg.limit_gains;
  rep.h = cfg.h;
  write_atomic(out_dir / cfg.outputs.trace, csv);
  write_atomic(out_dir / cfg.outputs.report, report_to_json(rep));
  std::cout << "sweep: " << taus.size() << " tau value(s) written\n";
  return 0;
}

}  // namespace relsync
