#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "relsync/scenario.hpp"
#include "test_util.hpp"

using namespace relsync;
namespace fs = std::filesystem;

namespace {

const char* kMinimalConfig = R"({
  "spec": {
    "q": 2, "n": 1,
    "A": [[2.0]],
    "couplings": [{"i": 1, "j": 2, "B": [[1.0]], "C": [[1.0]]}]
  }
})";

std::string config_with(const std::string& extra) {
  std::string base = kMinimalConfig;
  base.pop_back();  // strip trailing newline
  base.pop_back();  // strip closing brace
  return base + ",\n" + extra + "\n}";
}

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir =
      fs::temp_directory_path() / ("relsync-scenario-" + tag + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void check_config_error(const std::string& text, const std::string& needle) {
  try {
    parse_config(text);
    FAIL_CHECK("expected ConfigError mentioning '" << needle << "'");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("minimal config parses with defaults") {
  const auto cfg = parse_config(kMinimalConfig);
  CHECK(cfg.spec.q == 2);
  CHECK(cfg.spec.n == 1);
  CHECK(cfg.params.N_c == 1);
  CHECK(cfg.params.N_o == 1);
  CHECK(cfg.params.tau_c == 1.0);
  CHECK(cfg.params.schur_margin == 1e-6);
  CHECK(cfg.h == 0.0);
  CHECK(cfg.rank_tol == 1e-9);
  CHECK(cfg.sim.steps == 100);
  CHECK(cfg.sim.mode == SimMode::closedform);
  CHECK_FALSE(cfg.sim.x0.has_value());
  CHECK_FALSE(cfg.sim.xhat0.has_value());
  CHECK(cfg.seed == 1);
  CHECK(cfg.outputs.trace == "trace.csv");
}

TEST_CASE("config errors carry field paths") {
  check_config_error(R"({"spec": {"q": 2, "n": 1, "A": [[2.0]],
    "couplings": [{"i": 1, "j": 2, "B": [[1.0],[2.0]], "C": [[1.0]]}]}})",
                     "couplings[0].B");
  check_config_error(R"({"spec": {"q": 2, "n": 1, "A": [[2.0]],
    "couplings": [{"i": 1, "j": 2, "B": [[1.0]], "C": [[1.0]]},
                  {"i": 1, "j": 2, "B": [[1.0]], "C": [[1.0]]}]}})",
                     "duplicate");
  check_config_error("{not json", "malformed");
  check_config_error(R"({"spec": {"q": 2, "n": 1}})", "spec.A");
  check_config_error(config_with(R"("params": {"N_c": 0})"), "N_c");
  check_config_error(config_with(R"("params": {"tau_c": -1.0})"), "tau_c");
  check_config_error(config_with(R"("sim": {"x0": [1.0]})"), "x0");
  check_config_error(config_with(R"("sim": {"mode": "warp"})"), "mode");
  check_config_error(config_with(R"("sweep": {"tau_list": []})"), "tau_list");
}

TEST_CASE("serialize and parse round-trip byte-identically") {
  const std::string full = config_with(R"(
  "seed": 9,
  "params": {"N_c": 1, "N_o": 1, "tau_c": 20.0, "tau_o": 20.0, "schur_margin": 0.05},
  "h": 0.001,
  "sim": {"steps": 12, "mode": "closedloop", "x0": [0.25, -1.5], "xhat0": "random"},
  "sweep": {"tau_list": [0.25, 0.5, 1.0]})");
  const auto cfg = parse_config(full);
  const std::string once = serialize_config(cfg);
  const std::string twice = serialize_config(parse_config(once));
  CHECK(once == twice);
}

TEST_CASE("random arrays are deterministic in the seed") {
  const auto a = gen_random(3, 2, Topology::complete, 1, 1, 1.0, 7);
  const auto b = gen_random(3, 2, Topology::complete, 1, 1, 1.0, 7);
  CHECK(a.A == b.A);
  REQUIRE(a.couplings.size() == b.couplings.size());
  for (std::size_t i = 0; i < a.couplings.size(); ++i) {
    CHECK(a.couplings[i].B == b.couplings[i].B);
    CHECK(a.couplings[i].C == b.couplings[i].C);
  }
  const auto c = gen_random(3, 2, Topology::complete, 1, 1, 1.0, 8);
  CHECK(a.A != c.A);
}

TEST_CASE("topologies give the expected edge sets") {
  CHECK(gen_random(4, 1, Topology::ring, 1, 1, 1.0, 3).couplings.size() == 4);
  CHECK(gen_random(5, 1, Topology::path, 1, 1, 1.0, 3).couplings.size() == 4);
  CHECK(gen_random(4, 1, Topology::complete, 1, 1, 1.0, 3).couplings.size() == 6);
  CHECK(gen_random(2, 1, Topology::ring, 1, 1, 1.0, 3).couplings.size() == 1);
}

TEST_CASE("generated arrays pass both rank tests") {
  for (const std::uint64_t seed : {1u, 5u, 9u}) {
    const auto spec = gen_random(4, 2, Topology::ring, 1, 1, 1.0, seed);
    CHECK(is_controllable(spec));
    CHECK(is_observable(spec));
  }
}

TEST_CASE("generation fails cleanly when no input channels exist") {
  CHECK_THROWS_AS(gen_random(2, 1, Topology::complete, 0, 0, 1.0, 1), GenerationFailedError);
}

TEST_CASE("seeded vectors are deterministic and stream-separated") {
  const Vec a = seeded_vector(5, 1, 4, 1.0);
  const Vec b = seeded_vector(5, 1, 4, 1.0);
  const Vec c = seeded_vector(5, 2, 4, 1.0);
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
}

TEST_CASE("reports are byte-identical across runs") {
  const std::string text = config_with(
      R"("params": {"N_c": 1, "N_o": 1, "tau_c": 20.0, "tau_o": 20.0, "schur_margin": 0.05})");
  const auto cfg = parse_config(text);
  const fs::path d1 = fresh_dir("rep1");
  const fs::path d2 = fresh_dir("rep2");
  CHECK(cmd_synth(cfg, d1) == 0);
  CHECK(cmd_synth(cfg, d2) == 0);
  CHECK(slurp(d1 / "report.json") == slurp(d2 / "report.json"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("limit gains serialize as the string inf") {
  const std::string text = config_with(
      R"("params": {"limit_gains": true}, "sim": {"steps": 6, "mode": "closedloop"})");
  const auto cfg = parse_config(text);
  CHECK(cfg.limit_gains);
  const fs::path dir = fresh_dir("limit");
  CHECK(cmd_synth(cfg, dir) == 0);
  const std::string rep = slurp(dir / "report.json");
  CHECK(rep.find("\"tau_c\": \"inf\"") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("trace CSV layout") {
  const auto spec = testutil::scalar_pair_spec();
  const auto sys = assemble(spec);
  const auto basis = make_projection_basis<double>(2, 1);
  SynthParams<double> p;
  p.N_c = 1;
  p.N_o = 1;
  p.tau_c = 20;
  p.tau_o = 20;
  Vec x0(2);
  x0 << 1, 0;
  const auto trace = run(sys, basis, p, SimMode::closedform, x0, Vec(Vec::Zero(2)), 3);
  const std::string csv = trace_to_csv(trace);

  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "k,delta,avg_residual,x0,x1,xhat0,xhat1");
  int rows = 0;
  while (std::getline(lines, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);  // steps + 1
}

TEST_CASE("atomic writes create parent directories") {
  const fs::path dir = fresh_dir("atomic");
  const fs::path target = dir / "nested" / "out.txt";
  write_atomic(target, "payload");
  CHECK(slurp(target) == "payload");
  CHECK_FALSE(fs::exists(target.string() + ".tmp"));
  fs::remove_all(dir);
}
