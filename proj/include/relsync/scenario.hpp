#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "relsync/algorithm_sim.hpp"
#include "relsync/array_model.hpp"
#include "relsync/gain_synthesis.hpp"
#include "relsync/types.hpp"

namespace relsync {

/// Config ingestion failure; the message carries the JSON path of the
/// offending field, e.g. "spec.couplings[0].B: ...".
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Topology { complete, ring, path };

/// Diagnostics verbosity, selected through the RELSYNC_LOG environment
/// variable (error | info | debug). Defaults to error.
enum class LogLevel { error = 0, info = 1, debug = 2 };
LogLevel log_level();
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

struct SimConfig {
  long steps = 100;
  SimMode mode = SimMode::closedform;
  std::optional<Vec> x0;  // empty -> seeded random of unit scale
  double x0_scale = 1.0;
  std::optional<Vec> xhat0;  // empty -> zeros, or seeded random if requested
  bool xhat0_random = false;
  double xhat0_scale = 1.0;
};

struct OutputConfig {
  std::string trace = "trace.csv";
  std::string report = "report.json";
};

struct ScenarioConfig {
  ArraySpec<double> spec;
  SynthParams<double> params;
  bool limit_gains = false;  // replace e^(Lambda tau) and e^(-Gamma tau) by 0
  double h = 0;              // ode sub-step; 0 -> min(tau_c, tau_o)/2000
  double rank_tol = 1e-9;
  SimConfig sim;
  OutputConfig outputs;
  std::uint64_t seed = 1;
  std::vector<double> sweep_taus;  // grid for the sweep command
};

/// Parameters actually used by synthesis/simulation: with limit_gains the
/// tau values are replaced by +infinity.
SynthParams<double> effective_params(const ScenarioConfig& cfg);

ScenarioConfig parse_config(const std::string& text);
ScenarioConfig parse_config(const std::string& text,
                            std::optional<std::uint64_t> seed_override);
std::string serialize_config(const ScenarioConfig& cfg);

/// Deterministic random array: A entries uniform in [-amp, amp], per-edge
/// B/C with unit-scale entries, couplings resampled (up to 100 times) until
/// both rank tests pass.
ArraySpec<double> gen_random(int q, int n, Topology topology, int p, int m, double amp,
                             std::uint64_t seed);

/// Seeded initial vectors for a simulation; stream separates independent
/// draws made from the same config seed.
Vec seeded_vector(std::uint64_t seed, int stream, Index size, double scale);

struct SpectrumEntry {
  double radius = 0;
  double abscissa = 0;
};

struct ConvergenceSummary {
  long steps = 0;
  double delta_start = 0;
  double delta_end = 0;
  double decay_rate = 0;  // fitted geometric rate of the delta tail
};

struct Report {
  std::string command;
  std::uint64_t seed = 0;
  int q = 0;
  int n = 0;
  long pairs = 0;
  Index input_dim = 0;
  Index output_dim = 0;
  bool controllable = false;
  bool observable = false;
  Index rank_ctrb = 0;
  Index rank_obsv = 0;
  Index rank_required = 0;
  double rank_tol = 1e-9;
  std::optional<SynthParams<double>> params;
  bool limit_gains = false;
  double h = 0;
  std::vector<std::pair<std::string, SpectrumEntry>> spectra;
  std::optional<double> tau_c_threshold;
  std::optional<double> tau_o_threshold;
  std::optional<double> gain_norm_K;
  std::optional<double> gain_norm_L;
  std::optional<ConvergenceSummary> convergence;
  std::optional<double> max_rel_gap;
};

std::string report_to_json(const Report& rep);

std::string trace_to_csv(const SimTrace<double>& trace);

/// Write through a temp file in the same directory plus rename.
void write_atomic(const std::filesystem::path& path, const std::string& content);

// Command drivers. Return value is the process exit code: 0 success,
// 2 certification failure (rank test or threshold search), 3 numeric abort.
int cmd_check(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);
int cmd_synth(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);
int cmd_simulate(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);
int cmd_compare(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);
int cmd_sweep(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace relsync
