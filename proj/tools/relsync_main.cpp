#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "relsync/scenario.hpp"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw relsync::ConfigError("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relsync - synchronization of relatively actuated linear arrays"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";

  auto* check = app.add_subcommand("check", "certify controllability and observability");
  auto* synth = app.add_subcommand("synth", "synthesize gains and tau thresholds");
  auto* simulate = app.add_subcommand("simulate", "run one simulation, write trace and report");
  auto* compare = app.add_subcommand("compare", "distributed vs closed-form path deltas");
  auto* sweep = app.add_subcommand("sweep", "spectral radius of the reduced blocks over a tau grid");
  for (auto* sub : {check, synth, simulate, compare, sweep}) {
    sub->add_option("--config", config_path, "scenario config JSON")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out-dir", out_dir, "directory for output files");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = relsync::parse_config(read_file(config_path), seed);
    const std::filesystem::path dir = out_dir;
    if (check->parsed()) return relsync::cmd_check(cfg, dir);
    if (synth->parsed()) return relsync::cmd_synth(cfg, dir);
    if (simulate->parsed()) return relsync::cmd_simulate(cfg, dir);
    if (compare->parsed()) return relsync::cmd_compare(cfg, dir);
    if (sweep->parsed()) return relsync::cmd_sweep(cfg, dir);
  } catch (const relsync::ConfigError& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 1;
  } catch (const relsync::NotSpdError& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 2;
  } catch (const relsync::NoThresholdError& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 2;
  } catch (const relsync::GenerationFailedError& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 2;
  } catch (const relsync::DivergenceError& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "relsync: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
