// The register / evaluate / synth subcommands behind the command-line tool.
#pragma once

#include "det/core.hpp"
#include "det/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>

namespace det {

inline constexpr std::uint64_t kDefaultSeed = 20240531;

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

enum class OutputFrame { target_original, normalized };

struct RunConfig {
  // register / evaluate inputs
  std::filesystem::path target;
  std::filesystem::path source;
  std::filesystem::path schedule;  // optional plain-text schedule config
  std::string preset = "single";   // single, rigid_then_fine or fine_only (ignored with a schedule file)
  std::map<std::string, std::string> overrides;  // hyperparameters applied to every stage
  std::uint64_t seed = kDefaultSeed;
  std::filesystem::path output_dir = ".";
  OutputFrame frame = OutputFrame::target_original;
  bool pre_aligned = false;
  char delimiter = ',';
  bool timing = false;                 // write wall-clock times into the diagnostics log
  std::optional<double> jaccard_cell;  // default: target diameter / 100

  // evaluate
  std::filesystem::path registered;
  std::filesystem::path correspondence;
  int topology_k = 10;
  int pcc_k = 15;

  // synth
  SynthConfig synth;
};

int register_cmd(const RunConfig& config, std::ostream& err);
int evaluate_cmd(const RunConfig& config, std::ostream& out, std::ostream& err);
int synth_cmd(const RunConfig& config, std::ostream& err);

}  // namespace det
