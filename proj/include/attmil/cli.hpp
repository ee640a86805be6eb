#pragma once

#include "attmil/data.hpp"
#include "attmil/model.hpp"
#include "attmil/optim.hpp"

#include <nlohmann/json.hpp>

#include <ostream>
#include <string>
#include <vector>

namespace attmil {

struct RunPaths {
  std::string dataset = "data/dataset.milb";
  std::string output_dir = "runs/latest";
  std::string checkpoint;

  friend bool operator==(const RunPaths&, const RunPaths&) = default;
};

/// Everything a command needs, as one JSON document:
///
///   { "model": {...}, "train": {...},
///     "generator": {..., "patients_per_class": 6, "bags_per_patient": 8},
///     "paths": {"dataset": ..., "output_dir": ..., "checkpoint": ...} }
///
/// Missing keys keep their defaults; unknown keys are a ConfigError.
struct RunConfig {
  ModelConfig model = ModelConfig::desk();
  TrainConfig train;
  GeneratorConfig generator;
  Index patients_per_class = 6;
  Index bags_per_patient = 8;
  RunPaths paths;

  /// Throws ConfigError.
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::string& path);

/// Lower-case hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Entry point of the `attmil` executable. argv[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace attmil
