#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "potvit/accelsim.hpp"
#include "potvit/calibration.hpp"
#include "potvit/dataset.hpp"
#include "potvit/model.hpp"
#include "potvit/mpsearch.hpp"

namespace potvit::cli {

struct RunConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  ModelConfig model;
  TrainOptions train;
  int calib_size = 100;
  QuantSettings quant;
  SearchConfig search;
  int trace_probes = 16;
  int trace_samples = 32;  // calibration samples in the Hessian batch
  int check_samples = 100;
  AcceleratorConfig arch;

  void validate() const;
};

// Sections "dataset" and "model" may be inline objects or paths relative to
// the config file. A seed override replaces every module seed.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path, std::optional<std::uint64_t> seed);

nlohmann::json to_json(const RunConfig& c);
// FNV-1a over the compact dump of the resolved config.
std::string config_hash(const RunConfig& c);
std::uint64_t fnv1a64(const std::string& bytes);

// Rounds every floating-point field to 12 significant digits so artifacts
// are byte-stable across platforms.
nlohmann::json canonical(const nlohmann::json& j);

}  // namespace potvit::cli
