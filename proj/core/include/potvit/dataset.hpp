#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/numerics.hpp"

namespace potvit {

// Generator parameters; mirrors the dataset config JSON
// {classes, samples, noise_sigma, seed, tokens, dim}.
struct DatasetConfig {
  int classes = 4;
  int samples = 1000;
  double noise_sigma = 1.0;
  std::uint64_t seed = 7;
  int tokens = 16;  // patch tokens per sample
  int dim = 16;     // features per patch

  void validate() const;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct Sample {
  Tensor x;  // (tokens, dim)
  int label = 0;
};

// Gaussian clusters: every class owns a random mean patch grid, samples add
// isotropic noise of standard deviation noise_sigma.
struct SyntheticDataset {
  DatasetConfig config;
  std::vector<Tensor> class_means;
  std::vector<Sample> samples;
};

SyntheticDataset generate_dataset(const DatasetConfig& cfg);

struct DataSplits {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> calib;  // drawn from the head of the training split
};

// 80/20 train/val split; calibration takes the first calib_size training samples.
DataSplits make_splits(const SyntheticDataset& ds, std::size_t calib_size = 100);

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

}  // namespace potvit
