#include "potvit/dataset.hpp"

#include <algorithm>

#include "potvit/error.hpp"

namespace potvit {

void DatasetConfig::validate() const {
  if (classes < 2) throw ConfigError("dataset needs at least 2 classes");
  if (samples < classes) throw ConfigError("dataset needs at least one sample per class");
  if (tokens < 1 || dim < 1) throw ConfigError("dataset tokens and dim must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
}

SyntheticDataset generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  SyntheticDataset ds;
  ds.config = cfg;
  Rng rng(cfg.seed);
  Rng mean_rng = rng.split();
  Rng sample_rng = rng.split();
  const Shape shape{static_cast<std::size_t>(cfg.tokens), static_cast<std::size_t>(cfg.dim)};
  for (int c = 0; c < cfg.classes; ++c) {
    Tensor m(shape);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(mean_rng.normal());
    ds.class_means.push_back(std::move(m));
  }
  ds.samples.reserve(cfg.samples);
  for (int s = 0; s < cfg.samples; ++s) {
    const int label = static_cast<int>(sample_rng.below(cfg.classes));
    Tensor x = ds.class_means[label];
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<float>(cfg.noise_sigma * sample_rng.normal());
    ds.samples.push_back({std::move(x), label});
  }
  return ds;
}

DataSplits make_splits(const SyntheticDataset& ds, std::size_t calib_size) {
  DataSplits out;
  const std::size_t n = ds.samples.size();
  const std::size_t n_train = std::max<std::size_t>(1, (n * 4) / 5);
  out.train.assign(ds.samples.begin(), ds.samples.begin() + n_train);
  out.val.assign(ds.samples.begin() + n_train, ds.samples.end());
  out.calib.assign(out.train.begin(), out.train.begin() + std::min(calib_size, out.train.size()));
  return out;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"classes", c.classes}, {"samples", c.samples}, {"noise_sigma", c.noise_sigma},
                     {"seed", c.seed},       {"tokens", c.tokens},   {"dim", c.dim}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  try {
    c.classes = j.value("classes", c.classes);
    c.samples = j.value("samples", c.samples);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.seed = j.value("seed", c.seed);
    c.tokens = j.value("tokens", c.tokens);
    c.dim = j.value("dim", c.dim);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dataset config: ") + e.what());
  }
  c.validate();
}

}  // namespace potvit
