#include "run_config.hpp"

#include <cstdio>
#include <cstdlib>

#include "potvit/checkpoint.hpp"
#include "potvit/error.hpp"

namespace potvit::cli {

namespace fs = std::filesystem;

namespace {

nlohmann::json section(const nlohmann::json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return nlohmann::json::object();
  const auto& v = j.at(key);
  if (v.is_string()) {
    const fs::path p = base / v.get<std::string>();
    if (!fs::exists(p)) throw ConfigError(std::string(key) + " config not found: " + p.string());
    return read_json_file(p);
  }
  if (!v.is_object()) throw ConfigError(std::string("config section '") + key + "' must be an object or a path");
  return v;
}

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  try {
    return j.value(key, fallback);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config field '") + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  dataset.validate();
  model.validate();
  if (dataset.tokens != model.patches() || dataset.dim != model.patch_dim || dataset.classes != model.classes)
    throw ConfigError("dataset shape does not match the model (tokens - 1, patch_dim, classes)");
  if (calib_size < 1) throw ConfigError("calib_size must be positive");
  if (train.epochs < 0 || train.batch_size < 1) throw ConfigError("bad training options");
  if (trace_probes < 1 || trace_samples < 1 || check_samples < 1)
    throw ConfigError("probe and sample counts must be positive");
  if (calib_size > dataset.samples - dataset.samples / 5) throw ConfigError("calib_size exceeds the training split");
  quant.validate();
  arch.validate();
}

RunConfig load_run_config(const std::optional<fs::path>& path, std::optional<std::uint64_t> seed) {
  nlohmann::json j = nlohmann::json::object();
  fs::path base = fs::current_path();
  if (path) {
    if (!fs::exists(*path)) throw ConfigError("config not found: " + path->string());
    j = read_json_file(*path);
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    base = path->parent_path();
  }
  RunConfig c;
  c.seed = seed ? *seed : get_or<std::uint64_t>(j, "seed", c.seed);
  const auto ds = section(j, "dataset", base);
  c.dataset = ds.get<DatasetConfig>();
  if (!ds.contains("seed") || seed) c.dataset.seed = c.seed + 6;
  c.model = section(j, "model", base).get<ModelConfig>();
  const auto tr = section(j, "train", base);
  c.train.epochs = get_or(tr, "epochs", c.train.epochs);
  c.train.lr = get_or(tr, "lr", c.train.lr);
  c.train.momentum = get_or(tr, "momentum", c.train.momentum);
  c.train.batch_size = get_or(tr, "batch_size", c.train.batch_size);
  c.train.seed = c.seed;
  c.calib_size = get_or(j, "calib_size", c.calib_size);
  c.quant = section(j, "quant", base).get<QuantSettings>();
  const auto se = section(j, "search", base);
  c.search = se.get<SearchConfig>();
  c.search.seed = c.seed;
  c.trace_probes = get_or(se, "probes", c.trace_probes);
  c.trace_samples = get_or(se, "hessian_samples", c.trace_samples);
  c.check_samples = get_or(j, "check_samples", c.check_samples);
  if (j.contains("arch")) c.arch = section(j, "arch", base).get<AcceleratorConfig>();
  c.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json search = c.search;
  search.erase("threads");  // execution detail, not part of the result
  search["probes"] = c.trace_probes;
  search["hessian_samples"] = c.trace_samples;
  return {{"seed", c.seed},
          {"dataset", c.dataset},
          {"model", c.model},
          {"train",
           {{"epochs", c.train.epochs},
            {"lr", c.train.lr},
            {"momentum", c.train.momentum},
            {"batch_size", c.train.batch_size}}},
          {"calib_size", c.calib_size},
          {"quant", c.quant},
          {"search", search},
          {"check_samples", c.check_samples},
          {"arch", c.arch}};
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical(to_json(c)).dump())));
  return buf;
}

nlohmann::json canonical(const nlohmann::json& j) {
  if (j.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", j.get<double>());
    return std::strtod(buf, nullptr);
  }
  if (j.is_array() || j.is_object()) {
    nlohmann::json out = j;
    for (auto it = out.begin(); it != out.end(); ++it) *it = canonical(*it);
    return out;
  }
  return j;
}

}  // namespace potvit::cli
