#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/dataset.hpp"
#include "potvit/model.hpp"
#include "potvit/quant_ops.hpp"

namespace potvit {

struct QuantSettings {
  int act_bits = 8;
  int attn_bits = 4;
  int weight_bits = 8;                    // layers missing from layer_bits
  std::map<std::string, int> layer_bits;  // per weight layer override
  double beta_s = 0.5;
  RoundingMode rounding = RoundingMode::adaptive;
  bool smoothing = true;
  bool ptf = true;

  int bits_for(const std::string& layer) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const QuantSettings& s);
void from_json(const nlohmann::json& j, QuantSettings& s);

// A linear layer's weight after offline transforms (1/sqrt(d_i) folding into
// W_q, smoothing migration) with one PoT exponent per output feature.
struct WeightQuant {
  Tensor w;
  int bits = 8;
  std::vector<int> exponents;

  IntTensor codes() const;
  DMatrix dequantized() const;
};

// Everything both quantized engines need: activation specs for every
// quantization point, transformed weights with exponents, LN affine
// parameters and the positional table.
struct ModelQuantParams {
  ModelConfig config;
  QuantSettings settings;
  std::map<std::string, QuantSpec> points;
  std::map<std::string, WeightQuant> weights;
  std::map<std::string, std::pair<Tensor, Tensor>> layer_norms;  // "b{l}.ln1", "b{l}.ln2", "lnf"
  Tensor pos;

  const QuantSpec& point(const std::string& name) const;
  const WeightQuant& weight(const std::string& name) const;
  // Exponents of the embedding accumulator, one per channel.
  std::vector<int> embed_acc_exponents() const;
  std::vector<std::string> point_names() const;
  // Model weight size in MB at the assigned bit-widths.
  double weight_size_mb() const;
  void validate() const;
};

// Quantization point names in forward order for a model with `layers` blocks.
std::vector<std::string> quant_point_names(int layers);

// Calibration state reusable across bit assignments: activation specs and
// per-layer weight exponents for every requested bit-width.
struct CalibrationCache {
  ModelQuantParams base;
  std::map<std::string, std::map<int, std::vector<int>>> weight_exponents;
};

CalibrationCache build_calibration(const FloatModel& model, std::span<const Sample> calib,
                                   const QuantSettings& settings, const std::set<int>& weight_bit_choices = {4, 8});
// Assigns per-layer bits (layers absent keep the base bits) and refreshes the
// exponent-dependent logit spec.
ModelQuantParams assign_bits(const CalibrationCache& cache, const std::map<std::string, int>& layer_bits);
ModelQuantParams calibrate(const FloatModel& model, std::span<const Sample> calib, const QuantSettings& settings);

nlohmann::json qparams_to_json(const ModelQuantParams& qp);
// Restores specs and exponents; float weights are not part of qparams.json.
void qparams_specs_from_json(const nlohmann::json& j, ModelQuantParams& qp);

}  // namespace potvit
