#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "potvit/calibration.hpp"
#include "potvit/fakequant.hpp"
#include "potvit/intkernels.hpp"

namespace potvit {

struct QuantizedLinear {
  IntTensor codes;             // (in, out)
  std::vector<int> exponents;  // per output feature
  int bits() const { return codes.bits(); }
};

// The fully integer model: weight codes, the positional table on the
// embedding accumulator grid, Q16.16 LN affine parameters, one GELU table per
// block and every activation spec.
struct QuantizedModel {
  ModelConfig config;
  QuantSettings settings;
  std::map<std::string, QuantSpec> points;
  std::map<std::string, QuantizedLinear> weights;
  IntTensor pos;  // int32 codes at input + embedding exponents
  std::map<std::string, LayerNormQ16> layer_norms;
  std::vector<std::vector<std::int32_t>> gelu_lut;  // per block, indexed by fc1_out code - min

  static QuantizedModel build(const ModelQuantParams& qp);
  const QuantSpec& point(const std::string& name) const;
  const QuantizedLinear& weight(const std::string& name) const;
  // Per-layer weight bits in weight-layer order.
  std::vector<int> layer_bits() const;

  // qmodel directory: manifest.json + tensors.bin (int8 for codes up to 8 bits) + qparams.json.
  void save(const std::filesystem::path& dir) const;
  static QuantizedModel load(const std::filesystem::path& dir);
};

struct IntForwardResult {
  IntTensor logits;                  // int32 accumulator codes, (1, classes)
  std::vector<int> logit_exponents;  // per class
  CodeTrace codes;

  DMatrix dequantized_logits() const;
  int argmax() const;
};

// Integer-only forward pass; floats are touched only to quantize the input.
IntForwardResult int_forward(const QuantizedModel& qm, const Tensor& patches, bool record_codes = true);
int int_predict(const QuantizedModel& qm, const Tensor& patches);

struct CodeMismatch {
  std::string point;
  std::size_t count = 0;
  std::size_t first_index = 0;
};

// Every point present in either trace is compared element-wise.
std::vector<CodeMismatch> compare_codes(const CodeTrace& a, const CodeTrace& b);

}  // namespace potvit
