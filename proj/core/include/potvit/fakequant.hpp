#pragma once

#include <map>
#include <string>

#include "potvit/calibration.hpp"
#include "potvit/numerics.hpp"

namespace potvit {

// Integer codes at every quantization point, keyed like ActivationTrace.
using CodeTrace = std::map<std::string, IntTensor>;

struct FakeQuantOptions {
  // When true, LayerNorm and Softmax replay the integer engine's fixed-point
  // definitions in floating point. When false they run in plain float and
  // attention probabilities stay unquantized (the high-precision limit).
  bool emulate_integer_kernels = true;
  bool record_codes = true;
};

struct QuantForwardResult {
  DMatrix logits;  // dequantized, (1, classes)
  CodeTrace codes;
};

// Quantize -> dequantize at every point the integer engine quantizes, with
// identical rounding and clipping; all arithmetic in double.
QuantForwardResult fake_quant_forward(const ModelQuantParams& qp, const Tensor& patches,
                                      const FakeQuantOptions& opts = {});
int fake_quant_predict(const ModelQuantParams& qp, const Tensor& patches, const FakeQuantOptions& opts = {});

// Exact helpers for integer-valued quantities carried in doubles: the
// quotient is corrected so it equals the true floor / round-half-up.
double exact_floor_div(double num, double den);
double exact_round_div(double num, double den);

}  // namespace potvit
