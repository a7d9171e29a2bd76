#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "potvit/numerics.hpp"
#include "potvit/quant_ops.hpp"

namespace potvit {

// Element-wise shift_round by (alpha_x + alpha_w - alpha_y) followed by a
// saturating clip to the signed `bits` range. Integer operations only.
IntTensor requantize(const IntTensor& acc, int alpha_x, int alpha_w, int alpha_y, int bits);
// Per-column variant: column j is shifted by shifts[j].
IntTensor requantize_columns(const IntTensor& acc, std::span<const int> shifts, int bits, bool is_signed = true);
std::int32_t requantize_value(std::int64_t acc, int shift, int bits, bool is_signed = true);

// Adds a (exponent ea) and b (exponent eb) exactly at the finer exponent,
// then rounds to eout and clips to `bits`.
std::int32_t aligned_add(std::int64_t a, int ea, std::int64_t b, int eb, int eout, int bits);

enum class PsMacMode { one_8bit, two_4bit };

struct PsMacConfig {
  int split = 4;  // m: nibble width
  PsMacMode mode = PsMacMode::one_8bit;

  static PsMacConfig for_weight_bits(int bits);
};

// (W^H x A) * 2^m + W^L x A, with W^H the signed high nibble and W^L the unsigned low nibble.
std::int32_t psmac_product(std::int32_t w, std::int32_t a, int split = 4);

// A (rows x K) times W (K x P) into 32-bit accumulators. 8-bit mode uses the
// nibble decomposition; 4-bit mode evaluates two products per step.
// Throws ConfigError on a bit combination the array does not support and
// RangeError on accumulator overflow.
IntTensor psmac_matmul(const IntTensor& a, const IntTensor& w, const PsMacConfig& cfg);

// Row statistics of the shifted LN input in fixed point with `frac_bits`
// fraction bits (floor): mean, mean of squares, variance = E[x^2] - E[x]^2.
struct RowMomentsQ {
  std::int64_t mean = 0;
  std::int64_t mean_sq = 0;
  std::int64_t var = 0;
};
RowMomentsQ row_moments(std::span<const std::int64_t> xhat, int frac_bits);

// Q16.16 LN affine parameters.
struct LayerNormQ16 {
  std::vector<std::int64_t> gamma;
  std::vector<std::int64_t> beta;

  static LayerNormQ16 from_float(const Tensor& gamma, const Tensor& beta);
};

inline constexpr std::int64_t kLnEpsQ16 = 64;  // 2^-10 in Q16.16

// Integer LayerNorm on PTF codes: shift to the common global scale, single-pass
// moments, a = gamma / sqrt(var + eps) once per channel in Q16.16, output
// round((X^ - mu) a + beta) at the per-channel output exponents.
IntTensor int_layernorm(const IntTensor& x_q, const PtfSpec& ptf, const LayerNormQ16& ln,
                        std::span<const int> out_exp, int out_bits);

inline constexpr std::int64_t kLn2Q16 = 45426;  // ln 2 in Q16.16
inline constexpr std::int64_t kExpCoefA = 23495;  // 0.3585
inline constexpr std::int64_t kExpCoefB = 88670;  // 1.353
inline constexpr std::int64_t kExpCoefC = 22544;  // 0.344

// exp(x * 2^scale_exp) ~ mantissa * 2^(-16 - shift), for x <= 0.
struct IExp {
  std::int64_t mantissa = 0;  // Q16.16 value of L(p)
  int shift = 0;              // z
  double value() const { return std::ldexp(static_cast<double>(mantissa), -16 - shift); }
};
IExp i_exp(std::int64_t x_q, int scale_exp);

// Highest set bit index i plus bit (i-1).
int i_log2(std::uint64_t v);

// Log-Int-Softmax over one row of integer scores with exponent in_exp.
std::vector<std::int32_t> int_softmax_lis(std::span<const std::int32_t> row, int in_exp, int bits);
IntTensor int_softmax_lis(const IntTensor& scores, int in_exp, int bits);

// acc[r][c] = sum_k shift_round(V[k][c], -M[r][k]) in 32-bit.
IntTensor shift_attention_v(const IntTensor& m_q, const IntTensor& v_q);

}  // namespace potvit
