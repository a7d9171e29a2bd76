#include "potvit/intkernels.hpp"

#include <algorithm>
#include <bit>
#include <limits>

#include "potvit/error.hpp"

namespace potvit {

namespace {

constexpr std::int64_t kI32Min = std::numeric_limits<std::int32_t>::min();
constexpr std::int64_t kI32Max = std::numeric_limits<std::int32_t>::max();

std::int32_t checked_i32(std::int64_t v, const char* what) {
  if (v < kI32Min || v > kI32Max) throw RangeError(std::string(what) + ": 32-bit accumulator overflow");
  return static_cast<std::int32_t>(v);
}

__int128 shl128(__int128 v, int k) {
  if (k < 0 || k > 100) throw RangeError("fixed-point shift out of range");
  return v * (static_cast<__int128>(1) << k);
}

}  // namespace

std::int32_t requantize_value(std::int64_t acc, int shift, int bits, bool is_signed) {
  return static_cast<std::int32_t>(clip(shift_round64(acc, shift), int_min(bits, is_signed), int_max(bits, is_signed)));
}

IntTensor requantize(const IntTensor& acc, int alpha_x, int alpha_w, int alpha_y, int bits) {
  const int shift = alpha_x + alpha_w - alpha_y;
  IntTensor out(acc.shape(), bits, true);
  for (std::size_t i = 0; i < acc.size(); ++i) out.set(i, requantize_value(acc[i], shift, bits));
  return out;
}

IntTensor requantize_columns(const IntTensor& acc, std::span<const int> shifts, int bits, bool is_signed) {
  if (shifts.size() != acc.cols()) throw ShapeError("requantize: one shift per column required");
  IntTensor out(acc.shape(), bits, is_signed);
  for (std::size_t r = 0; r < acc.rows(); ++r)
    for (std::size_t c = 0; c < acc.cols(); ++c) out.set(r, c, requantize_value(acc.at(r, c), shifts[c], bits, is_signed));
  return out;
}

std::int32_t aligned_add(std::int64_t a, int ea, std::int64_t b, int eb, int eout, int bits) {
  const int e = std::min(ea, eb);
  const std::int64_t sum = shift_round64(a, ea - e) + shift_round64(b, eb - e);
  return requantize_value(sum, e - eout, bits);
}

PsMacConfig PsMacConfig::for_weight_bits(int bits) {
  if (bits == 8) return {4, PsMacMode::one_8bit};
  if (bits == 4) return {4, PsMacMode::two_4bit};
  throw ConfigError("PS-MAC supports 4- or 8-bit weights, got " + std::to_string(bits));
}

std::int32_t psmac_product(std::int32_t w, std::int32_t a, int split) {
  const std::int32_t hi = w >> split;  // arithmetic: signed high part
  const std::int32_t lo = w & ((1 << split) - 1);
  return (hi * a) * (1 << split) + lo * a;
}

IntTensor psmac_matmul(const IntTensor& a, const IntTensor& w, const PsMacConfig& cfg) {
  if (a.cols() != w.rows()) throw ShapeError("psmac_matmul: inner dimensions differ");
  if (cfg.split != 4) throw ConfigError("PS-MAC split width is fixed at 4");
  if (!a.is_signed() || a.bits() > 8 || !w.is_signed()) throw ConfigError("PS-MAC takes signed activations of at most 8 bits");
  if (cfg.mode == PsMacMode::one_8bit && w.bits() > 8) throw ConfigError("one-op PS-MAC mode needs weights of at most 8 bits");
  if (cfg.mode == PsMacMode::two_4bit && w.bits() > 4) throw ConfigError("two-op PS-MAC mode needs weights of at most 4 bits");
  const std::size_t rows = a.rows(), K = a.cols(), P = w.cols();
  std::vector<std::int32_t> out(rows * P);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto ar = a.row(r);
    for (std::size_t j = 0; j < P; ++j) {
      std::int64_t acc = 0;
      if (cfg.mode == PsMacMode::one_8bit) {
        for (std::size_t k = 0; k < K; ++k) acc += psmac_product(w.at(k, j), ar[k], cfg.split);
      } else {
        std::size_t k = 0;
        for (; k + 1 < K; k += 2) acc += w.at(k, j) * ar[k] + w.at(k + 1, j) * ar[k + 1];
        if (k < K) acc += w.at(k, j) * ar[k];
      }
      out[r * P + j] = checked_i32(acc, "psmac_matmul");
    }
  }
  return IntTensor({rows, P}, std::move(out), 32, true);
}

RowMomentsQ row_moments(std::span<const std::int64_t> xhat, int frac_bits) {
  if (xhat.empty()) throw ShapeError("row_moments on an empty row");
  __int128 s1 = 0, s2 = 0;
  for (auto v : xhat) {
    s1 += v;
    s2 += static_cast<__int128>(v) * v;
  }
  const __int128 n = static_cast<__int128>(xhat.size());
  RowMomentsQ m;
  m.mean = static_cast<std::int64_t>(floor_div(shl128(s1, frac_bits), n));
  m.mean_sq = static_cast<std::int64_t>(floor_div(shl128(s2, frac_bits), n));
  m.var = static_cast<std::int64_t>(floor_div(shl128(n * s2 - s1 * s1, frac_bits), n * n));
  return m;
}

LayerNormQ16 LayerNormQ16::from_float(const Tensor& gamma, const Tensor& beta) {
  if (gamma.size() != beta.size()) throw ShapeError("LN gamma and beta differ in length");
  LayerNormQ16 q;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    q.gamma.push_back(round_half_up64(std::ldexp(static_cast<double>(gamma[i]), 16)));
    q.beta.push_back(round_half_up64(std::ldexp(static_cast<double>(beta[i]), 16)));
  }
  return q;
}

IntTensor int_layernorm(const IntTensor& x_q, const PtfSpec& ptf, const LayerNormQ16& ln,
                        std::span<const int> out_exp, int out_bits) {
  const std::size_t n = x_q.cols();
  if (ptf.alpha.size() != n || ln.gamma.size() != n || ln.beta.size() != n || out_exp.size() != n)
    throw ShapeError("int_layernorm: row width does not match its PTF/affine parameters");
  const int ag = ptf.alpha_g;
  const __int128 n128 = static_cast<__int128>(n);
  IntTensor out(x_q.shape(), out_bits, true);
  std::vector<std::int64_t> xhat(n);
  for (std::size_t r = 0; r < x_q.rows(); ++r) {
    // Step 1: shift every channel onto the global scale 2^alpha_g.
    __int128 s1 = 0, s2 = 0;
    for (std::size_t c = 0; c < n; ++c) {
      xhat[c] = static_cast<std::int64_t>(x_q.at(r, c)) << ptf.alpha[c];
      s1 += xhat[c];
      s2 += static_cast<__int128>(xhat[c]) * xhat[c];
    }
    // Step 2: variance from one pass, var * 2^16 = V 2^(2 ag + 16) / n^2.
    const __int128 V = n128 * s2 - s1 * s1;
    const int ve = 2 * ag + 16;
    const __int128 var_q16 = ve >= 0 ? floor_div(shl128(V, ve), n128 * n128) : floor_div(V, shl128(n128 * n128, -ve));
    const __int128 t_q16 = var_q16 + kLnEpsQ16;
    // 1/sqrt(t) in Q16.16 = sqrt(2^48 / t_q16)
    const std::uint64_t inv_std = isqrt(static_cast<std::uint64_t>(floor_div(static_cast<__int128>(1) << 48, t_q16)));
    // Step 3: (X^ - mu) a + beta at the per-channel output exponent.
    for (std::size_t c = 0; c < n; ++c) {
      const std::int64_t a = shift_round64(ln.gamma[c] * static_cast<std::int64_t>(inv_std), -16);
      const __int128 d = n128 * xhat[c] - s1;
      const int pd = 16 + out_exp[c];
      const int m = std::min({ag, 0, pd});
      const __int128 num = shl128(d * a, ag - m) + shl128(static_cast<__int128>(ln.beta[c]) * n128, -m);
      const __int128 den = shl128(n128, pd - m);
      const __int128 q = round_div(num, den);
      out.set(r, c, static_cast<std::int32_t>(
                        std::clamp<__int128>(q, int_min(out_bits, true), int_max(out_bits, true))));
    }
  }
  return out;
}

IExp i_exp(std::int64_t x_q, int scale_exp) {
  if (x_q > 0) throw RangeError("i_exp expects a non-positive input");
  std::int64_t x_fx = shift_round64(x_q, scale_exp + 16);
  x_fx = std::max<std::int64_t>(x_fx, -(std::int64_t{64} << 16));
  const std::int64_t z = (-x_fx) / kLn2Q16;
  const std::int64_t p = x_fx + z * kLn2Q16;  // (-ln2, 0]
  const std::int64_t t = p + kExpCoefB;
  IExp r;
  r.mantissa = shift_round64(kExpCoefA * t * t, -32) + kExpCoefC;
  r.shift = static_cast<int>(z);
  return r;
}

int i_log2(std::uint64_t v) {
  if (v == 0) throw RangeError("i_log2 needs a positive input");
  const int i = 63 - std::countl_zero(v);
  return i + (i >= 1 ? static_cast<int>((v >> (i - 1)) & 1u) : 0);
}

std::vector<std::int32_t> int_softmax_lis(std::span<const std::int32_t> row, int in_exp, int bits) {
  if (row.empty()) return {};
  const std::int32_t top = int_max(bits, false);
  const std::int32_t mx = *std::max_element(row.begin(), row.end());
  std::vector<std::int64_t> e(row.size());
  std::int64_t sum = 0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    const IExp ie = i_exp(static_cast<std::int64_t>(row[k]) - mx, in_exp);
    e[k] = ie.shift >= 63 ? 0 : (ie.mantissa >> ie.shift);
    sum += e[k];
  }
  std::vector<std::int32_t> codes(row.size());
  for (std::size_t k = 0; k < row.size(); ++k) {
    if (e[k] == 0) {
      codes[k] = top;
      continue;
    }
    const std::int64_t ratio = (2 * sum + e[k]) / (2 * e[k]);  // round_half_up(sum / e)
    codes[k] = std::min<std::int32_t>(i_log2(static_cast<std::uint64_t>(ratio)), top);
  }
  return codes;
}

IntTensor int_softmax_lis(const IntTensor& scores, int in_exp, int bits) {
  IntTensor out(scores.shape(), bits, false);
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto codes = int_softmax_lis(scores.row(r), in_exp, bits);
    for (std::size_t c = 0; c < codes.size(); ++c) out.set(r, c, codes[c]);
  }
  return out;
}

IntTensor shift_attention_v(const IntTensor& m_q, const IntTensor& v_q) {
  if (m_q.cols() != v_q.rows()) throw ShapeError("shift_attention_v: token axes differ");
  if (m_q.is_signed()) throw ConfigError("attention codes must be unsigned log2 codes");
  const std::size_t rows = m_q.rows(), T = m_q.cols(), C = v_q.cols();
  std::vector<std::int32_t> out(rows * C);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      std::int64_t acc = 0;
      for (std::size_t k = 0; k < T; ++k) acc += shift_round(v_q.at(k, c), -m_q.at(r, k));
      out[r * C + c] = checked_i32(acc, "shift_attention_v");
    }
  return IntTensor({rows, C}, std::move(out), 32, true);
}

}  // namespace potvit
