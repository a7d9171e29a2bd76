#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/numerics.hpp"

namespace potvit {

enum class Granularity { per_tensor, per_channel };
enum class QuantKind { uniform, log2, ptf };
enum class RoundingMode { nearest, adaptive };

std::string to_string(QuantKind k);
std::string to_string(RoundingMode m);
RoundingMode rounding_mode_from_string(const std::string& s);

// Scale 2^exponent, or one exponent per channel (columns of a row-major matrix).
struct PotScale {
  Granularity granularity = Granularity::per_tensor;
  int exponent = 0;
  std::vector<int> exponents;

  static PotScale tensor(int e) { return {Granularity::per_tensor, e, {}}; }
  static PotScale channels(std::vector<int> e) { return {Granularity::per_channel, 0, std::move(e)}; }
  int at(std::size_t channel) const { return granularity == Granularity::per_tensor ? exponent : exponents.at(channel); }
};

struct PtfSpec {
  int alpha_g = 0;
  std::vector<int> alpha;  // per-channel offsets in [0, 3]
  int bits = 8;

  int channel_exponent(std::size_t c) const { return alpha_g + alpha.at(c); }
};

struct SmoothSpec {
  std::vector<int> migration;  // M_i
  double beta_s = 0.5;
  int alpha_xhat = 0;          // per-tensor exponent of X / 2^M
  std::vector<int> fused;      // M_i + alpha_xhat
};

struct QuantSpec {
  QuantKind kind = QuantKind::uniform;
  int bits = 8;
  bool is_signed = true;
  PotScale scale;
  std::optional<PtfSpec> ptf;
  std::optional<SmoothSpec> smooth;

  void validate() const;
};

void to_json(nlohmann::json& j, const QuantSpec& s);
void from_json(const nlohmann::json& j, QuantSpec& s);

inline double pot(int e) { return std::ldexp(1.0, e); }

// clip(round_half_up(x / 2^exp)) into the signed or unsigned range of `bits`.
std::int64_t quantize_code(double x, int exp, int bits, bool is_signed = true);
// quantize_code(...) * 2^exp
double fake_quant(double x, int exp, int bits, bool is_signed = true);

// ||x - deq(quant(x, 2^exp, bits))||_2 for signed symmetric quantization.
double quant_error(std::span<const double> x, int exp, int bits);

// S = 2 max|X| / (2^b - 1); 2^-20 for an all-zero tensor.
double minmax_scale(double max_abs, int bits);
double minmax_scale(std::span<const double> x, int bits);
double minmax_scale(const Tensor& x, int bits);

// round_half_up(log2 S)
int nearest_pot(double scale);

// {floor(log2 S) - 1, floor, ceil, ceil + 1}, deduplicated, ascending.
std::vector<int> pot_candidates(double scale);

// Exponent minimizing the activation perturbation over the candidate set.
// Ties: smaller |alpha - log2 S|, then smaller alpha.
int adaptive_pot_round_act(std::span<const double> x, int bits);
int adaptive_pot_round_act(const Tensor& x, int bits);
// Dispatches on the rounding mode (nearest ignores the data beyond its range).
int choose_act_exponent(std::span<const double> x, int bits, RoundingMode mode);

// One exponent per output feature (column of w), minimizing
// ||X w_j - X deq(quant(w_j))||_2 over the concatenated calibration batch.
std::vector<int> adaptive_pot_round_weight(const DMatrix& x_cal, const DMatrix& w, int bits);
std::vector<int> adaptive_pot_round_weight(const Tensor& x_cal, const Tensor& w, int bits);
std::vector<int> nearest_pot_weight(const DMatrix& w, int bits);
std::vector<int> choose_weight_exponents(const DMatrix& x_cal, const DMatrix& w, int bits, RoundingMode mode);

struct SmoothResult {
  SmoothSpec spec;  // alpha_xhat/fused left empty until fuse_migration
  DMatrix w_hat;    // rows scaled by 2^M
};

// M_i = round_half_up(log2(max|X_i|^beta / max|W_i|^(1-beta))), 0 when either max is 0.
SmoothResult pot_smooth(const DMatrix& x_cal, const DMatrix& w, double beta_s);
SmoothResult pot_smooth(const Tensor& x_cal, const Tensor& w, double beta_s);
// X / 2^M column-wise.
DMatrix apply_migration(const DMatrix& x, std::span<const int> migration);
// Row i of w times 2^M_i.
DMatrix migrate_weight(const DMatrix& w, std::span<const int> migration);

std::vector<int> fuse_migration(const SmoothSpec& spec, int alpha_xhat);

PtfSpec ptf_calibrate(const DMatrix& x_cal, int bits, RoundingMode mode = RoundingMode::adaptive);
PtfSpec ptf_calibrate(const Tensor& x_cal, int bits);

// clip(round_half_up(-log2 m), 0, 2^b - 1); m = 0 saturates to 2^b - 1.
std::int32_t log2_code(double m, int bits);
IntTensor log2_quantize(const Tensor& m, int bits);

}  // namespace potvit
