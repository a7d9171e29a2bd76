#include "potvit/quant_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

#include "potvit/error.hpp"

namespace potvit {

namespace {

constexpr double kZeroScale = 1.0 / (1 << 20);

double column_max_abs(const DMatrix& m, std::size_t c) {
  double mx = 0.0;
  for (std::size_t r = 0; r < m.rows; ++r) mx = std::max(mx, std::abs(m(r, c)));
  return mx;
}

double row_max_abs(const DMatrix& m, std::size_t r) {
  double mx = 0.0;
  for (double v : m.row(r)) mx = std::max(mx, std::abs(v));
  return mx;
}

std::vector<double> column(const DMatrix& m, std::size_t c) {
  std::vector<double> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r] = m(r, c);
  return out;
}

std::vector<double> as_doubles(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Lexicographic argmin key shared by every exponent search.
struct Score {
  double err;
  double dist;
  int alpha;
  bool operator<(const Score& o) const { return std::tie(err, dist, alpha) < std::tie(o.err, o.dist, o.alpha); }
};

}  // namespace

std::string to_string(QuantKind k) {
  switch (k) {
    case QuantKind::uniform: return "uniform";
    case QuantKind::log2: return "log2";
    case QuantKind::ptf: return "ptf";
  }
  return "uniform";
}

std::string to_string(RoundingMode m) { return m == RoundingMode::nearest ? "nearest" : "adaptive"; }

RoundingMode rounding_mode_from_string(const std::string& s) {
  if (s == "nearest") return RoundingMode::nearest;
  if (s == "adaptive") return RoundingMode::adaptive;
  throw ConfigError("unknown rounding mode '" + s + "'");
}

void QuantSpec::validate() const {
  if (bits < 2 || bits > 32) throw ConfigError("quantization bits must lie in [2, 32]");
  if (kind == QuantKind::log2 && is_signed) throw ConfigError("log2 codes are unsigned");
  if (kind == QuantKind::ptf && !ptf) throw ConfigError("ptf spec missing its channel factors");
}

void to_json(nlohmann::json& j, const QuantSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"bits", s.bits}, {"signed", s.is_signed}};
  if (s.scale.granularity == Granularity::per_tensor)
    j["exponent"] = s.scale.exponent;
  else
    j["exponents"] = s.scale.exponents;
  if (s.ptf) j["ptf"] = {{"alpha_g", s.ptf->alpha_g}, {"alpha", s.ptf->alpha}};
  if (s.smooth) {
    j["migration"] = s.smooth->migration;
    j["beta_s"] = s.smooth->beta_s;
    j["alpha_xhat"] = s.smooth->alpha_xhat;
  }
}

void from_json(const nlohmann::json& j, QuantSpec& s) {
  try {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "uniform")
      s.kind = QuantKind::uniform;
    else if (kind == "log2")
      s.kind = QuantKind::log2;
    else if (kind == "ptf")
      s.kind = QuantKind::ptf;
    else
      throw ConfigError("unknown quantization kind '" + kind + "'");
    s.bits = j.at("bits").get<int>();
    s.is_signed = j.at("signed").get<bool>();
    if (j.contains("exponents"))
      s.scale = PotScale::channels(j.at("exponents").get<std::vector<int>>());
    else
      s.scale = PotScale::tensor(j.at("exponent").get<int>());
    s.ptf.reset();
    s.smooth.reset();
    if (j.contains("ptf"))
      s.ptf = PtfSpec{j["ptf"].at("alpha_g").get<int>(), j["ptf"].at("alpha").get<std::vector<int>>(), s.bits};
    if (j.contains("migration")) {
      SmoothSpec sm;
      sm.migration = j.at("migration").get<std::vector<int>>();
      sm.beta_s = j.at("beta_s").get<double>();
      sm.alpha_xhat = j.at("alpha_xhat").get<int>();
      sm.fused = fuse_migration(sm, sm.alpha_xhat);
      s.smooth = std::move(sm);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad quantization spec: ") + e.what());
  }
  s.validate();
}

std::int64_t quantize_code(double x, int exp, int bits, bool is_signed) {
  const double r = std::floor(std::ldexp(x, -exp) + 0.5);
  const double lo = int_min(bits, is_signed), hi = int_max(bits, is_signed);
  return static_cast<std::int64_t>(std::clamp(r, lo, hi));
}

double fake_quant(double x, int exp, int bits, bool is_signed) {
  return std::ldexp(static_cast<double>(quantize_code(x, exp, bits, is_signed)), exp);
}

double quant_error(std::span<const double> x, int exp, int bits) {
  double s = 0.0;
  for (double v : x) {
    const double d = v - fake_quant(v, exp, bits);
    s += d * d;
  }
  return std::sqrt(s);
}

double minmax_scale(double max_abs, int bits) {
  if (bits < 2) throw ConfigError("minmax_scale needs at least 2 bits");
  if (max_abs == 0.0) return kZeroScale;
  return 2.0 * max_abs / (std::ldexp(1.0, bits) - 1.0);
}

double minmax_scale(std::span<const double> x, int bits) {
  double mx = 0.0;
  for (double v : x) mx = std::max(mx, std::abs(v));
  return minmax_scale(mx, bits);
}

double minmax_scale(const Tensor& x, int bits) { return minmax_scale(static_cast<double>(x.max_abs()), bits); }

int nearest_pot(double scale) {
  if (!(scale > 0.0)) throw RangeError("nearest_pot needs a positive scale");
  return round_half_up(std::log2(scale));
}

std::vector<int> pot_candidates(double scale) {
  const double l = std::log2(scale);
  const int f = static_cast<int>(std::floor(l)), c = static_cast<int>(std::ceil(l));
  std::vector<int> out{f - 1, f, c, c + 1};
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

int adaptive_pot_round_act(std::span<const double> x, int bits) {
  const double s = minmax_scale(x, bits);
  const double l = std::log2(s);
  std::optional<Score> best;
  for (int a : pot_candidates(s)) {
    const Score sc{quant_error(x, a, bits), std::abs(a - l), a};
    if (!best || sc < *best) best = sc;
  }
  return best->alpha;
}

int adaptive_pot_round_act(const Tensor& x, int bits) { return adaptive_pot_round_act(as_doubles(x), bits); }

int choose_act_exponent(std::span<const double> x, int bits, RoundingMode mode) {
  return mode == RoundingMode::nearest ? nearest_pot(minmax_scale(x, bits)) : adaptive_pot_round_act(x, bits);
}

std::vector<int> adaptive_pot_round_weight(const DMatrix& x_cal, const DMatrix& w, int bits) {
  if (x_cal.cols != w.rows) throw ShapeError("calibration width does not match weight rows");
  std::vector<int> out(w.cols);
  std::vector<double> delta(w.rows);
  for (std::size_t j = 0; j < w.cols; ++j) {
    const std::vector<double> wj = column(w, j);
    const double s = minmax_scale(wj, bits);
    const double l = std::log2(s);
    std::optional<Score> best;
    for (int a : pot_candidates(s)) {
      for (std::size_t k = 0; k < w.rows; ++k) delta[k] = wj[k] - fake_quant(wj[k], a, bits);
      double err = 0.0;
      for (std::size_t r = 0; r < x_cal.rows; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.rows; ++k) acc += x_cal(r, k) * delta[k];
        err += acc * acc;
      }
      const Score sc{std::sqrt(err), std::abs(a - l), a};
      if (!best || sc < *best) best = sc;
    }
    out[j] = best->alpha;
  }
  return out;
}

std::vector<int> adaptive_pot_round_weight(const Tensor& x_cal, const Tensor& w, int bits) {
  return adaptive_pot_round_weight(to_dmatrix(x_cal), to_dmatrix(w), bits);
}

std::vector<int> nearest_pot_weight(const DMatrix& w, int bits) {
  std::vector<int> out(w.cols);
  for (std::size_t j = 0; j < w.cols; ++j) out[j] = nearest_pot(minmax_scale(column_max_abs(w, j), bits));
  return out;
}

std::vector<int> choose_weight_exponents(const DMatrix& x_cal, const DMatrix& w, int bits, RoundingMode mode) {
  return mode == RoundingMode::nearest ? nearest_pot_weight(w, bits) : adaptive_pot_round_weight(x_cal, w, bits);
}

SmoothResult pot_smooth(const DMatrix& x_cal, const DMatrix& w, double beta_s) {
  if (!(beta_s >= 0.0 && beta_s <= 1.0)) throw ConfigError("smoothing strength must lie in [0, 1]");
  if (x_cal.cols != w.rows) throw ShapeError("smoothing: activation channels do not match weight rows");
  SmoothResult res;
  res.spec.beta_s = beta_s;
  res.spec.migration.assign(w.rows, 0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double ax = column_max_abs(x_cal, i), aw = row_max_abs(w, i);
    if (ax == 0.0 || aw == 0.0) continue;
    res.spec.migration[i] = round_half_up(beta_s * std::log2(ax) - (1.0 - beta_s) * std::log2(aw));
  }
  res.w_hat = migrate_weight(w, res.spec.migration);
  return res;
}

SmoothResult pot_smooth(const Tensor& x_cal, const Tensor& w, double beta_s) {
  return pot_smooth(to_dmatrix(x_cal), to_dmatrix(w), beta_s);
}

DMatrix apply_migration(const DMatrix& x, std::span<const int> migration) {
  if (migration.size() != x.cols) throw ShapeError("migration length does not match channel count");
  DMatrix out = x;
  for (std::size_t r = 0; r < x.rows; ++r)
    for (std::size_t c = 0; c < x.cols; ++c) out(r, c) = std::ldexp(x(r, c), -migration[c]);
  return out;
}

DMatrix migrate_weight(const DMatrix& w, std::span<const int> migration) {
  if (migration.size() != w.rows) throw ShapeError("migration length does not match weight rows");
  DMatrix out = w;
  for (std::size_t r = 0; r < w.rows; ++r)
    for (std::size_t c = 0; c < w.cols; ++c) out(r, c) = std::ldexp(w(r, c), migration[r]);
  return out;
}

std::vector<int> fuse_migration(const SmoothSpec& spec, int alpha_xhat) {
  std::vector<int> out(spec.migration.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = spec.migration[i] + alpha_xhat;
  return out;
}

PtfSpec ptf_calibrate(const DMatrix& x_cal, int bits, RoundingMode mode) {
  PtfSpec spec;
  spec.bits = bits;
  spec.alpha.assign(x_cal.cols, 0);
  if (x_cal.cols == 0) return spec;
  std::vector<double> ranges(x_cal.cols);
  for (std::size_t c = 0; c < x_cal.cols; ++c) ranges[c] = column_max_abs(x_cal, c);
  // The global scale fits the least-spread channel; all-zero channels carry no range.
  std::optional<std::size_t> ref;
  for (std::size_t c = 0; c < x_cal.cols; ++c)
    if (ranges[c] > 0.0 && (!ref || ranges[c] < ranges[*ref])) ref = c;
  if (!ref) {
    spec.alpha_g = nearest_pot(minmax_scale(0.0, bits));
    return spec;
  }
  spec.alpha_g = choose_act_exponent(column(x_cal, *ref), bits, mode);
  for (std::size_t c = 0; c < x_cal.cols; ++c) {
    const std::vector<double> xc = column(x_cal, c);
    const double l = std::log2(minmax_scale(ranges[c], bits));
    if (mode == RoundingMode::nearest) {
      spec.alpha[c] = std::clamp(round_half_up(l) - spec.alpha_g, 0, 3);
      continue;
    }
    std::optional<Score> best;
    for (int off = 0; off <= 3; ++off) {
      const int a = spec.alpha_g + off;
      const Score sc{quant_error(xc, a, bits), std::abs(a - l), a};
      if (!best || sc < *best) best = sc;
    }
    spec.alpha[c] = best->alpha - spec.alpha_g;
  }
  return spec;
}

PtfSpec ptf_calibrate(const Tensor& x_cal, int bits) { return ptf_calibrate(to_dmatrix(x_cal), bits); }

std::int32_t log2_code(double m, int bits) {
  if (!(m >= 0.0 && m <= 1.0)) throw RangeError("log2_quantize expects values in [0, 1]");
  const std::int32_t top = int_max(bits, false);
  if (m == 0.0) return top;
  const double r = std::floor(-std::log2(m) + 0.5);
  return static_cast<std::int32_t>(std::clamp(r, 0.0, static_cast<double>(top)));
}

IntTensor log2_quantize(const Tensor& m, int bits) {
  IntTensor out(m.shape(), bits, false);
  for (std::size_t i = 0; i < m.size(); ++i) out.set(i, log2_code(m[i], bits));
  return out;
}

}  // namespace potvit
