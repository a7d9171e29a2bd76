#include "potvit/numerics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace potvit {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_))
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  if (!all_finite()) throw RangeError("tensor contains non-finite values");
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw ShapeError("rows() needs a rank-1 or rank-2 tensor, got " + shape_str(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw ShapeError("cols() needs a rank-1 or rank-2 tensor, got " + shape_str(shape_));
  return shape_[1];
}

std::span<const float> Tensor::row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

float Tensor::max_abs() const {
  float m = 0.0f;
  for (float v : data_) m = std::max(m, std::fabs(v));
  return m;
}

bool Tensor::all_finite() const {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

// ------------------------------------------------------------- IntTensor

std::int32_t int_min(int bits, bool is_signed) {
  if (bits < 2 || bits > 32) throw RangeError("bit-width must be in [2, 32], got " + std::to_string(bits));
  if (!is_signed) return 0;
  return static_cast<std::int32_t>(-(std::int64_t{1} << (bits - 1)));
}

std::int32_t int_max(int bits, bool is_signed) {
  if (bits < 2 || bits > 32) throw RangeError("bit-width must be in [2, 32], got " + std::to_string(bits));
  if (is_signed) return static_cast<std::int32_t>((std::int64_t{1} << (bits - 1)) - 1);
  if (bits == 32) throw RangeError("unsigned 32-bit codes do not fit int32 storage");
  return static_cast<std::int32_t>((std::int64_t{1} << bits) - 1);
}

std::int64_t clip(std::int64_t v, std::int64_t lo, std::int64_t hi) { return v < lo ? lo : (v > hi ? hi : v); }

IntTensor::IntTensor(Shape shape, int bits, bool is_signed)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0), bits_(bits), signed_(is_signed) {
  int_min(bits, is_signed);
  int_max(bits, is_signed);
}

IntTensor::IntTensor(Shape shape, std::vector<std::int32_t> data, int bits, bool is_signed)
    : shape_(std::move(shape)), data_(std::move(data)), bits_(bits), signed_(is_signed) {
  if (data_.size() != shape_numel(shape_))
    throw ShapeError("int tensor data length does not match shape " + shape_str(shape_));
  const auto lo = min_value(), hi = max_value();
  for (auto v : data_)
    if (v < lo || v > hi)
      throw RangeError("value " + std::to_string(v) + " outside " + std::to_string(bits_) + "-bit range");
}

std::size_t IntTensor::rows() const { return shape_.size() == 1 ? 1 : shape_.at(0); }
std::size_t IntTensor::cols() const { return shape_.size() == 1 ? shape_[0] : shape_.at(1); }
std::int32_t IntTensor::min_value() const { return int_min(bits_, signed_); }
std::int32_t IntTensor::max_value() const { return int_max(bits_, signed_); }

void IntTensor::set(std::size_t i, std::int32_t v) {
  if (v < min_value() || v > max_value())
    throw RangeError("value " + std::to_string(v) + " outside " + std::to_string(bits_) + "-bit range");
  data_.at(i) = v;
}

std::span<const std::int32_t> IntTensor::row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

// --------------------------------------------------------------- DMatrix

DMatrix to_dmatrix(const Tensor& t) {
  DMatrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t[i];
  return m;
}

Tensor to_tensor(const DMatrix& m) {
  std::vector<float> data(m.v.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(m.v[i]);
  return Tensor({m.rows, m.cols}, std::move(data));
}

DMatrix matmul(const DMatrix& a, const DMatrix& b) {
  if (a.cols != b.rows)
    throw ShapeError("matmul inner dims differ: " + std::to_string(a.cols) + " vs " + std::to_string(b.rows));
  DMatrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* crow = &c.v[i * c.cols];
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.v[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = &b.v[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

DMatrix matmul_nt(const DMatrix& a, const DMatrix& b) {
  if (a.cols != b.cols) throw ShapeError("matmul_nt inner dims differ");
  DMatrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.v[i * a.cols + k] * b.v[j * b.cols + k];
      c.v[i * c.cols + j] = s;
    }
  return c;
}

DMatrix matmul_tn(const DMatrix& a, const DMatrix& b) {
  if (a.rows != b.rows) throw ShapeError("matmul_tn inner dims differ");
  DMatrix c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k)
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = a.v[k * a.cols + i];
      if (aki == 0.0) continue;
      double* crow = &c.v[i * c.cols];
      const double* brow = &b.v[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
    }
  return c;
}

DMatrix transpose(const DMatrix& a) {
  DMatrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  return to_tensor(matmul(to_dmatrix(a), to_dmatrix(b)));
}

// ------------------------------------------------------------- rounding

std::int64_t round_half_up64(double x) {
  if (!std::isfinite(x)) throw RangeError("cannot round a non-finite value");
  const double f = std::floor(x);
  // x - floor(x) is exact in binary floating point, so the tie test is exact.
  const double r = (x - f >= 0.5) ? f + 1.0 : f;
  if (r >= 9.2233720368547758e18 || r < -9.2233720368547758e18) throw RangeError("rounded value overflows int64");
  return static_cast<std::int64_t>(r);
}

std::int32_t round_half_up(double x) {
  const std::int64_t r = round_half_up64(x);
  if (r > std::numeric_limits<std::int32_t>::max() || r < std::numeric_limits<std::int32_t>::min())
    throw RangeError("round_half_up result overflows int32");
  return static_cast<std::int32_t>(r);
}

std::int32_t shift_round(std::int32_t x, int k) {
  if (k >= 0) {
    if (k >= 32 && x != 0) throw RangeError("shift_round left shift overflows int32");
    const std::int64_t v = static_cast<std::int64_t>(x) * (std::int64_t{1} << std::min(k, 31));
    if (v > std::numeric_limits<std::int32_t>::max() || v < std::numeric_limits<std::int32_t>::min())
      throw RangeError("shift_round left shift overflows int32");
    return static_cast<std::int32_t>(v);
  }
  return static_cast<std::int32_t>(shift_round64(x, k));
}

std::int64_t shift_round64(std::int64_t x, int k) {
  if (k >= 0) {
    if (x == 0) return 0;
    if (k >= 63) return x > 0 ? std::numeric_limits<std::int64_t>::max() : std::numeric_limits<std::int64_t>::min();
    const __int128 v = static_cast<__int128>(x) << k;
    if (v > std::numeric_limits<std::int64_t>::max()) return std::numeric_limits<std::int64_t>::max();
    if (v < std::numeric_limits<std::int64_t>::min()) return std::numeric_limits<std::int64_t>::min();
    return static_cast<std::int64_t>(v);
  }
  const int s = -k;
  if (s >= 100) return 0;
  const __int128 half = static_cast<__int128>(1) << (s - 1);
  return static_cast<std::int64_t>((static_cast<__int128>(x) + half) >> s);
}

__int128 floor_div(__int128 num, __int128 den) {
  if (den <= 0) throw RangeError("floor_div needs a positive denominator");
  __int128 q = num / den;
  if ((num % den != 0) && (num < 0)) --q;
  return q;
}

__int128 round_div(__int128 num, __int128 den) { return floor_div(2 * num + den, 2 * den); }

std::uint64_t isqrt(std::uint64_t n) {
  if (n < 2) return n;
  std::uint64_t r = static_cast<std::uint64_t>(std::sqrt(static_cast<double>(n)));
  // Correct the floating-point estimate; at most a couple of steps either way.
  while (r > 0 && static_cast<unsigned __int128>(r) * r > n) --r;
  while (static_cast<unsigned __int128>(r + 1) * (r + 1) <= n) ++r;
  return r;
}

// ------------------------------------------------------------------ Rng

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw RangeError("Rng::below(0)");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

double Rng::rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

Rng Rng::split() {
  std::uint64_t state = next_u64();
  return Rng(splitmix64(state));
}

}  // namespace potvit
