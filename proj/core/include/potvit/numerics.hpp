#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "potvit/error.hpp"

namespace potvit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 tensor. All values are finite.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  // rows/cols view a rank-2 tensor; rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::span<const float> row(std::size_t r) const;

  float max_abs() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Width-tagged integer tensor: every element lies inside the signed or
// unsigned range of `bits`.
class IntTensor {
 public:
  IntTensor() = default;
  IntTensor(Shape shape, int bits, bool is_signed);
  IntTensor(Shape shape, std::vector<std::int32_t> data, int bits, bool is_signed);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  int bits() const { return bits_; }
  bool is_signed() const { return signed_; }
  std::int32_t min_value() const;
  std::int32_t max_value() const;

  std::int32_t operator[](std::size_t i) const { return data_[i]; }
  std::int32_t at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  // Writes go through set() so the width invariant is enforced.
  void set(std::size_t i, std::int32_t v);
  void set(std::size_t r, std::size_t c, std::int32_t v) { set(r * cols() + c, v); }

  std::span<const std::int32_t> data() const { return data_; }
  std::span<const std::int32_t> row(std::size_t r) const;

  friend bool operator==(const IntTensor&, const IntTensor&) = default;

 private:
  Shape shape_;
  std::vector<std::int32_t> data_;
  int bits_ = 32;
  bool signed_ = true;
};

std::int32_t int_min(int bits, bool is_signed);
std::int32_t int_max(int bits, bool is_signed);
std::int64_t clip(std::int64_t v, std::int64_t lo, std::int64_t hi);

// Double-precision dense matrix used for reference-model math and the
// fake-quant route. Not part of any on-disk format.
struct DMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  DMatrix() = default;
  DMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {v.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {v.data() + r * cols, cols}; }
};

DMatrix to_dmatrix(const Tensor& t);
Tensor to_tensor(const DMatrix& m);
DMatrix matmul(const DMatrix& a, const DMatrix& b);
// a · bᵀ
DMatrix matmul_nt(const DMatrix& a, const DMatrix& b);
// aᵀ · b
DMatrix matmul_tn(const DMatrix& a, const DMatrix& b);
DMatrix transpose(const DMatrix& a);

// Standard matrix product on rank-2 tensors, float64 accumulation.
Tensor matmul(const Tensor& a, const Tensor& b);

// floor(x + 0.5); the single rounding rule used by every quantizer.
std::int32_t round_half_up(double x);
// Same rule without the 32-bit range restriction (result must fit int64).
std::int64_t round_half_up64(double x);

// k >= 0: x * 2^k (throws RangeError on 32-bit overflow).
// k <  0: (x + 2^(|k|-1)) >> |k|, arithmetic shift.
std::int32_t shift_round(std::int32_t x, int k);
// 64-bit variant used by wide accumulators; left shifts saturate instead of throwing.
std::int64_t shift_round64(std::int64_t x, int k);

// Floor division for signed 128-bit operands, denominator > 0.
__int128 floor_div(__int128 num, __int128 den);
// round_half_up(num / den), denominator > 0.
__int128 round_div(__int128 num, __int128 den);
// Largest r with r*r <= n.
std::uint64_t isqrt(std::uint64_t n);

// Reproducible random stream: std::mt19937_64 (output sequence fixed by the
// C++ standard) with hand-written transforms so draws do not depend on the
// standard library's distribution implementations. split() derives an
// independent child stream through SplitMix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double rademacher();
  Rng split();
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t& state);

}  // namespace potvit
