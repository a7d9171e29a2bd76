#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "potvit/calibration.hpp"
#include "potvit/fakequant.hpp"
#include "potvit/intengine.hpp"
#include "potvit/intkernels.hpp"

namespace potvit {
namespace {

TEST(Requantize, Examples) {
  const IntTensor acc({3}, {100, 300, -1000}, 32, true);
  const IntTensor out = requantize(acc, -2, -1, 0, 8);
  EXPECT_EQ(out[0], 13);
  EXPECT_EQ(out[1], 38);
  EXPECT_EQ(out[2], -125);
  const IntTensor same = requantize(acc, 0, 0, 0, 8);
  EXPECT_EQ(same[0], 100);
  EXPECT_EQ(same[1], 127);
  EXPECT_EQ(same[2], -128);
}

TEST(Requantize, MatchesFloatPath) {
  Rng rng(41);
  for (int i = 0; i < 100000; ++i) {
    const auto acc = static_cast<std::int32_t>(rng.below(1u << 24)) - (1 << 23);
    const int ax = static_cast<int>(rng.below(16)) - 8, aw = static_cast<int>(rng.below(16)) - 8;
    const int ay = static_cast<int>(rng.below(16)) - 4;
    const double ref = std::clamp(std::floor(std::ldexp(static_cast<double>(acc), ax + aw - ay) + 0.5), -128.0, 127.0);
    ASSERT_EQ(requantize_value(acc, ax + aw - ay, 8), static_cast<std::int32_t>(ref)) << acc << " " << ax + aw - ay;
  }
}

TEST(PsMac, NibbleDecompositionExamples) {
  EXPECT_EQ(psmac_product(127, 2), 254);
  EXPECT_EQ(psmac_product(-1, 3), -3);
  for (int w = -128; w < 128; w += 5)
    for (int a = -128; a < 128; a += 3) ASSERT_EQ(psmac_product(w, a), w * a);
}

TEST(PsMac, TwoFourBitProductsPerStep) {
  const IntTensor a({1, 2}, {2, 5}, 8, true);
  const IntTensor w({2, 1}, {3, -2}, 4, true);
  const IntTensor out = psmac_matmul(a, w, PsMacConfig::for_weight_bits(4));
  EXPECT_EQ(out[0], -4);
  EXPECT_EQ(PsMacConfig::for_weight_bits(4).mode, PsMacMode::two_4bit);
  EXPECT_THROW(PsMacConfig::for_weight_bits(6), ConfigError);
  const IntTensor w8({2, 1}, {3, -2}, 8, true);
  EXPECT_THROW(psmac_matmul(a, w8, PsMacConfig::for_weight_bits(4)), ConfigError);
}

TEST(PsMac, MatmulEqualsDirectProduct) {
  Rng rng(42);
  IntTensor a({5, 7}, 8, true), w({7, 3}, 8, true);
  for (std::size_t i = 0; i < a.size(); ++i) a.set(i, static_cast<std::int32_t>(rng.below(256)) - 128);
  for (std::size_t i = 0; i < w.size(); ++i) w.set(i, static_cast<std::int32_t>(rng.below(256)) - 128);
  const IntTensor out = psmac_matmul(a, w, PsMacConfig{});
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      std::int64_t s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a.at(r, k) * w.at(k, c);
      EXPECT_EQ(out.at(r, c), s);
    }
}

TEST(LayerNormQ, RowMomentsExample) {
  const std::vector<std::int64_t> row{1, 2, 3, 4};
  const auto m = row_moments(row, 4);
  EXPECT_EQ(m.mean, 40);      // 2.5
  EXPECT_EQ(m.mean_sq, 120);  // 7.5
  EXPECT_EQ(m.var, 20);       // 1.25
}

struct LnCase {
  IntTensor x;
  PtfSpec ptf;
  Tensor gamma, beta;
  std::vector<int> out_exp;
};

LnCase random_ln_case(Rng& rng, std::size_t rows, std::size_t n) {
  LnCase c{IntTensor({rows, n}, 8, true), PtfSpec{-5, std::vector<int>(n), 8}, Tensor({n}), Tensor({n}),
           std::vector<int>(n, -4)};
  for (std::size_t i = 0; i < n; ++i) {
    c.ptf.alpha[i] = static_cast<int>(rng.below(4));
    c.gamma[i] = static_cast<float>(0.5 + 0.5 * rng.uniform());
    c.beta[i] = static_cast<float>(rng.normal() * 0.5);
  }
  for (std::size_t i = 0; i < c.x.size(); ++i) c.x.set(i, static_cast<std::int32_t>(rng.below(256)) - 128);
  return c;
}

TEST(LayerNormQ, ConstantRowGivesBeta) {
  Rng rng(43);
  LnCase c = random_ln_case(rng, 1, 16);
  std::fill(c.ptf.alpha.begin(), c.ptf.alpha.end(), 0);
  for (std::size_t i = 0; i < 16; ++i) c.x.set(i, 9);
  const auto ln = LayerNormQ16::from_float(c.gamma, c.beta);
  const IntTensor out = int_layernorm(c.x, c.ptf, ln, c.out_exp, 8);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(out[i], quantize_code(c.beta[i], -4, 8)) << i;
}

TEST(LayerNormQ, MatchesFloatReference) {
  Rng rng(44);
  const std::size_t n = 32;
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    const LnCase c = random_ln_case(rng, 10, n);
    const IntTensor out = int_layernorm(c.x, c.ptf, LayerNormQ16::from_float(c.gamma, c.beta), c.out_exp, 8);
    for (std::size_t r = 0; r < 10; ++r) {
      std::vector<double> xd(n);
      double mu = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) mu += xd[i] = std::ldexp(c.x.at(r, i), c.ptf.channel_exponent(i));
      mu /= n;
      for (double v : xd) var += (v - mu) * (v - mu);
      var /= n;
      for (std::size_t i = 0; i < n; ++i) {
        const double ref = (xd[i] - mu) / std::sqrt(var + kLayerNormEps) * c.gamma[i] + c.beta[i];
        if (std::abs(ref) > 7.5) continue;  // clipped
        EXPECT_LE(std::abs(std::ldexp(out.at(r, i), -4) - ref), 2 * std::ldexp(1.0, -4));
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 20000);
}

TEST(LayerNormQ, ShiftInvariantWithinChannelGroup) {
  Rng rng(45);
  LnCase c = random_ln_case(rng, 4, 16);
  std::fill(c.ptf.alpha.begin(), c.ptf.alpha.end(), 1);
  for (std::size_t i = 0; i < c.x.size(); ++i) c.x.set(i, static_cast<std::int32_t>(rng.below(200)) - 100);
  IntTensor shifted = c.x;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted.set(i, c.x[i] + 20);
  const auto ln = LayerNormQ16::from_float(c.gamma, c.beta);
  EXPECT_EQ(int_layernorm(c.x, c.ptf, ln, c.out_exp, 8), int_layernorm(shifted, c.ptf, ln, c.out_exp, 8));
  EXPECT_THROW(int_layernorm(IntTensor({1, 8}, 8, true), c.ptf, ln, c.out_exp, 8), ShapeError);
}

TEST(IExpTest, PolynomialAnchors) {
  const double l0 = 0.3585 * 1.353 * 1.353 + 0.344;
  EXPECT_NEAR(i_exp(0, 0).value(), l0, 2e-4);
  EXPECT_NEAR(i_exp(0, 0).value(), 1.0003, 5e-4);
  // -ln2 at 16 fraction bits.
  const IExp half = i_exp(-kLn2Q16, -16);
  EXPECT_EQ(half.shift, 1);
  EXPECT_NEAR(half.value(), 0.5 * l0, 1e-4);
  EXPECT_THROW(i_exp(1, 0), RangeError);
}

TEST(IExpTest, RelativeErrorOnGrid) {
  double worst = 0;
  for (int i = 0; i <= 1000; ++i) {
    const double x = -10.0 * i / 1000.0;
    const auto xq = static_cast<std::int64_t>(std::llround(std::ldexp(x, 12)));
    const double xr = std::ldexp(static_cast<double>(xq), -12);
    worst = std::max(worst, std::abs(i_exp(xq, -12).value() - std::exp(xr)) / std::exp(xr));
  }
  EXPECT_LE(worst, 0.02);
}

TEST(ILog2, Examples) {
  EXPECT_EQ(i_log2(57), 6);
  EXPECT_EQ(i_log2(1), 0);
  EXPECT_EQ(i_log2(192), 8);
  EXPECT_EQ(i_log2(2), 1);
  EXPECT_EQ(i_log2(3), 2);
  EXPECT_THROW(i_log2(0), RangeError);
}

TEST(ILog2, BracketsLog2Exhaustively) {
  for (std::uint64_t v = 1; v <= (1u << 16); ++v) {
    const int r = i_log2(v);
    const double l = std::log2(static_cast<double>(v));
    ASSERT_TRUE(r == static_cast<int>(std::floor(l)) || r == static_cast<int>(std::ceil(l))) << v;
  }
}

TEST(Lis, UniformRowOfFour) {
  const std::vector<std::int32_t> row{5, 5, 5, 5};
  EXPECT_EQ(int_softmax_lis(row, -4, 4), (std::vector<std::int32_t>{2, 2, 2, 2}));
}

TEST(Lis, DominantElementTakesCodeZero) {
  const std::vector<std::int32_t> row{100, -100, -90, -120};
  const auto codes = int_softmax_lis(row, -2, 4);
  EXPECT_EQ(codes[0], 0);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(codes[i], 15);
}

TEST(Lis, AgreesWithFloatLog2Quantization) {
  Rng rng(46);
  std::size_t total = 0, same = 0;
  for (int r = 0; r < 1000; ++r) {
    const std::size_t n = 4 + rng.below(29);
    std::vector<std::int32_t> row(n);
    for (auto& v : row) v = static_cast<std::int32_t>(std::llround(rng.normal() * 24));
    const auto codes = int_softmax_lis(row, -4, 4);
    const std::int32_t mx = *std::max_element(row.begin(), row.end());
    double sum = 0;
    for (auto v : row) sum += std::exp(std::ldexp(v - mx, -4));
    for (std::size_t k = 0; k < n; ++k) {
      const std::int32_t ref = log2_code(std::exp(std::ldexp(row[k] - mx, -4)) / sum, 4);
      ASSERT_LE(std::abs(ref - codes[k]), 1);
      same += ref == codes[k];
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(same) / total, 0.99);
}

TEST(ShiftAttention, Examples) {
  const IntTensor m({1, 1}, {2}, 4, false);
  const IntTensor v({1, 1}, {8}, 8, true);
  EXPECT_EQ(shift_attention_v(m, v)[0], 2);
  const IntTensor m0({1, 3}, {0, 0, 0}, 4, false);
  const IntTensor v3({3, 2}, {1, 2, 3, 4, 5, -6}, 8, true);
  const IntTensor out = shift_attention_v(m0, v3);
  EXPECT_EQ(out[0], 9);
  EXPECT_EQ(out[1], 0);
}

TEST(ShiftAttention, WithinPerElementRoundingOfFloat) {
  Rng rng(47);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(24);
    IntTensor m({1, n}, 4, false), v({n, 1}, 8, true);
    for (std::size_t k = 0; k < n; ++k) {
      m.set(k, static_cast<std::int32_t>(rng.below(16)));
      v.set(k, static_cast<std::int32_t>(rng.below(256)) - 128);
    }
    double ref = 0;
    for (std::size_t k = 0; k < n; ++k) ref += std::ldexp(v[k], -m[k]);
    ASSERT_LE(std::abs(shift_attention_v(m, v)[0] - ref), 0.5 * static_cast<double>(n));
  }
}

class EngineFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    DatasetConfig dc;
    dc.samples = 200;
    data_ = new DataSplits(make_splits(generate_dataset(dc), 60));
    TrainOptions opts;
    opts.epochs = 3;
    model_ = new FloatModel(train(ModelConfig{}, *data_, opts).model);
    cache_ = new CalibrationCache(build_calibration(*model_, data_->calib, QuantSettings{}));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete model_;
    delete cache_;
  }
  static std::map<std::string, int> bits_pattern(int which) {
    std::map<std::string, int> m;
    int i = 0;
    for (const auto& n : model_->weight_layer_names()) m[n] = which == 8 ? 8 : which == 4 ? 4 : (i++ % 2 ? 4 : 8);
    return m;
  }
  static DataSplits* data_;
  static FloatModel* model_;
  static CalibrationCache* cache_;
};
DataSplits* EngineFixture::data_ = nullptr;
FloatModel* EngineFixture::model_ = nullptr;
CalibrationCache* EngineFixture::cache_ = nullptr;

TEST_F(EngineFixture, IntegerCodesEqualFakeQuantCodes) {
  for (int mode : {8, 4, 0}) {
    const auto qp = assign_bits(*cache_, bits_pattern(mode));
    const auto qm = QuantizedModel::build(qp);
    for (int i = 0; i < 10; ++i) {
      const auto& x = data_->val[i].x;
      const auto fq = fake_quant_forward(qp, x);
      const auto iq = int_forward(qm, x);
      const auto mism = compare_codes(fq.codes, iq.codes);
      ASSERT_TRUE(mism.empty()) << "mode " << mode << " point " << mism.front().point;
      const DMatrix deq = iq.dequantized_logits();
      for (std::size_t c = 0; c < deq.v.size(); ++c) EXPECT_EQ(deq.v[c], fq.logits.v[c]);
    }
  }
}

TEST_F(EngineFixture, MixedConfigEngagesFourBitMode) {
  const auto qm = QuantizedModel::build(assign_bits(*cache_, bits_pattern(0)));
  const auto bits = qm.layer_bits();
  EXPECT_NE(std::find(bits.begin(), bits.end(), 4), bits.end());
  EXPECT_EQ(qm.weight("b0.wq").bits(), 4);
  EXPECT_EQ(qm.weight("b0.wq").codes.bits(), 4);
}

TEST_F(EngineFixture, CompareCodesFlagsDivergence) {
  const auto qp = assign_bits(*cache_, bits_pattern(8));
  auto a = fake_quant_forward(qp, data_->val[0].x).codes;
  auto b = a;
  IntTensor& t = b.at("b0.v");
  t.set(3, t[3] == 0 ? 1 : 0);
  const auto m = compare_codes(a, b);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m[0].point, "b0.v");
  EXPECT_EQ(m[0].first_index, 3u);
  b.erase("b0.k");
  EXPECT_EQ(compare_codes(a, b).size(), 2u);
}

TEST_F(EngineFixture, SaveLoadRoundTrip) {
  const auto qm = QuantizedModel::build(assign_bits(*cache_, bits_pattern(0)));
  const auto dir = std::filesystem::temp_directory_path() / "potvit_test_qmodel";
  std::filesystem::remove_all(dir);
  qm.save(dir);
  const auto back = QuantizedModel::load(dir);
  const auto& x = data_->val[1].x;
  EXPECT_TRUE(compare_codes(int_forward(qm, x).codes, int_forward(back, x).codes).empty());
  EXPECT_EQ(back.layer_bits(), qm.layer_bits());
}

TEST(Engine, ZeroModelGivesZeroLogits) {
  const ModelConfig cfg;
  const FloatModel m = FloatModel::zeros(cfg);
  DatasetConfig dc;
  dc.samples = 20;
  const auto sp = make_splits(generate_dataset(dc), 8);
  const auto qm = QuantizedModel::build(calibrate(m, sp.calib, QuantSettings{}));
  const auto r = int_forward(qm, sp.val[0].x);
  for (auto v : r.logits.data()) EXPECT_EQ(v, 0);
}

}  // namespace
}  // namespace potvit
