#include "potvit/fakequant.hpp"

#include <algorithm>
#include <cmath>

#include "potvit/error.hpp"
#include "potvit/intkernels.hpp"
#include "potvit/model.hpp"

namespace potvit {

namespace {

double isqrt_floor(double v) {
  double r = std::floor(std::sqrt(v));
  while (r * r > v) r -= 1.0;
  while ((r + 1.0) * (r + 1.0) <= v) r += 1.0;
  return r;
}

double clamp_code(double q, int bits, bool is_signed) {
  return std::clamp(q, static_cast<double>(int_min(bits, is_signed)), static_cast<double>(int_max(bits, is_signed)));
}

class FakeQuantRunner {
 public:
  FakeQuantRunner(const ModelQuantParams& qp, const FakeQuantOptions& opts) : qp_(qp), opts_(opts) {}

  QuantForwardResult run(const Tensor& patches) {
    const auto& cfg = qp_.config;
    const std::size_t N = cfg.tokens, d = cfg.dim, H = cfg.heads, dh = cfg.head_dim();
    if (patches.rank() != 2 || patches.dim(0) != N - 1 || patches.dim(1) != static_cast<std::size_t>(cfg.patch_dim))
      throw ShapeError("fake_quant_forward: bad input shape " + shape_str(patches.shape()));

    // Patch embedding; the positional table sits on the accumulator grid.
    const DMatrix p = dequant(quantize("input", to_dmatrix(patches)), qp_.point("input").scale);
    const DMatrix e = matmul(p, weight("embed.w"));
    const auto acc_exp = qp_.embed_acc_exponents();
    DMatrix x(N, d);
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t c = 0; c < d; ++c)
        x(t, c) = pos(t, c, acc_exp[c]) + (t > 0 ? e(t - 1, c) : 0.0);

    for (int l = 0; l < cfg.layers; ++l) {
      const std::string pre = "b" + std::to_string(l) + ".";
      const DMatrix xd = dequant(quantize(pre + "ln1_in", x), qp_.point(pre + "ln1_in").scale);
      const DMatrix y1 = layer_norm_hat(pre + "ln1", xd, pre + "ln1_out");
      const DMatrix q = requant(pre + "q", matmul(y1, weight(pre + "wq")));
      const DMatrix k = requant(pre + "k", matmul(y1, weight(pre + "wk")));
      const DMatrix v = requant(pre + "v", matmul(y1, weight(pre + "wv")));
      const int ev = qp_.point(pre + "v").scale.exponent;
      DMatrix a(N, d);
      DMatrix attn_codes(H * N, N);
      for (std::size_t h = 0; h < H; ++h) {
        DMatrix qh(N, dh), kh(N, dh), vh(N, dh);
        for (std::size_t t = 0; t < N; ++t)
          for (std::size_t c = 0; c < dh; ++c) {
            qh(t, c) = q(t, h * dh + c);
            kh(t, c) = k(t, h * dh + c);
            vh(t, c) = v(t, h * dh + c);
          }
        DMatrix s = matmul_nt(qh, kh);
        if (opts_.emulate_integer_kernels) {
          const int bits = qp_.point(pre + "attn").bits;
          for (std::size_t r = 0; r < N; ++r) {
            const auto m = log_int_softmax(s.row(r), bits);
            for (std::size_t c = 0; c < N; ++c) attn_codes(h * N + r, c) = m[c];
            // Shifter array: each V code is shifted and rounded before accumulation.
            for (std::size_t c = 0; c < dh; ++c) {
              double acc = 0.0;
              for (std::size_t t = 0; t < N; ++t)
                acc += std::floor(std::ldexp(vh(t, c), -ev - static_cast<int>(m[t])) + 0.5);
              a(r, h * dh + c) = std::ldexp(acc, ev);
            }
          }
        } else {
          softmax_rows(s);
          const DMatrix av = matmul(s, vh);
          for (std::size_t t = 0; t < N; ++t)
            for (std::size_t c = 0; c < dh; ++c) a(t, h * dh + c) = av(t, c);
        }
      }
      if (opts_.emulate_integer_kernels) record(pre + "attn", attn_codes, qp_.point(pre + "attn"));
      const DMatrix ad = requant(pre + "attn_out", a);
      DMatrix x_mid = xd;
      add_into(x_mid, matmul(ad, weight(pre + "wo")));
      const DMatrix xmd = dequant(quantize(pre + "ln2_in", x_mid), qp_.point(pre + "ln2_in").scale);
      const DMatrix y2 = layer_norm_hat(pre + "ln2", xmd, pre + "ln2_out");
      const DMatrix hq = requant(pre + "fc1_out", matmul(y2, weight(pre + "fc1")));
      DMatrix g = hq;
      for (double& val : g.v) val = gelu(val);
      const DMatrix gd = requant(pre + "gelu_out", g);
      x = xmd;
      add_into(x, matmul(gd, weight(pre + "fc2")));
    }

    const DMatrix xf = dequant(quantize("lnf_in", x), qp_.point("lnf_in").scale);
    const DMatrix yf = layer_norm_hat("lnf", xf, "lnf_out");
    DMatrix cls(1, d);
    for (std::size_t c = 0; c < d; ++c) cls(0, c) = yf(0, c);
    res_.logits = matmul(cls, weight("head.w"));
    if (opts_.record_codes) {
      const auto& ls = qp_.point("logits");
      DMatrix codes(1, res_.logits.cols);
      for (std::size_t c = 0; c < codes.cols; ++c) codes(0, c) = std::ldexp(res_.logits(0, c), -ls.scale.at(c));
      record("logits", codes, ls);
    }
    return std::move(res_);
  }

 private:
  // On the int32 accumulator grid; the high-precision limit keeps it in float
  // since wide operands would put the grid beyond int32 range.
  double pos(std::size_t t, std::size_t c, int exp) const {
    const double v = qp_.pos.at(t, c);
    return opts_.emulate_integer_kernels ? fake_quant(v, exp, 32) : v;
  }

  static void add_into(DMatrix& a, const DMatrix& b) {
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  }

  const DMatrix& weight(const std::string& name) {
    auto it = wcache_.find(name);
    if (it == wcache_.end()) it = wcache_.emplace(name, qp_.weight(name).dequantized()).first;
    return it->second;
  }

  void record(const std::string& name, const DMatrix& codes, const QuantSpec& spec) {
    if (!opts_.record_codes) return;
    IntTensor t({codes.rows, codes.cols}, spec.bits, spec.is_signed);
    for (std::size_t i = 0; i < codes.v.size(); ++i) t.set(i, static_cast<std::int32_t>(codes.v[i]));
    res_.codes[name] = std::move(t);
  }

  // Integer codes (held in doubles) at the point's exponents.
  DMatrix quantize(const std::string& name, const DMatrix& x) {
    const auto& spec = qp_.point(name);
    DMatrix codes(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r)
      for (std::size_t c = 0; c < x.cols; ++c)
        codes(r, c) = static_cast<double>(quantize_code(x(r, c), spec.scale.at(c), spec.bits, spec.is_signed));
    record(name, codes, spec);
    return codes;
  }

  static DMatrix dequant(const DMatrix& codes, const PotScale& scale) {
    DMatrix out(codes.rows, codes.cols);
    for (std::size_t r = 0; r < codes.rows; ++r)
      for (std::size_t c = 0; c < codes.cols; ++c) out(r, c) = std::ldexp(codes(r, c), scale.at(c));
    return out;
  }

  DMatrix requant(const std::string& name, const DMatrix& x) { return dequant(quantize(name, x), qp_.point(name).scale); }

  // LayerNorm whose output feeds a smoothed linear layer: codes are taken at
  // the fused exponents and returned in the migrated domain (code * 2^alpha_xhat).
  DMatrix layer_norm_hat(const std::string& ln, const DMatrix& xd, const std::string& out_point) {
    const auto& [gamma, beta] = qp_.layer_norms.at(ln);
    const auto& out_spec = qp_.point(out_point);
    DMatrix codes;
    if (opts_.emulate_integer_kernels) {
      codes = fixed_point_layer_norm(xd, gamma, beta, out_spec);
      record(out_point, codes, out_spec);
    } else {
      codes = quantize(out_point, potvit::layer_norm(xd, gamma, beta));
    }
    DMatrix out = codes;
    for (double& v : out.v) v = std::ldexp(v, out_spec.smooth->alpha_xhat);
    return out;
  }

  // Q16.16 LayerNorm written over real values: the same quantities the
  // integer kernel forms, each exact in double.
  static DMatrix fixed_point_layer_norm(const DMatrix& x, const Tensor& gamma, const Tensor& beta,
                                        const QuantSpec& out_spec) {
    const double n = static_cast<double>(x.cols);
    DMatrix codes(x.rows, x.cols);
    for (std::size_t r = 0; r < x.rows; ++r) {
      double s1 = 0.0, s2 = 0.0;
      for (double v : x.row(r)) {
        s1 += v;
        s2 += v * v;
      }
      const double var_num = n * s2 - s1 * s1;  // n^2 var
      const double t_q16 = exact_floor_div(std::ldexp(var_num, 16), n * n) + 64.0;
      const double inv_std = isqrt_floor(exact_floor_div(std::ldexp(1.0, 48), t_q16));
      for (std::size_t c = 0; c < x.cols; ++c) {
        const double gq = std::floor(std::ldexp(static_cast<double>(gamma[c]), 16) + 0.5);
        const double bq = std::floor(std::ldexp(static_cast<double>(beta[c]), 16) + 0.5);
        const double a = std::floor(std::ldexp(gq * inv_std, -16) + 0.5);
        const double num = (n * x(r, c) - s1) * a + bq * n;
        const double den = std::ldexp(n, 16 + out_spec.scale.at(c));
        codes(r, c) = clamp_code(exact_round_div(num, den), out_spec.bits, true);
      }
    }
    return codes;
  }

  // i-exp per element, integer sum, round(sum / e) and the leading-bit log2 rule.
  static std::vector<double> log_int_softmax(std::span<const double> s, int bits) {
    const double top = static_cast<double>(int_max(bits, false));
    const double mx = *std::max_element(s.begin(), s.end());
    const double ln2 = static_cast<double>(kLn2Q16);
    std::vector<double> e(s.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) {
      double x_fx = std::floor(std::ldexp(s[k] - mx, 16) + 0.5);
      x_fx = std::max(x_fx, -std::ldexp(64.0, 16));
      const double z = exact_floor_div(-x_fx, ln2);
      const double t = x_fx + z * ln2 + 88670.0;
      const double mant = std::floor(std::ldexp(23495.0 * t * t, -32) + 0.5) + 22544.0;
      e[k] = z >= 63.0 ? 0.0 : std::floor(std::ldexp(mant, -static_cast<int>(z)));
      sum += e[k];
    }
    std::vector<double> codes(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (e[k] == 0.0) {
        codes[k] = top;
        continue;
      }
      const double ratio = exact_floor_div(2.0 * sum + e[k], 2.0 * e[k]);
      int exp2 = 0;
      std::frexp(ratio, &exp2);
      const int i = exp2 - 1;  // 2^i <= ratio < 2^(i+1)
      const double code = i + (ratio >= 1.5 * std::ldexp(1.0, i) && i >= 1 ? 1 : 0);
      codes[k] = std::min(code, top);
    }
    return codes;
  }

  const ModelQuantParams& qp_;
  const FakeQuantOptions& opts_;
  std::map<std::string, DMatrix> wcache_;
  QuantForwardResult res_;
};

}  // namespace

double exact_floor_div(double num, double den) {
  if (!(den > 0.0)) throw RangeError("exact_floor_div needs a positive denominator");
  double q = std::floor(num / den);
  while (q * den > num) q -= 1.0;
  while ((q + 1.0) * den <= num) q += 1.0;
  return q;
}

double exact_round_div(double num, double den) { return exact_floor_div(2.0 * num + den, 2.0 * den); }

QuantForwardResult fake_quant_forward(const ModelQuantParams& qp, const Tensor& patches, const FakeQuantOptions& opts) {
  return FakeQuantRunner(qp, opts).run(patches);
}

int fake_quant_predict(const ModelQuantParams& qp, const Tensor& patches, const FakeQuantOptions& opts) {
  FakeQuantOptions o = opts;
  o.record_codes = false;
  const DMatrix logits = fake_quant_forward(qp, patches, o).logits;
  return static_cast<int>(std::max_element(logits.v.begin(), logits.v.end()) - logits.v.begin());
}

}  // namespace potvit
