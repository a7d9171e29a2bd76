#include "potvit/intengine.hpp"

#include <algorithm>
#include <cmath>

#include "potvit/checkpoint.hpp"
#include "potvit/error.hpp"

namespace potvit {

namespace {

IntTensor slice_cols(const IntTensor& t, std::size_t c0, std::size_t n) {
  std::vector<std::int32_t> out(t.rows() * n);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = t.at(r, c0 + c);
  return IntTensor({t.rows(), n}, std::move(out), t.bits(), t.is_signed());
}

IntTensor transpose(const IntTensor& t) {
  std::vector<std::int32_t> out(t.size());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out[c * t.rows() + r] = t.at(r, c);
  return IntTensor({t.cols(), t.rows()}, std::move(out), t.bits(), t.is_signed());
}

IntTensor first_row(const IntTensor& t) {
  std::vector<std::int32_t> out(t.row(0).begin(), t.row(0).end());
  return IntTensor({1, t.cols()}, std::move(out), t.bits(), t.is_signed());
}

class IntRunner {
 public:
  IntRunner(const QuantizedModel& qm, bool record) : qm_(qm), record_(record) {}

  IntForwardResult run(const Tensor& patches) {
    const auto& cfg = qm_.config;
    const std::size_t N = cfg.tokens, d = cfg.dim, H = cfg.heads, dh = cfg.head_dim();
    if (patches.rank() != 2 || patches.dim(0) != N - 1 || patches.dim(1) != static_cast<std::size_t>(cfg.patch_dim))
      throw ShapeError("int_forward: bad input shape " + shape_str(patches.shape()));
    const int act_bits = qm_.settings.act_bits;

    // The only float operation: quantizing the input patches.
    const auto& in_spec = qm_.point("input");
    IntTensor p(patches.shape(), in_spec.bits, true);
    for (std::size_t i = 0; i < patches.size(); ++i)
      p.set(i, static_cast<std::int32_t>(quantize_code(patches[i], in_spec.scale.exponent, in_spec.bits)));
    keep("input", p);

    const auto& we = qm_.weight("embed.w");
    const IntTensor e = linear(p, we);
    IntTensor x({N, d}, act_bits, true);
    {
      const auto& spec = qm_.point("b0.ln1_in");
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t c = 0; c < d; ++c) {
          const int acc_exp = in_spec.scale.exponent + we.exponents[c];
          const std::int64_t acc = static_cast<std::int64_t>(qm_.pos.at(t, c)) + (t > 0 ? e.at(t - 1, c) : 0);
          x.set(t, c, requantize_value(acc, acc_exp - spec.scale.at(c), act_bits));
        }
    }

    for (int l = 0; l < cfg.layers; ++l) {
      const std::string pre = "b" + std::to_string(l) + ".";
      const auto& in1 = qm_.point(pre + "ln1_in");
      keep(pre + "ln1_in", x);
      const auto& out1 = qm_.point(pre + "ln1_out");
      const IntTensor y1 = int_layernorm(x, *in1.ptf, qm_.layer_norms.at(pre + "ln1"), out1.scale.exponents, act_bits);
      keep(pre + "ln1_out", y1);
      const int xh1 = out1.smooth->alpha_xhat;
      const IntTensor q = project(y1, xh1, pre + "wq", pre + "q");
      const IntTensor k = project(y1, xh1, pre + "wk", pre + "k");
      const IntTensor v = project(y1, xh1, pre + "wv", pre + "v");
      const int eq = qm_.point(pre + "q").scale.exponent, ek = qm_.point(pre + "k").scale.exponent;
      const int ev = qm_.point(pre + "v").scale.exponent;
      const auto& attn_spec = qm_.point(pre + "attn");
      const auto& ao_spec = qm_.point(pre + "attn_out");
      IntTensor attn({H * N, N}, attn_spec.bits, false);
      IntTensor a({N, d}, act_bits, true);
      for (std::size_t h = 0; h < H; ++h) {
        const IntTensor qh = slice_cols(q, h * dh, dh), kh = slice_cols(k, h * dh, dh), vh = slice_cols(v, h * dh, dh);
        const IntTensor scores = psmac_matmul(qh, transpose(kh), PsMacConfig::for_weight_bits(8));
        const IntTensor m = int_softmax_lis(scores, eq + ek, attn_spec.bits);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < N; ++c) attn.set(h * N + r, c, m.at(r, c));
        const IntTensor av = shift_attention_v(m, vh);
        for (std::size_t r = 0; r < N; ++r)
          for (std::size_t c = 0; c < dh; ++c)
            a.set(r, h * dh + c, requantize_value(av.at(r, c), ev - ao_spec.scale.exponent, act_bits));
      }
      keep(pre + "attn", attn);
      keep(pre + "attn_out", a);

      const auto& wo = qm_.weight(pre + "wo");
      const IntTensor o = linear(a, wo);
      const auto& in2 = qm_.point(pre + "ln2_in");
      const IntTensor x_mid = residual(x, in1, o, ao_spec.scale.exponent, wo.exponents, in2);
      keep(pre + "ln2_in", x_mid);
      const auto& out2 = qm_.point(pre + "ln2_out");
      const IntTensor y2 = int_layernorm(x_mid, *in2.ptf, qm_.layer_norms.at(pre + "ln2"), out2.scale.exponents, act_bits);
      keep(pre + "ln2_out", y2);
      const IntTensor hq = project(y2, out2.smooth->alpha_xhat, pre + "fc1", pre + "fc1_out");
      const auto& lut = qm_.gelu_lut.at(l);
      const std::int32_t lo = int_min(act_bits, true);
      IntTensor g(hq.shape(), act_bits, true);
      for (std::size_t i = 0; i < hq.size(); ++i) g.set(i, lut.at(static_cast<std::size_t>(hq[i] - lo)));
      keep(pre + "gelu_out", g);
      const auto& w2 = qm_.weight(pre + "fc2");
      const IntTensor f = linear(g, w2);
      const std::string next = l + 1 < cfg.layers ? "b" + std::to_string(l + 1) + ".ln1_in" : "lnf_in";
      x = residual(x_mid, in2, f, qm_.point(pre + "gelu_out").scale.exponent, w2.exponents, qm_.point(next));
    }

    const auto& inf = qm_.point("lnf_in");
    keep("lnf_in", x);
    const auto& outf = qm_.point("lnf_out");
    const IntTensor yf = int_layernorm(x, *inf.ptf, qm_.layer_norms.at("lnf"), outf.scale.exponents, act_bits);
    keep("lnf_out", yf);
    IntForwardResult res;
    res.logits = linear(first_row(yf), qm_.weight("head.w"));
    res.logit_exponents = qm_.point("logits").scale.exponents;
    keep("logits", res.logits);
    res.codes = std::move(codes_);
    return res;
  }

 private:
  void keep(const std::string& name, const IntTensor& t) {
    if (record_) codes_[name] = t;
  }

  static IntTensor linear(const IntTensor& a, const QuantizedLinear& w) {
    return psmac_matmul(a, w.codes, PsMacConfig::for_weight_bits(w.bits()));
  }

  // Linear layer followed by a shift re-quantization to a per-tensor point.
  IntTensor project(const IntTensor& x, int x_exp, const std::string& weight, const std::string& point) {
    const auto& w = qm_.weight(weight);
    const auto& spec = qm_.point(point);
    std::vector<int> shifts(w.exponents.size());
    for (std::size_t j = 0; j < shifts.size(); ++j) shifts[j] = x_exp + w.exponents[j] - spec.scale.exponent;
    IntTensor out = requantize_columns(linear(x, w), shifts, spec.bits);
    keep(point, out);
    return out;
  }

  // Residual add of a PTF-coded stream and a linear accumulator, landing on the next PTF point.
  static IntTensor residual(const IntTensor& x, const QuantSpec& x_spec, const IntTensor& acc, int a_exp,
                            const std::vector<int>& w_exp, const QuantSpec& out_spec) {
    IntTensor out(x.shape(), out_spec.bits, true);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c)
        out.set(r, c, aligned_add(x.at(r, c), x_spec.scale.at(c), acc.at(r, c), a_exp + w_exp[c], out_spec.scale.at(c),
                                  out_spec.bits));
    return out;
  }

  const QuantizedModel& qm_;
  bool record_;
  CodeTrace codes_;
};

}  // namespace

QuantizedModel QuantizedModel::build(const ModelQuantParams& qp) {
  qp.validate();
  if (qp.settings.act_bits > 8) throw ConfigError("the integer engine needs activations of at most 8 bits");
  QuantizedModel qm;
  qm.config = qp.config;
  qm.settings = qp.settings;
  qm.points = qp.points;
  for (const auto& [name, w] : qp.weights) {
    if (w.bits != 4 && w.bits != 8) throw ConfigError("weight '" + name + "' must be 4- or 8-bit for the integer engine");
    qm.weights[name] = QuantizedLinear{w.codes(), w.exponents};
  }
  const auto acc_exp = qp.embed_acc_exponents();
  qm.pos = IntTensor(qp.pos.shape(), 32, true);
  for (std::size_t t = 0; t < qp.pos.rows(); ++t)
    for (std::size_t c = 0; c < qp.pos.cols(); ++c)
      qm.pos.set(t, c, static_cast<std::int32_t>(quantize_code(qp.pos.at(t, c), acc_exp[c], 32)));
  for (const auto& [name, gb] : qp.layer_norms) qm.layer_norms[name] = LayerNormQ16::from_float(gb.first, gb.second);
  const int bits = qp.settings.act_bits;
  for (int l = 0; l < qp.config.layers; ++l) {
    const std::string pre = "b" + std::to_string(l) + ".";
    const int eh = qp.point(pre + "fc1_out").scale.exponent, eg = qp.point(pre + "gelu_out").scale.exponent;
    std::vector<std::int32_t> lut;
    for (std::int32_t code = int_min(bits, true); code <= int_max(bits, true); ++code)
      lut.push_back(static_cast<std::int32_t>(quantize_code(gelu(std::ldexp(static_cast<double>(code), eh)), eg, bits)));
    qm.gelu_lut.push_back(std::move(lut));
  }
  return qm;
}

const QuantSpec& QuantizedModel::point(const std::string& name) const {
  auto it = points.find(name);
  if (it == points.end()) throw ConfigError("missing quantization spec for point '" + name + "'");
  return it->second;
}

const QuantizedLinear& QuantizedModel::weight(const std::string& name) const {
  auto it = weights.find(name);
  if (it == weights.end()) throw ConfigError("missing quantized weight '" + name + "'");
  return it->second;
}

std::vector<int> QuantizedModel::layer_bits() const {
  std::vector<int> out;
  for (const auto& name : FloatModel::zeros(config).weight_layer_names()) out.push_back(weight(name).bits());
  return out;
}

void QuantizedModel::save(const std::filesystem::path& dir) const {
  BlobWriter w;
  for (const auto& name : FloatModel::zeros(config).weight_layer_names()) w.add(name, weight(name).codes);
  w.add("pos", pos);
  for (const auto& [name, ln] : layer_norms) {
    std::vector<std::int32_t> g(ln.gamma.begin(), ln.gamma.end()), b(ln.beta.begin(), ln.beta.end());
    const std::size_t n = g.size();
    w.add(name + ".gamma_q16", IntTensor({n}, std::move(g), 32, true));
    w.add(name + ".beta_q16", IntTensor({n}, std::move(b), 32, true));
  }
  for (std::size_t l = 0; l < gelu_lut.size(); ++l) {
    std::vector<std::int32_t> t = gelu_lut[l];
    const std::size_t n = t.size();
    w.add("b" + std::to_string(l) + ".gelu_lut", IntTensor({n}, std::move(t), settings.act_bits, true));
  }
  w.write(dir);
  nlohmann::json points_j = nlohmann::json::object();
  for (const auto& [name, s] : points) points_j[name] = s;
  nlohmann::json weights_j = nlohmann::json::object();
  for (const auto& [name, q] : weights) weights_j[name] = {{"bits", q.bits()}, {"exponents", q.exponents}};
  write_json_file(dir / "qparams.json",
                  {{"config", config}, {"settings", settings}, {"points", points_j}, {"weights", weights_j}});
}

QuantizedModel QuantizedModel::load(const std::filesystem::path& dir) {
  ModelQuantParams specs;
  qparams_specs_from_json(read_json_file(dir / "qparams.json"), specs);
  BlobReader r(dir);
  QuantizedModel qm;
  qm.config = specs.config;
  qm.settings = specs.settings;
  qm.points = specs.points;
  const FloatModel shapes = FloatModel::zeros(qm.config);
  for (const auto& name : shapes.weight_layer_names()) {
    IntTensor codes = r.int_tensor(name);
    if (codes.shape() != shapes.tensor(name).shape()) throw ShapeError("qmodel weight '" + name + "' has wrong shape");
    const auto& ws = specs.weights.at(name);
    if (codes.bits() != ws.bits || ws.exponents.size() != codes.cols())
      throw ConfigError("qmodel weight '" + name + "' disagrees with qparams.json");
    qm.weights[name] = QuantizedLinear{std::move(codes), ws.exponents};
  }
  qm.pos = r.int_tensor("pos");
  std::vector<std::string> lns{"lnf"};
  for (int l = 0; l < qm.config.layers; ++l) {
    lns.push_back("b" + std::to_string(l) + ".ln1");
    lns.push_back("b" + std::to_string(l) + ".ln2");
  }
  for (const auto& name : lns) {
    const IntTensor g = r.int_tensor(name + ".gamma_q16"), b = r.int_tensor(name + ".beta_q16");
    qm.layer_norms[name] = LayerNormQ16{{g.data().begin(), g.data().end()}, {b.data().begin(), b.data().end()}};
  }
  for (int l = 0; l < qm.config.layers; ++l) {
    const IntTensor t = r.int_tensor("b" + std::to_string(l) + ".gelu_lut");
    qm.gelu_lut.emplace_back(t.data().begin(), t.data().end());
  }
  return qm;
}

DMatrix IntForwardResult::dequantized_logits() const {
  DMatrix out(1, logits.cols());
  for (std::size_t c = 0; c < logits.cols(); ++c)
    out(0, c) = std::ldexp(static_cast<double>(logits.at(0, c)), logit_exponents.at(c));
  return out;
}

int IntForwardResult::argmax() const {
  const DMatrix l = dequantized_logits();
  return static_cast<int>(std::max_element(l.v.begin(), l.v.end()) - l.v.begin());
}

IntForwardResult int_forward(const QuantizedModel& qm, const Tensor& patches, bool record_codes) {
  return IntRunner(qm, record_codes).run(patches);
}

int int_predict(const QuantizedModel& qm, const Tensor& patches) { return int_forward(qm, patches, false).argmax(); }

std::vector<CodeMismatch> compare_codes(const CodeTrace& a, const CodeTrace& b) {
  std::vector<CodeMismatch> out;
  std::set<std::string> names;
  for (const auto& [n, t] : a) names.insert(n);
  for (const auto& [n, t] : b) names.insert(n);
  for (const auto& name : names) {
    auto ia = a.find(name), ib = b.find(name);
    if (ia == a.end() || ib == b.end() || ia->second.shape() != ib->second.shape()) {
      out.push_back({name, 1, 0});
      continue;
    }
    CodeMismatch m{name, 0, 0};
    for (std::size_t i = 0; i < ia->second.size(); ++i)
      if (ia->second[i] != ib->second[i]) {
        if (m.count == 0) m.first_index = i;
        ++m.count;
      }
    if (m.count) out.push_back(m);
  }
  return out;
}

}  // namespace potvit
