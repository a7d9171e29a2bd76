#include "potvit/calibration.hpp"

#include <algorithm>
#include <cmath>

#include "potvit/error.hpp"

namespace potvit {

namespace {

DMatrix hconcat(const std::vector<const DMatrix*>& parts) {
  std::size_t cols = 0;
  for (auto* p : parts) cols += p->cols;
  DMatrix out(parts.front()->rows, cols);
  std::size_t c0 = 0;
  for (auto* p : parts) {
    for (std::size_t r = 0; r < p->rows; ++r)
      for (std::size_t c = 0; c < p->cols; ++c) out(r, c0 + c) = (*p)(r, c);
    c0 += p->cols;
  }
  return out;
}

QuantSpec uniform_tensor_spec(int bits, int exp) {
  QuantSpec s;
  s.kind = QuantKind::uniform;
  s.bits = bits;
  s.is_signed = true;
  s.scale = PotScale::tensor(exp);
  return s;
}

void refresh_logits(ModelQuantParams& qp) {
  const auto& lnf_out = qp.point("lnf_out");
  const auto& head = qp.weight("head.w");
  std::vector<int> exps(head.exponents.size());
  for (std::size_t j = 0; j < exps.size(); ++j) exps[j] = lnf_out.smooth->alpha_xhat + head.exponents[j];
  QuantSpec s;
  s.kind = QuantKind::uniform;
  s.bits = 32;
  s.is_signed = true;
  s.scale = PotScale::channels(std::move(exps));
  qp.points["logits"] = std::move(s);
}

class Calibrator {
 public:
  Calibrator(const FloatModel& model, std::span<const Sample> calib, const QuantSettings& settings,
             const std::set<int>& bit_choices)
      : model_(model), settings_(settings), bits_(bit_choices) {
    if (calib.empty()) throw ConfigError("calibration needs at least one sample");
    bits_.insert(settings.weight_bits);
    for (const auto& [name, b] : settings.layer_bits) bits_.insert(b);
    traces_.reserve(calib.size());
    for (const auto& s : calib) traces_.push_back(forward(model, s.x).trace);
  }

  CalibrationCache run() {
    const auto& cfg = model_.config;
    auto& qp = cache_.base;
    qp.config = cfg;
    qp.settings = settings_;
    qp.pos = model_.pos;

    per_tensor("input");
    add_weight("embed.w", to_dmatrix(model_.w_embed), stack("input"));

    const double qscale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string p = "b" + std::to_string(l) + ".";
      const auto& b = model_.blocks[l];
      qp.layer_norms[p + "ln1"] = {b.ln1_gamma, b.ln1_beta};
      qp.layer_norms[p + "ln2"] = {b.ln2_gamma, b.ln2_beta};

      ptf_point(p + "ln1_in");
      DMatrix wq = to_dmatrix(b.wq);
      for (double& v : wq.v) v *= qscale;
      const DMatrix wk = to_dmatrix(b.wk), wv = to_dmatrix(b.wv);
      const auto [m1, xhat1] = ln_out_point(p + "ln1_out", hconcat({&wq, &wk, &wv}));
      add_weight(p + "wq", migrate_weight(wq, m1), xhat1);
      add_weight(p + "wk", migrate_weight(wk, m1), xhat1);
      add_weight(p + "wv", migrate_weight(wv, m1), xhat1);
      per_tensor(p + "q");
      per_tensor(p + "k");
      per_tensor(p + "v");
      QuantSpec attn;
      attn.kind = QuantKind::log2;
      attn.bits = settings_.attn_bits;
      attn.is_signed = false;
      attn.scale = PotScale::tensor(0);
      qp.points[p + "attn"] = attn;
      per_tensor(p + "attn_out");
      add_weight(p + "wo", to_dmatrix(b.wo), stack(p + "attn_out"));

      ptf_point(p + "ln2_in");
      const DMatrix w1 = to_dmatrix(b.w1);
      const auto [m2, xhat2] = ln_out_point(p + "ln2_out", w1);
      add_weight(p + "fc1", migrate_weight(w1, m2), xhat2);
      per_tensor(p + "fc1_out");
      per_tensor(p + "gelu_out");
      add_weight(p + "fc2", to_dmatrix(b.w2), stack(p + "gelu_out"));
    }
    qp.layer_norms["lnf"] = {model_.lnf_gamma, model_.lnf_beta};
    ptf_point("lnf_in");
    const DMatrix wh = to_dmatrix(model_.w_head);
    const auto [mf, xhatf] = ln_out_point("lnf_out", wh);
    add_weight("head.w", migrate_weight(wh, mf), xhatf);
    refresh_logits(qp);
    qp.validate();
    return std::move(cache_);
  }

 private:
  const DMatrix& stack(const std::string& name) {
    auto it = stacks_.find(name);
    if (it == stacks_.end()) it = stacks_.emplace(name, stack_point(traces_, name)).first;
    return it->second;
  }

  void per_tensor(const std::string& name) {
    const int a = choose_act_exponent(stack(name).v, settings_.act_bits, settings_.rounding);
    cache_.base.points[name] = uniform_tensor_spec(settings_.act_bits, a);
  }

  void ptf_point(const std::string& name) {
    const DMatrix& x = stack(name);
    PtfSpec ptf;
    if (settings_.ptf) {
      ptf = ptf_calibrate(x, settings_.act_bits, settings_.rounding);
    } else {
      ptf.bits = settings_.act_bits;
      ptf.alpha_g = choose_act_exponent(x.v, settings_.act_bits, settings_.rounding);
      ptf.alpha.assign(x.cols, 0);
    }
    std::vector<int> exps(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) exps[c] = ptf.channel_exponent(c);
    QuantSpec s;
    s.kind = QuantKind::ptf;
    s.bits = settings_.act_bits;
    s.is_signed = true;
    s.scale = PotScale::channels(std::move(exps));
    s.ptf = std::move(ptf);
    cache_.base.points[name] = std::move(s);
  }

  // Smoothing against the consuming weight; returns M and the migrated trace.
  std::pair<std::vector<int>, DMatrix> ln_out_point(const std::string& name, const DMatrix& w) {
    const DMatrix& y = stack(name);
    SmoothSpec sm;
    if (settings_.smoothing)
      sm = pot_smooth(y, w, settings_.beta_s).spec;
    else
      sm.migration.assign(y.cols, 0);
    sm.beta_s = settings_.beta_s;
    DMatrix xhat = apply_migration(y, sm.migration);
    sm.alpha_xhat = choose_act_exponent(xhat.v, settings_.act_bits, settings_.rounding);
    sm.fused = fuse_migration(sm, sm.alpha_xhat);
    QuantSpec s;
    s.kind = QuantKind::uniform;
    s.bits = settings_.act_bits;
    s.is_signed = true;
    s.scale = PotScale::channels(sm.fused);
    std::vector<int> m = sm.migration;
    s.smooth = std::move(sm);
    cache_.base.points[name] = std::move(s);
    return {std::move(m), std::move(xhat)};
  }

  void add_weight(const std::string& name, const DMatrix& w, const DMatrix& x_cal) {
    auto& per_bits = cache_.weight_exponents[name];
    for (int b : bits_) per_bits[b] = choose_weight_exponents(x_cal, w, b, settings_.rounding);
    const int b = settings_.bits_for(name);
    cache_.base.weights[name] = WeightQuant{to_tensor(w), b, per_bits.at(b)};
  }

  const FloatModel& model_;
  QuantSettings settings_;
  std::set<int> bits_;
  std::vector<ActivationTrace> traces_;
  std::map<std::string, DMatrix> stacks_;
  CalibrationCache cache_;
};

}  // namespace

int QuantSettings::bits_for(const std::string& layer) const {
  auto it = layer_bits.find(layer);
  return it == layer_bits.end() ? weight_bits : it->second;
}

void QuantSettings::validate() const {
  if (act_bits < 2 || act_bits > 32 || weight_bits < 2 || weight_bits > 32)
    throw ConfigError("activation and weight bits must lie in [2, 32]");
  if (attn_bits < 2 || attn_bits > 16) throw ConfigError("attention bits must lie in [2, 16]");
  for (const auto& [name, b] : layer_bits)
    if (b < 2 || b > 32) throw ConfigError("bad bit-width for layer " + name);
  if (!(beta_s >= 0.0 && beta_s <= 1.0)) throw ConfigError("beta_s must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const QuantSettings& s) {
  j = nlohmann::json{{"act_bits", s.act_bits},       {"attn_bits", s.attn_bits},
                     {"weight_bits", s.weight_bits}, {"layer_bits", s.layer_bits},
                     {"beta_s", s.beta_s},           {"rounding", to_string(s.rounding)},
                     {"smoothing", s.smoothing},     {"ptf", s.ptf}};
}

void from_json(const nlohmann::json& j, QuantSettings& s) {
  try {
    s.act_bits = j.value("act_bits", s.act_bits);
    s.attn_bits = j.value("attn_bits", s.attn_bits);
    s.weight_bits = j.value("weight_bits", s.weight_bits);
    if (j.contains("layer_bits")) s.layer_bits = j.at("layer_bits").get<std::map<std::string, int>>();
    s.beta_s = j.value("beta_s", s.beta_s);
    if (j.contains("rounding")) s.rounding = rounding_mode_from_string(j.at("rounding").get<std::string>());
    s.smoothing = j.value("smoothing", s.smoothing);
    s.ptf = j.value("ptf", s.ptf);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad quantization settings: ") + e.what());
  }
  s.validate();
}

IntTensor WeightQuant::codes() const {
  if (exponents.size() != w.cols()) throw ShapeError("weight exponents do not match output features");
  IntTensor out(w.shape(), bits, true);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c)
      out.set(r, c, static_cast<std::int32_t>(quantize_code(w.at(r, c), exponents[c], bits)));
  return out;
}

DMatrix WeightQuant::dequantized() const {
  DMatrix out(w.rows(), w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) out(r, c) = fake_quant(w.at(r, c), exponents[c], bits);
  return out;
}

const QuantSpec& ModelQuantParams::point(const std::string& name) const {
  auto it = points.find(name);
  if (it == points.end()) throw ConfigError("missing quantization spec for point '" + name + "'");
  return it->second;
}

const WeightQuant& ModelQuantParams::weight(const std::string& name) const {
  auto it = weights.find(name);
  if (it == weights.end()) throw ConfigError("missing quantized weight '" + name + "'");
  return it->second;
}

std::vector<int> ModelQuantParams::embed_acc_exponents() const {
  const int a = point("input").scale.exponent;
  std::vector<int> out = weight("embed.w").exponents;
  for (int& e : out) e += a;
  return out;
}

std::vector<std::string> quant_point_names(int layers) {
  std::vector<std::string> names{"input"};
  for (int l = 0; l < layers; ++l) {
    const std::string p = "b" + std::to_string(l) + ".";
    for (const char* s : {"ln1_in", "ln1_out", "q", "k", "v", "attn", "attn_out", "ln2_in", "ln2_out", "fc1_out",
                          "gelu_out"})
      names.push_back(p + s);
  }
  for (const char* s : {"lnf_in", "lnf_out", "logits"}) names.emplace_back(s);
  return names;
}

std::vector<std::string> ModelQuantParams::point_names() const { return quant_point_names(config.layers); }

double ModelQuantParams::weight_size_mb() const {
  double bits = 0.0;
  for (const auto& [name, w] : weights) bits += static_cast<double>(w.w.size()) * w.bits;
  return bits / 8.0 / (1024.0 * 1024.0);
}

void ModelQuantParams::validate() const {
  for (const auto& name : point_names()) point(name).validate();
  const FloatModel shapes = FloatModel::zeros(config);
  for (const auto& name : shapes.weight_layer_names()) {
    const auto& w = weight(name);
    if (w.w.shape() != shapes.tensor(name).shape()) throw ShapeError("quantized weight '" + name + "' has wrong shape");
    if (w.exponents.size() != w.w.cols()) throw ShapeError("weight '" + name + "' needs one exponent per feature");
  }
  for (const char* ln : {"ln1_in", "ln2_in"})
    for (int l = 0; l < config.layers; ++l)
      if (!point("b" + std::to_string(l) + "." + ln).ptf) throw ConfigError("LN input point lacks PTF factors");
}

CalibrationCache build_calibration(const FloatModel& model, std::span<const Sample> calib,
                                   const QuantSettings& settings, const std::set<int>& weight_bit_choices) {
  settings.validate();
  model.validate();
  return Calibrator(model, calib, settings, weight_bit_choices).run();
}

ModelQuantParams assign_bits(const CalibrationCache& cache, const std::map<std::string, int>& layer_bits) {
  ModelQuantParams qp = cache.base;
  for (const auto& [name, b] : layer_bits) {
    auto wit = qp.weights.find(name);
    if (wit == qp.weights.end()) throw ConfigError("unknown weight layer '" + name + "'");
    const auto& per_bits = cache.weight_exponents.at(name);
    auto eit = per_bits.find(b);
    if (eit == per_bits.end()) throw ConfigError("layer '" + name + "' was not calibrated at " + std::to_string(b) + " bits");
    wit->second.bits = b;
    wit->second.exponents = eit->second;
    qp.settings.layer_bits[name] = b;
  }
  refresh_logits(qp);
  return qp;
}

ModelQuantParams calibrate(const FloatModel& model, std::span<const Sample> calib, const QuantSettings& settings) {
  return build_calibration(model, calib, settings, {}).base;
}

nlohmann::json qparams_to_json(const ModelQuantParams& qp) {
  nlohmann::json points = nlohmann::json::object();
  for (const auto& name : qp.point_names()) points[name] = qp.point(name);
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [name, w] : qp.weights) weights[name] = {{"bits", w.bits}, {"exponents", w.exponents}};
  return {{"config", qp.config}, {"settings", qp.settings}, {"points", points}, {"weights", weights}};
}

void qparams_specs_from_json(const nlohmann::json& j, ModelQuantParams& qp) {
  try {
    qp.config = j.at("config").get<ModelConfig>();
    qp.settings = j.at("settings").get<QuantSettings>();
    qp.points.clear();
    for (const auto& [name, spec] : j.at("points").items()) qp.points[name] = spec.get<QuantSpec>();
    for (const auto& [name, w] : j.at("weights").items()) {
      auto& wq = qp.weights[name];
      wq.bits = w.at("bits").get<int>();
      wq.exponents = w.at("exponents").get<std::vector<int>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad qparams.json: ") + e.what());
  }
  for (const auto& name : qp.point_names()) qp.point(name).validate();
}

}  // namespace potvit
