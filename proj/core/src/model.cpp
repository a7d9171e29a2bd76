#include "potvit/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "potvit/error.hpp"

namespace potvit {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

std::string block_name(std::size_t l, const char* suffix) { return "b" + std::to_string(l) + "." + suffix; }

DMatrix cols_slice(const DMatrix& m, std::size_t c0, std::size_t n) {
  DMatrix out(m.rows, n);
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

void cols_assign(DMatrix& m, std::size_t c0, const DMatrix& src) {
  for (std::size_t r = 0; r < src.rows; ++r)
    for (std::size_t c = 0; c < src.cols; ++c) m(r, c0 + c) = src(r, c);
}

void add_into(DMatrix& dst, const DMatrix& src) {
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

DMatrix add(const DMatrix& a, const DMatrix& b) {
  DMatrix c = a;
  add_into(c, b);
  return c;
}

struct LnCache {
  DMatrix xhat;
  std::vector<double> inv_std;
};

DMatrix ln_forward(const DMatrix& x, const Tensor& gamma, const Tensor& beta, LnCache* cache) {
  DMatrix y(x.rows, x.cols);
  if (cache) {
    cache->xhat = DMatrix(x.rows, x.cols);
    cache->inv_std.assign(x.rows, 0.0);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto row = x.row(r);
    const double mu = std::accumulate(row.begin(), row.end(), 0.0) / n;
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xh = (row[c] - mu) * inv;
      if (cache) cache->xhat(r, c) = xh;
      y(r, c) = xh * gamma[c] + beta[c];
    }
    if (cache) cache->inv_std[r] = inv;
  }
  return y;
}

// Returns dx; accumulates dgamma/dbeta.
DMatrix ln_backward(const DMatrix& dy, const LnCache& cache, const Tensor& gamma, DMatrix& dgamma,
                    DMatrix& dbeta) {
  DMatrix dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      const double dxh = dy(r, c) * gamma[c];
      mean_dxh += dxh;
      mean_dxh_xh += dxh * cache.xhat(r, c);
      dgamma.v[c] += dy(r, c) * cache.xhat(r, c);
      dbeta.v[c] += dy(r, c);
    }
    mean_dxh /= n;
    mean_dxh_xh /= n;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      const double dxh = dy(r, c) * gamma[c];
      dx(r, c) = cache.inv_std[r] * (dxh - mean_dxh - cache.xhat(r, c) * mean_dxh_xh);
    }
  }
  return dx;
}

struct BlockCache {
  DMatrix x_in, y1, q, k, v;
  LnCache ln1, ln2;
  std::vector<DMatrix> probs;  // per head (N, N)
  DMatrix a, x_mid, y2, h, g, x_out;
};

struct ForwardCache {
  DMatrix patches, x0;
  std::vector<BlockCache> blocks;
  LnCache lnf;
  DMatrix yf, logits;
};

DMatrix run_forward(const FloatModel& m, const Tensor& patches, ForwardCache* cache, ActivationTrace* trace) {
  const auto& cfg = m.config;
  const std::size_t N = cfg.tokens, d = cfg.dim, H = cfg.heads, dh = cfg.head_dim();
  if (patches.rank() != 2 || patches.dim(0) != static_cast<std::size_t>(cfg.patches()) ||
      patches.dim(1) != static_cast<std::size_t>(cfg.patch_dim))
    throw ShapeError("forward expects patches of shape (" + std::to_string(cfg.patches()) + "," +
                     std::to_string(cfg.patch_dim) + "), got " + shape_str(patches.shape()));

  const DMatrix p = to_dmatrix(patches);
  DMatrix x = to_dmatrix(m.pos);
  if (N > 1) {
    const DMatrix e = matmul(p, to_dmatrix(m.w_embed));
    for (std::size_t t = 1; t < N; ++t)
      for (std::size_t c = 0; c < d; ++c) x(t, c) += e(t - 1, c);
  }
  if (cache) {
    cache->patches = p;
    cache->x0 = x;
    cache->blocks.assign(cfg.layers, {});
  }
  if (trace) trace->points["input"] = p;

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const auto& b = m.blocks[l];
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[l] : local;
    bc.x_in = x;
    bc.y1 = ln_forward(x, b.ln1_gamma, b.ln1_beta, &bc.ln1);
    bc.q = matmul(bc.y1, to_dmatrix(b.wq));
    bc.k = matmul(bc.y1, to_dmatrix(b.wk));
    bc.v = matmul(bc.y1, to_dmatrix(b.wv));
    bc.a = DMatrix(N, d);
    bc.probs.clear();
    DMatrix attn_stack(H * N, N);
    for (std::size_t h = 0; h < H; ++h) {
      const DMatrix qh = cols_slice(bc.q, h * dh, dh), kh = cols_slice(bc.k, h * dh, dh),
                    vh = cols_slice(bc.v, h * dh, dh);
      DMatrix s = matmul_nt(qh, kh);
      for (double& e : s.v) e *= scale;
      softmax_rows(s);
      cols_assign(bc.a, h * dh, matmul(s, vh));
      for (std::size_t r = 0; r < N; ++r)
        for (std::size_t c = 0; c < N; ++c) attn_stack(h * N + r, c) = s(r, c);
      bc.probs.push_back(std::move(s));
    }
    bc.x_mid = add(x, matmul(bc.a, to_dmatrix(b.wo)));
    bc.y2 = ln_forward(bc.x_mid, b.ln2_gamma, b.ln2_beta, &bc.ln2);
    bc.h = matmul(bc.y2, to_dmatrix(b.w1));
    bc.g = bc.h;
    for (double& e : bc.g.v) e = gelu(e);
    bc.x_out = add(bc.x_mid, matmul(bc.g, to_dmatrix(b.w2)));
    if (trace) {
      auto& t = trace->points;
      t[block_name(l, "ln1_in")] = bc.x_in;
      t[block_name(l, "ln1_out")] = bc.y1;
      // q is recorded pre-scaled by 1/sqrt(head_dim): that is the tensor the
      // quantized engines carry, the scale being folded into W_q.
      DMatrix qs = bc.q;
      for (double& e : qs.v) e *= scale;
      t[block_name(l, "q")] = std::move(qs);
      t[block_name(l, "k")] = bc.k;
      t[block_name(l, "v")] = bc.v;
      t[block_name(l, "attn")] = std::move(attn_stack);
      t[block_name(l, "attn_out")] = bc.a;
      t[block_name(l, "ln2_in")] = bc.x_mid;
      t[block_name(l, "ln2_out")] = bc.y2;
      t[block_name(l, "fc1_out")] = bc.h;
      t[block_name(l, "gelu_out")] = bc.g;
    }
    x = bc.x_out;
  }

  LnCache lnf_local;
  LnCache& lnf = cache ? cache->lnf : lnf_local;
  const DMatrix yf = ln_forward(x, m.lnf_gamma, m.lnf_beta, &lnf);
  DMatrix cls(1, d);
  for (std::size_t c = 0; c < d; ++c) cls(0, c) = yf(0, c);
  DMatrix logits = matmul(cls, to_dmatrix(m.w_head));
  if (cache) {
    cache->yf = yf;
    cache->logits = logits;
  }
  if (trace) {
    trace->points["lnf_in"] = x;
    trace->points["lnf_out"] = yf;
    trace->points["logits"] = logits;
  }
  return logits;
}

void accumulate_sample_grad(const FloatModel& m, const ForwardCache& fc, int label, double weight, Gradients& g) {
  const auto& cfg = m.config;
  const std::size_t N = cfg.tokens, d = cfg.dim, H = cfg.heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  DMatrix dlogits = fc.logits;
  softmax_rows(dlogits);
  dlogits(0, static_cast<std::size_t>(label)) -= 1.0;
  for (double& e : dlogits.v) e *= weight;

  DMatrix cls(1, d);
  for (std::size_t c = 0; c < d; ++c) cls(0, c) = fc.yf(0, c);
  add_into(g["head.w"], matmul_tn(cls, dlogits));
  const DMatrix dcls = matmul_nt(dlogits, to_dmatrix(m.w_head));
  DMatrix dyf(N, d);
  for (std::size_t c = 0; c < d; ++c) dyf(0, c) = dcls(0, c);
  DMatrix dx = ln_backward(dyf, fc.lnf, m.lnf_gamma, g["lnf.gamma"], g["lnf.beta"]);

  for (std::size_t li = m.blocks.size(); li-- > 0;) {
    const auto& b = m.blocks[li];
    const auto& bc = fc.blocks[li];
    const std::string pre = "b" + std::to_string(li) + ".";
    // MLP
    add_into(g[pre + "fc2"], matmul_tn(bc.g, dx));
    DMatrix dh_ = matmul_nt(dx, to_dmatrix(b.w2));
    for (std::size_t i = 0; i < dh_.v.size(); ++i) dh_.v[i] *= gelu_grad(bc.h.v[i]);
    add_into(g[pre + "fc1"], matmul_tn(bc.y2, dh_));
    const DMatrix dy2 = matmul_nt(dh_, to_dmatrix(b.w1));
    DMatrix dx_mid = dx;
    add_into(dx_mid, ln_backward(dy2, bc.ln2, b.ln2_gamma, g[pre + "ln2.gamma"], g[pre + "ln2.beta"]));
    // MSA
    add_into(g[pre + "wo"], matmul_tn(bc.a, dx_mid));
    const DMatrix da = matmul_nt(dx_mid, to_dmatrix(b.wo));
    DMatrix dq(N, d), dk(N, d), dv(N, d);
    for (std::size_t h = 0; h < H; ++h) {
      const DMatrix& P = bc.probs[h];
      const DMatrix qh = cols_slice(bc.q, h * dh, dh), kh = cols_slice(bc.k, h * dh, dh),
                    vh = cols_slice(bc.v, h * dh, dh), dah = cols_slice(da, h * dh, dh);
      const DMatrix dP = matmul_nt(dah, vh);
      cols_assign(dv, h * dh, matmul_tn(P, dah));
      DMatrix dS(N, N);
      for (std::size_t r = 0; r < N; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < N; ++c) dot += dP(r, c) * P(r, c);
        for (std::size_t c = 0; c < N; ++c) dS(r, c) = P(r, c) * (dP(r, c) - dot) * scale;
      }
      cols_assign(dq, h * dh, matmul(dS, kh));
      cols_assign(dk, h * dh, matmul_tn(dS, qh));
    }
    add_into(g[pre + "wq"], matmul_tn(bc.y1, dq));
    add_into(g[pre + "wk"], matmul_tn(bc.y1, dk));
    add_into(g[pre + "wv"], matmul_tn(bc.y1, dv));
    DMatrix dy1 = matmul_nt(dq, to_dmatrix(b.wq));
    add_into(dy1, matmul_nt(dk, to_dmatrix(b.wk)));
    add_into(dy1, matmul_nt(dv, to_dmatrix(b.wv)));
    dx = dx_mid;
    add_into(dx, ln_backward(dy1, bc.ln1, b.ln1_gamma, g[pre + "ln1.gamma"], g[pre + "ln1.beta"]));
  }

  add_into(g["pos"], dx);
  if (N > 1) {
    DMatrix dtok(N - 1, d);
    for (std::size_t t = 1; t < N; ++t)
      for (std::size_t c = 0; c < d; ++c) dtok(t - 1, c) = dx(t, c);
    add_into(g["embed.w"], matmul_tn(fc.patches, dtok));
  }
}

double cross_entropy(const DMatrix& logits, int label) {
  double mx = *std::max_element(logits.v.begin(), logits.v.end());
  double s = 0.0;
  for (double v : logits.v) s += std::exp(v - mx);
  return std::log(s) + mx - logits.v[static_cast<std::size_t>(label)];
}

Gradients zero_grads(const FloatModel& m) {
  Gradients g;
  for (const auto& name : m.tensor_names()) {
    const Tensor& t = m.tensor(name);
    g[name] = DMatrix(t.rows(), t.cols());
  }
  return g;
}

}  // namespace

// ----------------------------------------------------------- ModelConfig

int ModelConfig::hidden_dim() const { return static_cast<int>(std::lround(mlp_ratio * dim)); }

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model needs at least one layer");
  if (heads < 1 || dim < 1 || dim % heads != 0) throw ConfigError("embed dim must be divisible by heads");
  if (tokens < 1) throw ConfigError("model needs at least one token");
  if (classes < 1 || patch_dim < 1) throw ConfigError("classes and patch_dim must be positive");
  if (hidden_dim() < 1) throw ConfigError("mlp ratio gives an empty hidden layer");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},         {"heads", c.heads},     {"dim", c.dim},
                     {"tokens", c.tokens},         {"mlp_ratio", c.mlp_ratio},
                     {"classes", c.classes},       {"patch_dim", c.patch_dim}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.dim = j.value("dim", c.dim);
    c.tokens = j.value("tokens", c.tokens);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.classes = j.value("classes", c.classes);
    c.patch_dim = j.value("patch_dim", c.patch_dim);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
}

// ------------------------------------------------------------ FloatModel

FloatModel FloatModel::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, hid = cfg.hidden_dim();
  FloatModel m;
  m.config = cfg;
  m.w_embed = Tensor({static_cast<std::size_t>(cfg.patch_dim), d});
  m.pos = Tensor({static_cast<std::size_t>(cfg.tokens), d});
  for (int l = 0; l < cfg.layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = Tensor({d}, 1.0f);
    b.ln1_beta = Tensor({d});
    b.wq = Tensor({d, d});
    b.wk = Tensor({d, d});
    b.wv = Tensor({d, d});
    b.wo = Tensor({d, d});
    b.ln2_gamma = Tensor({d}, 1.0f);
    b.ln2_beta = Tensor({d});
    b.w1 = Tensor({d, hid});
    b.w2 = Tensor({hid, d});
    m.blocks.push_back(std::move(b));
  }
  m.lnf_gamma = Tensor({d}, 1.0f);
  m.lnf_beta = Tensor({d});
  m.w_head = Tensor({d, static_cast<std::size_t>(cfg.classes)});
  return m;
}

FloatModel FloatModel::random(const ModelConfig& cfg, Rng& rng) {
  FloatModel m = zeros(cfg);
  auto fill = [&rng](Tensor& t, double stddev) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(stddev * rng.normal());
  };
  auto fan_in = [](const Tensor& t) { return 1.0 / std::sqrt(static_cast<double>(t.rows())); };
  fill(m.w_embed, fan_in(m.w_embed));
  fill(m.pos, 0.1);
  for (auto& b : m.blocks) {
    for (Tensor* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) fill(*w, fan_in(*w));
  }
  fill(m.w_head, fan_in(m.w_head));
  return m;
}

std::vector<std::string> FloatModel::tensor_names() const {
  std::vector<std::string> names{"embed.w", "pos"};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "b" + std::to_string(l) + ".";
    for (const char* s : {"ln1.gamma", "ln1.beta", "wq", "wk", "wv", "wo", "ln2.gamma", "ln2.beta", "fc1", "fc2"})
      names.push_back(p + s);
  }
  for (const char* s : {"lnf.gamma", "lnf.beta", "head.w"}) names.emplace_back(s);
  return names;
}

std::vector<std::string> FloatModel::weight_layer_names() const {
  std::vector<std::string> names{"embed.w"};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "b" + std::to_string(l) + ".";
    for (const char* s : {"wq", "wk", "wv", "wo", "fc1", "fc2"}) names.push_back(p + s);
  }
  names.emplace_back("head.w");
  return names;
}

Tensor& FloatModel::tensor(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const FloatModel&>(*this).tensor(name));
}

const Tensor& FloatModel::tensor(const std::string& name) const {
  if (name == "embed.w") return w_embed;
  if (name == "pos") return pos;
  if (name == "lnf.gamma") return lnf_gamma;
  if (name == "lnf.beta") return lnf_beta;
  if (name == "head.w") return w_head;
  if (name.size() > 2 && name[0] == 'b') {
    const auto dot = name.find('.');
    if (dot != std::string::npos) {
      const std::size_t l = std::stoul(name.substr(1, dot - 1));
      const std::string s = name.substr(dot + 1);
      if (l < blocks.size()) {
        const auto& b = blocks[l];
        if (s == "ln1.gamma") return b.ln1_gamma;
        if (s == "ln1.beta") return b.ln1_beta;
        if (s == "wq") return b.wq;
        if (s == "wk") return b.wk;
        if (s == "wv") return b.wv;
        if (s == "wo") return b.wo;
        if (s == "ln2.gamma") return b.ln2_gamma;
        if (s == "ln2.beta") return b.ln2_beta;
        if (s == "fc1") return b.w1;
        if (s == "fc2") return b.w2;
      }
    }
  }
  throw ConfigError("unknown model tensor '" + name + "'");
}

void FloatModel::validate() const {
  config.validate();
  const FloatModel ref = zeros(config);
  for (const auto& name : ref.tensor_names()) {
    if (tensor(name).shape() != ref.tensor(name).shape())
      throw ShapeError("tensor '" + name + "' has shape " + shape_str(tensor(name).shape()) + ", expected " +
                       shape_str(ref.tensor(name).shape()));
  }
}

// --------------------------------------------------------------- forward

const DMatrix& ActivationTrace::at(const std::string& name) const {
  auto it = points.find(name);
  if (it == points.end()) throw ConfigError("activation trace has no point '" + name + "'");
  return it->second;
}

DMatrix stack_point(const std::vector<ActivationTrace>& traces, const std::string& name) {
  if (traces.empty()) throw ConfigError("cannot stack an empty trace list");
  std::size_t rows = 0;
  const std::size_t cols = traces.front().at(name).cols;
  for (const auto& t : traces) rows += t.at(name).rows;
  DMatrix out(rows, cols);
  std::size_t r0 = 0;
  for (const auto& t : traces) {
    const DMatrix& m = t.at(name);
    std::copy(m.v.begin(), m.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(r0 * cols));
    r0 += m.rows;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
}

DMatrix layer_norm(const DMatrix& x, const Tensor& gamma, const Tensor& beta) {
  return ln_forward(x, gamma, beta, nullptr);
}

void softmax_rows(DMatrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (double& v : row) v /= s;
  }
}

ForwardResult forward(const FloatModel& model, const Tensor& patches) {
  ForwardResult res;
  res.logits = run_forward(model, patches, nullptr, &res.trace);
  return res;
}

LossAndGrad gradient(const FloatModel& model, std::span<const Sample> batch) {
  if (batch.empty()) throw ConfigError("gradient needs a nonempty batch");
  LossAndGrad out;
  out.grads = zero_grads(model);
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    ForwardCache fc;
    run_forward(model, s.x, &fc, nullptr);
    out.loss += w * cross_entropy(fc.logits, s.label);
    accumulate_sample_grad(model, fc, s.label, w, out.grads);
  }
  return out;
}

double loss(const FloatModel& model, std::span<const Sample> batch) {
  if (batch.empty()) throw ConfigError("loss needs a nonempty batch");
  double total = 0.0;
  for (const auto& s : batch) total += cross_entropy(run_forward(model, s.x, nullptr, nullptr), s.label);
  return total / static_cast<double>(batch.size());
}

int predict(const FloatModel& model, const Tensor& patches) {
  const DMatrix logits = run_forward(model, patches, nullptr, nullptr);
  return static_cast<int>(std::max_element(logits.v.begin(), logits.v.end()) - logits.v.begin());
}

double accuracy(const std::function<int(const Tensor&)>& classify, std::span<const Sample> samples) {
  if (samples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& s : samples) hits += classify(s.x) == s.label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double accuracy(const FloatModel& model, std::span<const Sample> samples) {
  return accuracy([&model](const Tensor& x) { return predict(model, x); }, samples);
}

// ----------------------------------------------------------------- train

TrainResult train(const ModelConfig& cfg, const DataSplits& data, const TrainOptions& opts) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training split is empty");
  if (opts.batch_size < 1 || opts.epochs < 0) throw ConfigError("bad training options");
  Rng rng(opts.seed);
  Rng init_rng = rng.split();
  Rng shuffle_rng = rng.split();
  TrainResult res;
  res.model = FloatModel::random(cfg, init_rng);
  auto& model = res.model;
  const auto names = model.tensor_names();
  Gradients velocity = zero_grads(model);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Sample> batch;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    // Fisher-Yates with the reproducible stream.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double epoch_loss = 0.0;
    std::size_t nb = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + opts.batch_size); ++i)
        batch.push_back(data.train[order[i]]);
      const LossAndGrad lg = gradient(model, batch);
      if (!std::isfinite(lg.loss)) throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
      epoch_loss += lg.loss;
      ++nb;
      if (opts.lr == 0.0) continue;
      for (const auto& name : names) {
        Tensor& t = model.tensor(name);
        DMatrix& vel = velocity[name];
        const DMatrix& g = lg.grads.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
          vel.v[i] = opts.momentum * vel.v[i] + g.v[i];
          t[i] = static_cast<float>(t[i] - opts.lr * vel.v[i]);
        }
      }
    }
    res.epoch_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(nb, 1)));
  }
  if (!model.w_head.all_finite()) throw DivergenceError("training produced non-finite weights");
  res.train_accuracy = accuracy(model, data.train);
  res.val_accuracy = accuracy(model, data.val);
  return res;
}

}  // namespace potvit
