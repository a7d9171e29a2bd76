#include "potvit/mpsearch.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <set>
#include <thread>

#include "potvit/error.hpp"

namespace potvit {

namespace {

double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Migration applied to a layer's input channels during calibration, if any.
const std::vector<int>* layer_migration(const ModelQuantParams& qp, const std::string& layer) {
  std::string point;
  const auto dot_pos = layer.find('.');
  const std::string suffix = layer.substr(dot_pos + 1);
  if (layer == "head.w")
    point = "lnf_out";
  else if (suffix == "wq" || suffix == "wk" || suffix == "wv")
    point = layer.substr(0, dot_pos) + ".ln1_out";
  else if (suffix == "fc1")
    point = layer.substr(0, dot_pos) + ".ln2_out";
  else
    return nullptr;
  const auto& spec = qp.point(point);
  return spec.smooth ? &spec.smooth->migration : nullptr;
}

std::string bits_key(const std::vector<int>& bits) {
  std::string s;
  for (int b : bits) s += std::to_string(b) + ",";
  return s;
}

}  // namespace

std::vector<double> hessian_matvec(const GradFn& grad, std::span<const double> w, std::span<const double> z) {
  if (w.size() != z.size()) throw ShapeError("hessian_matvec: probe shape differs from the weights");
  const double zn = inf_norm(z);
  if (zn == 0.0) return std::vector<double>(w.size(), 0.0);
  double wn = inf_norm(w);
  if (wn == 0.0) wn = 1.0;
  const double eps = 1e-3 * wn / zn;
  std::vector<double> wp(w.begin(), w.end()), wm(w.begin(), w.end());
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += eps * z[i];
    wm[i] -= eps * z[i];
  }
  const auto gp = grad(wp), gm = grad(wm);
  std::vector<double> hz(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    hz[i] = (gp[i] - gm[i]) / (2.0 * eps);
    if (!std::isfinite(hz[i])) throw RangeError("hessian_matvec produced a non-finite value");
  }
  return hz;
}

GradFn layer_grad_fn(const FloatModel& model, std::span<const Sample> batch, const std::string& layer) {
  const Shape shape = model.tensor(layer).shape();
  return [model, batch, layer, shape](std::span<const double> w) {
    FloatModel m = model;
    Tensor& t = m.tensor(layer);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(w[i]);
    const auto lg = gradient(m, batch);
    const DMatrix& g = lg.grads.at(layer);
    return std::vector<double>(g.v.begin(), g.v.end());
  };
}

Tensor hessian_matvec(const FloatModel& model, std::span<const Sample> batch, const std::string& layer, const Tensor& z) {
  const Tensor& w = model.tensor(layer);
  if (z.shape() != w.shape()) throw ShapeError("probe must be shaped like layer " + layer);
  const std::vector<double> wv(w.data().begin(), w.data().end()), zv(z.data().begin(), z.data().end());
  const auto hz = hessian_matvec(layer_grad_fn(model, batch, layer), wv, zv);
  std::vector<float> out(hz.begin(), hz.end());
  return Tensor(w.shape(), std::move(out));
}

double hutchinson_trace(const GradFn& grad, std::span<const double> w, int m, Rng& rng, ProbeKind probe) {
  if (m < 1) throw ConfigError("hutchinson_trace needs at least one probe");
  std::vector<double> z(w.size());
  double sum = 0.0;
  for (int s = 0; s < m; ++s) {
    for (double& v : z) v = probe == ProbeKind::rademacher ? rng.rademacher() : rng.normal();
    sum += dot(z, hessian_matvec(grad, w, z));
  }
  return sum / m;
}

TraceEstimate hutchinson_trace(const FloatModel& model, std::span<const Sample> batch, const std::string& layer, int m,
                               Rng& rng, ProbeKind probe) {
  const Tensor& w = model.tensor(layer);
  const std::vector<double> wv(w.data().begin(), w.data().end());
  TraceEstimate est{layer, 0.0, m, rng.seed()};
  est.trace = hutchinson_trace(layer_grad_fn(model, batch, layer), wv, m, rng, probe);
  if (!std::isfinite(est.trace)) throw RangeError("non-finite Hessian trace for " + layer);
  return est;
}

double exact_trace(const GradFn& grad, std::span<const double> w) {
  std::vector<double> e(w.size(), 0.0);
  double tr = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    e[i] = 1.0;
    tr += hessian_matvec(grad, w, e)[i];
    e[i] = 0.0;
  }
  return tr;
}

std::map<std::string, int> BitConfig::as_map() const {
  std::map<std::string, int> m;
  for (std::size_t i = 0; i < layers.size(); ++i) m[layers[i]] = bits[i];
  return m;
}

void to_json(nlohmann::json& j, const BitConfig& c) {
  j = nlohmann::json{{"layers", c.layers}, {"bits", c.bits}, {"model_size_mb", c.model_size_mb}, {"omega", c.omega}};
  j["accuracy"] = c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, BitConfig& c) {
  try {
    c.layers = j.at("layers").get<std::vector<std::string>>();
    c.bits = j.at("bits").get<std::vector<int>>();
    c.model_size_mb = j.at("model_size_mb").get<double>();
    c.omega = j.at("omega").get<double>();
    c.accuracy.reset();
    if (j.contains("accuracy") && !j["accuracy"].is_null()) c.accuracy = j["accuracy"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad bitconfig: ") + e.what());
  }
  if (c.layers.size() != c.bits.size()) throw ConfigError("bitconfig layers and bits differ in length");
}

double MpProblem::size_mb(std::span<const int> bits) const {
  double total = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) total += static_cast<double>(layers[i].params) * bits[i];
  return total / 8.0 / (1024.0 * 1024.0);
}

double MpProblem::omega(std::span<const int> bits) const {
  double total = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) total += layers[i].trace * layers[i].perturbation.at(bits[i]);
  return total;
}

BitConfig MpProblem::make(std::vector<int> bits) const {
  if (bits.size() != layers.size()) throw ShapeError("bit vector length differs from the layer count");
  BitConfig c;
  for (const auto& l : layers) c.layers.push_back(l.name);
  c.model_size_mb = size_mb(bits);
  c.omega = omega(bits);
  c.bits = std::move(bits);
  return c;
}

double weight_perturbation(const FloatModel& model, const CalibrationCache& cache, const std::string& layer, int bits) {
  const auto& wq = cache.base.weight(layer);
  const auto& exps = cache.weight_exponents.at(layer).at(bits);
  const Tensor& w = model.tensor(layer);
  const std::vector<int>* mig = layer_migration(cache.base, layer);
  const bool is_q = layer.size() > 3 && layer.substr(layer.size() - 3) == ".wq";
  const double unfold = is_q ? std::sqrt(static_cast<double>(model.config.head_dim())) : 1.0;
  double s = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) {
      double v = fake_quant(wq.w.at(r, c), exps[c], bits);
      if (mig) v = std::ldexp(v, -(*mig)[r]);
      const double d = v * unfold - w.at(r, c);
      s += d * d;
    }
  return std::sqrt(s);
}

MpProblem build_problem(const FloatModel& model, const CalibrationCache& cache, std::span<const Sample> batch,
                        const TraceOptions& opts) {
  MpProblem p;
  Rng rng(opts.seed);
  for (const auto& name : model.weight_layer_names()) {
    MpLayer l;
    l.name = name;
    l.params = model.tensor(name).size();
    Rng layer_rng = rng.split();
    l.trace = hutchinson_trace(model, batch, name, opts.probes, layer_rng, opts.probe).trace;
    for (int b : p.choices) l.perturbation[b] = weight_perturbation(model, cache, name, b);
    p.layers.push_back(std::move(l));
  }
  return p;
}

namespace {

bool omega_less(const BitConfig& a, const BitConfig& b) {
  if (a.omega != b.omega) return a.omega < b.omega;
  if (a.model_size_mb != b.model_size_mb) return a.model_size_mb < b.model_size_mb;
  return a.bits < b.bits;
}

void check_budget(const MpProblem& problem, double budget_mb) {
  const std::vector<int> low(problem.layers.size(), *std::min_element(problem.choices.begin(), problem.choices.end()));
  if (problem.size_mb(low) > budget_mb)
    throw InfeasibleError("budget " + std::to_string(budget_mb) + " MB is below the all-" + std::to_string(low.front()) +
                          "-bit size " + std::to_string(problem.size_mb(low)) + " MB");
}

}  // namespace

std::vector<BitConfig> pareto_allocate(const MpProblem& problem, double budget_mb, std::size_t k) {
  if (k == 0) throw ConfigError("pareto_allocate needs k >= 1");
  if (problem.choices != std::vector<int>{4, 8}) throw ConfigError("bit choices are fixed at {4, 8}");
  check_budget(problem, budget_mb);
  const std::size_t L = problem.layers.size();
  std::vector<BitConfig> best;
  auto offer = [&](std::vector<int> bits) {
    if (problem.size_mb(bits) > budget_mb) return;
    BitConfig c = problem.make(std::move(bits));
    if (best.size() == k && !omega_less(c, best.back())) return;
    best.insert(std::upper_bound(best.begin(), best.end(), c, omega_less), std::move(c));
    if (best.size() > k) best.pop_back();
  };
  if (L <= 20) {
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << L); ++mask) {
      std::vector<int> bits(L);
      for (std::size_t i = 0; i < L; ++i) bits[i] = (mask >> (L - 1 - i)) & 1u ? 8 : 4;
      offer(std::move(bits));
    }
    return best;
  }
  // Greedy: from all-8, drop the layer with the smallest dOmega per saved byte until feasible.
  std::vector<int> bits(L, 8);
  while (problem.size_mb(bits) > budget_mb) {
    std::optional<std::size_t> pick;
    double pick_cost = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
      if (bits[i] != 8) continue;
      const auto& l = problem.layers[i];
      const double cost = l.trace * (l.perturbation.at(4) - l.perturbation.at(8)) / static_cast<double>(l.params);
      if (!pick || cost < pick_cost) {
        pick = i;
        pick_cost = cost;
      }
    }
    bits[*pick] = 4;
  }
  offer(bits);
  // Neighbours: swap one 4-bit and one 8-bit layer when the swap stays in budget.
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      if (bits[i] == 4 && bits[j] == 8) {
        auto b2 = bits;
        std::swap(b2[i], b2[j]);
        offer(std::move(b2));
      }
  return best;
}

void to_json(nlohmann::json& j, const SearchConfig& c) {
  j = nlohmann::json{{"population", c.population}, {"crossover", c.crossover}, {"mutation", c.mutation},
                     {"mutation_prob", c.mutation_prob}, {"iterations", c.iterations}, {"seed", c.seed},
                     {"budget_mb", c.budget_mb}, {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, SearchConfig& c) {
  try {
    c.population = j.value("population", c.population);
    c.crossover = j.value("crossover", c.crossover);
    c.mutation = j.value("mutation", c.mutation);
    c.mutation_prob = j.value("mutation_prob", c.mutation_prob);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.budget_mb = j.value("budget_mb", c.budget_mb);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad search config: ") + e.what());
  }
  if (c.population < 2) throw ConfigError("search population must be at least 2");
}

bool better_config(const BitConfig& a, const BitConfig& b) {
  const double aa = a.accuracy.value_or(-1.0), ab = b.accuracy.value_or(-1.0);
  if (aa != ab) return aa > ab;
  if (a.model_size_mb != b.model_size_mb) return a.model_size_mb < b.model_size_mb;
  return a.bits < b.bits;
}

int env_thread_cap() {
  if (const char* s = std::getenv("POTVIT_THREADS")) {
    const int n = std::atoi(s);
    if (n >= 1) return n;
  }
  return 1;
}

BitConfig evo_search(const MpProblem& problem, const std::vector<BitConfig>& init, const EvalFn& eval,
                     const SearchConfig& cfg, std::vector<SearchLogRow>* log) {
  if (cfg.population < 2) throw ConfigError("search population must be at least 2");
  std::map<std::string, double> memo;
  auto evaluate_all = [&](std::vector<BitConfig>& configs) {
    std::vector<std::size_t> todo;
    std::set<std::string> queued;
    for (std::size_t i = 0; i < configs.size(); ++i) {
      const auto key = bits_key(configs[i].bits);
      if (!memo.count(key) && queued.insert(key).second) todo.push_back(i);
    }
    std::vector<double> results(todo.size());
    const int threads = std::max(1, std::min<int>(cfg.threads, static_cast<int>(todo.size())));
    if (threads <= 1) {
      for (std::size_t t = 0; t < todo.size(); ++t) results[t] = eval(configs[todo[t]]);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t t = w; t < todo.size(); t += threads) results[t] = eval(configs[todo[t]]);
        });
      for (auto& th : pool) th.join();
    }
    for (std::size_t t = 0; t < todo.size(); ++t) memo[bits_key(configs[todo[t]].bits)] = results[t];
    for (auto& c : configs) c.accuracy = memo.at(bits_key(c.bits));
  };
  auto select = [&](std::vector<BitConfig> configs) {
    std::sort(configs.begin(), configs.end(), better_config);
    std::vector<BitConfig> out;
    std::set<std::string> seen;
    for (auto& c : configs)
      if (seen.insert(bits_key(c.bits)).second && static_cast<int>(out.size()) < cfg.population) out.push_back(std::move(c));
    return out;
  };

  std::vector<BitConfig> pop;
  for (const auto& c : init)
    if (c.model_size_mb <= cfg.budget_mb) pop.push_back(problem.make(c.bits));
  if (pop.empty()) throw InfeasibleError("evolutionary search has no feasible initial configuration");
  evaluate_all(pop);
  pop = select(std::move(pop));

  Rng rng(cfg.seed);
  const std::size_t L = problem.layers.size();
  auto record = [&](int it) {
    if (!log) return;
    double mean = 0.0;
    for (const auto& c : pop) mean += *c.accuracy;
    log->push_back({it, *pop.front().accuracy, mean / static_cast<double>(pop.size())});
  };
  record(0);
  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<BitConfig> children;
    for (int i = 0; i < cfg.crossover && L >= 2; ++i) {
      const std::size_t a = rng.below(pop.size());
      std::size_t b = rng.below(pop.size() - 1);
      if (b >= a) ++b;
      const std::size_t cut = 1 + rng.below(L - 1);
      std::vector<int> bits(pop[a].bits.begin(), pop[a].bits.begin() + static_cast<std::ptrdiff_t>(cut));
      bits.insert(bits.end(), pop[b].bits.begin() + static_cast<std::ptrdiff_t>(cut), pop[b].bits.end());
      children.push_back(problem.make(std::move(bits)));
    }
    for (int i = 0; i < cfg.mutation; ++i) {
      std::vector<int> bits = pop[rng.below(pop.size())].bits;
      for (int& b : bits)
        if (rng.uniform() < cfg.mutation_prob) b = b == 8 ? 4 : 8;
      children.push_back(problem.make(std::move(bits)));
    }
    std::erase_if(children, [&](const BitConfig& c) { return c.model_size_mb > cfg.budget_mb; });
    evaluate_all(children);
    for (auto& c : children) pop.push_back(std::move(c));
    pop = select(std::move(pop));
    record(it);
  }
  return pop.front();
}

}  // namespace potvit
