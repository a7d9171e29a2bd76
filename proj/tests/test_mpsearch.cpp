#include <gtest/gtest.h>

#include <cmath>

#include "potvit/mpsearch.hpp"

namespace potvit {
namespace {

GradFn quadratic_grad(const std::vector<double>& a, std::size_t n) {
  return [a, n](std::span<const double> w) {
    std::vector<double> g(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i] += a[i * n + j] * w[j];
    return g;
  };
}

std::vector<double> random_spd(std::size_t n, Rng& rng) {
  std::vector<double> b(n * n), a(n * n, 0.0);
  for (double& v : b) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) a[i * n + j] += b[i * n + k] * b[j * n + k];
  return a;
}

TEST(HessianMatvec, DiagonalQuadratic) {
  const auto g = quadratic_grad({1, 0, 0, 0, 2, 0, 0, 0, 3}, 3);
  const std::vector<double> w{0.3, -1.2, 0.7}, z{0, 1, 0};
  const auto hz = hessian_matvec(g, w, z);
  EXPECT_NEAR(hz[0], 0.0, 1e-9);
  EXPECT_NEAR(hz[1], 2.0, 1e-9);
  EXPECT_NEAR(hz[2], 0.0, 1e-9);
  const auto zero = hessian_matvec(g, w, std::vector<double>(3, 0.0));
  for (double v : zero) EXPECT_EQ(v, 0.0);
}

TEST(HessianMatvec, NonFiniteIsAnError) {
  const GradFn g = [](std::span<const double> w) { return std::vector<double>(w.size(), NAN); };
  EXPECT_THROW(hessian_matvec(g, std::vector<double>{1.0}, std::vector<double>{1.0}), RangeError);
}

TEST(HessianMatvec, SymmetricOnToyModel) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.dim = 16;
  cfg.tokens = 5;
  cfg.patch_dim = 8;
  Rng rng(51);
  const FloatModel m = FloatModel::random(cfg, rng);
  std::vector<Sample> batch;
  for (int i = 0; i < 4; ++i) {
    Tensor x({4, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    batch.push_back({x, i % 4});
  }
  const std::string layer = "b0.fc1";
  Tensor z1(m.tensor(layer).shape()), z2(m.tensor(layer).shape());
  for (auto& v : z1.data()) v = static_cast<float>(rng.rademacher());
  for (auto& v : z2.data()) v = static_cast<float>(rng.rademacher());
  const Tensor h1 = hessian_matvec(m, batch, layer, z1), h2 = hessian_matvec(m, batch, layer, z2);
  double a = 0, b = 0;
  for (std::size_t i = 0; i < z1.size(); ++i) {
    a += static_cast<double>(z2[i]) * h1[i];
    b += static_cast<double>(z1[i]) * h2[i];
  }
  EXPECT_LE(std::abs(a - b), 1e-2 * std::max(std::abs(a), std::abs(b)));
}

TEST(Hutchinson, DiagonalGivesExactTraceEverySample) {
  const auto g = quadratic_grad({1, 0, 0, 0, 2, 0, 0, 0, 3}, 3);
  const std::vector<double> w{1, 1, 1};
  for (int s = 0; s < 10; ++s) {
    Rng rng(s);
    EXPECT_NEAR(hutchinson_trace(g, w, 1, rng), 6.0, 1e-9);
  }
}

TEST(Hutchinson, DenseQuadraticWithinFivePercent) {
  Rng rng(52);
  const auto a = random_spd(8, rng);
  double exact = 0;
  for (std::size_t i = 0; i < 8; ++i) exact += a[i * 8 + i];
  const std::vector<double> w(8, 0.5);
  Rng probe(53);
  EXPECT_NEAR(hutchinson_trace(quadratic_grad(a, 8), w, 256, probe), exact, 0.05 * exact);
  EXPECT_NEAR(exact_trace(quadratic_grad(a, 8), w), exact, 1e-6 * exact);
}

TEST(Hutchinson, UnbiasedAcrossSeeds) {
  Rng rng(54);
  const auto a = random_spd(8, rng);
  double exact = 0;
  for (std::size_t i = 0; i < 8; ++i) exact += a[i * 8 + i];
  double mean = 0;
  for (int s = 0; s < 64; ++s) {
    Rng probe(1000 + s);
    mean += hutchinson_trace(quadratic_grad(a, 8), std::vector<double>(8, 1.0), 64, probe);
  }
  EXPECT_NEAR(mean / 64, exact, 0.02 * exact);
}

TEST(Hutchinson, GaussianProbesAvailable) {
  const auto g = quadratic_grad({2, 0, 0, 5}, 2);
  Rng rng(55);
  const double t = hutchinson_trace(g, std::vector<double>{1, 1}, 4000, rng, ProbeKind::gaussian);
  EXPECT_NEAR(t, 7.0, 0.5);
  EXPECT_THROW(hutchinson_trace(g, std::vector<double>{1, 1}, 0, rng), ConfigError);
}

MpProblem toy_problem(const std::vector<double>& traces, const std::vector<std::size_t>& params) {
  MpProblem p;
  for (std::size_t i = 0; i < traces.size(); ++i)
    p.layers.push_back({"l" + std::to_string(i), params[i], traces[i], {{4, 1.0 + 0.1 * i}, {8, 0.1}}});
  return p;
}

TEST(Omega, OneTermAndZeroPerturbation) {
  MpProblem p;
  p.layers.push_back({"a", 10, 2.0, {{4, 0.5}, {8, 0.0}}});
  EXPECT_DOUBLE_EQ(p.omega(std::vector<int>{4}), 1.0);
  EXPECT_DOUBLE_EQ(p.omega(std::vector<int>{8}), 0.0);
}

TEST(Omega, SizeFormula) {
  const auto p = toy_problem({1, 1}, {1 << 20, 1 << 19});
  EXPECT_DOUBLE_EQ(p.size_mb(std::vector<int>{8, 4}), 1.0 + 0.25);
}

TEST(Omega, FourBitPerturbationDominatesEightBit) {
  ModelConfig cfg;
  cfg.layers = 1;
  Rng rng(56);
  for (int t = 0; t < 3; ++t) {
    const FloatModel m = FloatModel::random(cfg, rng);
    DatasetConfig dc;
    dc.samples = 40;
    dc.seed = 100 + t;
    const auto sp = make_splits(generate_dataset(dc), 16);
    const auto cache = build_calibration(m, sp.calib, QuantSettings{});
    for (const auto& name : m.weight_layer_names())
      EXPECT_GE(weight_perturbation(m, cache, name, 4), weight_perturbation(m, cache, name, 8)) << name;
  }
}

TEST(Pareto, HighTraceLayerGetsEightBits) {
  MpProblem p;
  p.layers.push_back({"a", 1024, 10.0, {{4, 1.0}, {8, 0.1}}});
  p.layers.push_back({"b", 1024, 1.0, {{4, 1.0}, {8, 0.1}}});
  const double budget = p.size_mb(std::vector<int>{8, 4});
  const auto best = pareto_allocate(p, budget, 1);
  ASSERT_EQ(best.size(), 1u);
  EXPECT_EQ(best[0].bits, (std::vector<int>{8, 4}));
}

TEST(Pareto, GenerousBudgetGivesAllEight) {
  const auto p = toy_problem({3, 1, 2}, {100, 200, 300});
  const auto best = pareto_allocate(p, 1e9, 1);
  EXPECT_EQ(best[0].bits, (std::vector<int>{8, 8, 8}));
}

TEST(Pareto, MatchesExhaustiveEnumeration) {
  Rng rng(57);
  for (int t = 0; t < 10; ++t) {
    MpProblem p;
    for (int i = 0; i < 6; ++i) {
      const double p8 = rng.uniform();
      p.layers.push_back({"l" + std::to_string(i), 100 + rng.below(900), rng.uniform() * 10, {{4, p8 + rng.uniform() * 3}, {8, p8}}});
    }
    const double lo = p.size_mb(std::vector<int>(6, 4)), hi = p.size_mb(std::vector<int>(6, 8));
    const double budget = lo + rng.uniform() * (hi - lo);
    std::vector<BitConfig> all;
    for (int mask = 0; mask < 64; ++mask) {
      std::vector<int> bits(6);
      for (int i = 0; i < 6; ++i) bits[i] = (mask >> i) & 1 ? 8 : 4;
      if (p.size_mb(bits) <= budget) all.push_back(p.make(bits));
    }
    std::sort(all.begin(), all.end(), [](const BitConfig& a, const BitConfig& b) {
      return std::tie(a.omega, a.model_size_mb, a.bits) < std::tie(b.omega, b.model_size_mb, b.bits);
    });
    const auto top = pareto_allocate(p, budget, 5);
    ASSERT_EQ(top.size(), std::min<std::size_t>(5, all.size()));
    for (std::size_t i = 0; i < top.size(); ++i) EXPECT_EQ(top[i].bits, all[i].bits);
    // No random feasible config beats the allocation.
    for (int r = 0; r < 100; ++r) {
      std::vector<int> bits(6);
      for (int& b : bits) b = rng.uniform() < 0.5 ? 4 : 8;
      if (p.size_mb(bits) <= budget) EXPECT_LE(top[0].omega, p.omega(bits));
    }
  }
}

TEST(Pareto, InfeasibleBudget) {
  const auto p = toy_problem({1, 1}, {1000, 1000});
  EXPECT_THROW(pareto_allocate(p, 0.5 * p.size_mb(std::vector<int>{4, 4}), 1), InfeasibleError);
}

TEST(Pareto, GreedyForManyLayersStaysInBudget) {
  std::vector<double> traces;
  std::vector<std::size_t> params;
  for (int i = 0; i < 26; ++i) {
    traces.push_back(1.0 + i % 5);
    params.push_back(100 + 10 * i);
  }
  const auto p = toy_problem(traces, params);
  const double budget = 0.5 * (p.size_mb(std::vector<int>(26, 4)) + p.size_mb(std::vector<int>(26, 8)));
  const auto top = pareto_allocate(p, budget, 3);
  ASSERT_FALSE(top.empty());
  for (const auto& c : top) EXPECT_LE(c.model_size_mb, budget);
}

// Synthetic accuracy surface: each 8-bit layer adds a weight, with one interaction term.
EvalFn synthetic_eval(const MpProblem& p) {
  return [&p](const BitConfig& c) {
    double acc = 0.5;
    for (std::size_t i = 0; i < c.bits.size(); ++i)
      if (c.bits[i] == 8) acc += 0.01 * ((i * 7) % 5 + 1) / p.layers[i].params * 1000;
    if (c.bits.size() > 3 && c.bits[1] == 8 && c.bits[3] == 8) acc -= 0.03;
    return acc;
  };
}

TEST(Evo, SingletonSearchSpaceUnchanged) {
  MpProblem p;
  p.layers.push_back({"only", 64, 1.0, {{4, 1.0}, {8, 0.1}}});
  SearchConfig cfg;
  cfg.budget_mb = p.size_mb(std::vector<int>{4});
  const auto init = pareto_allocate(p, cfg.budget_mb, 25);
  const auto best = evo_search(p, init, [](const BitConfig&) { return 0.7; }, cfg);
  EXPECT_EQ(best.bits, (std::vector<int>{4}));
}

TEST(Evo, ElitismBudgetAndDeterminism) {
  const auto p = toy_problem({5, 4, 3, 2, 1, 1, 2, 3}, {1000, 1200, 900, 1500, 800, 1000, 1100, 700});
  SearchConfig cfg;
  cfg.budget_mb = 0.5 * (p.size_mb(std::vector<int>(8, 4)) + p.size_mb(std::vector<int>(8, 8)));
  const auto init = pareto_allocate(p, cfg.budget_mb, 25);
  const EvalFn eval = synthetic_eval(p);
  double init_best = 0;
  for (const auto& c : init) init_best = std::max(init_best, eval(c));
  std::vector<SearchLogRow> log;
  const auto best = evo_search(p, init, eval, cfg, &log);
  EXPECT_LE(best.model_size_mb, cfg.budget_mb);
  EXPECT_GE(*best.accuracy, init_best);
  ASSERT_EQ(log.size(), static_cast<std::size_t>(cfg.iterations + 1));
  for (std::size_t i = 1; i < log.size(); ++i) EXPECT_GE(log[i].best_acc, log[i - 1].best_acc);
  const auto again = evo_search(p, init, eval, cfg);
  EXPECT_EQ(again.bits, best.bits);
  cfg.threads = 4;
  EXPECT_EQ(evo_search(p, init, eval, cfg).bits, best.bits);
}

TEST(Evo, EmptyFeasiblePopulation) {
  const auto p = toy_problem({1, 1}, {1000, 1000});
  SearchConfig cfg;
  cfg.budget_mb = 0.0;
  EXPECT_THROW(evo_search(p, {p.make({8, 8})}, [](const BitConfig&) { return 0.0; }, cfg), InfeasibleError);
}

TEST(BitConfigJson, RoundTrip) {
  const auto p = toy_problem({1, 2}, {10, 20});
  BitConfig c = p.make({4, 8});
  c.accuracy = 0.75;
  const nlohmann::json j = c;
  const BitConfig back = j.get<BitConfig>();
  EXPECT_EQ(back.bits, c.bits);
  EXPECT_EQ(back.layers, c.layers);
  EXPECT_EQ(*back.accuracy, 0.75);
  nlohmann::json bad = j;
  bad["bits"] = {4};
  EXPECT_THROW(bad.get<BitConfig>(), ConfigError);
}

}  // namespace
}  // namespace potvit
