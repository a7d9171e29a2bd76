// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Usage: potvit_acceptance [path/to/potvit]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "potvit/accelsim.hpp"
#include "potvit/calibration.hpp"
#include "potvit/checkpoint.hpp"
#include "potvit/fakequant.hpp"
#include "potvit/intengine.hpp"
#include "potvit/intkernels.hpp"
#include "potvit/model.hpp"
#include "potvit/mpsearch.hpp"
#include "potvit/quant_ops.hpp"

namespace fs = std::filesystem;
using namespace potvit;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::map<std::string, int> uniform_bits(const FloatModel& m, int bits) {
  std::map<std::string, int> b;
  for (const auto& n : m.weight_layer_names()) b[n] = bits;
  return b;
}

double fq_accuracy(const ModelQuantParams& qp, std::span<const Sample> s) {
  return accuracy([&](const Tensor& x) { return fake_quant_predict(qp, x); }, s);
}

// ------------------------------------------------------------------ 1
Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  DatasetConfig dc;
  dc.samples = 500;
  const DataSplits data = make_splits(generate_dataset(dc));
  TrainOptions to;
  to.epochs = 4;
  const FloatModel model = train(ModelConfig{}, data, to).model;
  const auto train_s = seconds_since(t0);

  const auto t1 = Clock::now();
  // Fresh draws from the same generator family, a third of them scaled up to reach clipping.
  DatasetConfig probe = dc;
  probe.seed = 991;
  probe.samples = 100;
  auto inputs = generate_dataset(probe).samples;
  for (std::size_t i = 0; i < inputs.size(); i += 3)
    for (float& v : inputs[i].x.data()) v *= 3.0f;

  const CalibrationCache cache = build_calibration(model, data.calib, QuantSettings{}, {4, 8});
  std::map<std::string, int> mixed;
  int k = 0;
  for (const auto& n : model.weight_layer_names()) mixed[n] = (k++ % 3 == 1) ? 8 : 4;
  const std::vector<std::pair<std::string, std::map<std::string, int>>> modes{
      {"W8A8", uniform_bits(model, 8)}, {"W4A8", uniform_bits(model, 4)}, {"mixed", mixed}};
  std::size_t mismatched = 0, compared_points = 0;
  for (const auto& [name, bits] : modes) {
    const ModelQuantParams qp = assign_bits(cache, bits);
    const QuantizedModel qm = QuantizedModel::build(qp);
    for (const auto& s : inputs) {
      const auto fq = fake_quant_forward(qp, s.x);
      const auto iq = int_forward(qm, s.x);
      compared_points += fq.codes.size();
      for (const auto& m : compare_codes(fq.codes, iq.codes)) mismatched += m.count;
    }
  }
  const double run_s = seconds_since(t1);
  return {mismatched == 0 && run_s < 60.0,
          fmt("300 runs, %zu point tensors compared, %zu mismatching codes, %.1f s (model training %.1f s excluded)",
              compared_points, mismatched, run_s, train_s)};
}

// ------------------------------------------------------------------ 2
std::vector<double> random_values(Rng& rng, std::size_t n) {
  const double scale = std::pow(10.0, rng.uniform(-3.0, 3.0));
  const int kind = static_cast<int>(rng.below(4));
  std::vector<double> v(n);
  for (double& x : v) {
    switch (kind) {
      case 0: x = rng.normal(); break;
      case 1: x = rng.uniform(-1.0, 1.0); break;
      case 2: x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * -std::log(1.0 - rng.uniform()); break;
      default: x = rng.normal() * (rng.uniform() < 0.02 ? 20.0 : 1.0); break;
    }
    x *= scale;
  }
  return v;
}

Outcome adaptive_rounding_dominance() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  int worse = 0, strict = 0;
  const int total = 1000;
  for (int t = 0; t < total; ++t) {
    const int bits = rng.uniform() < 0.5 ? 4 : 8;
    double e_nearest = 0.0, e_adaptive = 0.0;
    if (t % 2 == 0) {
      const std::size_t n = 1 + rng.below(64), m = 1 + rng.below(64);
      const auto x = random_values(rng, n * m);
      e_nearest = quant_error(x, nearest_pot(minmax_scale(x, bits)), bits);
      e_adaptive = quant_error(x, adaptive_pot_round_act(x, bits), bits);
    } else {
      const std::size_t n = 1 + rng.below(32), k = 1 + rng.below(32), p = 1 + rng.below(16);
      DMatrix x(n, k), w(k, p);
      x.v = random_values(rng, n * k);
      w.v = random_values(rng, k * p);
      const auto output_error = [&](const std::vector<int>& exps) {
        DMatrix wq = w;
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t c = 0; c < p; ++c) wq(r, c) = fake_quant(w(r, c), exps[c], bits);
        const DMatrix a = matmul(x, w), b = matmul(x, wq);
        double s = 0.0;
        for (std::size_t i = 0; i < a.v.size(); ++i) s += (a.v[i] - b.v[i]) * (a.v[i] - b.v[i]);
        return std::sqrt(s);
      };
      e_nearest = output_error(nearest_pot_weight(w, bits));
      e_adaptive = output_error(adaptive_pot_round_weight(x, w, bits));
    }
    const double tol = 1e-12 * std::max(1.0, e_nearest);
    if (e_adaptive > e_nearest + tol) ++worse;
    if (e_adaptive < e_nearest - tol) ++strict;
  }
  const double s = seconds_since(t0);
  return {worse == 0 && strict * 5 >= total && s < 30.0,
          fmt("%d tensors, adaptive worse on %d, strictly better on %d (%.1f%%), %.2f s", total, worse, strict,
              100.0 * strict / total, s)};
}

// ------------------------------------------------------------------ 3
Outcome smoothing_identity() {
  Rng rng(33);
  double worst = 0.0;
  int decreased = 0;
  const int pairs = 100;
  for (int t = 0; t < pairs; ++t) {
    const std::size_t n = 4 + rng.below(60), d = 2 + rng.below(62), p = 1 + rng.below(48);
    // Channel ranges spread by at least 8x.
    const double spread = std::pow(2.0, rng.uniform(3.0, 10.0));
    std::vector<double> ch(d);
    for (std::size_t c = 0; c < d; ++c) ch[c] = std::pow(spread, rng.uniform());
    ch[0] = 1.0;
    ch[d - 1] = spread;
    DMatrix x(n, d), w(d, p);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) x(r, c) = ch[c] * (r == 0 ? (c % 2 ? 1.0 : -1.0) : rng.uniform(-1.0, 1.0));
    for (double& v : w.v) v = rng.normal() * 0.2;
    const SmoothResult sm = pot_smooth(x, w, 0.5);
    const DMatrix xh = apply_migration(x, sm.spec.migration);
    const DMatrix y = matmul(x, w), yh = matmul(xh, sm.w_hat);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < y.v.size(); ++i) {
      num = std::max(num, std::abs(y.v[i] - yh.v[i]));
      den = std::max(den, std::abs(y.v[i]));
    }
    worst = std::max(worst, num / den);
    const auto range_ratio = [&](const DMatrix& m) {
      double lo = INFINITY, hi = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double mx = 0.0;
        for (std::size_t r = 0; r < n; ++r) mx = std::max(mx, std::abs(m(r, c)));
        lo = std::min(lo, mx);
        hi = std::max(hi, mx);
      }
      return hi / lo;
    };
    if (range_ratio(xh) < range_ratio(x)) ++decreased;
  }
  return {worst <= 1e-6 && decreased == pairs,
          fmt("max relative deviation %.3g over %d pairs; channel range ratio decreased on %d/%d", worst, pairs,
              decreased, pairs)};
}

// ------------------------------------------------------------------ 4
Outcome accuracy_ordering() {
  const auto t0 = Clock::now();
  std::ostringstream detail;
  bool ok = true;
  double worst_gap = 0.0;
  std::vector<double> mean(5, 0.0);
  for (int seed = 1; seed <= 5; ++seed) {
    DatasetConfig dc;
    dc.seed = 100 + static_cast<std::uint64_t>(seed);
    const DataSplits data = make_splits(generate_dataset(dc));
    TrainOptions to;
    to.seed = static_cast<std::uint64_t>(seed);
    const TrainResult tr = train(ModelConfig{}, data, to);
    const CalibrationCache cache = build_calibration(tr.model, data.calib, QuantSettings{}, {4, 8});
    const double a_float = tr.val_accuracy;
    const double a8 = fq_accuracy(assign_bits(cache, uniform_bits(tr.model, 8)), data.val);
    const double a4 = fq_accuracy(assign_bits(cache, uniform_bits(tr.model, 4)), data.val);
    TraceOptions topts;
    topts.probes = 4;
    topts.seed = static_cast<std::uint64_t>(seed);
    const MpProblem prob = build_problem(tr.model, cache, std::span(data.calib).first(32), topts);
    const std::size_t L = prob.layers.size();
    const double budget = 0.5 * (prob.size_mb(std::vector<int>(L, 4)) + prob.size_mb(std::vector<int>(L, 8)));
    const BitConfig mixed = pareto_allocate(prob, budget, 1).front();
    const double am = fq_accuracy(assign_bits(cache, mixed.as_map()), data.val);
    QuantSettings nearest;
    nearest.rounding = RoundingMode::nearest;
    nearest.smoothing = false;
    nearest.weight_bits = 4;
    const double an = fq_accuracy(calibrate(tr.model, data.calib, nearest), data.val);
    const double accs[5] = {a_float, a8, am, a4, an};
    for (int i = 0; i < 5; ++i) mean[i] += accs[i] / 5.0;
    const bool seed_ok = a_float >= a8 && a8 >= am && am >= a4 && a4 >= an && a_float - a8 <= 0.02;
    ok = ok && seed_ok;
    worst_gap = std::max(worst_gap, a_float - a8);
    detail << fmt("[s%d float %.3f W8 %.3f mixed %.3f W4 %.3f W4-nearest %.3f%s] ", seed, a_float, a8, am, a4, an,
                  seed_ok ? "" : " !");
  }
  detail << fmt("mean float %.4f W8 %.4f mixed %.4f W4 %.4f W4-nearest %.4f; worst W8 gap %.1f pts, %.0f s", mean[0],
                mean[1], mean[2], mean[3], mean[4], 100.0 * worst_gap, seconds_since(t0));
  return {ok, detail.str()};
}

// ------------------------------------------------------------------ 5
Outcome hutchinson_accuracy() {
  const auto t0 = Clock::now();
  Rng rng(55);
  // A = Q diag(lambda) Q^T with a random orthonormal Q and eigenvalues in [1, 10].
  DMatrix q(8, 8);
  for (double& v : q.v) v = rng.normal();
  for (int c = 0; c < 8; ++c) {
    for (int p = 0; p < c; ++p) {
      double dot = 0.0;
      for (int r = 0; r < 8; ++r) dot += q(r, c) * q(r, p);
      for (int r = 0; r < 8; ++r) q(r, c) -= dot * q(r, p);
    }
    double norm = 0.0;
    for (int r = 0; r < 8; ++r) norm += q(r, c) * q(r, c);
    for (int r = 0; r < 8; ++r) q(r, c) /= std::sqrt(norm);
  }
  DMatrix ql = q;
  for (int c = 0; c < 8; ++c) {
    const double lambda = rng.uniform(1.0, 10.0);
    for (int r = 0; r < 8; ++r) ql(r, c) *= lambda;
  }
  const DMatrix a = matmul_nt(ql, q);
  double exact_a = 0.0;
  for (int i = 0; i < 8; ++i) exact_a += a(i, i);
  const GradFn quad = [&](std::span<const double> w) {
    std::vector<double> g(8, 0.0);
    for (int i = 0; i < 8; ++i)
      for (int j = 0; j < 8; ++j) g[i] += a(i, j) * w[j];
    return g;
  };
  std::vector<double> w0(8);
  for (double& v : w0) v = rng.normal();
  Rng probe(56);
  const double est_a = hutchinson_trace(quad, w0, 256, probe);
  const double rel_a = std::abs(est_a - exact_a) / std::abs(exact_a);

  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.dim = 16;
  mc.tokens = 9;
  mc.patch_dim = 8;
  DatasetConfig dc;
  dc.tokens = 8;
  dc.dim = 8;
  dc.samples = 300;
  const DataSplits data = make_splits(generate_dataset(dc), 32);
  TrainOptions to;
  to.epochs = 4;
  const FloatModel model = train(mc, data, to).model;
  const std::string layer = "b0.fc1";
  const std::size_t params = model.tensor(layer).size();
  const auto batch = std::span<const Sample>(data.calib);
  const GradFn g = layer_grad_fn(model, batch, layer);
  const auto wl = model.tensor(layer).data();
  const std::vector<double> w(wl.begin(), wl.end());
  const double exact_l = exact_trace(g, w);
  Rng probe2(57);
  const double est_l = hutchinson_trace(g, w, 256, probe2);
  const double rel_l = std::abs(est_l - exact_l) / std::abs(exact_l);
  const double s = seconds_since(t0);
  return {rel_a <= 0.05 && rel_l <= 0.10 && params <= 512 && s < 120.0,
          fmt("8x8: exact %.4f est %.4f (%.2f%%); %s (%zu params): FD exact %.5g est %.5g (%.2f%%); %.1f s", exact_a,
              est_a, 100 * rel_a, layer.c_str(), params, exact_l, est_l, 100 * rel_l, s)};
}

// ------------------------------------------------------------------ 6
Outcome search_optimality() {
  const auto t0 = Clock::now();
  ModelConfig mc;
  mc.layers = 1;  // embed, wq, wk, wv, wo, fc1, fc2, head: 8 layers, 256 configs
  DatasetConfig dc;
  dc.samples = 600;
  dc.noise_sigma = 2.0;  // hard enough that weight bits move accuracy
  const DataSplits data = make_splits(generate_dataset(dc));
  TrainOptions to;
  to.epochs = 8;
  const FloatModel model = train(mc, data, to).model;
  const CalibrationCache cache = build_calibration(model, data.calib, QuantSettings{}, {4, 8});
  const auto eval_set = std::span<const Sample>(data.val).first(100);
  const auto names = model.weight_layer_names();
  const std::size_t L = names.size();

  // Brute-force table keyed by the bit vector.
  std::map<std::vector<int>, double> table;
  for (unsigned m = 0; m < (1u << L); ++m) {
    std::vector<int> bits(L);
    std::map<std::string, int> bm;
    for (std::size_t i = 0; i < L; ++i) bm[names[i]] = bits[i] = (m >> (L - 1 - i)) & 1u ? 8 : 4;
    table[bits] = fq_accuracy(assign_bits(cache, bm), eval_set);
  }
  const EvalFn eval = [&](const BitConfig& c) { return table.at(c.bits); };

  int found = 0, below_hessian = 0;
  std::ostringstream seeds;
  for (int seed = 1; seed <= 10; ++seed) {
    TraceOptions topts;
    topts.probes = 8;
    topts.seed = static_cast<std::uint64_t>(seed);
    const MpProblem prob = build_problem(model, cache, std::span(data.calib).first(32), topts);
    const double budget = 0.5 * (prob.size_mb(std::vector<int>(L, 4)) + prob.size_mb(std::vector<int>(L, 8)));
    double optimum = 0.0;
    for (const auto& [bits, acc] : table)
      if (prob.size_mb(bits) <= budget) optimum = std::max(optimum, acc);
    SearchConfig sc;
    sc.seed = static_cast<std::uint64_t>(seed);
    sc.budget_mb = budget;
    const auto init = pareto_allocate(prob, budget, static_cast<std::size_t>(sc.population));
    const double hessian_only = eval(init.front());
    const BitConfig best = evo_search(prob, init, eval, sc);
    const double got = best.accuracy.value_or(-1.0);
    if (got == optimum) ++found;
    if (got < hessian_only) ++below_hessian;
    seeds << fmt("%s%.2f/%.2f/%.2f", seed == 1 ? "" : " ", got, optimum, hessian_only);
  }
  double lo = 1.0, hi = 0.0;
  for (const auto& [b, a] : table) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  return {found >= 9 && below_hessian == 0,
          fmt("optimum found in %d/10 seeds, below Hessian-only in %d; table accuracy range [%.2f, %.2f]; "
              "search/optimum/hessian-only per seed: %s; %.0f s",
              found, below_hessian, lo, hi, seeds.str().c_str(), seconds_since(t0))};
}

// ------------------------------------------------------------------ 7
Stage stage(StageKind kind, std::int64_t rows, std::int64_t inner, std::int64_t cols, int wbits = 8) {
  Stage s;
  s.name = to_string(kind);
  s.kind = kind;
  s.group = "g";
  s.rows = rows;
  s.inner = inner;
  s.cols = cols;
  s.weight_bits = wbits;
  return s;
}

Outcome simulator_ratios() {
  const AcceleratorConfig cfg;
  const ModelConfig deit = deit_tiny_config();
  const Workload w = make_workload(deit, std::vector<int>(2 + 6 * static_cast<std::size_t>(deit.layers), 8));
  const CostReport seq = simulate_sequential(w, cfg);
  const CostReport pipe = simulate_pipelined(w, cfg, {true, true});
  const double attn = static_cast<double>(seq.group_cycles.at("attention")) / pipe.group_cycles.at("attention");
  const double mlp = static_cast<double>(seq.group_cycles.at("mlp")) / pipe.group_cycles.at("mlp");
  const double all = static_cast<double>(seq.total_cycles) / pipe.total_cycles;
  const auto within = [](double v, double ref) { return std::abs(v - ref) <= 0.25 * ref; };
  const bool ratios_ok = within(attn, 1.79) && within(mlp, 1.15) && within(all, 1.57);

  Rng rng(77);
  int violations = 0;
  for (int t = 0; t < 100; ++t) {
    Workload rw;
    const int segments = 1 + static_cast<int>(rng.below(8));
    for (int s = 0; s < segments; ++s) {
      const std::int64_t rows = 1 + static_cast<std::int64_t>(rng.below(200));
      const int len = 1 + static_cast<int>(rng.below(5));
      const bool intra = rng.uniform() < 0.4;
      for (int k = 0; k < len; ++k) {
        Stage st = stage(static_cast<StageKind>(rng.below(5)), rows, 1 + rng.below(800), 1 + rng.below(800),
                         rng.uniform() < 0.5 ? 4 : 8);
        st.static_weights = rng.uniform() < 0.5;
        (intra ? st.intra_chain : st.inter_chain) = s;
        rw.stages.push_back(st);
      }
    }
    const auto sq = simulate_sequential(rw, cfg).total_cycles;
    for (PipelineFlags f : {PipelineFlags{true, false}, PipelineFlags{false, true}, PipelineFlags{true, true}})
      if (simulate_pipelined(rw, cfg, f).total_cycles > sq) ++violations;
  }

  int oracle_cases = 0, oracle_mismatch = 0;
  for (int t = 0; t < 100; ++t) {
    Workload single{{stage(static_cast<StageKind>(rng.below(5)), 1 + rng.below(100), 1 + rng.below(500),
                           1 + rng.below(500))}};
    single.stages[0].inter_chain = 0;
    for (PipelineFlags f : {PipelineFlags{}, PipelineFlags{true, true}}) {
      ++oracle_cases;
      const auto analytic = f.inter ? simulate_pipelined(single, cfg, f) : simulate_sequential(single, cfg);
      if (event_driven_oracle(single, cfg, f).total_cycles != analytic.total_cycles) ++oracle_mismatch;
    }
    // Three-stage chain over distinct chunks, every stage with the same row time.
    const std::int64_t rows = 1 + rng.below(100);
    const std::int64_t rt = 1 + rng.below(6);
    std::vector<int> kinds{0, 1, 2, 3, 4};
    for (int i = 4; i > 0; --i) std::swap(kinds[i], kinds[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    Workload chain;
    for (int k = 0; k < 3; ++k) {
      const auto kind = static_cast<StageKind>(kinds[k]);
      std::int64_t inner = 1, cols = 1;
      switch (kind) {
        case StageKind::matmul:
        case StageKind::shift_matmul: inner = 32 * rt; cols = 64; break;
        case StageKind::ln:
        case StageKind::softmax: cols = 64 * rt; break;
        case StageKind::requant: cols = 32 * rt; break;
      }
      Stage st = stage(kind, rows, inner, cols);
      (t % 2 ? st.intra_chain : st.inter_chain) = 0;
      chain.stages.push_back(st);
    }
    const PipelineFlags f{t % 2 == 0, t % 2 == 1};
    ++oracle_cases;
    if (event_driven_oracle(chain, cfg, f).total_cycles != simulate_pipelined(chain, cfg, f).total_cycles)
      ++oracle_mismatch;
  }
  return {ratios_ok && violations == 0 && oracle_mismatch == 0,
          fmt("DeiT-Tiny seq/pipe: attention %.3f (1.79), mlp %.3f (1.15), overall %.3f (1.57); "
              "pipelined > sequential on %d of 300 random runs; oracle mismatches %d/%d",
              attn, mlp, all, violations, oracle_mismatch, oracle_cases)};
}

// ------------------------------------------------------------------ 8
Outcome psmac_exhaustive() {
  int bad = 0;
  for (int w = -128; w < 128; ++w)
    for (int a = -128; a < 128; ++a)
      if (psmac_product(w, a) != w * a) ++bad;
  return {bad == 0, fmt("65536 signed byte pairs, %d mismatches", bad)};
}

// ------------------------------------------------------------------ 9
Outcome iexp_ilog2() {
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double x = -10.0 * i / 999.0;
    const auto xq = static_cast<std::int64_t>(std::llround(std::ldexp(x, 16)));
    const double ref = std::exp(std::ldexp(static_cast<double>(xq), -16));
    worst = std::max(worst, std::abs(i_exp(xq, -16).value() - ref) / ref);
  }
  int mismatch = 0, outside = 0;
  std::uint64_t first = 0;
  for (std::uint64_t v = 1; v <= (1u << 16); ++v) {
    const double l = std::log2(static_cast<double>(v));
    const int got = i_log2(v);
    if (got != static_cast<int>(std::floor(l)) && got != static_cast<int>(std::ceil(l))) ++outside;
    // log2 of an integer is never exactly k + 0.5, so no v is excluded as halfway.
    if (got != round_half_up(l)) {
      if (mismatch == 0) first = v;
      ++mismatch;
    }
  }
  return {worst <= 0.02 && mismatch == 0 && outside == 0,
          fmt("i-exp max relative error %.3f%% over 1000 points; i_log2 outside floor/ceil %d, differs from "
              "round_half_up(log2 v) on %d of 65536 (first v=%llu)",
              100 * worst, outside, mismatch, static_cast<unsigned long long>(first))};
}

// ------------------------------------------------------------------ 10
Outcome cli_pipeline(const std::string& exe) {
  if (exe.empty() || !fs::exists(exe)) return {false, "potvit executable not given or missing"};
  const auto t0 = Clock::now();
  const fs::path dir = fs::temp_directory_path() / "potvit_acceptance_run";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string base = "\"" + exe + "\" --out \"" + dir.string() + "\" ";
  const std::string log = " >> \"" + (dir / "cli.log").string() + "\" 2>&1";
  const std::vector<std::string> steps{"train",          "calibrate",         "quantize",
                                       "search-bits",    "eval --engine float", "eval --engine fakequant",
                                       "eval --engine int --check", "simulate --pipeline none",
                                       "simulate --pipeline inter,intra", "report"};
  for (const auto& s : steps) {
    const int rc = std::system((base + s + log).c_str());
    if (rc != 0) return {false, fmt("step '%s' exited with status %d (see %s)", s.c_str(), rc, (dir / "cli.log").c_str())};
  }
  const double s = seconds_since(t0);
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string qparams_before = slurp(dir / "qparams.json");
  const bool rerun_ok = std::system((base + "calibrate" + log).c_str()) == 0;
  const bool reproducible = rerun_ok && slurp(dir / "qparams.json") == qparams_before;
  const double all4_mb = read_json_file(dir / "bitconfig.json").at("all4").at("model_size_mb").get<double>();
  const bool tight_ok =
      std::system((base + "search-bits --budget-mb " + std::to_string(1.1 * all4_mb) + log).c_str()) == 0;
  const auto tight = read_json_file(dir / "bitconfig.json");
  const double tight_acc = tight.at("accuracy").get<double>();
  const double all4_acc = tight.at("all4").at("accuracy").get<double>();
  const auto none = read_json_file(dir / "sim_model_none.json").at("total_cycles").get<std::int64_t>();
  const auto both = read_json_file(dir / "sim_model_inter_intra.json").at("total_cycles").get<std::int64_t>();
  const auto chk = read_json_file(dir / "eval_int.json").at("check");
  std::size_t mism = 0;
  for (const auto& [k, v] : chk.items()) mism += v.at("mismatched_inputs").get<std::size_t>();
  return {s < 300.0 && both <= none && mism == 0 && reproducible && tight_ok && tight_acc >= all4_acc,
          fmt("%zu steps exit 0 in %.1f s; eval --check mismatched inputs %zu; cycles none %lld >= inter,intra %lld; "
              "calibrate rerun byte-identical %s; search at 1.1x all-4 size: accuracy %.3f vs all-4 %.3f",
              steps.size(), s, mism, static_cast<long long>(none), static_cast<long long>(both),
              reproducible ? "yes" : "no", tight_acc, all4_acc)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string exe = argc > 1 ? argv[1] : "";
  std::string only = argc > 2 ? argv[2] : "";
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"1 oracle equivalence", oracle_equivalence},
      {"2 adaptive rounding dominance", adaptive_rounding_dominance},
      {"3 smoothing identity", smoothing_identity},
      {"4 toy accuracy ordering", accuracy_ordering},
      {"5 hutchinson trace", hutchinson_accuracy},
      {"6 search optimality", search_optimality},
      {"7 simulator ratios", simulator_ratios},
      {"8 psmac exhaustive", psmac_exhaustive},
      {"9 i-exp and i-log2", iexp_ilog2},
      {"10 cli pipeline", [&] { return cli_pipeline(exe); }},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && name.rfind(only + " ", 0) != 0) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail << std::endl;
  }
  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << std::endl;
  return failed == 0 ? 0 : 1;
}
