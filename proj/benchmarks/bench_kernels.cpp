#include <benchmark/benchmark.h>

#include "potvit/accelsim.hpp"
#include "potvit/calibration.hpp"
#include "potvit/fakequant.hpp"
#include "potvit/intengine.hpp"
#include "potvit/intkernels.hpp"

namespace {

using namespace potvit;

IntTensor random_codes(Shape shape, int bits, Rng& rng) {
  IntTensor t(shape, bits, true);
  const std::uint64_t span = std::uint64_t{1} << bits;
  for (std::size_t i = 0; i < t.size(); ++i)
    t.set(i, static_cast<std::int32_t>(rng.below(span)) - static_cast<std::int32_t>(span / 2));
  return t;
}

void BM_PsmacMatmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const int wbits = static_cast<int>(state.range(1));
  Rng rng(1);
  const IntTensor a = random_codes({n, n}, 8, rng), w = random_codes({n, n}, wbits, rng);
  const PsMacConfig cfg = PsMacConfig::for_weight_bits(wbits);
  for (auto _ : state) benchmark::DoNotOptimize(psmac_matmul(a, w, cfg));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_PsmacMatmul)->Args({32, 8})->Args({32, 4})->Args({128, 8})->Args({128, 4});

void BM_IntLayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0)), d = static_cast<std::size_t>(state.range(1));
  Rng rng(2);
  const IntTensor x = random_codes({rows, d}, 8, rng);
  PtfSpec ptf;
  ptf.alpha_g = -4;
  ptf.alpha.assign(d, 0);
  for (std::size_t c = 0; c < d; ++c) ptf.alpha[c] = static_cast<int>(c % 4);
  const LayerNormQ16 ln = LayerNormQ16::from_float(Tensor({d}, 1.0f), Tensor({d}, 0.0f));
  const std::vector<int> out_exp(d, -5);
  for (auto _ : state) benchmark::DoNotOptimize(int_layernorm(x, ptf, ln, out_exp, 8));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(rows * d));
}
BENCHMARK(BM_IntLayerNorm)->Args({17, 32})->Args({197, 192});

void BM_IntSoftmaxLis(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const IntTensor s = random_codes({n, n}, 16, rng);
  for (auto _ : state) benchmark::DoNotOptimize(int_softmax_lis(s, -8, 4));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_IntSoftmaxLis)->Arg(17)->Arg(197);

struct ToyEngine {
  DataSplits data;
  ModelQuantParams qp;
  QuantizedModel qm;

  ToyEngine() {
    DatasetConfig dc;
    dc.samples = 200;
    data = make_splits(generate_dataset(dc), 50);
    Rng rng(4);
    const FloatModel model = FloatModel::random(ModelConfig{}, rng);
    qp = calibrate(model, data.calib, QuantSettings{});
    qm = QuantizedModel::build(qp);
  }
};

const ToyEngine& toy() {
  static const ToyEngine e;
  return e;
}

void BM_IntForward(benchmark::State& state) {
  const auto& e = toy();
  for (auto _ : state) benchmark::DoNotOptimize(int_forward(e.qm, e.data.val[0].x, false));
}
BENCHMARK(BM_IntForward);

void BM_FakeQuantForward(benchmark::State& state) {
  const auto& e = toy();
  FakeQuantOptions opts;
  opts.record_codes = false;
  for (auto _ : state) benchmark::DoNotOptimize(fake_quant_forward(e.qp, e.data.val[0].x, opts));
}
BENCHMARK(BM_FakeQuantForward);

void BM_SimulateDeitTiny(benchmark::State& state) {
  const ModelConfig m = deit_tiny_config();
  const Workload w = make_workload(m, std::vector<int>(2 + 6 * static_cast<std::size_t>(m.layers), 8));
  const AcceleratorConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(simulate_pipelined(w, cfg, {true, true}));
}
BENCHMARK(BM_SimulateDeitTiny);

void BM_EventOracleDeitTiny(benchmark::State& state) {
  const ModelConfig m = deit_tiny_config();
  const Workload w = make_workload(m, std::vector<int>(2 + 6 * static_cast<std::size_t>(m.layers), 8));
  const AcceleratorConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(event_driven_oracle(w, cfg, {true, true}));
}
BENCHMARK(BM_EventOracleDeitTiny)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
