#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/calibration.hpp"
#include "potvit/dataset.hpp"
#include "potvit/model.hpp"
#include "potvit/numerics.hpp"

namespace potvit {

// Gradient of a scalar loss with respect to a flat parameter vector.
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

// Central difference of gradients: (g(w + eps z) - g(w - eps z)) / (2 eps),
// eps = 1e-3 * ||w||_inf / ||z||_inf.
std::vector<double> hessian_matvec(const GradFn& grad, std::span<const double> w, std::span<const double> z);

// The gradient of the mean batch loss with respect to one weight layer, as a flat function.
GradFn layer_grad_fn(const FloatModel& model, std::span<const Sample> batch, const std::string& layer);
Tensor hessian_matvec(const FloatModel& model, std::span<const Sample> batch, const std::string& layer, const Tensor& z);

enum class ProbeKind { rademacher, gaussian };

struct TraceEstimate {
  std::string layer;
  double trace = 0.0;
  int samples = 0;
  std::uint64_t seed = 0;
};

// (1/m) sum z^T H z over m random probes.
double hutchinson_trace(const GradFn& grad, std::span<const double> w, int m, Rng& rng,
                        ProbeKind probe = ProbeKind::rademacher);
TraceEstimate hutchinson_trace(const FloatModel& model, std::span<const Sample> batch, const std::string& layer, int m,
                               Rng& rng, ProbeKind probe = ProbeKind::rademacher);
// sum_i e_i^T H e_i with one matvec per parameter.
double exact_trace(const GradFn& grad, std::span<const double> w);

struct BitConfig {
  std::vector<std::string> layers;
  std::vector<int> bits;
  double model_size_mb = 0.0;
  double omega = 0.0;
  std::optional<double> accuracy;

  std::map<std::string, int> as_map() const;
};

void to_json(nlohmann::json& j, const BitConfig& c);
void from_json(const nlohmann::json& j, BitConfig& c);

// Per-layer data the allocator needs: parameter count, averaged Hessian
// trace and the L2 weight perturbation at each candidate bit-width.
struct MpLayer {
  std::string name;
  std::size_t params = 0;
  double trace = 0.0;
  std::map<int, double> perturbation;
};

struct MpProblem {
  std::vector<MpLayer> layers;
  std::vector<int> choices{4, 8};

  double size_mb(std::span<const int> bits) const;
  double omega(std::span<const int> bits) const;
  BitConfig make(std::vector<int> bits) const;
};

// ||W^Q - W||_2 in the original weight domain (transforms undone) for one layer at `bits`.
double weight_perturbation(const FloatModel& model, const CalibrationCache& cache, const std::string& layer, int bits);

struct TraceOptions {
  int probes = 16;
  ProbeKind probe = ProbeKind::rademacher;
  std::uint64_t seed = 1;
};

MpProblem build_problem(const FloatModel& model, const CalibrationCache& cache, std::span<const Sample> batch,
                        const TraceOptions& opts);

// The k minimal-Omega configurations within the budget: exact enumeration up
// to 20 layers, otherwise a greedy descent by dOmega / dsize.
std::vector<BitConfig> pareto_allocate(const MpProblem& problem, double budget_mb, std::size_t k);

struct SearchConfig {
  int population = 25;
  int crossover = 10;
  int mutation = 10;
  double mutation_prob = 0.5;
  int iterations = 20;
  std::uint64_t seed = 1;
  double budget_mb = 0.0;
  int threads = 1;
};

void to_json(nlohmann::json& j, const SearchConfig& c);
void from_json(const nlohmann::json& j, SearchConfig& c);

struct SearchLogRow {
  int iteration = 0;
  double best_acc = 0.0;
  double mean_acc = 0.0;
};

using EvalFn = std::function<double(const BitConfig&)>;

// Ordering used everywhere a population is ranked: accuracy, then smaller
// model, then lexicographic bit vector.
bool better_config(const BitConfig& a, const BitConfig& b);

// Crossover + mutation + budget filter + accuracy ranking with elitism.
BitConfig evo_search(const MpProblem& problem, const std::vector<BitConfig>& init, const EvalFn& eval,
                     const SearchConfig& cfg, std::vector<SearchLogRow>* log = nullptr);

// Thread cap from POTVIT_THREADS (default 1).
int env_thread_cap();

}  // namespace potvit
