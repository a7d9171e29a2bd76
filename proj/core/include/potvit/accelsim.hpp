#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/model.hpp"

namespace potvit {

struct QuantizedModel;

// Unit energies in picojoules. Ratios follow the usual 45 nm figures; the
// absolute values are not calibrated.
struct EnergyTable {
  double mac8 = 0.2;       // one 8x8 multiply-accumulate
  double shift = 0.03;
  double add = 0.03;
  double divide = 1.0;
  double fp_mul = 3.7;     // FP32 multiply, used by the FP re-quantization variant
  double sram_byte = 1.25;
  double dram_byte = 160.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const EnergyTable& e);
void from_json(const nlohmann::json& j, EnergyTable& e);

struct AcceleratorConfig {
  int psmac_rows = 32;
  int psmac_cols = 64;
  int shifter_rows = 32;
  int shifter_cols = 64;
  int ln_parallelism = 64;
  int requant_parallelism = 32;
  int softmax_parallelism = 64;
  double frequency_mhz = 500.0;
  int qkv_buffer_kb = 37;  // per buffer, three buffers
  int input_buffer_kb = 74;
  int output_buffer_kb = 74;
  int weight_buffer_kb = 144;
  int total_buffer_kb = 403;
  int dram_bytes_per_cycle = 16;
  EnergyTable energy;

  void validate() const;
};

void to_json(nlohmann::json& j, const AcceleratorConfig& c);
void from_json(const nlohmann::json& j, AcceleratorConfig& c);

enum class StageKind { matmul, shift_matmul, ln, softmax, requant };
enum class Resource { psmac, shifter, ln, softmax, requant };

const char* to_string(StageKind k);
const char* to_string(Resource r);
Resource resource_of(StageKind k);

// One operator applied row by row. For matmul/shift_matmul each of the `rows`
// input rows of length `inner` meets `cols` weight columns; for the other
// kinds `cols` is the row width.
struct Stage {
  std::string name;
  StageKind kind = StageKind::matmul;
  std::string group;  // embed | attention | mlp | head
  std::int64_t rows = 1;
  std::int64_t inner = 1;
  std::int64_t cols = 1;
  int weight_bits = 8;
  int act_bits = 8;
  bool static_weights = false;  // parameters fetched from DRAM, not an activation operand
  // Chain ids (-1 when none); consecutive stages sharing an id pipeline row by row.
  int inter_chain = -1;
  int intra_chain = -1;

  std::int64_t weight_bytes() const;
  void validate() const;
};

struct Workload {
  std::vector<Stage> stages;
  void validate() const;
};

// The operator graph of a model with per-weight-layer bits in weight-layer order.
Workload make_workload(const ModelConfig& cfg, const std::vector<int>& weight_bits, int act_bits = 8);
Workload make_workload(const QuantizedModel& qm);
// DeiT-Tiny dimensions: 12 blocks, N=197, d=192, 3 heads, 4x MLP, 1000 classes.
ModelConfig deit_tiny_config();

// Cycles to produce one output row (compute only).
std::int64_t stage_row_cycles(const Stage& stage, const AcceleratorConfig& cfg);
// Compute row time, stretched when the stage's weights must stream from DRAM.
std::int64_t effective_row_cycles(const Stage& stage, const AcceleratorConfig& cfg);

struct PipelineFlags {
  bool inter = false;
  bool intra = false;
};

PipelineFlags pipeline_flags_from_string(const std::string& s);  // none | inter | intra | inter,intra
std::string to_string(PipelineFlags f);

struct StageCost {
  std::string name;
  std::string kind;
  std::string group;
  std::int64_t rows = 0;
  std::int64_t row_cycles = 0;
  std::int64_t busy_cycles = 0;  // rows * row_cycles
  double energy_pj = 0.0;
};

struct CostReport {
  PipelineFlags flags;
  std::int64_t total_cycles = 0;
  std::vector<StageCost> stages;
  std::map<std::string, std::int64_t> group_cycles;
  std::int64_t mac_ops = 0;
  double latency_ms = 0.0;
  std::map<std::string, double> energy_by_chunk;   // psmac, shifter, ln, softmax, requant
  std::map<std::string, double> energy_by_memory;  // sram, dram
  double total_energy_pj = 0.0;
};

void to_json(nlohmann::json& j, const CostReport& r);
std::string report_csv(const CostReport& r);

// Sum of a chain's row times plus (n - 1) times the busiest resource's share.
std::int64_t chain_cycles(const std::vector<std::int64_t>& row_times, const std::vector<Resource>& resources,
                          std::int64_t rows);

CostReport simulate_sequential(const Workload& w, const AcceleratorConfig& cfg);
CostReport simulate_pipelined(const Workload& w, const AcceleratorConfig& cfg, PipelineFlags flags);

enum class RequantArith { pot_shift, fp_multiply };

// Fills the energy fields of `report` from op counts and buffer/DRAM traffic.
void energy(const Workload& w, const AcceleratorConfig& cfg, CostReport& report,
            RequantArith requant = RequantArith::pot_shift);

// Generic discrete-event scheduler: each task occupies one resource for
// `duration` cycles after all its dependencies finish. Resources pick the
// lowest-index ready task. Throws Error on a dependency cycle.
struct SimTask {
  int resource = 0;
  std::int64_t duration = 0;
  std::vector<std::size_t> deps;
};

std::int64_t simulate_tasks(const std::vector<SimTask>& tasks, std::vector<std::int64_t>* finish = nullptr);

// Row-level task graph of the workload run through simulate_tasks.
CostReport event_driven_oracle(const Workload& w, const AcceleratorConfig& cfg, PipelineFlags flags);

}  // namespace potvit
