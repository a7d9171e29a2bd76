#include "potvit/accelsim.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <queue>
#include <set>
#include <sstream>

#include "potvit/error.hpp"
#include "potvit/intengine.hpp"

namespace potvit {

namespace {

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

void require_positive(double v, const char* what) {
  if (!(v > 0.0)) throw ConfigError(std::string("accelerator field must be positive: ") + what);
}

void require_non_negative(double v, const char* what) {
  if (!(v >= 0.0)) throw ConfigError(std::string("missing or negative unit cost: ") + what);
}

}  // namespace

void EnergyTable::validate() const {
  require_non_negative(mac8, "mac8");
  require_non_negative(shift, "shift");
  require_non_negative(add, "add");
  require_non_negative(divide, "divide");
  require_non_negative(fp_mul, "fp_mul");
  require_non_negative(sram_byte, "sram_byte");
  require_non_negative(dram_byte, "dram_byte");
}

void to_json(nlohmann::json& j, const EnergyTable& e) {
  j = nlohmann::json{{"mac8", e.mac8},     {"shift", e.shift},         {"add", e.add},
                     {"divide", e.divide}, {"fp_mul", e.fp_mul},       {"sram_byte", e.sram_byte},
                     {"dram_byte", e.dram_byte}};
}

void from_json(const nlohmann::json& j, EnergyTable& e) {
  static const char* keys[] = {"mac8", "shift", "add", "divide", "fp_mul", "sram_byte", "dram_byte"};
  for (const char* k : keys)
    if (!j.contains(k)) throw ConfigError(std::string("energy table is missing unit cost ") + k);
  try {
    e.mac8 = j.at("mac8").get<double>();
    e.shift = j.at("shift").get<double>();
    e.add = j.at("add").get<double>();
    e.divide = j.at("divide").get<double>();
    e.fp_mul = j.at("fp_mul").get<double>();
    e.sram_byte = j.at("sram_byte").get<double>();
    e.dram_byte = j.at("dram_byte").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad energy table: ") + ex.what());
  }
  e.validate();
}

void AcceleratorConfig::validate() const {
  require_positive(psmac_rows, "psmac_rows");
  require_positive(psmac_cols, "psmac_cols");
  require_positive(shifter_rows, "shifter_rows");
  require_positive(shifter_cols, "shifter_cols");
  require_positive(ln_parallelism, "ln_parallelism");
  require_positive(requant_parallelism, "requant_parallelism");
  require_positive(softmax_parallelism, "softmax_parallelism");
  require_positive(frequency_mhz, "frequency_mhz");
  require_positive(qkv_buffer_kb, "qkv_buffer_kb");
  require_positive(input_buffer_kb, "input_buffer_kb");
  require_positive(output_buffer_kb, "output_buffer_kb");
  require_positive(weight_buffer_kb, "weight_buffer_kb");
  require_positive(total_buffer_kb, "total_buffer_kb");
  require_positive(dram_bytes_per_cycle, "dram_bytes_per_cycle");
  energy.validate();
}

void to_json(nlohmann::json& j, const AcceleratorConfig& c) {
  j = nlohmann::json{{"psmac_rows", c.psmac_rows},
                     {"psmac_cols", c.psmac_cols},
                     {"shifter_rows", c.shifter_rows},
                     {"shifter_cols", c.shifter_cols},
                     {"ln_parallelism", c.ln_parallelism},
                     {"requant_parallelism", c.requant_parallelism},
                     {"softmax_parallelism", c.softmax_parallelism},
                     {"frequency_mhz", c.frequency_mhz},
                     {"qkv_buffer_kb", c.qkv_buffer_kb},
                     {"input_buffer_kb", c.input_buffer_kb},
                     {"output_buffer_kb", c.output_buffer_kb},
                     {"weight_buffer_kb", c.weight_buffer_kb},
                     {"total_buffer_kb", c.total_buffer_kb},
                     {"dram_bytes_per_cycle", c.dram_bytes_per_cycle},
                     {"energy", c.energy}};
}

void from_json(const nlohmann::json& j, AcceleratorConfig& c) {
  try {
    c.psmac_rows = j.value("psmac_rows", c.psmac_rows);
    c.psmac_cols = j.value("psmac_cols", c.psmac_cols);
    c.shifter_rows = j.value("shifter_rows", c.shifter_rows);
    c.shifter_cols = j.value("shifter_cols", c.shifter_cols);
    c.ln_parallelism = j.value("ln_parallelism", c.ln_parallelism);
    c.requant_parallelism = j.value("requant_parallelism", c.requant_parallelism);
    c.softmax_parallelism = j.value("softmax_parallelism", c.softmax_parallelism);
    c.frequency_mhz = j.value("frequency_mhz", c.frequency_mhz);
    c.qkv_buffer_kb = j.value("qkv_buffer_kb", c.qkv_buffer_kb);
    c.input_buffer_kb = j.value("input_buffer_kb", c.input_buffer_kb);
    c.output_buffer_kb = j.value("output_buffer_kb", c.output_buffer_kb);
    c.weight_buffer_kb = j.value("weight_buffer_kb", c.weight_buffer_kb);
    c.total_buffer_kb = j.value("total_buffer_kb", c.total_buffer_kb);
    c.dram_bytes_per_cycle = j.value("dram_bytes_per_cycle", c.dram_bytes_per_cycle);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad accelerator config: ") + ex.what());
  }
  if (j.contains("energy")) c.energy = j.at("energy").get<EnergyTable>();
  c.validate();
}

const char* to_string(StageKind k) {
  switch (k) {
    case StageKind::matmul: return "matmul";
    case StageKind::shift_matmul: return "shift-matmul";
    case StageKind::ln: return "ln";
    case StageKind::softmax: return "softmax";
    case StageKind::requant: return "requant";
  }
  return "?";
}

const char* to_string(Resource r) {
  switch (r) {
    case Resource::psmac: return "psmac";
    case Resource::shifter: return "shifter";
    case Resource::ln: return "ln";
    case Resource::softmax: return "softmax";
    case Resource::requant: return "requant";
  }
  return "?";
}

Resource resource_of(StageKind k) {
  switch (k) {
    case StageKind::matmul: return Resource::psmac;
    case StageKind::shift_matmul: return Resource::shifter;
    case StageKind::ln: return Resource::ln;
    case StageKind::softmax: return Resource::softmax;
    case StageKind::requant: return Resource::requant;
  }
  return Resource::psmac;
}

std::int64_t Stage::weight_bytes() const {
  if (!static_weights) return 0;
  return ceil_div(inner * cols * weight_bits, 8);
}

void Stage::validate() const {
  if (rows < 1 || inner < 1 || cols < 1) throw ShapeError("stage " + name + " has a non-positive dimension");
  if (weight_bits < 1 || act_bits < 1) throw ConfigError("stage " + name + " has non-positive operand bits");
  if (inter_chain >= 0 && intra_chain >= 0) throw ConfigError("stage " + name + " belongs to two chains");
}

void Workload::validate() const {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].validate();
    if (i == 0) continue;
    const auto& a = stages[i - 1];
    const auto& b = stages[i];
    const bool same_inter = a.inter_chain >= 0 && a.inter_chain == b.inter_chain;
    const bool same_intra = a.intra_chain >= 0 && a.intra_chain == b.intra_chain;
    if ((same_inter || same_intra) && a.rows != b.rows)
      throw ShapeError("chained stages " + a.name + " and " + b.name + " differ in row count");
  }
}

ModelConfig deit_tiny_config() {
  ModelConfig c;
  c.layers = 12;
  c.heads = 3;
  c.dim = 192;
  c.tokens = 197;
  c.mlp_ratio = 4.0;
  c.classes = 1000;
  c.patch_dim = 768;
  return c;
}

Workload make_workload(const ModelConfig& cfg, const std::vector<int>& weight_bits, int act_bits) {
  cfg.validate();
  const std::size_t expected = 2 + 6 * static_cast<std::size_t>(cfg.layers);
  if (weight_bits.size() != expected)
    throw ShapeError("workload needs " + std::to_string(expected) + " weight bit-widths, got " +
                     std::to_string(weight_bits.size()));
  const std::int64_t n = cfg.tokens, d = cfg.dim, dh = cfg.head_dim(), hid = cfg.hidden_dim();
  Workload w;
  int chain = 0;
  auto add = [&](std::string name, StageKind kind, std::string group, std::int64_t rows, std::int64_t inner,
                 std::int64_t cols, int wbits, bool stat, int inter, int intra) {
    Stage s;
    s.name = std::move(name);
    s.kind = kind;
    s.group = std::move(group);
    s.rows = rows;
    s.inner = inner;
    s.cols = cols;
    s.weight_bits = wbits;
    s.act_bits = act_bits;
    s.static_weights = stat;
    s.inter_chain = inter;
    s.intra_chain = intra;
    w.stages.push_back(std::move(s));
  };
  using K = StageKind;
  int c = chain++;
  add("embed", K::matmul, "embed", cfg.patches(), cfg.patch_dim, d, weight_bits[0], true, c, -1);
  add("embed.rq", K::requant, "embed", cfg.patches(), 1, d, 8, false, c, -1);
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string b = "b" + std::to_string(l) + ".";
    const auto bits = [&](int k) { return weight_bits[1 + 6 * static_cast<std::size_t>(l) + k]; };
    c = chain++;
    add(b + "ln1", K::ln, "attention", n, 1, d, 8, false, c, -1);
    add(b + "ln1.rq", K::requant, "attention", n, 1, d, 8, false, c, -1);
    add(b + "wq", K::matmul, "attention", n, d, d, bits(0), true, c, -1);
    add(b + "wk", K::matmul, "attention", n, d, d, bits(1), true, c, -1);
    add(b + "wv", K::matmul, "attention", n, d, d, bits(2), true, c, -1);
    add(b + "qkv.rq", K::requant, "attention", n, 1, 3 * d, 8, false, c, -1);
    for (int h = 0; h < cfg.heads; ++h) {
      const std::string hp = b + "h" + std::to_string(h) + ".";
      c = chain++;
      // Q K^T runs in 8-bit mode with K^T as the weight operand.
      add(hp + "qk", K::matmul, "attention", n, dh, n, act_bits, false, -1, c);
      add(hp + "softmax", K::softmax, "attention", n, 1, n, 8, false, -1, c);
      add(hp + "av", K::shift_matmul, "attention", n, n, dh, 4, false, -1, c);
      add(hp + "av.rq", K::requant, "attention", n, 1, dh, 8, false, -1, c);
    }
    c = chain++;
    add(b + "wo", K::matmul, "attention", n, d, d, bits(3), true, c, -1);
    add(b + "wo.rq", K::requant, "attention", n, 1, d, 8, false, c, -1);
    c = chain++;
    add(b + "ln2", K::ln, "mlp", n, 1, d, 8, false, c, -1);
    add(b + "ln2.rq", K::requant, "mlp", n, 1, d, 8, false, c, -1);
    add(b + "fc1", K::matmul, "mlp", n, d, hid, bits(4), true, c, -1);
    add(b + "fc1.rq", K::requant, "mlp", n, 1, hid, 8, false, c, -1);
    c = chain++;
    add(b + "fc2", K::matmul, "mlp", n, hid, d, bits(5), true, c, -1);
    add(b + "fc2.rq", K::requant, "mlp", n, 1, d, 8, false, c, -1);
  }
  c = chain++;
  add("lnf", K::ln, "head", 1, 1, d, 8, false, c, -1);
  add("lnf.rq", K::requant, "head", 1, 1, d, 8, false, c, -1);
  add("head", K::matmul, "head", 1, d, cfg.classes, weight_bits.back(), true, c, -1);
  add("head.rq", K::requant, "head", 1, 1, cfg.classes, 8, false, c, -1);
  w.validate();
  return w;
}

Workload make_workload(const QuantizedModel& qm) {
  return make_workload(qm.config, qm.layer_bits(), qm.settings.act_bits);
}

std::int64_t stage_row_cycles(const Stage& s, const AcceleratorConfig& cfg) {
  if (s.rows < 1 || s.inner < 1 || s.cols < 1) throw ShapeError("stage " + s.name + " has a non-positive dimension");
  switch (s.kind) {
    case StageKind::matmul: {
      // Two 4-bit products per PS-MAC per cycle halve the K folding.
      const std::int64_t k = s.weight_bits <= 4 ? ceil_div(s.inner, 2) : s.inner;
      return ceil_div(k, cfg.psmac_rows) * ceil_div(s.cols, cfg.psmac_cols);
    }
    case StageKind::shift_matmul:
      return ceil_div(s.inner, cfg.shifter_rows) * ceil_div(s.cols, cfg.shifter_cols);
    case StageKind::ln: return ceil_div(s.cols, cfg.ln_parallelism);
    case StageKind::softmax: return ceil_div(s.cols, cfg.softmax_parallelism);
    case StageKind::requant: return ceil_div(s.cols, cfg.requant_parallelism);
  }
  return 0;
}

std::int64_t effective_row_cycles(const Stage& s, const AcceleratorConfig& cfg) {
  const std::int64_t t = stage_row_cycles(s, cfg);
  const std::int64_t bytes = s.weight_bytes();
  if (bytes <= static_cast<std::int64_t>(cfg.weight_buffer_kb) * 1024) return t;
  const std::int64_t load = ceil_div(bytes, cfg.dram_bytes_per_cycle);
  return std::max(t, ceil_div(load, s.rows));
}

PipelineFlags pipeline_flags_from_string(const std::string& s) {
  PipelineFlags f;
  if (s == "none" || s.empty()) return f;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part == "inter")
      f.inter = true;
    else if (part == "intra")
      f.intra = true;
    else
      throw ConfigError("unknown pipeline mode '" + part + "' (expected none, inter, intra or inter,intra)");
  }
  return f;
}

std::string to_string(PipelineFlags f) {
  if (f.inter && f.intra) return "inter,intra";
  if (f.inter) return "inter";
  if (f.intra) return "intra";
  return "none";
}

void to_json(nlohmann::json& j, const CostReport& r) {
  j = nlohmann::json::object();
  j["pipeline"] = to_string(r.flags);
  j["total_cycles"] = r.total_cycles;
  j["latency_ms"] = r.latency_ms;
  j["mac_ops"] = r.mac_ops;
  j["group_cycles"] = r.group_cycles;
  j["energy_by_chunk_pj"] = r.energy_by_chunk;
  j["energy_by_memory_pj"] = r.energy_by_memory;
  j["total_energy_pj"] = r.total_energy_pj;
  auto stages = nlohmann::json::array();
  for (const auto& s : r.stages)
    stages.push_back({{"name", s.name},
                      {"kind", s.kind},
                      {"group", s.group},
                      {"rows", s.rows},
                      {"row_cycles", s.row_cycles},
                      {"busy_cycles", s.busy_cycles},
                      {"energy_pj", s.energy_pj}});
  j["stages"] = std::move(stages);
}

std::string report_csv(const CostReport& r) {
  std::ostringstream os;
  os << "stage,kind,group,rows,row_cycles,busy_cycles,energy_pj\n";
  for (const auto& s : r.stages)
    os << s.name << ',' << s.kind << ',' << s.group << ',' << s.rows << ',' << s.row_cycles << ',' << s.busy_cycles
       << ',' << s.energy_pj << '\n';
  return os.str();
}

std::int64_t chain_cycles(const std::vector<std::int64_t>& row_times, const std::vector<Resource>& resources,
                          std::int64_t rows) {
  if (row_times.size() != resources.size()) throw ShapeError("chain row times and resources differ in length");
  if (row_times.empty() || rows < 1) return 0;
  std::int64_t fill = 0;
  std::map<Resource, std::int64_t> per_resource;
  for (std::size_t i = 0; i < row_times.size(); ++i) {
    fill += row_times[i];
    per_resource[resources[i]] += row_times[i];
  }
  std::int64_t bottleneck = 0;
  for (const auto& [res, t] : per_resource) bottleneck = std::max(bottleneck, t);
  return fill + (rows - 1) * bottleneck;
}

namespace {

// [begin, end) runs of stages that execute as one pipeline segment.
std::vector<std::pair<std::size_t, std::size_t>> segments(const Workload& w, PipelineFlags flags) {
  auto key = [&](const Stage& s) -> std::pair<int, int> {
    if (flags.inter && s.inter_chain >= 0) return {0, s.inter_chain};
    if (flags.intra && s.intra_chain >= 0) return {1, s.intra_chain};
    return {-1, -1};
  };
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < w.stages.size()) {
    const auto k = key(w.stages[i]);
    std::size_t j = i + 1;
    if (k.first >= 0)
      while (j < w.stages.size() && key(w.stages[j]) == k) ++j;
    out.emplace_back(i, j);
    i = j;
  }
  return out;
}

CostReport base_report(const Workload& w, const AcceleratorConfig& cfg, PipelineFlags flags) {
  cfg.validate();
  w.validate();
  CostReport r;
  r.flags = flags;
  for (const auto& s : w.stages) {
    StageCost c;
    c.name = s.name;
    c.kind = to_string(s.kind);
    c.group = s.group;
    c.rows = s.rows;
    c.row_cycles = effective_row_cycles(s, cfg);
    c.busy_cycles = c.rows * c.row_cycles;
    r.stages.push_back(std::move(c));
    if (s.kind == StageKind::matmul || s.kind == StageKind::shift_matmul) r.mac_ops += s.rows * s.inner * s.cols;
  }
  return r;
}

void finish_report(CostReport& r, const AcceleratorConfig& cfg) {
  r.total_cycles = 0;
  for (const auto& [g, c] : r.group_cycles) r.total_cycles += c;
  r.latency_ms = static_cast<double>(r.total_cycles) / (cfg.frequency_mhz * 1e3);
}

}  // namespace

CostReport simulate_sequential(const Workload& w, const AcceleratorConfig& cfg) {
  CostReport r = base_report(w, cfg, {});
  for (const auto& s : r.stages) r.group_cycles[s.group] += s.busy_cycles;
  finish_report(r, cfg);
  return r;
}

CostReport simulate_pipelined(const Workload& w, const AcceleratorConfig& cfg, PipelineFlags flags) {
  CostReport r = base_report(w, cfg, flags);
  for (const auto& [b, e] : segments(w, flags)) {
    std::vector<std::int64_t> times;
    std::vector<Resource> res;
    for (std::size_t i = b; i < e; ++i) {
      times.push_back(r.stages[i].row_cycles);
      res.push_back(resource_of(w.stages[i].kind));
    }
    r.group_cycles[w.stages[b].group] += chain_cycles(times, res, w.stages[b].rows);
  }
  finish_report(r, cfg);
  return r;
}

void energy(const Workload& w, const AcceleratorConfig& cfg, CostReport& report, RequantArith requant) {
  cfg.energy.validate();
  if (report.stages.size() != w.stages.size()) throw ShapeError("report does not belong to this workload");
  const EnergyTable& e = cfg.energy;
  report.energy_by_chunk.clear();
  report.energy_by_memory.clear();
  for (const char* chunk : {"psmac", "shifter", "ln", "softmax", "requant"}) report.energy_by_chunk[chunk] = 0.0;
  report.energy_by_memory["sram"] = 0.0;
  report.energy_by_memory["dram"] = 0.0;
  for (std::size_t i = 0; i < w.stages.size(); ++i) {
    const Stage& s = w.stages[i];
    const double rows = static_cast<double>(s.rows);
    const double elems = rows * static_cast<double>(s.cols);
    const double act_bytes = std::ceil(s.act_bits / 8.0);
    double compute = 0.0, sram = 0.0, dram = 0.0;
    switch (s.kind) {
      case StageKind::matmul: {
        const double macs = rows * static_cast<double>(s.inner) * static_cast<double>(s.cols);
        compute = macs * e.mac8 * (s.weight_bits <= 4 ? 0.5 : 1.0);
        // Row-stationary: the input row is read once, weights stream past it per row.
        sram = rows * s.inner * act_bytes + macs * s.weight_bits / 8.0 + elems * 4.0;
        dram = static_cast<double>(s.weight_bytes());
        break;
      }
      case StageKind::shift_matmul: {
        const double ops = rows * static_cast<double>(s.inner) * static_cast<double>(s.cols);
        compute = ops * (e.shift + e.add);
        sram = rows * s.inner * 0.5 + ops * act_bytes + elems * 4.0;
        break;
      }
      case StageKind::ln:
        compute = elems * (e.mac8 + 3.0 * e.add + e.shift) + rows * 2.0 * e.divide;
        sram = elems * 2.0 * act_bytes;
        break;
      case StageKind::softmax:
        compute = elems * (2.0 * e.mac8 + 4.0 * e.add + 2.0 * e.shift + e.divide);
        sram = elems * 4.0 + elems * 0.5;
        break;
      case StageKind::requant:
        compute = elems * ((requant == RequantArith::pot_shift ? e.shift : e.fp_mul) + e.add);
        sram = elems * 4.0 + elems * act_bytes;
        break;
    }
    const double mem = sram * e.sram_byte + dram * e.dram_byte;
    report.energy_by_chunk[to_string(resource_of(s.kind))] += compute;
    report.energy_by_memory["sram"] += sram * e.sram_byte;
    report.energy_by_memory["dram"] += dram * e.dram_byte;
    report.stages[i].energy_pj = compute + mem;
  }
  report.total_energy_pj = 0.0;
  for (const auto& [k, v] : report.energy_by_chunk) report.total_energy_pj += v;
  for (const auto& [k, v] : report.energy_by_memory) report.total_energy_pj += v;
}

std::int64_t simulate_tasks(const std::vector<SimTask>& tasks, std::vector<std::int64_t>* finish) {
  const std::size_t n = tasks.size();
  int resources = 0;
  std::vector<std::size_t> pending(n, 0);
  std::vector<std::vector<std::size_t>> dependents(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (tasks[i].resource < 0 || tasks[i].duration < 0) throw ConfigError("task with negative resource or duration");
    resources = std::max(resources, tasks[i].resource + 1);
    for (std::size_t d : tasks[i].deps) {
      if (d >= n) throw ShapeError("task dependency out of range");
      dependents[d].push_back(i);
      ++pending[i];
    }
  }
  std::vector<std::set<std::size_t>> ready(static_cast<std::size_t>(resources));
  std::vector<bool> busy(static_cast<std::size_t>(resources), false);
  std::vector<std::int64_t> done_at(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    if (pending[i] == 0) ready[static_cast<std::size_t>(tasks[i].resource)].insert(i);

  using Event = std::pair<std::int64_t, std::size_t>;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
  std::int64_t now = 0;
  std::size_t completed = 0;
  auto dispatch = [&] {
    for (std::size_t res = 0; res < ready.size(); ++res) {
      if (busy[res] || ready[res].empty()) continue;
      const std::size_t t = *ready[res].begin();
      ready[res].erase(ready[res].begin());
      busy[res] = true;
      events.emplace(now + tasks[t].duration, t);
    }
  };
  dispatch();
  while (!events.empty()) {
    now = events.top().first;
    while (!events.empty() && events.top().first == now) {
      const std::size_t t = events.top().second;
      events.pop();
      done_at[t] = now;
      ++completed;
      busy[static_cast<std::size_t>(tasks[t].resource)] = false;
      for (std::size_t dep : dependents[t])
        if (--pending[dep] == 0) ready[static_cast<std::size_t>(tasks[dep].resource)].insert(dep);
    }
    dispatch();
  }
  if (completed != n)
    throw Error("deadlock: " + std::to_string(n - completed) + " tasks wait on a dependency cycle");
  if (finish) *finish = std::move(done_at);
  return now;
}

CostReport event_driven_oracle(const Workload& w, const AcceleratorConfig& cfg, PipelineFlags flags) {
  CostReport r = base_report(w, cfg, flags);
  std::vector<SimTask> tasks;
  std::vector<std::pair<std::string, std::size_t>> segment_ends;  // group, last task
  std::optional<std::size_t> barrier;
  for (const auto& [b, e] : segments(w, flags)) {
    const std::int64_t rows = w.stages[b].rows;
    const std::size_t width = e - b;
    const std::size_t base = tasks.size();
    auto id = [&](std::int64_t row, std::size_t j) { return base + static_cast<std::size_t>(row) * width + j; };
    for (std::int64_t row = 0; row < rows; ++row)
      for (std::size_t j = 0; j < width; ++j) {
        const Stage& s = w.stages[b + j];
        SimTask t;
        t.resource = static_cast<int>(resource_of(s.kind));
        t.duration = r.stages[b + j].row_cycles;
        if (j > 0) t.deps.push_back(id(row, j - 1));
        if (row > 0) t.deps.push_back(id(row - 1, j));
        if (row == 0 && j == 0 && barrier) t.deps.push_back(*barrier);
        tasks.push_back(std::move(t));
      }
    barrier = id(rows - 1, width - 1);
    segment_ends.emplace_back(w.stages[b].group, *barrier);
  }
  std::vector<std::int64_t> finish;
  simulate_tasks(tasks, &finish);
  std::int64_t prev = 0;
  for (const auto& [group, last] : segment_ends) {
    r.group_cycles[group] += finish[last] - prev;
    prev = finish[last];
  }
  finish_report(r, cfg);
  return r;
}

}  // namespace potvit
