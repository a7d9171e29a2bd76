#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "potvit/accelsim.hpp"
#include "potvit/calibration.hpp"
#include "potvit/checkpoint.hpp"
#include "potvit/error.hpp"
#include "potvit/fakequant.hpp"
#include "potvit/intengine.hpp"
#include "potvit/model.hpp"
#include "potvit/mpsearch.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace potvit;
using namespace potvit::cli;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCheck = 3;
constexpr int kExitInfeasible = 4;

struct Context {
  RunConfig cfg;
  std::string hash;
  fs::path out;
};

void write_artifact(const Context& ctx, const fs::path& name, json j) {
  j["config_hash"] = ctx.hash;
  write_json_file(ctx.out / name, canonical(j));
}

// Reads an artifact and insists it came from the current config.
json read_artifact(const Context& ctx, const fs::path& name) {
  const fs::path p = ctx.out / name;
  if (!fs::exists(p)) throw ConfigError("missing input artifact " + p.string());
  json j = read_json_file(p);
  const std::string h = j.value("config_hash", std::string{});
  if (h != ctx.hash)
    throw ConfigError(p.string() + " was produced by config " + (h.empty() ? "<none>" : h) + ", current is " + ctx.hash);
  return j;
}

void summary(const Context& ctx, const std::string& cmd, json fields) {
  fields["command"] = cmd;
  fields["status"] = "ok";
  fields["config_hash"] = ctx.hash;
  std::cout << canonical(fields).dump() << '\n';
}

DataSplits load_data(const RunConfig& cfg) {
  return make_splits(generate_dataset(cfg.dataset), static_cast<std::size_t>(cfg.calib_size));
}

std::span<const Sample> head(std::span<const Sample> s, int n) {
  return s.first(std::min(s.size(), static_cast<std::size_t>(n)));
}

FloatModel load_model(const Context& ctx) {
  read_artifact(ctx, "train.json");
  return load_checkpoint(ctx.out / "checkpoint");
}

// Recomputes the calibration and confirms it reproduces the stored qparams.
ModelQuantParams load_qparams(const Context& ctx, const FloatModel& model, const DataSplits& data,
                              const std::string& file, const std::map<std::string, int>& layer_bits = {}) {
  json stored = read_artifact(ctx, file);
  stored.erase("config_hash");
  QuantSettings s = ctx.cfg.quant;
  for (const auto& [k, v] : layer_bits) s.layer_bits[k] = v;
  ModelQuantParams qp = calibrate(model, data.calib, s);
  if (canonical(qparams_to_json(qp)) != stored) throw ConfigError(file + " does not match the checkpoint; rerun calibrate");
  return qp;
}

std::map<std::string, int> mixed_bits(const Context& ctx) {
  const BitConfig bc = read_artifact(ctx, "bitconfig.json").get<BitConfig>();
  return bc.as_map();
}

bool has_mixed(const Context& ctx) { return fs::exists(ctx.out / "bitconfig.json"); }

// ------------------------------------------------------------------ commands

int cmd_train(const Context& ctx) {
  const DataSplits data = load_data(ctx.cfg);
  const TrainResult r = train(ctx.cfg.model, data, ctx.cfg.train);
  save_checkpoint(r.model, ctx.out / "checkpoint");
  json j{{"train_accuracy", r.train_accuracy}, {"val_accuracy", r.val_accuracy}, {"epoch_loss", r.epoch_loss}};
  write_artifact(ctx, "train.json", j);
  write_json_file(ctx.out / "run_config.json", canonical(json{{"config", to_json(ctx.cfg)}, {"config_hash", ctx.hash}}));
  summary(ctx, "train", {{"val_accuracy", r.val_accuracy}, {"artifact", (ctx.out / "checkpoint").string()}});
  return kExitOk;
}

int cmd_calibrate(const Context& ctx) {
  const FloatModel model = load_model(ctx);
  const DataSplits data = load_data(ctx.cfg);
  const ModelQuantParams qp = calibrate(model, data.calib, ctx.cfg.quant);
  write_artifact(ctx, "qparams.json", qparams_to_json(qp));
  summary(ctx, "calibrate", {{"points", qp.points.size()}, {"weight_size_mb", qp.weight_size_mb()}});
  return kExitOk;
}

int cmd_quantize(const Context& ctx) {
  const FloatModel model = load_model(ctx);
  const DataSplits data = load_data(ctx.cfg);
  const QuantizedModel qm = QuantizedModel::build(load_qparams(ctx, model, data, "qparams.json"));
  qm.save(ctx.out / "qmodel");
  write_artifact(ctx, "quantize.json", {{"layer_bits", qm.layer_bits()}});
  summary(ctx, "quantize", {{"artifact", (ctx.out / "qmodel").string()}});
  return kExitOk;
}

int cmd_search(const Context& ctx, std::optional<double> budget_flag) {
  const FloatModel model = load_model(ctx);
  const DataSplits data = load_data(ctx.cfg);
  const CalibrationCache cache = build_calibration(model, data.calib, ctx.cfg.quant, {4, 8});
  TraceOptions topts;
  topts.probes = ctx.cfg.trace_probes;
  topts.seed = ctx.cfg.seed;
  const MpProblem problem = build_problem(model, cache, head(data.calib, ctx.cfg.trace_samples), topts);

  const std::size_t L = problem.layers.size();
  const BitConfig all4 = problem.make(std::vector<int>(L, 4)), all8 = problem.make(std::vector<int>(L, 8));
  SearchConfig scfg = ctx.cfg.search;
  if (budget_flag) scfg.budget_mb = *budget_flag;
  if (scfg.budget_mb <= 0.0) scfg.budget_mb = 0.5 * (all4.model_size_mb + all8.model_size_mb);
  scfg.threads = env_thread_cap();

  // Candidates are ranked on the calibration set.
  const std::span<const Sample> eval_set(data.calib);
  const EvalFn eval = [&](const BitConfig& c) {
    const ModelQuantParams qp = assign_bits(cache, c.as_map());
    return accuracy([&](const Tensor& x) { return fake_quant_predict(qp, x); }, eval_set);
  };

  std::vector<BitConfig> init = pareto_allocate(problem, scfg.budget_mb, static_cast<std::size_t>(scfg.population));
  const double all4_acc = eval(all4);
  if (all4.model_size_mb <= scfg.budget_mb &&
      std::none_of(init.begin(), init.end(), [&](const BitConfig& c) { return c.bits == all4.bits; }))
    init.push_back(all4);
  const BitConfig hessian_only = init.front();

  std::vector<SearchLogRow> log;
  BitConfig best = evo_search(problem, init, eval, scfg, &log);

  json layers = json::array();
  for (const auto& l : problem.layers)
    layers.push_back({{"name", l.name}, {"params", l.params}, {"trace", l.trace}, {"perturbation", l.perturbation}});
  json hj = hessian_only;
  hj["accuracy"] = eval(hessian_only);
  json bj = best;
  bj["budget_mb"] = scfg.budget_mb;
  bj["all4"] = {{"model_size_mb", all4.model_size_mb}, {"accuracy", all4_acc}};
  bj["all8_model_size_mb"] = all8.model_size_mb;
  bj["hessian_only"] = hj;
  bj["eval_samples"] = eval_set.size();
  bj["layer_stats"] = layers;
  write_artifact(ctx, "bitconfig.json", bj);
  std::ofstream csv(ctx.out / "search_log.csv", std::ios::trunc);
  csv << "iteration,best_acc,population_mean_acc\n";
  for (const auto& r : log) {
    char line[96];
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f\n", r.iteration, r.best_acc, r.mean_acc);
    csv << line;
  }
  if (!csv) throw ConfigError("cannot write search_log.csv");

  const ModelQuantParams qp = assign_bits(cache, best.as_map());
  QuantSettings ms = ctx.cfg.quant;
  for (const auto& [k, v] : best.as_map()) ms.layer_bits[k] = v;
  const ModelQuantParams direct = calibrate(model, data.calib, ms);
  if (canonical(qparams_to_json(direct)) != canonical(qparams_to_json(qp)))
    throw CheckFailure("cached calibration disagrees with a direct calibration at the chosen bits");
  write_artifact(ctx, "qparams_mixed.json", qparams_to_json(qp));
  QuantizedModel::build(qp).save(ctx.out / "qmodel_mixed");
  write_json_file(ctx.out / "qmodel_mixed" / "bitconfig.json", canonical(json(best)));
  summary(ctx, "search-bits",
          {{"budget_mb", scfg.budget_mb},
           {"model_size_mb", best.model_size_mb},
           {"accuracy", best.accuracy.value_or(0.0)},
           {"all4_accuracy", all4_acc},
           {"bits", best.bits}});
  return kExitOk;
}

struct Variant {
  std::string name;
  std::string qparams_file;
  std::string qmodel_dir;
  std::map<std::string, int> bits;
};

std::vector<Variant> variants(const Context& ctx) {
  std::vector<Variant> v{{"uniform", "qparams.json", "qmodel", {}}};
  if (has_mixed(ctx)) v.push_back({"mixed", "qparams_mixed.json", "qmodel_mixed", mixed_bits(ctx)});
  return v;
}

int cmd_eval(const Context& ctx, const std::string& engine, bool check) {
  const FloatModel model = load_model(ctx);
  const DataSplits data = load_data(ctx.cfg);
  json results = json::object();
  json checks = json::object();
  std::size_t total_mismatch = 0;
  if (engine == "float") {
    results["float"] = accuracy(model, data.val);
  } else {
    for (const auto& v : variants(ctx)) {
      const ModelQuantParams qp = load_qparams(ctx, model, data, v.qparams_file, v.bits);
      if (engine == "fakequant") {
        results[v.name] = accuracy([&](const Tensor& x) { return fake_quant_predict(qp, x); }, data.val);
      } else {
        read_artifact(ctx, v.name == "uniform" ? "quantize.json" : "bitconfig.json");
        const QuantizedModel qm = QuantizedModel::load(ctx.out / v.qmodel_dir);
        results[v.name] = accuracy([&](const Tensor& x) { return int_predict(qm, x); }, data.val);
        if (check) {
          std::size_t inputs = 0, mismatched = 0;
          std::string first;
          for (const auto& s : head(data.val, ctx.cfg.check_samples)) {
            const auto m = compare_codes(fake_quant_forward(qp, s.x).codes, int_forward(qm, s.x).codes);
            ++inputs;
            if (!m.empty()) {
              ++mismatched;
              if (first.empty()) first = m.front().point;
            }
          }
          total_mismatch += mismatched;
          checks[v.name] = {{"inputs", inputs}, {"mismatched_inputs", mismatched}, {"first_point", first}};
        }
      }
    }
  }
  if (check && engine != "int") throw ConfigError("--check compares the int engine against fake-quant; use --engine int");
  json art{{"engine", engine}, {"accuracy", results}};
  if (check) art["check"] = checks;
  write_artifact(ctx, "eval_" + engine + ".json", art);
  if (total_mismatch > 0) throw CheckFailure("integer engine diverged from the fake-quant reference: " + checks.dump());
  json s{{"engine", engine}, {"accuracy", results}};
  if (check) s["check"] = "pass";
  summary(ctx, "eval", s);
  return kExitOk;
}

std::string flags_tag(PipelineFlags f) {
  std::string t = to_string(f);
  std::replace(t.begin(), t.end(), ',', '_');
  return t;
}

int cmd_simulate(const Context& ctx, const std::string& pipeline, const std::string& workload_kind) {
  const PipelineFlags flags = pipeline_flags_from_string(pipeline);
  Workload w;
  if (workload_kind == "deit-tiny") {
    const ModelConfig m = deit_tiny_config();
    w = make_workload(m, std::vector<int>(2 + 6 * static_cast<std::size_t>(m.layers), 8));
  } else if (workload_kind == "model") {
    const bool mixed = has_mixed(ctx);
    read_artifact(ctx, mixed ? "bitconfig.json" : "quantize.json");
    w = make_workload(QuantizedModel::load(ctx.out / (mixed ? "qmodel_mixed" : "qmodel")));
  } else {
    throw ConfigError("unknown workload '" + workload_kind + "' (model | deit-tiny)");
  }
  CostReport r = flags.inter || flags.intra ? simulate_pipelined(w, ctx.cfg.arch, flags)
                                             : simulate_sequential(w, ctx.cfg.arch);
  CostReport fp = r;
  energy(w, ctx.cfg.arch, fp, RequantArith::fp_multiply);
  energy(w, ctx.cfg.arch, r, RequantArith::pot_shift);
  write_json_file(ctx.out / "arch.json", canonical(json(ctx.cfg.arch)));
  const std::string tag = workload_kind + "_" + flags_tag(flags);
  json j = r;
  j["workload"] = workload_kind;
  j["fp_requant_total_energy_pj"] = fp.total_energy_pj;
  write_artifact(ctx, "sim_" + tag + ".json", j);
  std::ofstream csv(ctx.out / ("sim_" + tag + ".csv"), std::ios::trunc);
  csv << report_csv(r);
  if (!csv) throw ConfigError("cannot write simulation CSV");
  summary(ctx, "simulate",
          {{"workload", workload_kind},
           {"pipeline", to_string(flags)},
           {"total_cycles", r.total_cycles},
           {"latency_ms", r.latency_ms},
           {"total_energy_pj", r.total_energy_pj}});
  return kExitOk;
}

int cmd_report(const Context& ctx) {
  json rep{{"accuracy", json::object()}, {"simulation", json::object()}};
  std::ostringstream csv;
  csv << "section,name,metric,value\n";
  const auto num = [](const json& v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v.get<double>());
    return std::string(buf);
  };

  const json tr = read_artifact(ctx, "train.json");
  rep["accuracy"]["float_val"] = tr.at("val_accuracy");
  csv << "accuracy,float,val_accuracy," << num(tr.at("val_accuracy")) << '\n';
  for (const std::string engine : {"float", "fakequant", "int"}) {
    if (!fs::exists(ctx.out / ("eval_" + engine + ".json"))) continue;
    const json e = read_artifact(ctx, "eval_" + engine + ".json");
    rep["accuracy"][engine] = e.at("accuracy");
    for (const auto& [variant, acc] : e.at("accuracy").items())
      csv << "accuracy," << engine << ',' << variant << ',' << num(acc) << '\n';
    if (e.contains("check")) rep["check"] = e.at("check");
  }
  if (has_mixed(ctx)) {
    const json b = read_artifact(ctx, "bitconfig.json");
    rep["bitconfig"] = {{"bits", b.at("bits")},
                        {"model_size_mb", b.at("model_size_mb")},
                        {"budget_mb", b.at("budget_mb")},
                        {"search_accuracy", b.at("accuracy")},
                        {"all4_search_accuracy", b.at("all4").at("accuracy")}};
    csv << "search,mixed,model_size_mb," << num(b.at("model_size_mb")) << '\n';
  }

  std::vector<fs::path> sims;
  for (const auto& e : fs::directory_iterator(ctx.out)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("sim_", 0) == 0 && e.path().extension() == ".json") sims.push_back(e.path().filename());
  }
  std::sort(sims.begin(), sims.end());
  std::map<std::string, std::map<std::string, json>> by_workload;
  for (const auto& f : sims) {
    const json s = read_artifact(ctx, f);
    const std::string wl = s.at("workload").get<std::string>();
    const std::string flags = s.at("pipeline").get<std::string>();
    std::string col = flags;
    std::replace(col.begin(), col.end(), ',', '+');
    by_workload[wl][flags] = s;
    rep["simulation"][wl][flags] = {{"total_cycles", s.at("total_cycles")},
                                    {"group_cycles", s.at("group_cycles")},
                                    {"latency_ms", s.at("latency_ms")},
                                    {"total_energy_pj", s.at("total_energy_pj")},
                                    {"fp_requant_total_energy_pj", s.at("fp_requant_total_energy_pj")}};
    csv << "cycles," << wl << ',' << col << ',' << s.at("total_cycles").get<std::int64_t>() << '\n';
    csv << "energy_pj," << wl << ',' << col << ',' << num(s.at("total_energy_pj")) << '\n';
    csv << "energy_fp_requant_pj," << wl << ',' << col << ',' << num(s.at("fp_requant_total_energy_pj")) << '\n';
  }
  for (const auto& [wl, modes] : by_workload) {
    if (!modes.count("none")) continue;
    const json& seq = modes.at("none");
    for (const auto& [flags, s] : modes) {
      if (flags == "none") continue;
      json ratios{{"overall", seq.at("total_cycles").get<double>() / s.at("total_cycles").get<double>()}};
      for (const auto& [g, c] : s.at("group_cycles").items())
        if (c.get<double>() > 0) ratios[g] = seq.at("group_cycles").at(g).get<double>() / c.get<double>();
      rep["simulation"][wl][flags]["speedup_vs_sequential"] = ratios;
      std::string col = flags;
      std::replace(col.begin(), col.end(), ',', '+');
      for (const auto& [g, v] : ratios.items()) csv << "speedup," << wl << ',' << col + ":" + g << ',' << num(v) << '\n';
    }
  }
  write_artifact(ctx, "report.json", rep);
  std::ofstream out(ctx.out / "report.csv", std::ios::trunc);
  out << csv.str();
  if (!out) throw ConfigError("cannot write report.csv");
  summary(ctx, "report", {{"artifact", (ctx.out / "report.json").string()}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"potvit: power-of-two post-training quantization, integer ViT engine and accelerator simulator"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "potvit_run";
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed override for every module");
  app.add_option("--out", out_dir, "Artifact directory");

  auto* train_cmd = app.add_subcommand("train", "Train the float toy model");
  auto* calib_cmd = app.add_subcommand("calibrate", "Calibrate quantization parameters");
  auto* quant_cmd = app.add_subcommand("quantize", "Build the integer model");
  auto* search_cmd = app.add_subcommand("search-bits", "Mixed-precision bit allocation");
  std::optional<double> budget;
  search_cmd->add_option("--budget-mb", budget, "Model size budget in MB");
  auto* eval_cmd = app.add_subcommand("eval", "Accuracy of one engine");
  std::string engine = "int";
  bool check = false;
  eval_cmd->add_option("--engine", engine)->check(CLI::IsMember({"float", "fakequant", "int"}));
  eval_cmd->add_flag("--check", check, "Compare integer codes against the fake-quant reference");
  auto* sim_cmd = app.add_subcommand("simulate", "Accelerator cycles and energy");
  std::string pipeline = "inter,intra", workload = "model";
  sim_cmd->add_option("--pipeline", pipeline, "none | inter | intra | inter,intra");
  sim_cmd->add_option("--workload", workload, "model | deit-tiny");
  auto* report_cmd = app.add_subcommand("report", "Aggregate artifacts into report.json/.csv");
  for (auto* sc : {train_cmd, calib_cmd, quant_cmd, search_cmd, eval_cmd, sim_cmd, report_cmd}) sc->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    Context ctx;
    ctx.cfg = load_run_config(config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path), seed);
    ctx.hash = config_hash(ctx.cfg);
    ctx.out = out_dir;
    fs::create_directories(ctx.out);
    if (train_cmd->parsed()) return cmd_train(ctx);
    if (calib_cmd->parsed()) return cmd_calibrate(ctx);
    if (quant_cmd->parsed()) return cmd_quantize(ctx);
    if (search_cmd->parsed()) return cmd_search(ctx, budget);
    if (eval_cmd->parsed()) return cmd_eval(ctx, engine, check);
    if (sim_cmd->parsed()) return cmd_simulate(ctx, pipeline, workload);
    if (report_cmd->parsed()) return cmd_report(ctx);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << '\n';
    return kExitCheck;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << '\n';
    return kExitInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
