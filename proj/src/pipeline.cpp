#include "spaq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spaq/metrics.hpp"
#include "spaq/random.hpp"
#include "spaq/report.hpp"
#include "spaq/zoo.hpp"

namespace spaq::pipeline {

const char* to_string(ReportFormat format) { return format == ReportFormat::kText ? "text" : "structured"; }

ReportFormat report_format_from_string(const std::string& name) {
  if (name == "text") return ReportFormat::kText;
  if (name == "structured" || name == "json") return ReportFormat::kStructured;
  fail(ErrorCode::kInvalidArgument, "unknown report format '" + name + "'");
}

namespace {

json identity_json(const PipelineConfig& c) {
  json probe = c.probe_rate ? json(*c.probe_rate) : json(nullptr);
  return {{"model", c.model},
          {"global_rate", c.global_rate},
          {"schedule", c.schedule},
          {"probe_rate", probe},
          {"weighting", pruning::to_string(c.weighting)},
          {"p_max", c.p_max},
          {"subtract_baseline", c.subtract_baseline},
          {"finetune",
           {{"steps", c.finetune.steps},
            {"lr", c.finetune.learning_rate},
            {"optimizer", train::to_string(c.finetune.optimizer)},
            {"batch_size", c.finetune.batch_size},
            {"clip_norm", c.finetune.clip_norm},
            {"seed", c.finetune.seed}}},
          {"calib", {{"samples", c.calib_samples}, {"seed", c.calib_seed}}},
          {"scheme", quant::to_string(c.weight_scheme)},
          {"task",
           {{"target", train::to_string(c.task.target)},
            {"seed", c.task.seed},
            {"samples", c.task.samples},
            {"resolution", {c.task.resolution.height, c.task.resolution.width}}}},
          {"input_resolution", {c.input_resolution.height, c.input_resolution.width}},
          {"report_format", to_string(c.report_format)},
          {"seed", c.seed}};
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidArgument, std::string("config key '") + key + "': " + e.what());
  }
}

void read_resolution(const json& j, const char* key, Resolution& out) {
  if (!j.contains(key)) return;
  std::vector<Index> hw;
  read(j, key, hw);
  if (hw.size() != 2) fail(ErrorCode::kInvalidArgument, std::string("config key '") + key + "' needs [height, width]");
  out = {hw[0], hw[1]};
}

const std::vector<std::string> kTopKeys = {"model",       "global_rate", "schedule",         "probe_rate",
                                           "weighting",   "p_max",       "subtract_baseline", "finetune",
                                           "calib",       "scheme",      "task",             "input_resolution",
                                           "output_dir",  "report_format", "seed",           "threads"};

}  // namespace

json to_json(const PipelineConfig& cfg) {
  json j = identity_json(cfg);
  j["output_dir"] = cfg.output_dir.string();
  j["threads"] = cfg.threads;
  return j;
}

PipelineConfig config_from_json(const json& j, PipelineConfig c) {
  if (!j.is_object()) fail(ErrorCode::kInvalidArgument, "config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kTopKeys.begin(), kTopKeys.end(), key) == kTopKeys.end()) {
      fail(ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
    }
  }
  read(j, "model", c.model);
  read(j, "global_rate", c.global_rate);
  read(j, "schedule", c.schedule);
  if (j.contains("probe_rate")) {
    if (j["probe_rate"].is_null()) {
      c.probe_rate.reset();
    } else {
      double x = 0.0;
      read(j, "probe_rate", x);
      c.probe_rate = x;
    }
  }
  if (j.contains("weighting")) {
    std::string w;
    read(j, "weighting", w);
    c.weighting = pruning::weighting_from_string(w);
  }
  read(j, "p_max", c.p_max);
  read(j, "subtract_baseline", c.subtract_baseline);
  if (j.contains("finetune")) {
    const json& f = j["finetune"];
    read(f, "steps", c.finetune.steps);
    read(f, "lr", c.finetune.learning_rate);
    read(f, "batch_size", c.finetune.batch_size);
    read(f, "clip_norm", c.finetune.clip_norm);
    read(f, "seed", c.finetune.seed);
    if (f.contains("optimizer")) {
      std::string o;
      read(f, "optimizer", o);
      c.finetune.optimizer = train::optimizer_from_string(o);
    }
  }
  if (j.contains("calib")) {
    read(j["calib"], "samples", c.calib_samples);
    read(j["calib"], "seed", c.calib_seed);
  }
  if (j.contains("scheme")) {
    std::string s;
    read(j, "scheme", s);
    c.weight_scheme = quant::scheme_from_string(s);
  }
  if (j.contains("task")) {
    const json& t = j["task"];
    if (t.contains("target")) {
      std::string name;
      read(t, "target", name);
      c.task.target = train::target_from_string(name);
    }
    read(t, "seed", c.task.seed);
    read(t, "samples", c.task.samples);
    read_resolution(t, "resolution", c.task.resolution);
  }
  read_resolution(j, "input_resolution", c.input_resolution);
  if (j.contains("output_dir")) {
    std::string d;
    read(j, "output_dir", d);
    c.output_dir = d;
  }
  if (j.contains("report_format")) {
    std::string r;
    read(j, "report_format", r);
    c.report_format = report_format_from_string(r);
  }
  read(j, "seed", c.seed);
  read(j, "threads", c.threads);
  return c;
}

void check_config(const PipelineConfig& c) {
  if (!(c.global_rate >= 0.0 && c.global_rate < 1.0)) fail(ErrorCode::kInvalidArgument, "global rate must lie in [0, 1)");
  for (std::size_t i = 0; i < c.schedule.size(); ++i) {
    if (!(c.schedule[i] > 0.0 && c.schedule[i] < 1.0) || (i > 0 && !(c.schedule[i] > c.schedule[i - 1]))) {
      fail(ErrorCode::kInvalidArgument, "schedule must be increasing rates in (0, 1)");
    }
  }
  if (!c.schedule.empty() && std::abs(c.schedule.back() - c.global_rate) > 1e-12) {
    fail(ErrorCode::kInvalidArgument, "schedule must end at the global rate");
  }
  if (c.probe_rate && !(*c.probe_rate > 0.0 && *c.probe_rate < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "probe rate must lie in (0, 1)");
  }
  if (!(c.p_max > 0.0 && c.p_max < 1.0)) fail(ErrorCode::kInvalidArgument, "p_max must lie in (0, 1)");
  if (c.calib_samples <= 0) fail(ErrorCode::kInvalidArgument, "calibration needs at least one sample");
  if (c.task.samples <= 0) fail(ErrorCode::kInvalidArgument, "task needs at least one sample");
  if (c.input_resolution.height <= 0 || c.input_resolution.width <= 0 || c.task.resolution.height <= 0 ||
      c.task.resolution.width <= 0) {
    fail(ErrorCode::kInvalidArgument, "resolutions must be positive");
  }
  if (c.threads == 0) fail(ErrorCode::kInvalidArgument, "threads must be positive");
  train::check_config(c.finetune);
}

std::string config_hash(const PipelineConfig& cfg) {
  const std::string canonical = identity_json(cfg).dump();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(canonical.data(), canonical.size())));
  return buf;
}

persistence::Model load_model(const std::string& spec, std::uint64_t seed) {
  if (zoo::is_model_name(spec)) {
    zoo::ZooSpec z;
    z.name = spec;
    z.seed = seed;
    return zoo::build(z);
  }
  if (!std::filesystem::exists(spec)) {
    fail(ErrorCode::kUnknownModel, "'" + spec + "' is neither a zoo model nor an existing file");
  }
  return persistence::load(spec).model;
}

GraphF load_float_model(const std::string& spec, std::uint64_t seed) {
  auto m = load_model(spec, seed);
  if (auto* g = std::get_if<GraphF>(&m)) return std::move(*g);
  fail(ErrorCode::kDtypeMismatch, "'" + spec + "' holds an int8 model; an fp32 model is required");
}

json summary(const accounting::CostReport& r) {
  return {{"precision", accounting::to_string(r.precision)},
          {"params_total", r.params_total},
          {"flops_total", r.flops_total},
          {"size_bytes", r.size_bytes},
          {"size_mib", accounting::to_mib(r.size_bytes)}};
}

json comparison(const accounting::CostReport& baseline, const accounting::CostReport& optimized,
                std::optional<double> global_rate) {
  const auto red = accounting::reduction_report(baseline, optimized);
  json per_layer = report::to_json(optimized)["per_layer"];
  json j = {{"input_resolution", {optimized.input_resolution.height, optimized.input_resolution.width}},
            {"baseline", summary(baseline)},
            {"optimized", summary(optimized)},
            {"params_total", optimized.params_total},
            {"flops_total", optimized.flops_total},
            {"size_bytes", optimized.size_bytes},
            {"reduction_pct", red.params.rounded},
            {"flops_reduction_pct", red.flops.rounded},
            {"size_reduction_pct", red.size.rounded},
            {"raw", report::to_json(red)},
            {"per_layer", per_layer}};
  j["reference"] = nullptr;
  if (global_rate) {
    j["global_rate"] = *global_rate;
    if (auto ref = report::published_reference(*global_rate)) j["reference"] = report::to_json(*ref);
  }
  return j;
}

std::string comparison_text(const json& r) {
  std::ostringstream os;
  char line[256];
  auto row = [&](const char* label, const json& s) {
    std::snprintf(line, sizeof line, "%-10s %-6s params %10lld  flops %14lld  size %12llu B (%.4f MiB)\n", label,
                  s["precision"].get<std::string>().c_str(), s["params_total"].get<long long>(),
                  s["flops_total"].get<long long>(), s["size_bytes"].get<unsigned long long>(),
                  s["size_mib"].get<double>());
    os << line;
  };
  if (r.contains("config_hash")) os << "config " << r["config_hash"].get<std::string>() << '\n';
  row("baseline", r["baseline"]);
  if (r.contains("pruned")) row("pruned", r["pruned"]);
  row("optimized", r["optimized"]);
  std::snprintf(line, sizeof line, "reduction: params %.2f%%  flops %.2f%%  size %.2f%%\n",
                r["reduction_pct"].get<double>(), r["flops_reduction_pct"].get<double>(),
                r["size_reduction_pct"].get<double>());
  os << line;
  if (!r["reference"].is_null()) {
    const json& ref = r["reference"];
    std::snprintf(line, sizeof line,
                  "reference at P_g = %.2f: flops %.2f -> %.2f B (%.2f%%), size %.2f -> %.2f MB (%.1f%%)\n",
                  ref["global_rate"].get<double>(), ref["flops_baseline_b"].get<double>(),
                  ref["flops_pruned_b"].get<double>(), ref["flops_reduction_pct"].get<double>(),
                  ref["size_baseline_mb"].get<double>(), ref["size_reduced_mb"].get<double>(),
                  ref["size_reduction_pct"].get<double>());
    os << line;
  }
  if (r.contains("stages")) {
    for (const auto& s : r["stages"]) {
      std::snprintf(line, sizeof line,
                    "stage %zu: target %.4f, incremental %.4f, params %lld -> %lld, loss %.6g -> %.6g\n",
                    s["stage"].get<std::size_t>(), s["cumulative_target"].get<double>(),
                    s["incremental_rate"].get<double>(), s["params_before"].get<long long>(),
                    s["params_after"].get<long long>(), s["loss_first"].get<double>(),
                    s["loss_last"].get<double>());
      os << line;
    }
  }
  return os.str();
}

PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log) {
  check_config(cfg);
  PipelineResult result;
  result.config_hash = config_hash(cfg);
  auto note = [&](const std::string& msg) {
    if (log) *log << msg << '\n' << std::flush;
  };
  std::error_code ec;
  std::filesystem::create_directories(cfg.output_dir, ec);
  if (ec) fail(ErrorCode::kIo, "cannot create '" + cfg.output_dir.string() + "': " + ec.message());

  persistence::SaveOptions save;
  save.metadata["config_hash"] = result.config_hash;
  auto artifact = [&](const std::string& name) {
    auto p = cfg.output_dir / name;
    result.artifacts.push_back(p);
    return p;
  };
  auto write = [&](const std::string& name, json j) {
    j["config_hash"] = result.config_hash;
    report::write_json(artifact(name), j);
  };

  GraphF baseline;
  try {
    baseline = load_float_model(cfg.model, cfg.seed);
    validate(baseline);
  } catch (const Error& e) {
    fail(e.code(), std::string("load: ") + e.what());
  }
  persistence::save(baseline, artifact("baseline.spaq"), save);
  note("baseline: " + std::to_string(accounting::count_params(baseline).params_total) + " params");

  metrics::SyntheticEvaluator evaluator(cfg.task);
  pruning::PruneConfig pc;
  pc.schedule = cfg.schedule;
  pc.probe_rate = cfg.probe_rate;
  pc.allocation = {cfg.p_max, cfg.weighting};
  pc.sensitivity = {cfg.subtract_baseline, true, cfg.threads};
  pc.finetune = cfg.finetune;
  pc.task = cfg.task;
  pc.resolution = cfg.input_resolution;
  pc.on_stage = [&](const pruning::StageLog& s, const GraphF& g) {
    const std::string k = std::to_string(s.index);
    write("stage" + k + "_profile.json", report::to_json(s.profile));
    write("stage" + k + "_plan.json", report::to_json(s.plan));
    persistence::save(g, artifact("stage" + k + ".spaq"), save);
    note("stage " + k + ": params " + std::to_string(s.params_before) + " -> " + std::to_string(s.params_after));
  };
  // Errors from here on carry their stage tag.
  auto pruned = pruning::spaq_prune(baseline, cfg.global_rate, evaluator, pc);
  persistence::save(pruned.graph, artifact("pruned.spaq"), save);

  quant::QuantizeResult q;
  try {
    train::SyntheticTask calib_task = cfg.task;
    calib_task.seed = cfg.calib_seed;
    calib_task.samples = cfg.calib_samples;
    quant::QuantizeOptions qo;
    qo.weight_scheme = cfg.weight_scheme;
    qo.resolution = cfg.input_resolution;
    qo.save = save;
    q = quant::spaq_quantize(pruned.graph, train::calibration_set(pruned.graph, calib_task), qo);
  } catch (const Error& e) {
    fail(e.code(), std::string("quantize: ") + e.what());
  }
  persistence::save(q.graph, artifact("final_int8.spaq"), save);
  for (const auto& w : q.calibration.warnings) note("calibration: " + w);

  const auto base_cost = accounting::cost_report(baseline, cfg.input_resolution, save);
  const auto pruned_cost = accounting::cost_report(pruned.graph, cfg.input_resolution, save);
  const auto final_cost = accounting::cost_report(q.graph, cfg.input_resolution, save);

  json rep = comparison(base_cost, final_cost, cfg.global_rate);
  rep["config_hash"] = result.config_hash;
  rep["config"] = identity_json(cfg);
  rep["model"] = cfg.model;
  rep["pruned"] = summary(pruned_cost);
  rep["stages"] = json::array();
  for (const auto& s : pruned.stages) rep["stages"].push_back(report::to_json(s));
  rep["calibration_warnings"] = q.calibration.warnings;
  result.report = rep;

  if (cfg.report_format == ReportFormat::kStructured) {
    report::write_json(artifact("report.json"), rep);
  } else {
    const auto path = artifact("report.txt");
    auto tmp = path;
    tmp += ".tmp";
    {
      std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
      if (!f) fail(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
      f << comparison_text(rep);
    }
    std::filesystem::rename(tmp, path);
  }

  json manifest = {{"config_hash", result.config_hash}, {"config", to_json(cfg)}, {"artifacts", json::array()}};
  for (const auto& p : result.artifacts) {
    manifest["artifacts"].push_back({{"file", p.filename().string()}, {"bytes", std::filesystem::file_size(p)}});
  }
  report::write_json(cfg.output_dir / "manifest.json", manifest);
  result.artifacts.push_back(cfg.output_dir / "manifest.json");
  note("done: flops -" + std::to_string(rep["flops_reduction_pct"].get<double>()) + "%, size -" +
       std::to_string(rep["size_reduction_pct"].get<double>()) + "%");
  return result;
}

}  // namespace spaq::pipeline
