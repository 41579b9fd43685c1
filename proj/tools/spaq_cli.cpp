// Command-line front end: the full pipeline plus each stage on its own.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "spaq/metrics.hpp"
#include "spaq/pipeline.hpp"
#include "spaq/report.hpp"
#include "spaq/zoo.hpp"

namespace {

using namespace spaq;
using json = nlohmann::json;

constexpr int kExitUsage = 1;
constexpr int kExitStage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Resolution parse_resolution(const std::string& text) {
  const auto x = text.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("no separator");
    std::size_t used = 0;
    const std::string h = text.substr(0, x), w = text.substr(x + 1);
    Resolution r{std::stoll(h, &used), 0};
    if (used != h.size()) throw std::invalid_argument("height");
    r.width = std::stoll(w, &used);
    if (used != w.size()) throw std::invalid_argument("width");
    if (r.height <= 0 || r.width <= 0) throw std::invalid_argument("non-positive");
    return r;
  } catch (const std::exception&) {
    throw UsageError("resolution must look like 384x512, got '" + text + "'");
  }
}

template <typename F>
auto usage(F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  f << text;
}

/// Options describing the synthetic task, shared by several commands.
struct TaskFlags {
  std::string resolution;
  std::string target;
  Index samples = 0;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--task-resolution", resolution, "Synthetic task resolution, HxW");
    app->add_option("--target", target, "Synthetic target: blur-flow or downsample-identity");
    app->add_option("--task-samples", samples, "Synthetic task samples");
    seed_opt = app->add_option("--task-seed", seed, "Synthetic task seed");
  }

  train::SyntheticTask apply(train::SyntheticTask t) const {
    if (!resolution.empty()) t.resolution = parse_resolution(resolution);
    if (!target.empty()) t.target = usage([&] { return train::target_from_string(target); });
    if (samples != 0) t.samples = samples;
    if (seed_opt && seed_opt->count()) t.seed = seed;
    return t;
  }
};

std::vector<double> parse_schedule(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad schedule entry '" + item + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning and 8-bit quantization toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  unsigned threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for model initialization and sampling");
  app.add_option("--threads", threads, "Worker threads for sensitivity probes")->check(CLI::PositiveNumber);

  // pipeline
  auto* pipe = app.add_subcommand("pipeline", "Sensitivity, pruning with fine-tuning, quantization, report");
  std::string p_config, p_model, p_schedule, p_weighting, p_resolution, p_out, p_format, p_scheme;
  double p_rate = 0, p_probe = 0, p_pmax = 0, p_lr = 0;
  Index p_steps = 0, p_calib = 0;
  std::uint64_t p_ft_seed = 0, p_calib_seed = 0;
  TaskFlags p_task;
  pipe->add_option("--config", p_config, "JSON config file; flags take precedence");
  auto* o_model = pipe->add_option("--model", p_model, "Zoo name or model file");
  auto* o_rate = pipe->add_option("--global-rate", p_rate, "Global pruning rate P_g");
  pipe->add_option("--schedule", p_schedule, "Comma-separated cumulative rates ending at P_g");
  auto* o_probe = pipe->add_option("--probe-rate", p_probe, "Probe rate x (default: incremental rate)");
  pipe->add_option("--weighting", p_weighting, "direct or inverse");
  auto* o_pmax = pipe->add_option("--p-max", p_pmax, "Per-layer pruning cap");
  auto* o_steps = pipe->add_option("--finetune-steps", p_steps, "Fine-tuning steps per stage");
  auto* o_lr = pipe->add_option("--lr", p_lr, "Fine-tuning learning rate");
  auto* o_ft_seed = pipe->add_option("--finetune-seed", p_ft_seed, "Fine-tuning seed");
  auto* o_calib = pipe->add_option("--calib-samples", p_calib, "Calibration samples");
  auto* o_calib_seed = pipe->add_option("--calib-seed", p_calib_seed, "Calibration seed");
  pipe->add_option("--scheme", p_scheme, "per-channel or per-tensor weight scales");
  pipe->add_option("--resolution", p_resolution, "Accounting resolution, HxW");
  pipe->add_option("--out", p_out, "Output directory");
  pipe->add_option("--report-format", p_format, "text or structured");
  p_task.add(pipe);

  // analyze-sensitivity
  auto* sens = app.add_subcommand("analyze-sensitivity", "Per-layer sensitivity profile");
  std::string s_model = "fnet", s_out;
  double s_probe = 0.1;
  bool s_subtract = false;
  TaskFlags s_task;
  sens->add_option("--model", s_model, "Zoo name or model file");
  sens->add_option("--probe-rate,-x", s_probe, "Fraction of filters removed per probe");
  sens->add_flag("--subtract-baseline", s_subtract, "Use error above the unpruned baseline");
  sens->add_option("--out", s_out, "Write the profile as JSON");
  s_task.add(sens);

  // prune
  auto* prune = app.add_subcommand("prune", "Iterative pruning with fine-tuning");
  std::string r_model = "fnet", r_schedule, r_weighting = "direct", r_out, r_log, r_resolution;
  double r_rate = 0.2, r_pmax = 0.8;
  std::optional<double> r_probe;
  Index r_steps = 20;
  double r_lr = 1e-3;
  TaskFlags r_task;
  prune->add_option("--model", r_model, "Zoo name or model file");
  prune->add_option("--global-rate", r_rate, "Global pruning rate P_g");
  prune->add_option("--schedule", r_schedule, "Comma-separated cumulative rates ending at P_g");
  prune->add_option("--probe-rate,-x", r_probe, "Probe rate (default: incremental rate)");
  prune->add_option("--weighting", r_weighting, "direct or inverse");
  prune->add_option("--p-max", r_pmax, "Per-layer pruning cap");
  prune->add_option("--finetune-steps", r_steps, "Fine-tuning steps per stage");
  prune->add_option("--lr", r_lr, "Fine-tuning learning rate");
  prune->add_option("--resolution", r_resolution, "Accounting resolution, HxW");
  prune->add_option("--out", r_out, "Pruned model file")->required();
  prune->add_option("--log", r_log, "Stage logs as JSON");
  r_task.add(prune);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune on the synthetic task");
  std::string f_model, f_out, f_log, f_optimizer = "sgd";
  train::FinetuneConfig f_cfg;
  TaskFlags f_task;
  ft->add_option("--model", f_model, "Zoo name or model file")->required();
  ft->add_option("--steps", f_cfg.steps, "Optimizer steps");
  ft->add_option("--lr", f_cfg.learning_rate, "Learning rate");
  ft->add_option("--optimizer", f_optimizer, "sgd or sgd-momentum-0.9");
  ft->add_option("--batch-size", f_cfg.batch_size, "Samples per step");
  ft->add_option("--clip-norm", f_cfg.clip_norm, "Global gradient-norm clip (0 disables)");
  ft->add_option("--out", f_out, "Fine-tuned model file")->required();
  ft->add_option("--log", f_log, "Loss trace as JSON");
  f_task.add(ft);

  // quantize
  auto* qz = app.add_subcommand("quantize", "8-bit post-training static quantization");
  std::string q_model, q_out, q_scheme = "per-channel", q_resolution;
  Index q_samples = 8;
  TaskFlags q_task;
  qz->add_option("--model", q_model, "Zoo name or fp32 model file")->required();
  qz->add_option("--calib-samples", q_samples, "Calibration samples");
  qz->add_option("--scheme", q_scheme, "per-channel or per-tensor weight scales");
  qz->add_option("--resolution", q_resolution, "Accounting resolution, HxW");
  qz->add_option("--out", q_out, "Quantized model file")->required();
  q_task.add(qz);

  // report
  auto* rep = app.add_subcommand("report", "Parameter, FLOPs and size comparison");
  std::string b_model, o_model_path, rep_format = "structured", rep_resolution, rep_out;
  std::optional<double> rep_rate;
  rep->add_option("--baseline", b_model, "Baseline zoo name or model file")->required();
  rep->add_option("--optimized", o_model_path, "Optimized model file (default: baseline only)");
  rep->add_option("--global-rate", rep_rate, "Attach the reference row for this rate");
  rep->add_option("--resolution", rep_resolution, "Accounting resolution, HxW");
  rep->add_option("--format", rep_format, "text or structured");
  rep->add_option("--out", rep_out, "Write the report to a file");

  // ate
  auto* ate = app.add_subcommand("ate", "Absolute trajectory error of TUM trajectories");
  std::string a_est, a_gt, a_mode = "similarity";
  ate->add_option("estimate", a_est, "Estimated trajectory")->required();
  ate->add_option("groundtruth", a_gt, "Ground-truth trajectory")->required();
  ate->add_option("--mode", a_mode, "rigid (se3) or similarity (sim3)");

  // verify
  auto* ver = app.add_subcommand("verify", "Check a model file and its stored output digest");
  std::string v_path;
  ver->add_option("file", v_path, "Model file")->required();

  // build
  auto* bld = app.add_subcommand("build", "Write a zoo model to a file");
  std::string z_name, z_out;
  bld->add_option("--model", z_name, "Zoo name")->required();
  bld->add_option("--out", z_out, "Model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  const std::uint64_t model_seed = seed_opt->count() ? seed : 0;
  try {
    if (*pipe) {
      pipeline::PipelineConfig cfg;
      cfg.seed = model_seed;
      if (!p_config.empty()) cfg = usage([&] { return pipeline::config_from_json(report::read_json(p_config), cfg); });
      if (seed_opt->count()) cfg.seed = seed;
      cfg.threads = threads;
      if (o_model->count()) cfg.model = p_model;
      if (o_rate->count()) cfg.global_rate = p_rate;
      if (!p_schedule.empty()) cfg.schedule = parse_schedule(p_schedule);
      if (o_probe->count()) cfg.probe_rate = p_probe;
      if (!p_weighting.empty()) cfg.weighting = usage([&] { return pruning::weighting_from_string(p_weighting); });
      if (o_pmax->count()) cfg.p_max = p_pmax;
      if (o_steps->count()) cfg.finetune.steps = p_steps;
      if (o_lr->count()) cfg.finetune.learning_rate = p_lr;
      if (o_ft_seed->count()) cfg.finetune.seed = p_ft_seed;
      if (o_calib->count()) cfg.calib_samples = p_calib;
      if (o_calib_seed->count()) cfg.calib_seed = p_calib_seed;
      if (!p_scheme.empty()) cfg.weight_scheme = usage([&] { return quant::scheme_from_string(p_scheme); });
      if (!p_resolution.empty()) cfg.input_resolution = parse_resolution(p_resolution);
      if (!p_out.empty()) cfg.output_dir = p_out;
      if (!p_format.empty()) cfg.report_format = usage([&] { return pipeline::report_format_from_string(p_format); });
      cfg.task = p_task.apply(cfg.task);
      usage([&] {
        pipeline::check_config(cfg);
        return 0;
      });
      const auto result = pipeline::run_pipeline(cfg, &std::cerr);
      std::cout << pipeline::comparison_text(result.report);
      return 0;
    }

    if (*sens) {
      const GraphF g = pipeline::load_float_model(s_model, model_seed);
      const auto task = s_task.apply({});
      metrics::SyntheticEvaluator ev(task);
      const auto profile = pruning::analyze_sensitivity(g, s_probe, ev, {s_subtract, false, threads});
      std::cout << report::profile_table(profile);
      if (!s_out.empty()) report::write_json(s_out, report::to_json(profile));
      return 0;
    }

    if (*prune) {
      const GraphF g = pipeline::load_float_model(r_model, model_seed);
      pruning::PruneConfig pc;
      pc.schedule = parse_schedule(r_schedule);
      pc.probe_rate = r_probe;
      pc.allocation = {r_pmax, usage([&] { return pruning::weighting_from_string(r_weighting); })};
      pc.sensitivity = {false, true, threads};
      pc.finetune.steps = r_steps;
      pc.finetune.learning_rate = r_lr;
      pc.task = r_task.apply({});
      if (!r_resolution.empty()) pc.resolution = parse_resolution(r_resolution);
      metrics::SyntheticEvaluator ev(pc.task);
      const auto result = pruning::spaq_prune(g, r_rate, ev, pc);
      persistence::save(result.graph, r_out);
      json stages = json::array();
      for (const auto& s : result.stages) {
        stages.push_back({{"stage", report::to_json(s)}, {"profile", report::to_json(s.profile)},
                          {"plan", report::to_json(s.plan)}});
        std::printf("stage %zu: target %.4f, params %lld -> %lld, flops %lld -> %lld\n", s.index,
                    s.cumulative_target, static_cast<long long>(s.params_before),
                    static_cast<long long>(s.params_after), static_cast<long long>(s.flops_before),
                    static_cast<long long>(s.flops_after));
      }
      if (!r_log.empty()) report::write_json(r_log, {{"stages", stages}});
      return 0;
    }

    if (*ft) {
      const GraphF g = pipeline::load_float_model(f_model, model_seed);
      f_cfg.optimizer = usage([&] { return train::optimizer_from_string(f_optimizer); });
      if (seed_opt->count()) f_cfg.seed = seed;
      const auto result = train::finetune(g, f_task.apply({}), f_cfg);
      persistence::save(result.graph, f_out);
      if (!result.loss_trace.empty()) {
        std::printf("loss %.8g -> %.8g over %zu steps\n", result.loss_trace.front(), result.loss_trace.back(),
                    result.loss_trace.size());
      }
      if (!f_log.empty()) report::write_json(f_log, {{"loss_trace", result.loss_trace}});
      return 0;
    }

    if (*qz) {
      const GraphF g = pipeline::load_float_model(q_model, model_seed);
      train::SyntheticTask task = q_task.apply({});
      task.samples = q_samples;
      if (seed_opt->count() && !(q_task.seed_opt && q_task.seed_opt->count())) task.seed = seed;
      quant::QuantizeOptions qo;
      qo.weight_scheme = usage([&] { return quant::scheme_from_string(q_scheme); });
      if (!q_resolution.empty()) qo.resolution = parse_resolution(q_resolution);
      const auto result = quant::spaq_quantize(g, train::calibration_set(g, task), qo);
      persistence::save(result.graph, q_out, qo.save);
      for (const auto& w : result.calibration.warnings) std::cerr << "warning: " << w << '\n';
      std::printf("size %llu -> %llu bytes (%.2f%% reduction)\n",
                  static_cast<unsigned long long>(result.before.size_bytes),
                  static_cast<unsigned long long>(result.after.size_bytes), result.size_reduction.rounded);
      return 0;
    }

    if (*rep) {
      const Resolution res = rep_resolution.empty() ? accounting::kDefaultResolution : parse_resolution(rep_resolution);
      const auto format = usage([&] { return pipeline::report_format_from_string(rep_format); });
      auto cost = [&](const std::string& spec) {
        const auto m = pipeline::load_model(spec, model_seed);
        return std::visit([&](const auto& g) { return accounting::cost_report(g, res); }, m);
      };
      const auto base = cost(b_model);
      const auto opt = o_model_path.empty() ? base : cost(o_model_path);
      const json j = pipeline::comparison(base, opt, rep_rate);
      const std::string text = format == pipeline::ReportFormat::kText
                                   ? report::cost_table(opt) + pipeline::comparison_text(j)
                                   : j.dump(2) + "\n";
      if (rep_out.empty()) {
        std::cout << text;
      } else {
        write_text(rep_out, text);
      }
      return 0;
    }

    if (*ate) {
      const auto mode = usage([&] { return metrics::align_mode_from_string(a_mode); });
      const double rmse = metrics::ate_rmse(metrics::read_tum(a_est), metrics::read_tum(a_gt), mode);
      std::printf("%.6f\n", rmse);
      return 0;
    }

    if (*ver) {
      const auto r = persistence::verify(v_path);
      if (!r.has_digest) {
        std::printf("ok (no digest stored)\n");
        return 0;
      }
      std::printf("stored %016llx computed %016llx %s\n", static_cast<unsigned long long>(r.stored),
                  static_cast<unsigned long long>(r.computed), r.ok ? "ok" : "MISMATCH");
      return r.ok ? 0 : kExitStage;
    }

    if (*bld) {
      const GraphF g = usage([&] { return pipeline::load_float_model(z_name, model_seed); });
      const auto bytes = persistence::save(g, z_out);
      std::printf("wrote %llu bytes\n", static_cast<unsigned long long>(bytes));
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitUsage;
}
