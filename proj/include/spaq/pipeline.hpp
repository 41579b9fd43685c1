#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spaq/persistence.hpp"
#include "spaq/pruning.hpp"
#include "spaq/quantize.hpp"

namespace spaq::pipeline {

using json = nlohmann::json;

enum class ReportFormat { kText, kStructured };
const char* to_string(ReportFormat format);
ReportFormat report_format_from_string(const std::string& name);

struct PipelineConfig {
  std::string model = "droid";  // zoo name or model file
  double global_rate = 0.2;
  std::vector<double> schedule;  // empty: [P_g/2, P_g]
  std::optional<double> probe_rate;
  pruning::Weighting weighting = pruning::Weighting::kDirect;
  double p_max = 0.8;
  bool subtract_baseline = false;
  train::FinetuneConfig finetune{20, 1e-3, train::Optimizer::kSgd, 1, 0, 0.0};
  Index calib_samples = 8;
  std::uint64_t calib_seed = 1;
  quant::Scheme weight_scheme = quant::Scheme::kSymmetricPerChannel;
  train::SyntheticTask task;
  Resolution input_resolution = accounting::kDefaultResolution;
  std::filesystem::path output_dir = "spaq_out";
  ReportFormat report_format = ReportFormat::kStructured;
  std::uint64_t seed = 0;  // model initialization
  unsigned threads = 1;
};

json to_json(const PipelineConfig& cfg);
/// Keys present in `j` override the corresponding fields of `base`.
PipelineConfig config_from_json(const json& j, PipelineConfig base = {});
void check_config(const PipelineConfig& cfg);

/// FNV-1a of the canonical configuration, excluding the output directory
/// and thread count, as 16 hex digits.
std::string config_hash(const PipelineConfig& cfg);

/// Zoo name or path to a model file.
persistence::Model load_model(const std::string& spec, std::uint64_t seed = 0);
GraphF load_float_model(const std::string& spec, std::uint64_t seed = 0);

/// Totals without per-layer rows.
json summary(const accounting::CostReport& report);

/// Baseline-vs-optimized comparison with reduction percentages and, for
/// P_g in {0.10, 0.20}, the published reference row.
json comparison(const accounting::CostReport& baseline, const accounting::CostReport& optimized,
                std::optional<double> global_rate = std::nullopt);

std::string comparison_text(const json& report);

struct PipelineResult {
  json report;
  std::string config_hash;
  std::vector<std::filesystem::path> artifacts;
};

/// Sensitivity, pruning with fine-tuning, quantization and reporting.
/// Progress lines go to `log` when given.
PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);

}  // namespace spaq::pipeline
