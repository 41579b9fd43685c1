#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "spaq/accounting.hpp"
#include "spaq/pruning.hpp"

namespace spaq::report {

using json = nlohmann::json;

json to_json(const accounting::CostReport& report);
json to_json(const accounting::Reduction& reduction);
json to_json(const accounting::ReductionReport& report);
json to_json(const pruning::SensitivityProfile& profile);
json to_json(const pruning::PruningPlan& plan);
json to_json(const pruning::StageLog& stage);

pruning::SensitivityProfile profile_from_json(const json& j);
pruning::PruningPlan plan_from_json(const json& j);

/// Published optimization results for the three-module network.
struct PublishedReference {
  double global_rate = 0.0;
  double flops_baseline_b = 0.0;
  double flops_pruned_b = 0.0;
  double flops_reduction_pct = 0.0;
  double size_baseline_mb = 0.0;
  double size_reduced_mb = 0.0;
  double size_reduction_pct = 0.0;
};

/// Rows exist for global rates 0.10 and 0.20 only.
std::optional<PublishedReference> published_reference(double global_rate);
json to_json(const PublishedReference& ref);

std::string cost_table(const accounting::CostReport& report);
std::string profile_table(const pruning::SensitivityProfile& profile);

/// Pretty-printed, newline-terminated, written atomically.
void write_json(const std::filesystem::path& path, const json& j);
json read_json(const std::filesystem::path& path);

}  // namespace spaq::report
