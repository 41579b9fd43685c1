#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spaq/accounting.hpp"
#include "spaq/finetune.hpp"
#include "spaq/graph.hpp"
#include "spaq/metrics.hpp"

namespace spaq::pruning {

/// L1 norm of every output filter of a Conv2d (bias excluded).
struct SaliencyTable {
  std::string layer;
  std::vector<double> values;
};

SaliencyTable saliency(const GraphF& graph, const std::string& layer);

/// Indices of the `count` smallest values (ties to the lower index),
/// returned in ascending index order.
std::vector<Index> lowest(const std::vector<double>& values, Index count);

/// Where one channel of a value comes from: filter `channel` of coupling
/// group `group`, or a fixed source (group -1).
struct ChannelOrigin {
  int group = -1;
  Index channel = 0;
};

/// Convolutions whose output channels must be removed together because
/// their outputs are summed.
struct CouplingGroup {
  std::string id;  // first member in graph order
  std::vector<std::string> members;
  Index channels = 0;
  bool prunable = true;
  std::string reason;  // why not prunable
};

struct ChannelAnalysis {
  std::vector<CouplingGroup> groups;
  std::map<std::string, int> group_of;  // Conv2d id -> group index
  std::map<std::string, std::vector<ChannelOrigin>> origins;  // value -> per channel

  const CouplingGroup* find(const std::string& id) const;
};

/// Groups are not prunable when they are summed with a graph input or a GRU
/// state, feed a GRU hidden state, or reach a graph output directly.
ChannelAnalysis analyze_channels(const GraphF& graph);

/// A prunable coupling group with its parameter count (member convs).
struct PrunableUnit {
  std::string id;
  std::vector<std::string> members;
  Index channels = 0;
  Index params = 0;
};

std::vector<PrunableUnit> prunable_units(const GraphF& graph);

/// Summed member saliency per channel.
std::vector<double> unit_saliency(const GraphF& graph, const PrunableUnit& unit);

/// Filters removed for a rate: round-half-away(x * C), at most C - 1.
Index filters_for_rate(double rate, Index channels);

struct UnitSensitivity {
  std::string id;
  std::vector<std::string> members;
  Index channels = 0;
  Index params = 0;
  Index probed_filters = 0;
  double error = 0.0;        // E
  double sensitivity = 0.0;  // S = E / sum E
  double fraction = 0.0;     // F = params / sum params
};

struct SensitivityProfile {
  double probe_rate = 0.0;
  std::string evaluator_id;
  double baseline_error = 0.0;
  bool baseline_subtracted = false;
  bool degenerate = false;  // sum E == 0
  std::vector<UnitSensitivity> units;
};

struct SensitivityOptions {
  /// E = max(0, probed error - baseline error) instead of the absolute error.
  bool subtract_baseline = false;
  /// Return a degenerate profile instead of failing when sum E == 0.
  bool allow_degenerate = false;
  unsigned threads = 1;
};

/// Error of the graph with `x` of the unit's least salient filters removed.
double probe_layer(const GraphF& graph, const std::string& unit, double x, const metrics::Evaluator& evaluator);

SensitivityProfile analyze_sensitivity(const GraphF& graph, double x, const metrics::Evaluator& evaluator,
                                       const SensitivityOptions& options = {});

enum class Weighting { kDirect, kInverse };
const char* to_string(Weighting weighting);
Weighting weighting_from_string(const std::string& name);

struct AllocationOptions {
  double p_max = 0.8;
  Weighting weighting = Weighting::kDirect;
};

/// Per-unit pruning fractions. `params` are unit sizes, S the relative
/// sensitivities. Weights w = F*S (direct) or F*(1-S) (inverse); the
/// pruned-parameter budget P_g * sum(params) is shared in proportion to w,
/// units above p_max are clamped and the excess redistributed. Units with
/// zero weight only receive budget once every weighted unit is clamped.
std::vector<double> allocate_fractions(const std::vector<double>& params, const std::vector<double>& S,
                                       double global_rate, const AllocationOptions& options = {});

struct LayerPlan {
  std::string id;
  std::vector<std::string> members;
  Index channels = 0;
  Index params = 0;
  double fraction = 0.0;
  std::vector<Index> removed;  // ascending filter indices
};

struct PruningPlan {
  double global_rate = 0.0;
  double p_max = 0.8;
  Weighting weighting = Weighting::kDirect;
  bool uniform_fallback = false;
  std::vector<LayerPlan> layers;
};

/// Fractions only; see select_filters for concrete indices. A degenerate
/// profile falls back to p = P_g for every unit.
PruningPlan allocate_budget(const SensitivityProfile& profile, double global_rate,
                            const AllocationOptions& options = {});

/// Fills each layer's removed set with its lowest-saliency filters.
void select_filters(const GraphF& graph, PruningPlan& plan);

/// Structural surgery: removes filters, consumer input slices and norm
/// channels. Graph outputs keep their channel counts.
GraphF apply_plan(const GraphF& graph, const PruningPlan& plan);

struct StageLog {
  std::size_t index = 0;
  double cumulative_target = 0.0;
  double incremental_rate = 0.0;
  double probe_rate = 0.0;
  double allocation_rate = 0.0;  // rate handed to allocate_budget
  SensitivityProfile profile;
  PruningPlan plan;
  Index params_before = 0;
  Index params_after = 0;
  Index flops_before = 0;
  Index flops_after = 0;
  std::vector<double> loss_trace;
};

struct PruneConfig {
  /// Increasing cumulative rates ending at P_g; empty selects [P_g/2, P_g].
  std::vector<double> schedule;
  /// Probe rate; defaults to each interval's incremental rate.
  std::optional<double> probe_rate;
  AllocationOptions allocation;
  SensitivityOptions sensitivity{false, true, 1};
  train::FinetuneConfig finetune;
  train::SyntheticTask task;
  Resolution resolution = accounting::kDefaultResolution;
  /// Called after each stage with its log and the fine-tuned graph.
  std::function<void(const StageLog&, const GraphF&)> on_stage;
};

std::vector<double> default_schedule(double global_rate);

struct PruneResult {
  GraphF graph;
  std::vector<StageLog> stages;
};

/// Per interval: sensitivity analysis, allocation, surgery, fine-tuning.
/// Allocation rates are chosen so the realized total parameter count after
/// each stage is (1 - c_k) times the original.
PruneResult spaq_prune(const GraphF& graph, double global_rate, const metrics::Evaluator& evaluator,
                       const PruneConfig& config);

}  // namespace spaq::pruning
