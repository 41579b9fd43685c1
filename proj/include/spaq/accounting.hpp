#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spaq/graph.hpp"
#include "spaq/persistence.hpp"
#include "spaq/quant_types.hpp"

namespace spaq::accounting {

enum class PrecisionState { kFp32, kInt8 };
const char* to_string(PrecisionState state);

/// 2 FLOPs per multiply-accumulate by default; kMac counts one.
enum class FlopConvention { kTwoPerMac, kMac };

inline constexpr Resolution kDefaultResolution{384, 512};
/// Name of the per-layer entry holding file-format overhead.
inline constexpr const char* kFormatEntry = "<format>";

struct LayerCost {
  std::string name;
  std::string kind;
  Index params = 0;
  Index flops = 0;
  std::uint64_t size_bytes = 0;
};

struct CostReport {
  std::vector<LayerCost> per_layer;
  Index params_total = 0;
  Index flops_total = 0;
  std::uint64_t size_bytes = 0;
  PrecisionState precision = PrecisionState::kFp32;
  Resolution input_resolution = kDefaultResolution;
  FlopConvention convention = FlopConvention::kTwoPerMac;

  const LayerCost* find(const std::string& name) const;
};

/// Parameters implied by a node's attributes.
template <typename Scalar>
Index node_params(const LayerNode<Scalar>& n) {
  Index total = 0;
  for (const auto& [k, shape] : expected_param_shapes(n)) total += shape_numel(shape);
  return total;
}

Index core_flops(const ConvAttrs& a, Index out_h, Index out_w, FlopConvention convention);

CostReport count_params(const GraphF& graph);
CostReport count_flops(const GraphF& graph, Resolution resolution = kDefaultResolution,
                       FlopConvention convention = FlopConvention::kTwoPerMac);

/// Exact on-disk byte count (equals what persistence::save writes).
std::uint64_t serialized_size(const GraphF& graph, const persistence::SaveOptions& options = {});
std::uint64_t serialized_size(const quant::QuantizedGraph& graph,
                              const persistence::SaveOptions& options = {});

/// Params, FLOPs and size together. Totals equal the sum of `per_layer`.
CostReport cost_report(const GraphF& graph, Resolution resolution = kDefaultResolution,
                       const persistence::SaveOptions& options = {},
                       FlopConvention convention = FlopConvention::kTwoPerMac);
CostReport cost_report(const quant::QuantizedGraph& graph, Resolution resolution = kDefaultResolution,
                       const persistence::SaveOptions& options = {},
                       FlopConvention convention = FlopConvention::kTwoPerMac);

struct Reduction {
  double raw = 0.0;      // 100 * (1 - optimized / baseline)
  double rounded = 0.0;  // to 2 decimal places
};

struct ReductionReport {
  Reduction params;
  Reduction flops;
  Reduction size;
};

double round2(double value);
Reduction reduction(double baseline, double optimized);
ReductionReport reduction_report(const CostReport& baseline, const CostReport& optimized);

double to_mib(std::uint64_t bytes);

/// Parameters in conv cores versus all parameters.
struct ConvShare {
  Index conv_params = 0;
  Index total_params = 0;
  double share_pct() const {
    return total_params ? 100.0 * static_cast<double>(conv_params) / static_cast<double>(total_params)
                        : 0.0;
  }
};
ConvShare conv_share(const GraphF& graph);

}  // namespace spaq::accounting
