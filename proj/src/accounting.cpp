#include "spaq/accounting.hpp"

#include <cmath>
#include <map>

namespace spaq::accounting {

const char* to_string(PrecisionState state) {
  return state == PrecisionState::kInt8 ? "int8" : "fp32";
}

const LayerCost* CostReport::find(const std::string& name) const {
  for (const auto& l : per_layer) {
    if (l.name == name) return &l;
  }
  return nullptr;
}

Index core_flops(const ConvAttrs& a, Index out_h, Index out_w, FlopConvention convention) {
  const Index outputs = a.out_channels * out_h * out_w;
  const Index macs = a.kernel_h * a.kernel_w * a.in_channels * outputs;
  if (convention == FlopConvention::kMac) return macs;
  return 2 * macs + (a.bias ? outputs : 0);
}

namespace {

std::vector<LayerCost> layer_entries(const GraphF& graph) {
  std::vector<LayerCost> out;
  out.reserve(graph.nodes.size() + 1);
  for (const auto& n : graph.nodes) {
    out.push_back({n.id, to_string(n.kind), node_params(n), 0, 0});
  }
  return out;
}

void fill_flops(const GraphF& graph, Resolution res, FlopConvention convention,
                std::vector<LayerCost>& entries) {
  const auto shapes = infer_shapes(graph, res);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const auto& n = graph.nodes[i];
    const auto& s = shapes.at(n.id);
    for (const auto& core : conv_cores_of(n)) {
      entries[i].flops += core_flops(core.geometry, s.height, s.width, convention);
    }
  }
}

void fill_size(const persistence::FileLayout& lay, std::vector<LayerCost>& entries) {
  std::uint64_t attributed = 0;
  for (auto& e : entries) {
    auto it = lay.per_node.find(e.name);
    if (it != lay.per_node.end()) {
      e.size_bytes = it->second;
      attributed += it->second;
    }
  }
  entries.push_back({kFormatEntry, "Format", 0, 0, lay.total() - attributed});
}

void sum_totals(CostReport& r) {
  r.params_total = 0;
  r.flops_total = 0;
  r.size_bytes = 0;
  for (const auto& l : r.per_layer) {
    r.params_total += l.params;
    r.flops_total += l.flops;
    r.size_bytes += l.size_bytes;
  }
}

CostReport build_report(const GraphF& topo, const persistence::FileLayout& lay, Resolution res,
                        FlopConvention convention, PrecisionState precision) {
  CostReport r;
  r.precision = precision;
  r.input_resolution = res;
  r.convention = convention;
  r.per_layer = layer_entries(topo);
  fill_flops(topo, res, convention, r.per_layer);
  fill_size(lay, r.per_layer);
  sum_totals(r);
  return r;
}

}  // namespace

CostReport count_params(const GraphF& graph) {
  validate(graph);
  CostReport r;
  r.per_layer = layer_entries(graph);
  sum_totals(r);
  return r;
}

CostReport count_flops(const GraphF& graph, Resolution resolution, FlopConvention convention) {
  CostReport r;
  r.input_resolution = resolution;
  r.convention = convention;
  r.per_layer = layer_entries(graph);
  for (auto& l : r.per_layer) l.params = 0;
  fill_flops(graph, resolution, convention, r.per_layer);
  sum_totals(r);
  return r;
}

std::uint64_t serialized_size(const GraphF& graph, const persistence::SaveOptions& options) {
  return persistence::layout(graph, options).total();
}

std::uint64_t serialized_size(const quant::QuantizedGraph& graph,
                              const persistence::SaveOptions& options) {
  return persistence::layout(graph, options).total();
}

CostReport cost_report(const GraphF& graph, Resolution resolution,
                       const persistence::SaveOptions& options, FlopConvention convention) {
  validate(graph);
  return build_report(graph, persistence::layout(graph, options), resolution, convention,
                      PrecisionState::kFp32);
}

CostReport cost_report(const quant::QuantizedGraph& graph, Resolution resolution,
                       const persistence::SaveOptions& options, FlopConvention convention) {
  return build_report(graph.graph, persistence::layout(graph, options), resolution, convention,
                      PrecisionState::kInt8);
}

double round2(double value) { return std::round(value * 100.0) / 100.0; }

Reduction reduction(double baseline, double optimized) {
  if (baseline <= 0.0) return {};
  const double raw = 100.0 * (1.0 - optimized / baseline);
  return {raw, round2(raw)};
}

ReductionReport reduction_report(const CostReport& baseline, const CostReport& optimized) {
  if (!(baseline.input_resolution == optimized.input_resolution)) {
    fail(ErrorCode::kInvalidArgument, "reports were computed at different input resolutions");
  }
  if (baseline.convention != optimized.convention) {
    fail(ErrorCode::kInvalidArgument, "reports use different FLOP conventions");
  }
  ReductionReport r;
  r.params = reduction(static_cast<double>(baseline.params_total),
                       static_cast<double>(optimized.params_total));
  r.flops = reduction(static_cast<double>(baseline.flops_total),
                      static_cast<double>(optimized.flops_total));
  r.size = reduction(static_cast<double>(baseline.size_bytes), static_cast<double>(optimized.size_bytes));
  return r;
}

double to_mib(std::uint64_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

ConvShare conv_share(const GraphF& graph) {
  ConvShare s;
  for (const auto& n : graph.nodes) {
    const Index p = node_params(n);
    s.total_params += p;
    if (n.kind == LayerKind::kConv2d || n.kind == LayerKind::kConvGRUCell) s.conv_params += p;
  }
  return s;
}

}  // namespace spaq::accounting
