#include "spaq/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace spaq::report {

json to_json(const accounting::CostReport& r) {
  json layers = json::array();
  for (const auto& l : r.per_layer) {
    layers.push_back({{"name", l.name}, {"kind", l.kind}, {"params", l.params}, {"flops", l.flops},
                      {"size_bytes", l.size_bytes}});
  }
  return {{"precision", accounting::to_string(r.precision)},
          {"input_resolution", {r.input_resolution.height, r.input_resolution.width}},
          {"flop_convention", r.convention == accounting::FlopConvention::kMac ? "mac" : "2*mac"},
          {"params_total", r.params_total},
          {"flops_total", r.flops_total},
          {"size_bytes", r.size_bytes},
          {"size_mib", accounting::to_mib(r.size_bytes)},
          {"per_layer", layers}};
}

json to_json(const accounting::Reduction& r) { return {{"raw", r.raw}, {"rounded", r.rounded}}; }

json to_json(const accounting::ReductionReport& r) {
  return {{"reduction_pct", to_json(r.params)},
          {"flops_reduction_pct", to_json(r.flops)},
          {"size_reduction_pct", to_json(r.size)}};
}

json to_json(const pruning::SensitivityProfile& p) {
  json units = json::array();
  double sum_s = 0.0, sum_f = 0.0;
  for (const auto& u : p.units) {
    units.push_back({{"id", u.id},
                     {"members", u.members},
                     {"channels", u.channels},
                     {"params", u.params},
                     {"probed_filters", u.probed_filters},
                     {"error", u.error},
                     {"sensitivity", u.sensitivity},
                     {"fraction", u.fraction}});
    sum_s += u.sensitivity;
    sum_f += u.fraction;
  }
  return {{"probe_rate", p.probe_rate},
          {"evaluator", p.evaluator_id},
          {"baseline_error", p.baseline_error},
          {"baseline_subtracted", p.baseline_subtracted},
          {"degenerate", p.degenerate},
          {"sum_sensitivity", sum_s},
          {"sum_fraction", sum_f},
          {"layers", units}};
}

json to_json(const pruning::PruningPlan& plan) {
  json layers = json::array();
  for (const auto& l : plan.layers) {
    layers.push_back({{"id", l.id},
                      {"members", l.members},
                      {"channels", l.channels},
                      {"params", l.params},
                      {"fraction", l.fraction},
                      {"removed", l.removed}});
  }
  return {{"global_rate", plan.global_rate},
          {"p_max", plan.p_max},
          {"weighting", pruning::to_string(plan.weighting)},
          {"uniform_fallback", plan.uniform_fallback},
          {"layers", layers}};
}

json to_json(const pruning::StageLog& s) {
  double first = 0.0, last = 0.0;
  if (!s.loss_trace.empty()) {
    first = s.loss_trace.front();
    last = s.loss_trace.back();
  }
  return {{"stage", s.index},
          {"cumulative_target", s.cumulative_target},
          {"incremental_rate", s.incremental_rate},
          {"probe_rate", s.probe_rate},
          {"allocation_rate", s.allocation_rate},
          {"params_before", s.params_before},
          {"params_after", s.params_after},
          {"flops_before", s.flops_before},
          {"flops_after", s.flops_after},
          {"finetune_steps", s.loss_trace.size()},
          {"loss_first", first},
          {"loss_last", last},
          {"loss_trace", s.loss_trace}};
}

namespace {

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) fail(ErrorCode::kParse, std::string("missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("key '") + key + "': " + e.what());
  }
}

}  // namespace

pruning::SensitivityProfile profile_from_json(const json& j) {
  pruning::SensitivityProfile p;
  p.probe_rate = field<double>(j, "probe_rate");
  p.evaluator_id = field<std::string>(j, "evaluator");
  p.baseline_error = field<double>(j, "baseline_error");
  p.baseline_subtracted = field<bool>(j, "baseline_subtracted");
  p.degenerate = field<bool>(j, "degenerate");
  for (const auto& u : field<json>(j, "layers")) {
    pruning::UnitSensitivity s;
    s.id = field<std::string>(u, "id");
    s.members = field<std::vector<std::string>>(u, "members");
    s.channels = field<Index>(u, "channels");
    s.params = field<Index>(u, "params");
    s.probed_filters = field<Index>(u, "probed_filters");
    s.error = field<double>(u, "error");
    s.sensitivity = field<double>(u, "sensitivity");
    s.fraction = field<double>(u, "fraction");
    p.units.push_back(std::move(s));
  }
  return p;
}

pruning::PruningPlan plan_from_json(const json& j) {
  pruning::PruningPlan plan;
  plan.global_rate = field<double>(j, "global_rate");
  plan.p_max = field<double>(j, "p_max");
  plan.weighting = pruning::weighting_from_string(field<std::string>(j, "weighting"));
  plan.uniform_fallback = field<bool>(j, "uniform_fallback");
  for (const auto& l : field<json>(j, "layers")) {
    pruning::LayerPlan lp;
    lp.id = field<std::string>(l, "id");
    lp.members = field<std::vector<std::string>>(l, "members");
    lp.channels = field<Index>(l, "channels");
    lp.params = field<Index>(l, "params");
    lp.fraction = field<double>(l, "fraction");
    lp.removed = field<std::vector<Index>>(l, "removed");
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

std::optional<PublishedReference> published_reference(double global_rate) {
  if (std::abs(global_rate - 0.10) < 1e-9) return PublishedReference{0.10, 4.64, 4.20, 9.44, 15.32, 3.63, 76.3};
  if (std::abs(global_rate - 0.20) < 1e-9) return PublishedReference{0.20, 4.64, 3.76, 18.90, 15.32, 3.25, 79.8};
  return std::nullopt;
}

json to_json(const PublishedReference& r) {
  return {{"global_rate", r.global_rate},
          {"flops_baseline_b", r.flops_baseline_b},
          {"flops_pruned_b", r.flops_pruned_b},
          {"flops_reduction_pct", r.flops_reduction_pct},
          {"size_baseline_mb", r.size_baseline_mb},
          {"size_reduced_mb", r.size_reduced_mb},
          {"size_reduction_pct", r.size_reduction_pct}};
}

std::string cost_table(const accounting::CostReport& r) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %-13s %12s %16s %12s\n", "layer", "kind", "params", "flops", "bytes");
  os << line;
  for (const auto& l : r.per_layer) {
    std::snprintf(line, sizeof line, "%-36s %-13s %12lld %16lld %12llu\n", l.name.c_str(), l.kind.c_str(),
                  static_cast<long long>(l.params), static_cast<long long>(l.flops),
                  static_cast<unsigned long long>(l.size_bytes));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-36s %-13s %12lld %16lld %12llu\n", "total", accounting::to_string(r.precision),
                static_cast<long long>(r.params_total), static_cast<long long>(r.flops_total),
                static_cast<unsigned long long>(r.size_bytes));
  os << line;
  std::snprintf(line, sizeof line, "params %.4f M, flops %.4f B at %lldx%lld, size %.4f MiB\n",
                static_cast<double>(r.params_total) / 1e6, static_cast<double>(r.flops_total) / 1e9,
                static_cast<long long>(r.input_resolution.height), static_cast<long long>(r.input_resolution.width),
                accounting::to_mib(r.size_bytes));
  os << line;
  return os.str();
}

std::string profile_table(const pruning::SensitivityProfile& p) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-32s %8s %10s %14s %12s %12s\n", "layer", "filters", "params", "E", "S", "F");
  os << line;
  double sum_s = 0.0, sum_f = 0.0;
  for (const auto& u : p.units) {
    std::snprintf(line, sizeof line, "%-32s %8lld %10lld %14.8g %12.8f %12.8f\n", u.id.c_str(),
                  static_cast<long long>(u.channels), static_cast<long long>(u.params), u.error, u.sensitivity,
                  u.fraction);
    os << line;
    sum_s += u.sensitivity;
    sum_f += u.fraction;
  }
  std::snprintf(line, sizeof line, "probe rate %.4f, baseline error %.8g, sum S = %.12f, sum F = %.12f\n",
                p.probe_rate, p.baseline_error, sum_s, sum_f);
  os << line;
  return os.str();
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
    f << j.dump(2) << '\n';
    if (!f) fail(ErrorCode::kIo, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot rename onto '" + path.string() + "': " + ec.message());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, path.string() + ": " + e.what());
  }
}

}  // namespace spaq::report
