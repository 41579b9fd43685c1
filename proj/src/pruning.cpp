#include "spaq/pruning.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

namespace spaq::pruning {

SaliencyTable saliency(const GraphF& graph, const std::string& layer) {
  const auto* n = graph.find(layer);
  if (!n) fail(ErrorCode::kInvalidArgument, "no layer '" + layer + "'");
  if (n->kind != LayerKind::kConv2d) {
    fail(ErrorCode::kInvalidArgument, "layer '" + layer + "' is " + to_string(n->kind) + ", not Conv2d");
  }
  const auto& w = n->param("weight");
  const Index cout = w.dim(0);
  const auto m = w.matrix(cout, w.size() / cout);
  SaliencyTable t{layer, std::vector<double>(static_cast<std::size_t>(cout))};
  for (Index c = 0; c < cout; ++c) t.values[static_cast<std::size_t>(c)] = m.row(c).cast<double>().cwiseAbs().sum();
  return t;
}

std::vector<Index> lowest(const std::vector<double>& values, Index count) {
  std::vector<Index> order(values.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return values[static_cast<std::size_t>(a)] < values[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(std::clamp<Index>(count, 0, static_cast<Index>(values.size()))));
  std::sort(order.begin(), order.end());
  return order;
}

const CouplingGroup* ChannelAnalysis::find(const std::string& id) const {
  for (const auto& g : groups) {
    if (g.id == id) return &g;
  }
  return nullptr;
}

namespace {

struct Source {
  std::string owner;
  Index channels = 0;
  bool fixed = false;
  std::string bad;
};

struct UnionFind {
  std::vector<int> parent;
  int add() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int root(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void join(int a, int b) {
    a = root(a);
    b = root(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

using RawOrigin = std::pair<int, Index>;  // (source, channel)

}  // namespace

ChannelAnalysis analyze_channels(const GraphF& graph) {
  validate(graph, false);
  std::vector<Source> sources;
  UnionFind uf;
  std::map<std::string, std::vector<RawOrigin>> raw;
  std::map<std::string, int> conv_source;

  auto new_source = [&](const std::string& owner, Index channels, bool fixed) {
    sources.push_back({owner, channels, fixed, ""});
    return uf.add();
  };
  auto fresh = [&](int src, Index channels) {
    std::vector<RawOrigin> o(static_cast<std::size_t>(channels));
    for (Index k = 0; k < channels; ++k) o[static_cast<std::size_t>(k)] = {src, k};
    return o;
  };
  auto mark = [&](const std::vector<RawOrigin>& origins, const std::string& why) {
    for (const auto& [src, ch] : origins) {
      if (sources[static_cast<std::size_t>(src)].bad.empty()) sources[static_cast<std::size_t>(src)].bad = why;
    }
  };

  for (const auto& in : graph.inputs) raw[in.name] = fresh(new_source(in.name, in.channels, true), in.channels);
  for (const auto& n : graph.nodes) {
    switch (n.kind) {
      case LayerKind::kConv2d: {
        const int s = new_source(n.id, n.conv().out_channels, false);
        conv_source[n.id] = s;
        raw[n.id] = fresh(s, n.conv().out_channels);
        break;
      }
      case LayerKind::kConvGRUCell: {
        mark(raw.at(n.inputs[0]), "feeds a GRU hidden state");
        raw[n.id] = fresh(new_source(n.id, n.gru().hidden, true), n.gru().hidden);
        break;
      }
      case LayerKind::kAdd: {
        const auto& first = raw.at(n.inputs[0]);
        for (std::size_t i = 1; i < n.inputs.size(); ++i) {
          const auto& other = raw.at(n.inputs[i]);
          for (std::size_t k = 0; k < first.size(); ++k) {
            const auto [a, ca] = first[k];
            const auto [b, cb] = other[k];
            uf.join(a, b);
            if (ca != cb || sources[static_cast<std::size_t>(a)].channels != sources[static_cast<std::size_t>(b)].channels) {
              mark({first[k], other[k]}, "summed with misaligned channels");
            }
          }
        }
        raw[n.id] = first;
        break;
      }
      case LayerKind::kConcat: {
        std::vector<RawOrigin> o;
        for (const auto& src : n.inputs) {
          const auto& part = raw.at(src);
          o.insert(o.end(), part.begin(), part.end());
        }
        raw[n.id] = std::move(o);
        break;
      }
      default:
        raw[n.id] = raw.at(n.inputs[0]);
        break;
    }
  }
  for (const auto& o : graph.outputs) mark(raw.at(o), "reaches a graph output");

  ChannelAnalysis a;
  std::map<int, int> group_of_root;
  for (const auto& n : graph.nodes) {
    if (n.kind != LayerKind::kConv2d) continue;
    const int r = uf.root(conv_source.at(n.id));
    auto [it, inserted] = group_of_root.try_emplace(r, static_cast<int>(a.groups.size()));
    if (inserted) {
      CouplingGroup g;
      g.id = n.id;
      g.channels = n.conv().out_channels;
      a.groups.push_back(g);
    }
    a.groups[static_cast<std::size_t>(it->second)].members.push_back(n.id);
    a.group_of[n.id] = it->second;
  }
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const int r = uf.root(static_cast<int>(s));
    auto it = group_of_root.find(r);
    if (it == group_of_root.end()) continue;
    auto& g = a.groups[static_cast<std::size_t>(it->second)];
    const auto& src = sources[s];
    std::string why = src.fixed ? "summed with a graph input or GRU state" : src.bad;
    if (!why.empty() && g.prunable) {
      g.prunable = false;
      g.reason = src.owner + ": " + why;
    }
  }
  for (const auto& [value, origins] : raw) {
    std::vector<ChannelOrigin> out(origins.size());
    for (std::size_t k = 0; k < origins.size(); ++k) {
      auto it = group_of_root.find(uf.root(origins[k].first));
      out[k] = {it == group_of_root.end() ? -1 : it->second, origins[k].second};
    }
    a.origins[value] = std::move(out);
  }
  return a;
}

std::vector<PrunableUnit> prunable_units(const GraphF& graph) {
  const auto a = analyze_channels(graph);
  std::vector<PrunableUnit> units;
  for (const auto& g : a.groups) {
    if (!g.prunable) continue;
    PrunableUnit u{g.id, g.members, g.channels, 0};
    for (const auto& m : g.members) u.params += accounting::node_params(graph.node(m));
    units.push_back(std::move(u));
  }
  return units;
}

std::vector<double> unit_saliency(const GraphF& graph, const PrunableUnit& unit) {
  std::vector<double> total(static_cast<std::size_t>(unit.channels), 0.0);
  for (const auto& m : unit.members) {
    const auto t = saliency(graph, m);
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += t.values[k];
  }
  return total;
}

Index filters_for_rate(double rate, Index channels) {
  const auto n = static_cast<Index>(std::round(rate * static_cast<double>(channels)));
  return std::clamp<Index>(n, 0, channels - 1);
}

// ---------------------------------------------------------------------------
// Surgery

namespace {

using Masks = std::map<std::string, std::vector<bool>>;

/// Keep masks per value for a plan; validates the plan against the analysis.
Masks keep_masks(const ChannelAnalysis& a, const PruningPlan& plan) {
  std::map<int, std::set<Index>> removed;
  for (const auto& l : plan.layers) {
    const auto* g = a.find(l.id);
    if (!g) fail(ErrorCode::kInvalidArgument, "plan names unknown layer group '" + l.id + "'");
    if (!g->prunable) fail(ErrorCode::kInvalidArgument, "layer group '" + l.id + "' is not prunable (" + g->reason + ")");
    const int gi = a.group_of.at(g->id);
    auto& set = removed[gi];
    for (Index k : l.removed) {
      if (k < 0 || k >= g->channels) {
        fail(ErrorCode::kInvalidArgument, "filter index " + std::to_string(k) + " out of range for '" + l.id + "'");
      }
      set.insert(k);
    }
    if (static_cast<Index>(set.size()) >= g->channels) {
      fail(ErrorCode::kInvalidArgument, "plan would remove every filter of '" + l.id + "'");
    }
  }
  Masks masks;
  for (const auto& [value, origins] : a.origins) {
    std::vector<bool> keep(origins.size(), true);
    for (std::size_t k = 0; k < origins.size(); ++k) {
      const auto& o = origins[k];
      if (o.group < 0) continue;
      auto it = removed.find(o.group);
      if (it != removed.end() && it->second.count(o.channel)) keep[k] = false;
    }
    masks[value] = std::move(keep);
  }
  return masks;
}

Index kept(const std::vector<bool>& mask) { return static_cast<Index>(std::count(mask.begin(), mask.end(), true)); }

std::vector<Index> kept_indices(const std::vector<bool>& mask) {
  std::vector<Index> idx;
  for (std::size_t k = 0; k < mask.size(); ++k) {
    if (mask[k]) idx.push_back(static_cast<Index>(k));
  }
  return idx;
}

/// Selects rows (axis 0) and, for rank-4 tensors, columns (axis 1).
TensorF select(const TensorF& t, const std::vector<Index>& rows, const std::vector<Index>* cols) {
  Shape shape = t.shape();
  shape[0] = static_cast<Index>(rows.size());
  if (cols) shape[1] = static_cast<Index>(cols->size());
  TensorF out(shape);
  if (t.rank() == 1) {
    for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Index>(i)] = t[rows[i]];
    return out;
  }
  const Index in_c = t.dim(1), spatial = t.size() / (t.dim(0) * t.dim(1));
  const Index out_c = shape[1];
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Index c = 0; c < out_c; ++c) {
      const Index src_c = cols ? (*cols)[static_cast<std::size_t>(c)] : c;
      const float* src = t.data() + (rows[r] * in_c + src_c) * spatial;
      float* dst = out.data() + (static_cast<Index>(r) * out_c + c) * spatial;
      std::copy(src, src + spatial, dst);
    }
  }
  return out;
}

Index params_after(const GraphF& graph, const Masks& masks) {
  Index total = 0;
  for (const auto& n : graph.nodes) {
    switch (n.kind) {
      case LayerKind::kConv2d: {
        const auto& c = n.conv();
        const Index out = kept(masks.at(n.id)), in = kept(masks.at(n.inputs[0]));
        total += out * in * c.kernel_h * c.kernel_w + (c.bias ? out : 0);
        break;
      }
      case LayerKind::kInstanceNorm:
        total += n.norm().affine ? 2 * kept(masks.at(n.id)) : 0;
        break;
      case LayerKind::kConvGRUCell: {
        const auto& g = n.gru();
        const Index x = kept(masks.at(n.inputs[1]));
        total += 3 * (g.hidden * (g.hidden + x) * g.kernel * g.kernel + g.hidden);
        break;
      }
      default:
        break;
    }
  }
  return total;
}

GraphF surgery(const GraphF& graph, const Masks& masks) {
  GraphF out = graph;
  for (auto& n : out.nodes) {
    switch (n.kind) {
      case LayerKind::kConv2d: {
        const auto rows = kept_indices(masks.at(n.id));
        const auto cols = kept_indices(masks.at(n.inputs[0]));
        auto& c = n.conv();
        n.params["weight"] = select(n.params.at("weight"), rows, &cols);
        if (c.bias) n.params["bias"] = select(n.params.at("bias"), rows, nullptr);
        c.out_channels = static_cast<Index>(rows.size());
        c.in_channels = static_cast<Index>(cols.size());
        break;
      }
      case LayerKind::kInstanceNorm: {
        const auto rows = kept_indices(masks.at(n.id));
        if (n.norm().affine) {
          n.params["gamma"] = select(n.params.at("gamma"), rows, nullptr);
          n.params["beta"] = select(n.params.at("beta"), rows, nullptr);
        }
        n.norm().channels = static_cast<Index>(rows.size());
        break;
      }
      case LayerKind::kConvGRUCell: {
        auto& g = n.gru();
        if (kept(masks.at(n.inputs[0])) != g.hidden) {
          fail(ErrorCode::kInvalidArgument, "plan would change the hidden state of '" + n.id + "'");
        }
        std::vector<Index> rows(static_cast<std::size_t>(g.hidden));
        std::iota(rows.begin(), rows.end(), Index{0});
        std::vector<Index> cols = rows;
        for (Index k : kept_indices(masks.at(n.inputs[1]))) cols.push_back(g.hidden + k);
        for (const auto& w : gru_weight_names()) n.params[w] = select(n.params.at(w), rows, &cols);
        g.input = static_cast<Index>(cols.size()) - g.hidden;
        break;
      }
      default:
        break;
    }
  }
  for (const auto& o : out.outputs) {
    if (kept(masks.at(o)) != static_cast<Index>(masks.at(o).size())) {
      fail(ErrorCode::kInvalidArgument, "plan would change graph output '" + o + "'");
    }
  }
  validate(out);
  return out;
}

}  // namespace

GraphF apply_plan(const GraphF& graph, const PruningPlan& plan) {
  validate(graph);
  const auto a = analyze_channels(graph);
  return surgery(graph, keep_masks(a, plan));
}

// ---------------------------------------------------------------------------
// Sensitivity

double probe_layer(const GraphF& graph, const std::string& unit, double x, const metrics::Evaluator& evaluator) {
  if (!(x > 0.0 && x < 1.0)) fail(ErrorCode::kInvalidArgument, "probe rate must lie in (0, 1)");
  const auto units = prunable_units(graph);
  auto it = std::find_if(units.begin(), units.end(), [&](const auto& u) { return u.id == unit; });
  if (it == units.end()) fail(ErrorCode::kInvalidArgument, "layer '" + unit + "' is not prunable");
  const Index n = filters_for_rate(x, it->channels);
  try {
    if (n == 0) return evaluator.evaluate(graph);
    PruningPlan plan;
    plan.layers.push_back({it->id, it->members, it->channels, it->params, x, lowest(unit_saliency(graph, *it), n)});
    return evaluator.evaluate(apply_plan(graph, plan));
  } catch (const Error& e) {
    fail(e.code(), "probing '" + unit + "': " + e.what());
  }
}

SensitivityProfile analyze_sensitivity(const GraphF& graph, double x, const metrics::Evaluator& evaluator,
                                       const SensitivityOptions& options) {
  if (!(x > 0.0 && x < 1.0)) fail(ErrorCode::kInvalidArgument, "probe rate must lie in (0, 1)");
  const auto units = prunable_units(graph);
  if (units.empty()) fail(ErrorCode::kInvalidArgument, "graph '" + graph.name + "' has no prunable layer");

  SensitivityProfile p;
  p.probe_rate = x;
  p.evaluator_id = evaluator.id();
  p.baseline_subtracted = options.subtract_baseline;
  p.baseline_error = evaluator.evaluate(graph);

  std::vector<double> errors(units.size());
  auto probe = [&](std::size_t i) { errors[i] = probe_layer(graph, units[i].id, x, evaluator); };
  const unsigned threads = evaluator.parallel_safe() ? std::max(1u, options.threads) : 1u;
  if (threads <= 1 || units.size() <= 1) {
    for (std::size_t i = 0; i < units.size(); ++i) probe(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> failures(units.size());
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(threads, units.size()); ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < units.size();) {
          try {
            probe(i);
          } catch (...) {
            failures[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }

  double total_error = 0.0, total_params = 0.0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    double e = errors[i];
    if (!(e >= 0.0) || !std::isfinite(e)) {
      fail(ErrorCode::kInvalidArgument, "evaluator returned invalid error for '" + units[i].id + "'");
    }
    if (options.subtract_baseline) e = std::max(0.0, e - p.baseline_error);
    errors[i] = e;
    total_error += e;
    total_params += static_cast<double>(units[i].params);
  }
  if (total_error <= 0.0) {
    if (!options.allow_degenerate) {
      fail(ErrorCode::kDegenerateSensitivity, "every probe induced zero error");
    }
    p.degenerate = true;
  }
  for (std::size_t i = 0; i < units.size(); ++i) {
    UnitSensitivity u;
    u.id = units[i].id;
    u.members = units[i].members;
    u.channels = units[i].channels;
    u.params = units[i].params;
    u.probed_filters = filters_for_rate(x, u.channels);
    u.error = errors[i];
    u.sensitivity = p.degenerate ? 0.0 : errors[i] / total_error;
    u.fraction = static_cast<double>(u.params) / total_params;
    p.units.push_back(std::move(u));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Allocation

const char* to_string(Weighting weighting) { return weighting == Weighting::kInverse ? "inverse" : "direct"; }

Weighting weighting_from_string(const std::string& name) {
  if (name == "direct") return Weighting::kDirect;
  if (name == "inverse") return Weighting::kInverse;
  fail(ErrorCode::kInvalidArgument, "unknown weighting '" + name + "'");
}

std::vector<double> allocate_fractions(const std::vector<double>& params, const std::vector<double>& S,
                                       double global_rate, const AllocationOptions& options) {
  const std::size_t n = params.size();
  if (n == 0 || S.size() != n) fail(ErrorCode::kInvalidArgument, "allocation needs matching, non-empty inputs");
  if (!(global_rate >= 0.0 && global_rate < 1.0)) fail(ErrorCode::kInvalidArgument, "global rate must lie in [0, 1)");
  if (!(options.p_max > 0.0 && options.p_max <= 1.0)) fail(ErrorCode::kInvalidArgument, "p_max must lie in (0, 1]");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(params[i] > 0.0)) fail(ErrorCode::kInvalidArgument, "unit sizes must be positive");
    if (!(S[i] >= 0.0)) fail(ErrorCode::kInvalidArgument, "sensitivities must be non-negative");
    total += params[i];
  }
  const double budget = global_rate * total;
  if (budget > options.p_max * total * (1.0 + 1e-12)) {
    fail(ErrorCode::kInfeasibleBudget, "budget exceeds p_max for every layer");
  }
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = params[i] / total;
    w[i] = options.weighting == Weighting::kDirect ? f * S[i] : f * std::max(0.0, 1.0 - S[i]);
  }

  std::vector<double> p(n, 0.0);
  std::vector<bool> clamped(n, false);
  while (true) {
    double remaining = budget, weight_sum = 0.0, size_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (clamped[i]) {
        remaining -= options.p_max * params[i];
      } else {
        weight_sum += w[i];
        size_sum += params[i];
      }
    }
    remaining = std::max(0.0, remaining);
    if (size_sum == 0.0) break;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      if (clamped[i]) continue;
      p[i] = weight_sum > 0.0 ? remaining * (w[i] / weight_sum) / params[i] : remaining / size_sum;
      if (p[i] > options.p_max) any = true;
    }
    if (!any) break;
    for (std::size_t i = 0; i < n; ++i) {
      if (!clamped[i] && p[i] > options.p_max) {
        clamped[i] = true;
        p[i] = options.p_max;
      }
    }
  }
  return p;
}

PruningPlan allocate_budget(const SensitivityProfile& profile, double global_rate, const AllocationOptions& options) {
  PruningPlan plan;
  plan.global_rate = global_rate;
  plan.p_max = options.p_max;
  plan.weighting = options.weighting;
  std::vector<double> params, S;
  for (const auto& u : profile.units) {
    params.push_back(static_cast<double>(u.params));
    S.push_back(u.sensitivity);
  }
  std::vector<double> p;
  if (profile.degenerate) {
    if (global_rate > options.p_max) fail(ErrorCode::kInfeasibleBudget, "budget exceeds p_max for every layer");
    plan.uniform_fallback = true;
    p.assign(params.size(), global_rate);
  } else {
    p = allocate_fractions(params, S, global_rate, options);
  }
  for (std::size_t i = 0; i < profile.units.size(); ++i) {
    const auto& u = profile.units[i];
    plan.layers.push_back({u.id, u.members, u.channels, u.params, p[i], {}});
  }
  return plan;
}

void select_filters(const GraphF& graph, PruningPlan& plan) {
  const auto units = prunable_units(graph);
  for (auto& l : plan.layers) {
    auto it = std::find_if(units.begin(), units.end(), [&](const auto& u) { return u.id == l.id; });
    if (it == units.end()) fail(ErrorCode::kInvalidArgument, "plan names unknown layer group '" + l.id + "'");
    l.removed = lowest(unit_saliency(graph, *it), filters_for_rate(l.fraction, it->channels));
  }
}

// ---------------------------------------------------------------------------
// Iterative schedule

std::vector<double> default_schedule(double global_rate) {
  if (global_rate <= 0.0) return {};
  return {global_rate / 2.0, global_rate};
}

PruneResult spaq_prune(const GraphF& graph, double global_rate, const metrics::Evaluator& evaluator,
                       const PruneConfig& config) {
  if (!(global_rate >= 0.0 && global_rate < 1.0)) fail(ErrorCode::kInvalidArgument, "global rate must lie in [0, 1)");
  validate(graph);
  std::vector<double> schedule = config.schedule.empty() ? default_schedule(global_rate) : config.schedule;
  if (global_rate == 0.0) schedule.clear();
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i] > 0.0 && schedule[i] < 1.0) || (i > 0 && !(schedule[i] > schedule[i - 1]))) {
      fail(ErrorCode::kInvalidArgument, "schedule must be increasing rates in (0, 1)");
    }
  }
  if (!schedule.empty() && std::abs(schedule.back() - global_rate) > 1e-12) {
    fail(ErrorCode::kInvalidArgument, "schedule must end at the global rate");
  }

  PruneResult result{graph, {}};
  if (schedule.empty()) {
    result.graph = train::finetune(graph, config.task, config.finetune).graph;
    return result;
  }
  const Index baseline = accounting::count_params(graph).params_total;
  double previous = 0.0;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    StageLog log;
    log.index = k + 1;
    log.cumulative_target = schedule[k];
    log.incremental_rate = 1.0 - (1.0 - schedule[k]) / (1.0 - previous);
    log.probe_rate = config.probe_rate.value_or(log.incremental_rate);
    try {
      GraphF& g = result.graph;
      log.params_before = accounting::count_params(g).params_total;
      log.flops_before = accounting::count_flops(g, config.resolution).flops_total;
      log.profile = analyze_sensitivity(g, log.probe_rate, evaluator, config.sensitivity);

      const auto analysis = analyze_channels(g);
      const double target = (1.0 - schedule[k]) * static_cast<double>(baseline);
      auto realize = [&](double rate, PruningPlan& plan) {
        plan = allocate_budget(log.profile, rate, config.allocation);
        select_filters(g, plan);
        return static_cast<double>(params_after(g, keep_masks(analysis, plan)));
      };
      PruningPlan lo_plan, hi_plan;
      double lo = 0.0, hi = config.allocation.p_max;
      double lo_params = realize(lo, lo_plan);
      double hi_params = realize(hi, hi_plan);
      if (hi_params > target) {
        fail(ErrorCode::kInfeasibleBudget, "cannot reach " + std::to_string(schedule[k]) + " within p_max");
      }
      for (int it = 0; it < 48 && lo_params > target; ++it) {
        const double mid = 0.5 * (lo + hi);
        PruningPlan plan;
        const double params = realize(mid, plan);
        if (params > target) {
          lo = mid;
          lo_params = params;
          lo_plan = std::move(plan);
        } else {
          hi = mid;
          hi_params = params;
          hi_plan = std::move(plan);
        }
      }
      const bool take_lo = std::abs(lo_params - target) < std::abs(hi_params - target);
      log.plan = take_lo ? lo_plan : hi_plan;
      log.allocation_rate = take_lo ? lo : hi;

      GraphF pruned = apply_plan(g, log.plan);
      auto tuned = train::finetune(pruned, config.task, config.finetune);
      g = std::move(tuned.graph);
      log.loss_trace = std::move(tuned.loss_trace);
      log.params_after = accounting::count_params(g).params_total;
      log.flops_after = accounting::count_flops(g, config.resolution).flops_total;
    } catch (const Error& e) {
      fail(e.code(), "stage " + std::to_string(k + 1) + ": " + e.what());
    }
    if (config.on_stage) config.on_stage(log, result.graph);
    result.stages.push_back(std::move(log));
    previous = schedule[k];
  }
  return result;
}

}  // namespace spaq::pruning
