// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "spaq/accounting.hpp"
#include "spaq/finetune.hpp"
#include "spaq/forward.hpp"
#include "spaq/metrics.hpp"
#include "spaq/persistence.hpp"
#include "spaq/pipeline.hpp"
#include "spaq/pruning.hpp"
#include "spaq/quantize.hpp"
#include "spaq/zoo.hpp"
#include "test_util.hpp"

namespace spaq {
namespace {

namespace fs = std::filesystem;

// Tolerances.
constexpr double kSizeTarget10 = 76.3;
constexpr double kSizeTarget20 = 79.8;
constexpr double kFlopsTarget10 = 9.44;
constexpr double kFlopsTarget20 = 18.90;
constexpr double kReductionTolerancePp = 3.0;
constexpr double kPipelineSeconds = 300.0;
constexpr double kReferenceParamsM = 4.00;
constexpr double kParamsTolerance = 0.20;
constexpr double kMinConvSharePct = 95.0;
constexpr double kRateIdentityTolerance = 1e-9;
constexpr double kOracleTolerance = 1e-6;
constexpr double kGradientTolerance = 1e-4;
constexpr int kRecoveryTrials = 100;
constexpr int kRecoveryRequired = 95;
constexpr double kSpearmanMin = 0.5;
constexpr double kRigidTolerance = 1e-9;
constexpr double kFourPointTolerance = 1e-6;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

unsigned worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------
// Pipeline runs shared by the first two criteria.

struct PipelineRun {
  double flops_pct = 0.0;
  double size_pct = 0.0;
  double seconds = 0.0;
};

PipelineRun run_droid(double rate) {
  pipeline::PipelineConfig cfg;
  cfg.model = "droid";
  cfg.global_rate = rate;
  cfg.threads = worker_threads();
  cfg.output_dir = fs::temp_directory_path() / ("spaq_acceptance_" + fmt("%.2f", rate));
  fs::remove_all(cfg.output_dir);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = pipeline::run_pipeline(cfg);
  PipelineRun r;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.flops_pct = result.report["flops_reduction_pct"].get<double>();
  r.size_pct = result.report["size_reduction_pct"].get<double>();
  fs::remove_all(cfg.output_dir);
  return r;
}

const std::vector<std::pair<double, PipelineRun>>& droid_runs() {
  static const auto runs = [] {
    std::vector<std::pair<double, PipelineRun>> v;
    for (double rate : {0.1, 0.2}) v.emplace_back(rate, run_droid(rate));
    return v;
  }();
  return runs;
}

Outcome size_reduction() {
  Outcome o;
  for (const auto& [rate, r] : droid_runs()) {
    const double target = rate < 0.15 ? kSizeTarget10 : kSizeTarget20;
    o.note("P_g " + fmt("%.2f", rate) + ": size " + fmt("%.2f%%", r.size_pct) + " (target " + fmt("%.1f", target) +
           "), " + fmt("%.1f s", r.seconds));
    o.require(std::abs(r.size_pct - target) <= kReductionTolerancePp, "size reduction outside tolerance");
    o.require(r.seconds < kPipelineSeconds, "pipeline too slow");
  }
  return o;
}

Outcome flops_reduction() {
  Outcome o;
  for (const auto& [rate, r] : droid_runs()) {
    const double target = rate < 0.15 ? kFlopsTarget10 : kFlopsTarget20;
    o.note("P_g " + fmt("%.2f", rate) + ": flops " + fmt("%.2f%%", r.flops_pct) + " (target " +
           fmt("%.2f", target) + ")");
    o.require(std::abs(r.flops_pct - target) <= kReductionTolerancePp,
              "P_g " + fmt("%.2f", rate) + " FLOPs reduction outside tolerance");
  }
  return o;
}

// ---------------------------------------------------------------------------

Outcome architecture() {
  Outcome o;
  const Index expected[] = {18, 18, 19};
  const char* names[] = {"fnet", "cnet", "updatenet"};
  for (int i = 0; i < 3; ++i) {
    const Index n = conv_count(zoo::build({names[i]}));
    o.require(n == expected[i], std::string(names[i]) + " has " + std::to_string(n) + " convs");
  }
  const GraphF droid = zoo::build({"droid"});
  const double params_m = static_cast<double>(accounting::count_params(droid).params_total) / 1e6;
  const double share = accounting::conv_share(droid).share_pct();
  o.note("params " + fmt("%.3f M", params_m) + ", conv share " + fmt("%.2f%%", share));
  o.require(std::abs(params_m - kReferenceParamsM) <= kParamsTolerance * kReferenceParamsM, "params off reference");
  o.require(share >= kMinConvSharePct, "conv share too low");
  return o;
}

Outcome global_rate_identity() {
  Outcome o;
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(16);
    std::vector<double> params(n), s(n);
    for (std::size_t i = 0; i < n; ++i) {
      params[i] = 10.0 + static_cast<double>(rng.below(100000));
      s[i] = rng.uniform();
    }
    const double ssum = std::accumulate(s.begin(), s.end(), 0.0);
    for (auto& v : s) v /= ssum;
    const double pg = 0.01 + 0.6 * rng.uniform();
    const auto p = pruning::allocate_fractions(params, s, pg);
    const double total = std::accumulate(params.begin(), params.end(), 0.0);
    double got = 0.0;
    for (std::size_t i = 0; i < n; ++i) got += p[i] * params[i] / total;
    worst = std::max(worst, std::abs(got - pg));
  }
  o.note("worst |sum p F - P_g| " + fmt("%.2e", worst));
  o.require(worst <= kRateIdentityTolerance, "identity violated");

  // Concrete filter counts on a real profile.
  GraphF g = zoo::build({"cnet", 0, {32, 32}, 1});
  train::SyntheticTask task;
  task.resolution = {32, 32};
  task.samples = 2;
  metrics::SyntheticEvaluator ev(task);
  const auto profile = pruning::analyze_sensitivity(g, 0.2, ev, {false, false, worker_threads()});
  auto plan = pruning::allocate_budget(profile, 0.2);
  pruning::select_filters(g, plan);
  double off = 0.0;
  for (const auto& l : plan.layers) {
    off = std::max(off, std::abs(static_cast<double>(l.removed.size()) - l.fraction * static_cast<double>(l.channels)));
  }
  o.note("worst filter deviation " + fmt("%.3f", off));
  o.require(off <= 1.0, "plan strays more than one filter from target");
  return o;
}

Outcome pruning_oracle() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    GraphF g = testing::random_graph(seed, {true, seed % 4 == 0, true, 4, 8});
    const auto plan = testing::random_plan(g, seed * 7 + 1);
    const GraphF pruned = pruning::apply_plan(g, plan);
    const GraphF masked = testing::zero_masked(g, plan);
    const auto in = testing::random_inputs(g, {8, 8}, seed + 11);
    const auto a = forward(pruned, in);
    const auto b = forward(masked, in);
    for (const auto& out : g.outputs) worst = std::max(worst, testing::max_abs_diff(a.at(out), b.at(out)));
  }
  o.note("max deviation " + fmt("%.2e", worst));
  o.require(worst <= kOracleTolerance, "pruned graph differs from masked graph");
  return o;
}

Outcome gradients() {
  Outcome o;
  double worst = 0.0;
  int checked = 0;
  for (auto kind : {LayerKind::kConv2d, LayerKind::kInstanceNorm, LayerKind::kReLU, LayerKind::kSigmoid,
                    LayerKind::kTanh, LayerKind::kAdd, LayerKind::kConcat, LayerKind::kConvGRUCell}) {
    const auto r = testing::gradient_check(testing::single_kind(kind));
    checked += r.checked;
    worst = std::max(worst, r.worst);
    o.require(r.worst < kGradientTolerance, std::string(to_string(kind)) + " at " + r.worst_at);
  }
  o.note(std::to_string(checked) + " entries, worst relative error " + fmt("%.2e", worst));
  return o;
}

quant::CalibrationSet single(const TensorMap<float>& in) {
  quant::CalibrationSet s;
  s.batches.push_back(in);
  s.samples = 1;
  return s;
}

Outcome quantization() {
  Outcome o;
  // Weight round trip, every element.
  GraphF f = zoo::build({"fnet", 0, {32, 32}, 7});
  const auto qf = quant::quantize_graph(f, quant::calibrate(f, single(testing::random_inputs(f, {32, 32}, 1))));
  Index weights = 0, violations = 0;
  for (const auto& [name, qc] : qf.convs) {
    const TensorF& w = f.node(qc.node).param(qc.weight_param);
    const Index per = w.size() / qc.geometry.out_channels;
    for (Index i = 0; i < w.size(); ++i, ++weights) {
      const double s = qc.scale_for(i / per);
      violations += std::abs(s * qc.weight[i] - w[i]) > s / 2 * (1 + 1e-9);
    }
  }
  o.note(std::to_string(weights) + " weights checked");
  o.require(violations == 0, std::to_string(violations) + " weights beyond half a step");

  // Output error within the propagated bound.
  int outside = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    GraphF g = testing::random_graph(seed, {false, false, true, 4, 8});
    const auto in = testing::random_inputs(g, {8, 8}, seed + 100);
    const auto qg = quant::quantize_graph(g, quant::calibrate(g, single(in)));
    const auto q = quant::quantized_forward(qg, in);
    const auto ref = forward(g, in);
    const auto bounds = testing::quant_error_bounds(g, qg, in);
    for (const auto& out : g.outputs) outside += testing::worst_bound_slack(q.at(out), ref.at(out), bounds.at(out)) > 0.0;
  }
  o.require(outside == 0, std::to_string(outside) + " outputs outside the bound");

  // Integer purity.
  GraphF gru = zoo::build({"toy-gru"});
  const auto in = testing::random_inputs(gru, {8, 8}, 5);
  const auto qg = quant::quantize_graph(gru, quant::calibrate(gru, single(in)));
  quant::reset_kernel_stats();
  quant::quantized_forward(qg, in);
  const auto stats = quant::kernel_stats();
  o.note(std::to_string(stats.accumulations) + " integer accumulations, " + std::to_string(stats.fp_flag_events) +
         " fp events");
  o.require(stats.accumulations > 0 && stats.fp_flag_events == 0, "integer accumulation touched floating point");
  return o;
}

Outcome finetune_recovery() {
  Outcome o;
  int recovered = 0;
  for (int trial = 0; trial < kRecoveryTrials; ++trial) {
    const auto seed = static_cast<std::uint64_t>(trial);
    zoo::ZooSpec spec{"toy-residual"};
    spec.seed = seed;
    const GraphF g = zoo::build(spec);
    pruning::PruningPlan plan;
    for (const auto& u : pruning::prunable_units(g)) plan.layers.push_back({u.id, u.members, u.channels, u.params, 0.2, {}});
    pruning::select_filters(g, plan);
    const GraphF pruned = pruning::apply_plan(g, plan);
    train::SyntheticTask task;
    task.seed = seed;
    task.resolution = {8, 8};
    task.samples = 6;
    const auto data = train::make_dataset(pruned, task);
    train::FinetuneConfig cfg;
    cfg.steps = 20;
    cfg.seed = seed;
    const auto r = train::finetune(pruned, data, cfg);
    recovered += train::dataset_loss(r.graph, data) < train::dataset_loss(pruned, data);
  }
  o.note(std::to_string(recovered) + "/" + std::to_string(kRecoveryTrials) + " recovered");
  o.require(recovered >= kRecoveryRequired, "too few recoveries");
  return o;
}

Outcome sensitivity_stability() {
  Outcome o;
  const GraphF g = zoo::build({"fnet"});
  metrics::SyntheticEvaluator ev(train::SyntheticTask{});
  const auto a = pruning::analyze_sensitivity(g, 0.1, ev, {false, false, worker_threads()});
  const auto b = pruning::analyze_sensitivity(g, 0.2, ev, {false, false, worker_threads()});
  std::vector<double> sa, sb;
  for (const auto& u : a.units) sa.push_back(u.sensitivity);
  for (const auto& u : b.units) sb.push_back(u.sensitivity);
  const double rho = metrics::spearman(sa, sb);
  o.note("rho " + fmt("%.4f", rho) + " over " + std::to_string(sa.size()) + " units");
  o.require(rho > kSpearmanMin, "ranking unstable");
  return o;
}

metrics::Trajectory from_points(const std::vector<Eigen::Vector3d>& pts) {
  metrics::Trajectory t;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.poses.push_back({0.1 * static_cast<double>(i), pts[i], Eigen::Quaterniond::Identity()});
  }
  return t;
}

Outcome ate_metric() {
  Outcome o;
  using metrics::AlignMode;
  Rng rng(31);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 40; ++i) pts.emplace_back(rng.normal(), rng.normal(), rng.normal());
  metrics::Trajectory gt = from_points(pts);
  for (auto& p : gt.poses) {
    p.orientation = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal()).normalized();
  }
  const double same = metrics::ate_rmse(gt, gt, AlignMode::kRigid);
  o.require(same < 1e-12, "identical trajectories score " + fmt("%.3e", same));

  const Eigen::Matrix3d rot = Eigen::AngleAxisd(1.1, Eigen::Vector3d(0.3, -1, 2).normalized()).toRotationMatrix();
  metrics::Trajectory moved = gt;
  for (auto& p : moved.poses) p.position = rot * p.position + Eigen::Vector3d(5, -3, 2);
  const double rigid = metrics::ate_rmse(moved, gt, AlignMode::kRigid);
  o.require(rigid < kRigidTolerance, "rigid motion leaves " + fmt("%.3e", rigid));

  // Radial offsets on a centred square cannot be absorbed by the alignment.
  const double r[4] = {0.01, 0.02, 0.01, 0.02};
  std::vector<Eigen::Vector3d> g4, e4;
  for (int i = 0; i < 4; ++i) {
    const double ang = M_PI / 4 + i * M_PI / 2;
    const Eigen::Vector3d u(std::cos(ang), std::sin(ang), 0.0);
    g4.push_back(u);
    e4.push_back((1 + r[i]) * u);
  }
  const double hand = std::sqrt((0.01 * 0.01 + 0.02 * 0.02 + 0.01 * 0.01 + 0.02 * 0.02) / 4);
  const double four = metrics::ate_rmse(from_points(e4), from_points(g4), AlignMode::kRigid);
  o.note("four-point " + fmt("%.7f", four) + " vs " + fmt("%.7f", hand));
  o.require(std::abs(four - hand) <= kFourPointTolerance, "four-point case mismatch");

  const std::string text = metrics::format_tum(gt);
  std::istringstream in(text);
  const auto back = metrics::parse_tum(in);
  bool exact = back.size() == gt.size() && metrics::format_tum(back) == text;
  for (std::size_t i = 0; exact && i < gt.size(); ++i) {
    exact = back.poses[i].timestamp == gt.poses[i].timestamp && back.poses[i].position == gt.poses[i].position &&
            back.poses[i].orientation.coeffs() == gt.poses[i].orientation.coeffs();
  }
  o.require(exact, "TUM round trip not bit-exact");
  return o;
}

Outcome persistence_round_trip() {
  Outcome o;
  int files = 0;
  for (const auto& name : zoo::model_names()) {
    const GraphF g = zoo::build({name});
    const auto path = fs::temp_directory_path() / ("spaq_acceptance_" + name + ".spaq");
    const auto written = persistence::save(g, path);
    o.require(written == fs::file_size(path) && written == accounting::serialized_size(g), name + " fp32 size");
    const auto back = persistence::load(path);
    o.require(persistence::encode(std::get<GraphF>(back.model)) == persistence::encode(g), name + " fp32 round trip");
    ++files;

    quant::CalibrationSet cs;
    cs.batches.push_back(testing::random_inputs(g, {32, 32}, 3));
    cs.samples = 1;
    const auto qg = quant::quantize_graph(g, quant::calibrate(g, cs));
    const auto qwritten = persistence::save(qg, path);
    o.require(qwritten == fs::file_size(path) && qwritten == accounting::serialized_size(qg), name + " int8 size");
    const auto qback = persistence::load(path);
    o.require(persistence::encode(std::get<quant::QuantizedGraph>(qback.model)) == persistence::encode(qg),
              name + " int8 round trip");
    ++files;
    fs::remove(path);
  }
  o.note(std::to_string(files) + " files");
  return o;
}

}  // namespace
}  // namespace spaq

int main() {
  using namespace spaq;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"size reduction at P_g 0.10 / 0.20", size_reduction},
      {"FLOPs reduction at P_g 0.10 / 0.20", flops_reduction},
      {"architecture accounting", architecture},
      {"global-rate identity", global_rate_identity},
      {"pruning oracle equivalence", pruning_oracle},
      {"gradient correctness", gradients},
      {"quantization bounds", quantization},
      {"fine-tuning recovery", finetune_recovery},
      {"sensitivity stability", sensitivity_stability},
      {"ATE metric", ate_metric},
      {"persistence", persistence_round_trip},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
