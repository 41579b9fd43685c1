#include "spaq/finetune.hpp"

#include <cmath>
#include <limits>

namespace spaq::train {

const char* to_string(TargetFunction target) {
  return target == TargetFunction::kBlurFlow ? "blur-flow" : "downsample-identity";
}

TargetFunction target_from_string(const std::string& name) {
  if (name == "blur-flow") return TargetFunction::kBlurFlow;
  if (name == "downsample-identity") return TargetFunction::kDownsampleIdentity;
  fail(ErrorCode::kInvalidArgument, "unknown target function '" + name + "'");
}

const char* to_string(Optimizer optimizer) {
  return optimizer == Optimizer::kSgdMomentum ? "sgd-momentum-0.9" : "sgd";
}

Optimizer optimizer_from_string(const std::string& name) {
  if (name == "sgd") return Optimizer::kSgd;
  if (name == "sgd-momentum-0.9" || name == "sgd-momentum") return Optimizer::kSgdMomentum;
  fail(ErrorCode::kInvalidArgument, "unknown optimizer '" + name + "'");
}

std::map<std::string, std::string> output_sources(const GraphF& graph) {
  std::map<std::string, std::size_t> first;
  for (std::size_t i = 0; i < graph.inputs.size(); ++i) first[graph.inputs[i].name] = i;
  for (const auto& n : graph.nodes) {
    std::size_t best = std::numeric_limits<std::size_t>::max();
    for (const auto& src : n.inputs) best = std::min(best, first.at(src));
    first[n.id] = best;
  }
  std::map<std::string, std::string> out;
  for (const auto& o : graph.outputs) out[o] = graph.inputs.at(first.at(o)).name;
  return out;
}

TensorF make_target(const TensorF& source, const Shape& output_shape, TargetFunction target) {
  const Index cs = source.dim(1), hs = source.dim(2), ws = source.dim(3);
  const Index co = output_shape[1], ho = output_shape[2], wo = output_shape[3];
  TensorF t({1, co, ho, wo});
  const bool pool = hs % ho == 0 && ws % wo == 0;
  const Index fy = pool ? hs / ho : 1, fx = pool ? ws / wo : 1;
  for (Index c = 0; c < co; ++c) {
    const Index sc = c % cs;
    for (Index y = 0; y < ho; ++y) {
      for (Index x = 0; x < wo; ++x) {
        double v = 0.0;
        if (pool) {
          for (Index dy = 0; dy < fy; ++dy) {
            for (Index dx = 0; dx < fx; ++dx) v += source.at(0, sc, y * fy + dy, x * fx + dx);
          }
          v /= static_cast<double>(fy * fx);
        } else {
          v = source.at(0, sc, y * hs / ho, x * ws / wo);
        }
        t.at(0, c, y, x) = static_cast<float>(v);
      }
    }
  }
  if (target == TargetFunction::kDownsampleIdentity) return t;
  TensorF blurred(t.shape());
  for (Index c = 0; c < co; ++c) {
    for (Index y = 0; y < ho; ++y) {
      for (Index x = 0; x < wo; ++x) {
        double v = 0.0;
        int count = 0;
        for (Index dy = -1; dy <= 1; ++dy) {
          for (Index dx = -1; dx <= 1; ++dx) {
            const Index yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= ho || xx < 0 || xx >= wo) continue;
            v += t.at(0, c, yy, xx);
            ++count;
          }
        }
        blurred.at(0, c, y, x) = static_cast<float>(v / count);
      }
    }
  }
  return blurred;
}

Dataset make_dataset(const GraphF& graph, const SyntheticTask& task) {
  if (task.samples <= 0) fail(ErrorCode::kInvalidArgument, "task needs at least one sample");
  const auto shapes = infer_shapes(graph, task.resolution);
  const auto sources = output_sources(graph);
  Rng rng(task.seed);
  Dataset data;
  data.samples.reserve(static_cast<std::size_t>(task.samples));
  for (Index s = 0; s < task.samples; ++s) {
    Sample sample;
    for (const auto& in : graph.inputs) {
      const ActShape a = input_shape_at(in, task.resolution);
      TensorF t({1, a.channels, a.height, a.width});
      for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
      sample.inputs[in.name] = std::move(t);
    }
    for (const auto& o : graph.outputs) {
      const ActShape a = shapes.at(o);
      sample.targets[o] = make_target(sample.inputs.at(sources.at(o)), {1, a.channels, a.height, a.width},
                                      task.target);
    }
    data.samples.push_back(std::move(sample));
  }
  return data;
}

quant::CalibrationSet calibration_set(const GraphF& graph, const SyntheticTask& task) {
  const Dataset data = make_dataset(graph, task);
  quant::CalibrationSet calib;
  calib.seed = task.seed;
  calib.samples = task.samples;
  for (const auto& s : data.samples) calib.batches.push_back(s.inputs);
  return calib;
}

namespace {

TensorMap<float> stack(const Dataset& data, const std::vector<std::size_t>& rows, bool targets) {
  TensorMap<float> out;
  if (rows.empty()) return out;
  const auto& first = targets ? data.samples.at(rows[0]).targets : data.samples.at(rows[0]).inputs;
  for (const auto& [name, t] : first) {
    std::vector<const TensorF*> parts;
    for (auto r : rows) {
      const auto& m = targets ? data.samples.at(r).targets : data.samples.at(r).inputs;
      parts.push_back(&m.at(name));
    }
    out[name] = stack_batch(parts);
  }
  return out;
}

}  // namespace

TensorMap<float> batch_inputs(const Dataset& data, const std::vector<std::size_t>& rows) {
  return stack(data, rows, false);
}

TensorMap<float> batch_targets(const Dataset& data, const std::vector<std::size_t>& rows) {
  return stack(data, rows, true);
}

LossValue squared_error(const GraphF& graph, const TensorMap<float>& outputs, const TensorMap<float>& targets) {
  LossValue v;
  for (const auto& o : graph.outputs) {
    const auto& y = outputs.at(o);
    auto it = targets.find(o);
    if (it == targets.end()) fail(ErrorCode::kShapeMismatch, "no target for output '" + o + "'");
    if (it->second.shape() != y.shape()) {
      fail(ErrorCode::kShapeMismatch, "output '" + o + "' has shape " + shape_string(y.shape()) +
                                          ", target " + shape_string(it->second.shape()));
    }
    v.sum_squares += (y.vec().cast<double>() - it->second.vec().cast<double>()).squaredNorm();
    v.count += y.size();
  }
  return v;
}

double dataset_loss(const GraphF& graph, const Dataset& data) {
  std::vector<std::size_t> rows(data.samples.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const auto outputs = forward(graph, batch_inputs(data, rows));
  return squared_error(graph, outputs, batch_targets(data, rows)).mse();
}

void check_config(const FinetuneConfig& cfg) {
  if (cfg.steps < 0) fail(ErrorCode::kInvalidArgument, "steps must be >= 0");
  if (!(cfg.learning_rate > 0.0)) fail(ErrorCode::kInvalidArgument, "learning rate must be > 0");
  if (cfg.batch_size <= 0) fail(ErrorCode::kInvalidArgument, "batch size must be > 0");
  if (cfg.clip_norm < 0.0) fail(ErrorCode::kInvalidArgument, "clip norm must be >= 0");
}

FinetuneResult finetune(const GraphF& graph, const Dataset& data, const FinetuneConfig& cfg) {
  check_config(cfg);
  validate(graph);
  FinetuneResult result{graph, {}};
  if (cfg.steps == 0) return result;
  if (data.samples.empty()) fail(ErrorCode::kInvalidArgument, "fine-tuning dataset is empty");

  GraphF& g = result.graph;
  Rng rng(cfg.seed);
  GradientMap<float> velocity;
  result.loss_trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (Index step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> rows(static_cast<std::size_t>(cfg.batch_size));
    for (auto& r : rows) r = static_cast<std::size_t>(rng.below(data.samples.size()));
    const auto inputs = batch_inputs(data, rows);
    const auto targets = batch_targets(data, rows);
    GradientTape<float> tape;
    const auto outputs = forward(g, inputs, tape);
    const LossValue loss = squared_error(g, outputs, targets);
    const double mse = loss.mse();
    if (!std::isfinite(mse)) {
      fail(ErrorCode::kDivergence, "loss became non-finite at step " + std::to_string(step));
    }
    result.loss_trace.push_back(mse);

    TensorMap<float> output_grads;
    const float k = 2.0f / static_cast<float>(loss.count);
    for (const auto& o : g.outputs) {
      TensorF d(outputs.at(o).shape());
      d.vec() = k * (outputs.at(o).vec() - targets.at(o).vec());
      output_grads[o] = std::move(d);
    }
    auto grads = backward(tape, output_grads);

    double scale = 1.0;
    if (cfg.clip_norm > 0.0) {
      double sq = 0.0;
      for (const auto& [key, t] : grads) sq += t.vec().cast<double>().squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
    }
    const auto lr = static_cast<float>(cfg.learning_rate * scale);
    for (auto& n : g.nodes) {
      for (auto& [pname, p] : n.params) {
        const auto& grad = grads.at({n.id, pname});
        if (cfg.optimizer == Optimizer::kSgdMomentum) {
          auto [it, inserted] = velocity.try_emplace({n.id, pname}, p.shape());
          it->second.vec() = 0.9f * it->second.vec() + grad.vec();
          p.vec() -= lr * it->second.vec();
        } else {
          p.vec() -= lr * grad.vec();
        }
      }
    }
  }
  return result;
}

FinetuneResult finetune(const GraphF& graph, const SyntheticTask& task, const FinetuneConfig& cfg) {
  return finetune(graph, make_dataset(graph, task), cfg);
}

}  // namespace spaq::train
