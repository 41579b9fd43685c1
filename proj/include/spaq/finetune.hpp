#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spaq/forward.hpp"
#include "spaq/graph.hpp"
#include "spaq/quantize.hpp"

namespace spaq::train {

enum class TargetFunction { kBlurFlow, kDownsampleIdentity };
const char* to_string(TargetFunction target);
TargetFunction target_from_string(const std::string& name);

/// Dense regression task. Inputs are standard normal; each output's target
/// is its first ancestor graph input resampled to the output extent, with
/// channels taken modulo the input channel count (blur-flow additionally
/// applies a 3x3 mean filter).
struct SyntheticTask {
  std::uint64_t seed = 0;
  Resolution resolution{32, 32};
  TargetFunction target = TargetFunction::kDownsampleIdentity;
  Index samples = 8;
};

struct Sample {
  TensorMap<float> inputs;   // batch 1
  TensorMap<float> targets;  // batch 1, keyed by graph output
};

struct Dataset {
  std::vector<Sample> samples;
};

/// For every graph output, the first graph input (declaration order) it
/// depends on.
std::map<std::string, std::string> output_sources(const GraphF& graph);

/// Target for an output of shape (1, C, H, W) from a source sample.
TensorF make_target(const TensorF& source, const Shape& output_shape, TargetFunction target);

Dataset make_dataset(const GraphF& graph, const SyntheticTask& task);

/// Calibration batches drawn from the task inputs (one batch per sample).
quant::CalibrationSet calibration_set(const GraphF& graph, const SyntheticTask& task);

/// Concatenates samples along the batch axis.
TensorMap<float> batch_inputs(const Dataset& data, const std::vector<std::size_t>& rows);
TensorMap<float> batch_targets(const Dataset& data, const std::vector<std::size_t>& rows);

/// Mean squared error pooled over every output element.
struct LossValue {
  double sum_squares = 0.0;
  Index count = 0;
  double mse() const { return count ? sum_squares / static_cast<double>(count) : 0.0; }
};
LossValue squared_error(const GraphF& graph, const TensorMap<float>& outputs, const TensorMap<float>& targets);
double dataset_loss(const GraphF& graph, const Dataset& data);

enum class Optimizer { kSgd, kSgdMomentum };
const char* to_string(Optimizer optimizer);
Optimizer optimizer_from_string(const std::string& name);

struct FinetuneConfig {
  Index steps = 200;
  double learning_rate = 1e-3;
  Optimizer optimizer = Optimizer::kSgd;
  Index batch_size = 1;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

void check_config(const FinetuneConfig& cfg);

struct FinetuneResult {
  GraphF graph;
  std::vector<double> loss_trace;  // batch loss before each update
};

FinetuneResult finetune(const GraphF& graph, const Dataset& data, const FinetuneConfig& cfg);
FinetuneResult finetune(const GraphF& graph, const SyntheticTask& task, const FinetuneConfig& cfg);

}  // namespace spaq::train
