#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "spaq/accounting.hpp"
#include "spaq/forward.hpp"
#include "spaq/quant_types.hpp"

namespace spaq::quant {

/// Round half away from zero.
double round_half_away(double x);

struct CalibrationSet {
  std::vector<TensorMap<float>> batches;
  std::uint64_t seed = 0;
  Index samples = 0;
};

struct Calibration {
  std::map<std::string, QuantRecord> activations;  // keyed by site
  std::map<std::string, std::vector<float>> weight_scales;  // keyed by core name
  Scheme weight_scheme = Scheme::kSymmetricPerChannel;
  std::vector<std::string> warnings;
};

/// Asymmetric uint8 record for an observed range. The range is widened to
/// include zero so that zero is exactly representable.
QuantRecord activation_record(float observed_min, float observed_max,
                              std::vector<std::string>* warnings = nullptr);

/// max|W[c]| / 127 per output channel (one entry for per-tensor).
std::vector<float> weight_scales(const TensorF& weight, Scheme scheme,
                                 std::vector<std::string>* warnings = nullptr);

/// Quantizes to the scheme's integer range (clamped).
std::int32_t quantize_value(double x, const QuantRecord& record);
double dequantize_value(std::int32_t q, const QuantRecord& record);
std::int8_t quantize_weight(float w, float scale);

FixedPointMultiplier fixed_point(double real);
/// round(acc * multiplier), half away from zero, saturated to int32.
std::int32_t apply_multiplier(std::int64_t acc, FixedPointMultiplier m);
/// Double-precision reference for apply_multiplier.
std::int32_t requantize_reference(std::int64_t acc, double real);

Calibration calibrate(const GraphF& graph, const CalibrationSet& calib,
                      Scheme weight_scheme = Scheme::kSymmetricPerChannel);

QuantizedGraph quantize_graph(const GraphF& graph, const Calibration& calibration);

/// Recomputes derived requantization multipliers (after load or edits).
void prepare(QuantizedGraph& graph);

TensorMap<float> quantized_forward(const QuantizedGraph& graph, const TensorMap<float>& inputs);

/// Real-valued weights implied by the int8 payload.
TensorF dequantize_weight(const QuantizedConv& conv);

/// Counters maintained by the integer convolution kernel on this thread.
struct KernelStats {
  std::uint64_t accumulations = 0;
  /// Accumulations during which a floating-point exception flag was raised.
  std::uint64_t fp_flag_events = 0;
};
KernelStats& kernel_stats();
void reset_kernel_stats();

/// Runs `fn` and reports whether it raised any floating-point exception flag
/// (inexact, invalid, overflow, underflow, divide-by-zero).
bool raises_fp_flags(const std::function<void()>& fn);

namespace detail {

template <typename T>
using IntMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// acc = w * cols + bias with integer operands only.
template <typename Acc, typename W, typename X>
void integer_accumulate(const IntMatrix<W>& w, const IntMatrix<X>& cols,
                        const Eigen::Matrix<Acc, Eigen::Dynamic, 1>* bias, IntMatrix<Acc>& acc) {
  static_assert(std::is_integral_v<Acc> && std::is_integral_v<W> && std::is_integral_v<X>,
                "quantized accumulation must be integral");
  acc.noalias() = w.template cast<Acc>() * cols.template cast<Acc>();
  if (bias) acc.colwise() += *bias;
}

}  // namespace detail

struct QuantizeOptions {
  Scheme weight_scheme = Scheme::kSymmetricPerChannel;
  Resolution resolution = accounting::kDefaultResolution;
  persistence::SaveOptions save;
};

struct QuantizeResult {
  QuantizedGraph graph;
  Calibration calibration;
  accounting::CostReport before;
  accounting::CostReport after;
  accounting::Reduction size_reduction;
};

/// calibrate, quantize_graph, then size accounting before and after.
QuantizeResult spaq_quantize(const GraphF& graph, const CalibrationSet& calib,
                             const QuantizeOptions& options = {});

}  // namespace spaq::quant
