#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spaq/graph.hpp"
#include "spaq/tensor.hpp"

namespace spaq::quant {

enum class Scheme : std::uint8_t {
  kAsymmetricPerTensor = 0,  // activations, uint8 [0, 255]
  kSymmetricPerChannel = 1,  // weights, int8 [-127, 127], zero_point 0
  kSymmetricPerTensor = 2,   // weights, one scale for the whole tensor
};

const char* to_string(Scheme scheme);
/// Also accepts "per-channel" and "per-tensor" for the weight schemes.
Scheme scheme_from_string(const std::string& name);

inline constexpr std::int32_t kActivationMin = 0;
inline constexpr std::int32_t kActivationMax = 255;
inline constexpr std::int32_t kWeightMax = 127;

/// Affine mapping q = round(x / scale) + zero_point, clamped to the scheme
/// range. observed_min/max are the raw calibration extremes.
struct QuantRecord {
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  Scheme scheme = Scheme::kAsymmetricPerTensor;
  float observed_min = 0.0f;
  float observed_max = 0.0f;
  bool operator==(const QuantRecord&) const = default;
};

/// Fixed-point representation of a positive real multiplier:
/// value ~= multiplier * 2^(shift - 31), multiplier in [2^30, 2^31).
struct FixedPointMultiplier {
  std::int32_t multiplier = 0;
  int shift = 0;
};

/// One quantized convolution core (a Conv2d node or a GRU gate).
struct QuantizedConv {
  std::string node;
  std::string weight_param;
  std::string bias_param;  // empty when absent
  ConvAttrs geometry;
  Scheme scheme = Scheme::kSymmetricPerChannel;
  TensorI8 weight;
  std::optional<TensorI32> bias;
  std::vector<float> scales;  // per output channel, or a single entry
  std::string input_site;
  std::string output_site;
  /// Derived from scales and the site records; not persisted.
  std::vector<FixedPointMultiplier> requant;

  float scale_for(Index channel) const {
    return scales.size() == 1 ? scales[0] : scales[static_cast<std::size_t>(channel)];
  }
};

/// Int8 model state: the fp32 graph carries topology and the parameters of
/// non-convolution layers; convolution parameters live in `convs`.
struct QuantizedGraph {
  GraphF graph;
  std::map<std::string, QuantizedConv> convs;  // keyed by ConvCore::name()
  std::map<std::string, QuantRecord> activations;  // keyed by site
};

}  // namespace spaq::quant
