#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spaq/graph.hpp"

namespace spaq::zoo {

/// Builder request. `output_dim` 0 selects the model default (128 for fnet,
/// 256 for cnet); `widths` parameterizes the toy networks.
struct ZooSpec {
  std::string name;
  Index output_dim = 0;
  Resolution input_resolution{384, 512};
  std::uint64_t seed = 0;
  std::vector<Index> widths = {};
};

/// fnet, cnet, updatenet, droid (all three as one graph), toy-residual,
/// toy-gru.
const std::vector<std::string>& model_names();
bool is_model_name(const std::string& name);

GraphF build(const ZooSpec& spec);

/// Reference computational profile of the original three-module network.
struct ProfileReference {
  double total_params_m = 4.00;
  double cnn_params_m = 3.94;
  double cnn_share_pct = 98.5;
  double flops_b = 4.64;
};

ProfileReference profile_reference();

/// Joins graphs into one, prefixing every name with `<graph name>/`.
GraphF merge(const std::vector<GraphF>& parts, const std::string& name);

}  // namespace spaq::zoo
