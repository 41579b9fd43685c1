#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "spaq/error.hpp"
#include "spaq/random.hpp"
#include "spaq/tensor.hpp"

namespace spaq {

enum class LayerKind : std::uint8_t {
  kConv2d,
  kInstanceNorm,
  kReLU,
  kSigmoid,
  kTanh,
  kAdd,
  kConcat,
  kConvGRUCell,
};

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct ConvAttrs {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel_h = 1;
  Index kernel_w = 1;
  Index stride = 1;
  Index padding = 0;
  bool bias = true;
  bool operator==(const ConvAttrs&) const = default;
};

struct NormAttrs {
  Index channels = 0;
  bool affine = true;
  bool operator==(const NormAttrs&) const = default;
};

/// Convolutional GRU cell. Inputs are [hidden, x]; every gate convolution
/// sees the channel concatenation [hidden, x] (candidate: [r*hidden, x]).
struct GruAttrs {
  Index hidden = 0;
  Index input = 0;
  Index kernel = 3;
  bool operator==(const GruAttrs&) const = default;
};

using LayerAttrs = std::variant<std::monostate, ConvAttrs, NormAttrs, GruAttrs>;

inline constexpr double kInstanceNormEpsilon = 1e-5;
/// Upper bound on Kh*Kw*Cin so that int8 x uint8 products accumulate in int32.
inline constexpr Index kMaxReductionSize = Index{1} << 15;

template <typename Scalar>
struct LayerNode {
  std::string id;
  LayerKind kind = LayerKind::kReLU;
  LayerAttrs attrs;
  std::map<std::string, Tensor<Scalar>> params;
  std::vector<std::string> inputs;

  const ConvAttrs& conv() const { return std::get<ConvAttrs>(attrs); }
  ConvAttrs& conv() { return std::get<ConvAttrs>(attrs); }
  const NormAttrs& norm() const { return std::get<NormAttrs>(attrs); }
  NormAttrs& norm() { return std::get<NormAttrs>(attrs); }
  const GruAttrs& gru() const { return std::get<GruAttrs>(attrs); }
  GruAttrs& gru() { return std::get<GruAttrs>(attrs); }

  const Tensor<Scalar>& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) {
      fail(ErrorCode::kMissingParameter, "node '" + id + "' has no parameter '" + name + "'");
    }
    return it->second;
  }
};

/// Graph entry point. Spatial extent is the analysis resolution divided by
/// `stride` (e.g. stride 8 for inputs that live at 1/8 image resolution).
struct GraphInput {
  std::string name;
  Index channels = 0;
  Index stride = 1;
  bool operator==(const GraphInput&) const = default;
};

struct Resolution {
  Index height = 0;
  Index width = 0;
  bool operator==(const Resolution&) const = default;
};

/// Per-sample activation shape (C, H, W).
struct ActShape {
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  bool operator==(const ActShape&) const = default;
};

/// Directed acyclic graph of layers in topological order.
template <typename Scalar>
struct Graph {
  std::string name;
  std::vector<LayerNode<Scalar>> nodes;
  std::vector<GraphInput> inputs;
  std::vector<std::string> outputs;
  /// Analysis resolutions must be multiples of this.
  Index resolution_multiple = 1;

  const LayerNode<Scalar>* find(const std::string& id) const {
    for (const auto& n : nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }
  LayerNode<Scalar>* find(const std::string& id) {
    for (auto& n : nodes) {
      if (n.id == id) return &n;
    }
    return nullptr;
  }
  const LayerNode<Scalar>& node(const std::string& id) const {
    const auto* n = find(id);
    if (!n) fail(ErrorCode::kInvalidGraph, "no node '" + id + "'");
    return *n;
  }
  LayerNode<Scalar>& node(const std::string& id) {
    auto* n = find(id);
    if (!n) fail(ErrorCode::kInvalidGraph, "no node '" + id + "'");
    return *n;
  }
  const GraphInput* find_input(const std::string& name_) const {
    for (const auto& in : inputs) {
      if (in.name == name_) return &in;
    }
    return nullptr;
  }

  template <typename Other>
  Graph<Other> cast() const {
    Graph<Other> out;
    out.name = name;
    out.inputs = inputs;
    out.outputs = outputs;
    out.resolution_multiple = resolution_multiple;
    out.nodes.reserve(nodes.size());
    for (const auto& n : nodes) {
      LayerNode<Other> m;
      m.id = n.id;
      m.kind = n.kind;
      m.attrs = n.attrs;
      m.inputs = n.inputs;
      for (const auto& [k, v] : n.params) m.params.emplace(k, v.template cast<Other>());
      out.nodes.push_back(std::move(m));
    }
    return out;
  }
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

// ---------------------------------------------------------------------------
// Convolution cores: every convolution in the graph, including the three gate
// convolutions inside a ConvGRUCell.

struct ConvCore {
  std::string node;
  std::string weight;  // parameter name of the (Cout, Cin, Kh, Kw) weight
  std::string bias;    // empty when the core has no bias
  ConvAttrs geometry;

  std::string name() const { return weight == "weight" ? node : node + "/" + weight; }
};

inline std::vector<std::string> gru_weight_names() { return {"wz", "wr", "wh"}; }
inline std::string gru_bias_for(const std::string& weight) { return "b" + weight.substr(1); }

inline ConvAttrs gru_gate_geometry(const GruAttrs& g) {
  return ConvAttrs{g.hidden + g.input, g.hidden, g.kernel, g.kernel, 1, g.kernel / 2, true};
}

template <typename Scalar>
std::vector<ConvCore> conv_cores_of(const LayerNode<Scalar>& n) {
  std::vector<ConvCore> cores;
  if (n.kind == LayerKind::kConv2d) {
    cores.push_back({n.id, "weight", n.conv().bias ? "bias" : "", n.conv()});
  } else if (n.kind == LayerKind::kConvGRUCell) {
    for (const auto& w : gru_weight_names()) {
      cores.push_back({n.id, w, gru_bias_for(w), gru_gate_geometry(n.gru())});
    }
  }
  return cores;
}

template <typename Scalar>
std::vector<ConvCore> conv_cores(const Graph<Scalar>& graph) {
  std::vector<ConvCore> cores;
  for (const auto& n : graph.nodes) {
    for (auto& c : conv_cores_of(n)) cores.push_back(std::move(c));
  }
  return cores;
}

/// Number of convolutions (Conv2d nodes plus three per ConvGRUCell).
template <typename Scalar>
Index conv_count(const Graph<Scalar>& graph) {
  return static_cast<Index>(conv_cores(graph).size());
}

/// Parameter shapes a node must carry, derived from its attributes.
template <typename Scalar>
std::map<std::string, Shape> expected_param_shapes(const LayerNode<Scalar>& n) {
  std::map<std::string, Shape> shapes;
  switch (n.kind) {
    case LayerKind::kConv2d: {
      const auto& a = n.conv();
      shapes["weight"] = {a.out_channels, a.in_channels, a.kernel_h, a.kernel_w};
      if (a.bias) shapes["bias"] = {a.out_channels};
      break;
    }
    case LayerKind::kInstanceNorm:
      if (n.norm().affine) {
        shapes["gamma"] = {n.norm().channels};
        shapes["beta"] = {n.norm().channels};
      }
      break;
    case LayerKind::kConvGRUCell: {
      const auto g = gru_gate_geometry(n.gru());
      for (const auto& w : gru_weight_names()) {
        shapes[w] = {g.out_channels, g.in_channels, g.kernel_h, g.kernel_w};
        shapes[gru_bias_for(w)] = {g.out_channels};
      }
      break;
    }
    default:
      break;
  }
  return shapes;
}

inline Index conv_output_extent(Index in, Index kernel, Index stride, Index padding) {
  const Index span = in + 2 * padding - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

inline ActShape input_shape_at(const GraphInput& in, Resolution res) {
  return {in.channels, res.height / in.stride, res.width / in.stride};
}

/// Checks declared resolution against the graph's stride requirements.
template <typename Scalar>
void check_resolution(const Graph<Scalar>& graph, Resolution res) {
  if (res.height <= 0 || res.width <= 0) {
    fail(ErrorCode::kInvalidArgument, "resolution must be positive");
  }
  auto require = [&](Index m, const std::string& why) {
    if (m > 1 && (res.height % m != 0 || res.width % m != 0)) {
      fail(ErrorCode::kShapeMismatch, "resolution " + std::to_string(res.height) + "x" +
                                          std::to_string(res.width) + " is not a multiple of " +
                                          std::to_string(m) + " (" + why + ")");
    }
  };
  require(graph.resolution_multiple, "stride chain of '" + graph.name + "'");
  for (const auto& in : graph.inputs) require(in.stride, "input '" + in.name + "'");
}

/// Static shape inference. Returns the per-sample shape of every value
/// (graph inputs and node outputs) keyed by name.
template <typename Scalar>
std::map<std::string, ActShape> infer_shapes(const Graph<Scalar>& graph, Resolution res) {
  check_resolution(graph, res);
  std::map<std::string, ActShape> shapes;
  for (const auto& in : graph.inputs) shapes[in.name] = input_shape_at(in, res);

  auto shape_of = [&](const LayerNode<Scalar>& n, std::size_t i) -> const ActShape& {
    auto it = shapes.find(n.inputs[i]);
    if (it == shapes.end()) {
      fail(ErrorCode::kInvalidGraph,
           "node '" + n.id + "' input '" + n.inputs[i] + "' is not an earlier value");
    }
    return it->second;
  };
  auto mismatch = [](const LayerNode<Scalar>& n, const std::string& what) {
    fail(ErrorCode::kShapeMismatch, "node '" + n.id + "' (" + to_string(n.kind) + "): " + what);
  };

  for (const auto& n : graph.nodes) {
    if (n.inputs.empty()) mismatch(n, "no inputs");
    ActShape out;
    switch (n.kind) {
      case LayerKind::kConv2d: {
        const auto& a = n.conv();
        const auto& s = shape_of(n, 0);
        if (n.inputs.size() != 1) mismatch(n, "expects one input");
        if (s.channels != a.in_channels) {
          mismatch(n, "expects " + std::to_string(a.in_channels) + " input channels, got " +
                          std::to_string(s.channels));
        }
        out = {a.out_channels, conv_output_extent(s.height, a.kernel_h, a.stride, a.padding),
               conv_output_extent(s.width, a.kernel_w, a.stride, a.padding)};
        if (out.height <= 0 || out.width <= 0) mismatch(n, "kernel larger than padded input");
        break;
      }
      case LayerKind::kInstanceNorm: {
        const auto& s = shape_of(n, 0);
        if (n.inputs.size() != 1) mismatch(n, "expects one input");
        if (s.channels != n.norm().channels) mismatch(n, "channel count differs from attrs");
        out = s;
        break;
      }
      case LayerKind::kReLU:
      case LayerKind::kSigmoid:
      case LayerKind::kTanh:
        if (n.inputs.size() != 1) mismatch(n, "expects one input");
        out = shape_of(n, 0);
        break;
      case LayerKind::kAdd: {
        if (n.inputs.size() < 2) mismatch(n, "expects at least two inputs");
        out = shape_of(n, 0);
        for (std::size_t i = 1; i < n.inputs.size(); ++i) {
          if (!(shape_of(n, i) == out)) mismatch(n, "operand shapes differ");
        }
        break;
      }
      case LayerKind::kConcat: {
        out = shape_of(n, 0);
        out.channels = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const auto& s = shape_of(n, i);
          if (s.height != out.height || s.width != out.width) mismatch(n, "spatial extents differ");
          out.channels += s.channels;
        }
        break;
      }
      case LayerKind::kConvGRUCell: {
        if (n.inputs.size() != 2) mismatch(n, "expects [hidden, input]");
        const auto& h = shape_of(n, 0);
        const auto& x = shape_of(n, 1);
        if (h.channels != n.gru().hidden) mismatch(n, "hidden channel count differs from attrs");
        if (x.channels != n.gru().input) mismatch(n, "input channel count differs from attrs");
        if (h.height != x.height || h.width != x.width) mismatch(n, "hidden/input extents differ");
        out = h;
        break;
      }
    }
    shapes[n.id] = out;
  }
  return shapes;
}

/// Structural validation: unique names, producers precede consumers, every
/// parameter present with the shape its attributes require. With
/// `check_params` false only the topology is checked.
template <typename Scalar>
void validate(const Graph<Scalar>& graph, bool check_params = true) {
  std::set<std::string> seen;
  for (const auto& in : graph.inputs) {
    if (in.channels <= 0 || in.stride <= 0) {
      fail(ErrorCode::kInvalidGraph, "input '" + in.name + "' has invalid declaration");
    }
    if (!seen.insert(in.name).second) fail(ErrorCode::kInvalidGraph, "duplicate name '" + in.name + "'");
  }
  for (const auto& n : graph.nodes) {
    for (const auto& src : n.inputs) {
      if (!seen.count(src)) {
        fail(ErrorCode::kInvalidGraph,
             "node '" + n.id + "' input '" + src + "' does not resolve to an earlier value");
      }
    }
    if (!seen.insert(n.id).second) fail(ErrorCode::kInvalidGraph, "duplicate name '" + n.id + "'");
    for (const auto& core : conv_cores_of(n)) {
      const auto& g = core.geometry;
      if (g.in_channels <= 0 || g.out_channels <= 0 || g.kernel_h <= 0 || g.kernel_w <= 0 ||
          g.stride <= 0 || g.padding < 0) {
        fail(ErrorCode::kInvalidGraph, "node '" + n.id + "' has invalid convolution attributes");
      }
      if (g.kernel_h * g.kernel_w * g.in_channels > kMaxReductionSize) {
        fail(ErrorCode::kInvalidGraph, "node '" + n.id + "' reduction size exceeds " +
                                           std::to_string(kMaxReductionSize));
      }
    }
    if (!check_params) continue;
    const auto expected = expected_param_shapes(n);
    for (const auto& [pname, shape] : expected) {
      auto it = n.params.find(pname);
      if (it == n.params.end()) {
        fail(ErrorCode::kMissingParameter, "node '" + n.id + "' is missing parameter '" + pname + "'");
      }
      if (it->second.shape() != shape) {
        fail(ErrorCode::kShapeMismatch, "node '" + n.id + "' parameter '" + pname + "' has shape " +
                                            shape_string(it->second.shape()) + ", expected " +
                                            shape_string(shape));
      }
    }
    if (n.params.size() != expected.size()) {
      fail(ErrorCode::kInvalidGraph, "node '" + n.id + "' carries unexpected parameters");
    }
  }
  for (const auto& out : graph.outputs) {
    if (!graph.find(out)) fail(ErrorCode::kInvalidGraph, "output '" + out + "' is not a node");
  }
}

/// Hash of topology, attributes and parameter shapes (not values).
template <typename Scalar>
std::uint64_t structural_fingerprint(const Graph<Scalar>& graph) {
  std::uint64_t h = fnv1a(graph.name.data(), graph.name.size());
  auto mix_str = [&](const std::string& s) { h = fnv1a(s.data(), s.size(), h);
    h = fnv1a("|", 1, h);
  };
  auto mix_int = [&](Index v) { h = fnv1a(&v, sizeof v, h); };
  for (const auto& in : graph.inputs) {
    mix_str(in.name);
    mix_int(in.channels);
    mix_int(in.stride);
  }
  for (const auto& n : graph.nodes) {
    mix_str(n.id);
    mix_int(static_cast<Index>(n.kind));
    for (const auto& src : n.inputs) mix_str(src);
    for (const auto& [k, v] : n.params) {
      mix_str(k);
      for (Index e : v.shape()) mix_int(e);
    }
  }
  for (const auto& o : graph.outputs) mix_str(o);
  return h;
}

/// Total element count over all parameters, from raw tensor shapes.
template <typename Scalar>
Index raw_parameter_count(const Graph<Scalar>& graph) {
  Index total = 0;
  for (const auto& n : graph.nodes) {
    for (const auto& [k, v] : n.params) total += v.size();
  }
  return total;
}

// ---------------------------------------------------------------------------
// Builder

/// Appends layers while tracking channel counts; parameters start at zero.
template <typename Scalar>
class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name, Index resolution_multiple = 1) {
    graph_.name = std::move(name);
    graph_.resolution_multiple = resolution_multiple;
  }

  const std::string& input(const std::string& name, Index channels, Index stride = 1) {
    graph_.inputs.push_back({name, channels, stride});
    channels_[name] = channels;
    return graph_.inputs.back().name;
  }

  std::string conv(const std::string& id, const std::string& src, Index out_channels, Index kernel,
                   Index stride = 1, Index padding = -1, bool bias = true) {
    ConvAttrs a{channels(src), out_channels, kernel, kernel, stride,
                padding < 0 ? kernel / 2 : padding, bias};
    return add_node(id, LayerKind::kConv2d, a, {src}, out_channels);
  }

  std::string norm(const std::string& id, const std::string& src, bool affine = true) {
    const Index c = channels(src);
    auto name = add_node(id, LayerKind::kInstanceNorm, NormAttrs{c, affine}, {src}, c);
    if (affine) graph_.nodes.back().params["gamma"] = Tensor<Scalar>({c}, Scalar(1));
    return name;
  }

  std::string relu(const std::string& id, const std::string& src) {
    return add_node(id, LayerKind::kReLU, std::monostate{}, {src}, channels(src));
  }
  std::string sigmoid(const std::string& id, const std::string& src) {
    return add_node(id, LayerKind::kSigmoid, std::monostate{}, {src}, channels(src));
  }
  std::string tanh(const std::string& id, const std::string& src) {
    return add_node(id, LayerKind::kTanh, std::monostate{}, {src}, channels(src));
  }
  std::string add(const std::string& id, const std::vector<std::string>& srcs) {
    return add_node(id, LayerKind::kAdd, std::monostate{}, srcs, channels(srcs.front()));
  }
  std::string concat(const std::string& id, const std::vector<std::string>& srcs) {
    Index c = 0;
    for (const auto& s : srcs) c += channels(s);
    return add_node(id, LayerKind::kConcat, std::monostate{}, srcs, c);
  }
  std::string gru(const std::string& id, const std::string& hidden, const std::string& x,
                  Index kernel = 3) {
    GruAttrs a{channels(hidden), channels(x), kernel};
    return add_node(id, LayerKind::kConvGRUCell, a, {hidden, x}, a.hidden);
  }

  void output(const std::string& id) { graph_.outputs.push_back(id); }

  Index channels(const std::string& src) const {
    auto it = channels_.find(src);
    if (it == channels_.end()) fail(ErrorCode::kInvalidGraph, "unknown value '" + src + "'");
    return it->second;
  }

  Graph<Scalar> build() {
    validate(graph_);
    return graph_;
  }
  Graph<Scalar>& graph() { return graph_; }

 private:
  std::string add_node(const std::string& id, LayerKind kind, LayerAttrs attrs,
                       std::vector<std::string> srcs, Index out_channels) {
    LayerNode<Scalar> n;
    n.id = id;
    n.kind = kind;
    n.attrs = attrs;
    n.inputs = std::move(srcs);
    for (const auto& [pname, shape] : expected_param_shapes(n)) {
      n.params.emplace(pname, Tensor<Scalar>(shape));
    }
    graph_.nodes.push_back(std::move(n));
    channels_[id] = out_channels;
    return id;
  }

  Graph<Scalar> graph_;
  std::unordered_map<std::string, Index> channels_;
};

/// Kaiming-uniform (fan-in, ReLU gain) conv weights, zero biases, unit
/// norm scales. Deterministic in `seed` and node order.
template <typename Scalar>
void initialize_parameters(Graph<Scalar>& graph, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& n : graph.nodes) {
    for (auto& [pname, t] : n.params) {
      const bool is_weight = (n.kind == LayerKind::kConv2d && pname == "weight") ||
                             (n.kind == LayerKind::kConvGRUCell && pname[0] == 'w');
      if (is_weight) {
        const Index fan_in = t.dim(1) * t.dim(2) * t.dim(3);
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
      } else if (pname == "gamma") {
        t.vec().setOnes();
      } else {
        t.vec().setZero();
      }
    }
  }
}

}  // namespace spaq
