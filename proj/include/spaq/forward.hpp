#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>

#include "spaq/graph.hpp"
#include "spaq/ops.hpp"
#include "spaq/tensor.hpp"

namespace spaq {

template <typename Scalar>
using TensorMap = std::map<std::string, Tensor<Scalar>>;

/// (node id, parameter name)
using ParamKey = std::pair<std::string, std::string>;

template <typename Scalar>
using GradientMap = std::map<ParamKey, Tensor<Scalar>>;

/// Saved intermediates of one ConvGRU step.
template <typename Scalar>
struct GruCache {
  Tensor<Scalar> hx;   // [h, x]
  Tensor<Scalar> rhx;  // [r*h, x]
  Tensor<Scalar> z;
  Tensor<Scalar> r;
  Tensor<Scalar> q;  // candidate, tanh applied
};

/// One convolution invocation as seen by a pluggable kernel. Site names
/// identify activations for calibration: a Conv2d reads its producer's value
/// and writes its own id; GRU gates read `<id>/zr_in` or `<id>/h_in` and write
/// `<id>/z`, `<id>/r`, `<id>/h`.
template <typename Scalar>
struct ConvCall {
  const LayerNode<Scalar>& node;
  const std::string& weight;
  const std::string& bias;
  const ConvAttrs& geometry;
  const std::string& input_site;
  const std::string& output_site;
  const Tensor<Scalar>& x;
};

template <typename Scalar>
using ConvKernel = std::function<Tensor<Scalar>(const ConvCall<Scalar>&)>;

template <typename Scalar>
using Observer = std::function<void(const std::string& site, const Tensor<Scalar>&)>;

template <typename Scalar>
Tensor<Scalar> dense_conv(const ConvCall<Scalar>& call) {
  const Tensor<Scalar>* bias = call.bias.empty() ? nullptr : &call.node.param(call.bias);
  return ops::conv2d(call.x, call.node.param(call.weight), bias, call.geometry);
}

template <typename Scalar>
struct GruStep {
  Tensor<Scalar> hidden;
  GruCache<Scalar> cache;
};

/// z = sigmoid(Conv_z([h,x])), r = sigmoid(Conv_r([h,x])),
/// q = tanh(Conv_h([r*h, x])), h' = (1-z)*h + z*q.
template <typename Scalar>
GruStep<Scalar> gru_forward(const LayerNode<Scalar>& cell, const Tensor<Scalar>& h,
                            const Tensor<Scalar>& x, const ConvKernel<Scalar>& kernel,
                            const Observer<Scalar>& observe) {
  const auto& a = cell.gru();
  if (h.rank() != 4 || x.rank() != 4) fail(ErrorCode::kShapeMismatch, "gru '" + cell.id + "': rank");
  if (h.dim(1) != a.hidden || x.dim(1) != a.input) {
    fail(ErrorCode::kShapeMismatch,
         "gru '" + cell.id + "': expected hidden/input channels " + std::to_string(a.hidden) + "/" +
             std::to_string(a.input) + ", got " + std::to_string(h.dim(1)) + "/" +
             std::to_string(x.dim(1)));
  }
  if (h.dim(0) != x.dim(0) || h.dim(2) != x.dim(2) || h.dim(3) != x.dim(3)) {
    fail(ErrorCode::kShapeMismatch, "gru '" + cell.id + "': hidden " + shape_string(h.shape()) +
                                        " and input " + shape_string(x.shape()) + " disagree");
  }
  const ConvAttrs geom = gru_gate_geometry(a);
  const std::string zr_in = cell.id + "/zr_in", h_in = cell.id + "/h_in";
  const std::string z_site = cell.id + "/z", r_site = cell.id + "/r", h_site = cell.id + "/h";
  const std::string wz = "wz", wr = "wr", wh = "wh", bz = "bz", br = "br", bh = "bh";

  GruStep<Scalar> step;
  auto& c = step.cache;
  c.hx = concat_channels<Scalar>({&h, &x});
  if (observe) observe(zr_in, c.hx);
  Tensor<Scalar> z_pre = kernel(ConvCall<Scalar>{cell, wz, bz, geom, zr_in, z_site, c.hx});
  Tensor<Scalar> r_pre = kernel(ConvCall<Scalar>{cell, wr, br, geom, zr_in, r_site, c.hx});
  if (observe) {
    observe(z_site, z_pre);
    observe(r_site, r_pre);
  }
  c.z = ops::sigmoid(z_pre);
  c.r = ops::sigmoid(r_pre);
  Tensor<Scalar> rh(h.shape());
  rh.vec() = c.r.vec().cwiseProduct(h.vec());
  c.rhx = concat_channels<Scalar>({&rh, &x});
  if (observe) observe(h_in, c.rhx);
  Tensor<Scalar> q_pre = kernel(ConvCall<Scalar>{cell, wh, bh, geom, h_in, h_site, c.rhx});
  if (observe) observe(h_site, q_pre);
  c.q = ops::tanh(q_pre);
  step.hidden = Tensor<Scalar>(h.shape());
  step.hidden.vec() = (Scalar(1) - c.z.vec().array()).matrix().cwiseProduct(h.vec()) +
                      c.z.vec().cwiseProduct(c.q.vec());
  return step;
}

/// Single ConvGRU update with dense fp convolutions.
template <typename Scalar>
Tensor<Scalar> conv_gru_step(const LayerNode<Scalar>& cell, const Tensor<Scalar>& hidden,
                             const Tensor<Scalar>& input) {
  if (cell.kind != LayerKind::kConvGRUCell) {
    fail(ErrorCode::kInvalidArgument, "node '" + cell.id + "' is not a ConvGRUCell");
  }
  return gru_forward<Scalar>(cell, hidden, input, dense_conv<Scalar>, {}).hidden;
}

/// Forward intermediates needed by `backward`.
template <typename Scalar>
struct GradientTape {
  const Graph<Scalar>* graph = nullptr;
  std::uint64_t fingerprint = 0;
  std::unordered_map<std::string, Tensor<Scalar>> values;
  std::map<std::string, GruCache<Scalar>> gru;
};

template <typename Scalar>
struct ExecOptions {
  ConvKernel<Scalar> conv = dense_conv<Scalar>;
  Observer<Scalar> observe;
  GradientTape<Scalar>* tape = nullptr;
};

/// Derives the analysis resolution from concrete inputs and checks them
/// against the graph declaration.
template <typename Scalar>
Resolution check_inputs(const Graph<Scalar>& graph, const TensorMap<Scalar>& inputs) {
  Resolution res;
  Index batch = -1;
  for (const auto& in : graph.inputs) {
    auto it = inputs.find(in.name);
    if (it == inputs.end()) fail(ErrorCode::kShapeMismatch, "missing graph input '" + in.name + "'");
    const auto& t = it->second;
    if (t.rank() != 4 || t.dim(1) != in.channels) {
      fail(ErrorCode::kShapeMismatch, "input '" + in.name + "' has shape " + shape_string(t.shape()) +
                                          ", expected " + std::to_string(in.channels) + " channels");
    }
    if (batch < 0) {
      batch = t.dim(0);
      res = {t.dim(2) * in.stride, t.dim(3) * in.stride};
    }
    if (t.dim(0) != batch || t.dim(2) * in.stride != res.height ||
        t.dim(3) * in.stride != res.width) {
      fail(ErrorCode::kShapeMismatch, "input '" + in.name + "' disagrees with other inputs");
    }
  }
  return res;
}

/// Runs the graph. Convolutions go through `opt.conv`, every produced value
/// is reported to `opt.observe`, and intermediates are kept on `opt.tape`.
template <typename Scalar>
TensorMap<Scalar> execute(const Graph<Scalar>& graph, const TensorMap<Scalar>& inputs,
                          const ExecOptions<Scalar>& opt) {
  const Resolution res = check_inputs(graph, inputs);
  infer_shapes(graph, res);

  std::unordered_map<std::string, Tensor<Scalar>> values;
  for (const auto& in : graph.inputs) {
    values[in.name] = inputs.at(in.name);
    if (opt.observe) opt.observe(in.name, values[in.name]);
  }
  auto value = [&](const std::string& name) -> const Tensor<Scalar>& { return values.at(name); };

  for (const auto& n : graph.nodes) {
    Tensor<Scalar> out;
    switch (n.kind) {
      case LayerKind::kConv2d: {
        const std::string bias = n.conv().bias ? "bias" : "";
        const std::string weight = "weight";
        out = opt.conv(ConvCall<Scalar>{n, weight, bias, n.conv(), n.inputs[0], n.id,
                                        value(n.inputs[0])});
        break;
      }
      case LayerKind::kInstanceNorm: {
        const Tensor<Scalar>* gamma = n.norm().affine ? &n.param("gamma") : nullptr;
        const Tensor<Scalar>* beta = n.norm().affine ? &n.param("beta") : nullptr;
        out = ops::instance_norm(value(n.inputs[0]), gamma, beta);
        break;
      }
      case LayerKind::kReLU:
        out = ops::relu(value(n.inputs[0]));
        break;
      case LayerKind::kSigmoid:
        out = ops::sigmoid(value(n.inputs[0]));
        break;
      case LayerKind::kTanh:
        out = ops::tanh(value(n.inputs[0]));
        break;
      case LayerKind::kAdd: {
        out = value(n.inputs[0]);
        for (std::size_t i = 1; i < n.inputs.size(); ++i) out.vec() += value(n.inputs[i]).vec();
        break;
      }
      case LayerKind::kConcat: {
        std::vector<const Tensor<Scalar>*> parts;
        for (const auto& src : n.inputs) parts.push_back(&value(src));
        out = concat_channels(parts);
        break;
      }
      case LayerKind::kConvGRUCell: {
        auto step = gru_forward(n, value(n.inputs[0]), value(n.inputs[1]), opt.conv, opt.observe);
        out = std::move(step.hidden);
        if (opt.tape) opt.tape->gru[n.id] = std::move(step.cache);
        break;
      }
    }
    if (opt.observe) opt.observe(n.id, out);
    values[n.id] = std::move(out);
  }

  TensorMap<Scalar> result;
  for (const auto& o : graph.outputs) result[o] = values.at(o);
  if (opt.tape) {
    opt.tape->graph = &graph;
    opt.tape->fingerprint = structural_fingerprint(graph);
    opt.tape->values = std::move(values);
  }
  return result;
}

template <typename Scalar>
TensorMap<Scalar> forward(const Graph<Scalar>& graph, const TensorMap<Scalar>& inputs) {
  return execute(graph, inputs, ExecOptions<Scalar>{});
}

/// Forward pass that records intermediates on `tape`.
template <typename Scalar>
TensorMap<Scalar> forward(const Graph<Scalar>& graph, const TensorMap<Scalar>& inputs,
                          GradientTape<Scalar>& tape) {
  ExecOptions<Scalar> opt;
  opt.tape = &tape;
  return execute(graph, inputs, opt);
}

namespace detail {

template <typename Scalar>
void accumulate(std::unordered_map<std::string, Tensor<Scalar>>& grads, const std::string& name,
                const Tensor<Scalar>& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, g);
  } else {
    it->second.vec() += g.vec();
  }
}

template <typename Scalar>
void gru_backward(const LayerNode<Scalar>& cell, const Tensor<Scalar>& h, const GruCache<Scalar>& c,
                  const Tensor<Scalar>& dh_new, GradientMap<Scalar>& params, Tensor<Scalar>& dh,
                  Tensor<Scalar>& dx) {
  const auto& a = cell.gru();
  const ConvAttrs geom = gru_gate_geometry(a);
  using Arr = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  const Arr z = c.z.vec().array(), r = c.r.vec().array(), q = c.q.vec().array();
  const Arr hv = h.vec().array(), d = dh_new.vec().array();

  dh = Tensor<Scalar>(h.shape());
  dh.vec() = (d * (Scalar(1) - z)).matrix();
  Tensor<Scalar> dq_pre(h.shape()), dz_pre(h.shape());
  dq_pre.vec() = (d * z * (Scalar(1) - q * q)).matrix();
  dz_pre.vec() = (d * (q - hv) * z * (Scalar(1) - z)).matrix();

  auto gh = ops::conv2d_backward(c.rhx, cell.param("wh"), geom, dq_pre);
  params[{cell.id, "wh"}].vec() += gh.dweight.vec();
  params[{cell.id, "bh"}].vec() += gh.dbias.vec();
  Tensor<Scalar> drh = slice_channels(gh.dx, 0, a.hidden);
  dx = slice_channels(gh.dx, a.hidden, a.input);
  Tensor<Scalar> dr_pre(h.shape());
  dr_pre.vec() = (drh.vec().array() * hv * r * (Scalar(1) - r)).matrix();
  dh.vec() += (drh.vec().array() * r).matrix();

  auto gz = ops::conv2d_backward(c.hx, cell.param("wz"), geom, dz_pre);
  auto gr = ops::conv2d_backward(c.hx, cell.param("wr"), geom, dr_pre);
  params[{cell.id, "wz"}].vec() += gz.dweight.vec();
  params[{cell.id, "bz"}].vec() += gz.dbias.vec();
  params[{cell.id, "wr"}].vec() += gr.dweight.vec();
  params[{cell.id, "br"}].vec() += gr.dbias.vec();
  Tensor<Scalar> dhx = gz.dx;
  dhx.vec() += gr.dx.vec();
  dh.vec() += slice_channels(dhx, 0, a.hidden).vec();
  dx.vec() += slice_channels(dhx, a.hidden, a.input).vec();
}

}  // namespace detail

/// Reverse pass over a recorded forward. `output_grads` holds dLoss/dOutput
/// for any subset of graph outputs. Every parameter gets an entry; those not
/// reached by the loss stay zero. Input gradients are written to
/// `input_grads` when provided.
template <typename Scalar>
GradientMap<Scalar> backward(const GradientTape<Scalar>& tape, const TensorMap<Scalar>& output_grads,
                             TensorMap<Scalar>* input_grads = nullptr) {
  if (!tape.graph) fail(ErrorCode::kTapeMismatch, "tape holds no recorded forward pass");
  const Graph<Scalar>& graph = *tape.graph;
  if (structural_fingerprint(graph) != tape.fingerprint) {
    fail(ErrorCode::kTapeMismatch, "graph '" + graph.name + "' changed since the forward pass");
  }

  GradientMap<Scalar> params;
  for (const auto& n : graph.nodes) {
    for (const auto& [pname, t] : n.params) params.emplace(ParamKey{n.id, pname}, Tensor<Scalar>(t.shape()));
  }

  std::unordered_map<std::string, Tensor<Scalar>> grads;
  for (const auto& [name, g] : output_grads) {
    const auto it = tape.values.find(name);
    if (it == tape.values.end() || it->second.shape() != g.shape()) {
      fail(ErrorCode::kTapeMismatch, "output gradient '" + name + "' does not match the tape");
    }
    detail::accumulate(grads, name, g);
  }
  auto value = [&](const std::string& name) -> const Tensor<Scalar>& { return tape.values.at(name); };

  for (auto n_it = graph.nodes.rbegin(); n_it != graph.nodes.rend(); ++n_it) {
    const auto& n = *n_it;
    auto g_it = grads.find(n.id);
    if (g_it == grads.end()) continue;
    const Tensor<Scalar> dy = std::move(g_it->second);
    grads.erase(g_it);
    switch (n.kind) {
      case LayerKind::kConv2d: {
        auto g = ops::conv2d_backward(value(n.inputs[0]), n.param("weight"), n.conv(), dy);
        params[{n.id, "weight"}].vec() += g.dweight.vec();
        if (n.conv().bias) params[{n.id, "bias"}].vec() += g.dbias.vec();
        detail::accumulate(grads, n.inputs[0], g.dx);
        break;
      }
      case LayerKind::kInstanceNorm: {
        const Tensor<Scalar>* gamma = n.norm().affine ? &n.param("gamma") : nullptr;
        auto g = ops::instance_norm_backward(value(n.inputs[0]), gamma, dy);
        if (n.norm().affine) {
          params[{n.id, "gamma"}].vec() += g.dgamma.vec();
          params[{n.id, "beta"}].vec() += g.dbeta.vec();
        }
        detail::accumulate(grads, n.inputs[0], g.dx);
        break;
      }
      case LayerKind::kReLU: {
        const auto& x = value(n.inputs[0]);
        Tensor<Scalar> dx(dy.shape());
        dx.vec() = (x.vec().array() > Scalar(0)).select(dy.vec(), Scalar(0));
        detail::accumulate(grads, n.inputs[0], dx);
        break;
      }
      case LayerKind::kSigmoid: {
        const auto& y = value(n.id).vec().array();
        Tensor<Scalar> dx(dy.shape());
        dx.vec() = (dy.vec().array() * y * (Scalar(1) - y)).matrix();
        detail::accumulate(grads, n.inputs[0], dx);
        break;
      }
      case LayerKind::kTanh: {
        const auto& y = value(n.id).vec().array();
        Tensor<Scalar> dx(dy.shape());
        dx.vec() = (dy.vec().array() * (Scalar(1) - y * y)).matrix();
        detail::accumulate(grads, n.inputs[0], dx);
        break;
      }
      case LayerKind::kAdd:
        for (const auto& src : n.inputs) detail::accumulate(grads, src, dy);
        break;
      case LayerKind::kConcat: {
        Index offset = 0;
        for (const auto& src : n.inputs) {
          const Index c = value(src).dim(1);
          detail::accumulate(grads, src, slice_channels(dy, offset, c));
          offset += c;
        }
        break;
      }
      case LayerKind::kConvGRUCell: {
        const auto c_it = tape.gru.find(n.id);
        if (c_it == tape.gru.end()) fail(ErrorCode::kTapeMismatch, "no GRU cache for '" + n.id + "'");
        Tensor<Scalar> dh, dx;
        detail::gru_backward(n, value(n.inputs[0]), c_it->second, dy, params, dh, dx);
        detail::accumulate(grads, n.inputs[0], dh);
        detail::accumulate(grads, n.inputs[1], dx);
        break;
      }
    }
  }
  if (input_grads) {
    for (const auto& in : graph.inputs) {
      auto it = grads.find(in.name);
      (*input_grads)[in.name] = it != grads.end() ? it->second : Tensor<Scalar>(value(in.name).shape());
    }
  }
  return params;
}

/// Convenience overload for single-output graphs.
template <typename Scalar>
GradientMap<Scalar> backward(const GradientTape<Scalar>& tape, const Tensor<Scalar>& loss_grad) {
  if (!tape.graph || tape.graph->outputs.size() != 1) {
    fail(ErrorCode::kTapeMismatch, "single-tensor backward needs a single-output graph");
  }
  return backward(tape, TensorMap<Scalar>{{tape.graph->outputs.front(), loss_grad}});
}

}  // namespace spaq
