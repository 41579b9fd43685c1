#include "spaq/quantize.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <limits>

namespace spaq::quant {

const char* to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::kAsymmetricPerTensor: return "asymmetric-per-tensor";
    case Scheme::kSymmetricPerChannel: return "symmetric-per-channel";
    case Scheme::kSymmetricPerTensor: return "symmetric-per-tensor";
  }
  return "?";
}

Scheme scheme_from_string(const std::string& name) {
  if (name == "asymmetric-per-tensor") return Scheme::kAsymmetricPerTensor;
  if (name == "symmetric-per-channel" || name == "per-channel") return Scheme::kSymmetricPerChannel;
  if (name == "symmetric-per-tensor" || name == "per-tensor") return Scheme::kSymmetricPerTensor;
  fail(ErrorCode::kInvalidArgument, "unknown quantization scheme '" + name + "'");
}

double round_half_away(double x) { return std::round(x); }

namespace {

std::int32_t saturate_i32(double v) {
  if (!(v == v)) return 0;
  if (v >= static_cast<double>(std::numeric_limits<std::int32_t>::max())) {
    return std::numeric_limits<std::int32_t>::max();
  }
  if (v <= static_cast<double>(std::numeric_limits<std::int32_t>::min())) {
    return std::numeric_limits<std::int32_t>::min();
  }
  return static_cast<std::int32_t>(v);
}

std::int32_t saturate_i32(std::int64_t v) {
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(
      v, std::numeric_limits<std::int32_t>::min(), std::numeric_limits<std::int32_t>::max()));
}

struct Sites {
  std::string input;
  std::string output;
};

Sites core_sites(const ConvCore& core) {
  if (core.weight == "weight") return {"", core.node};
  const std::string out = core.node + "/" + core.weight.substr(1);
  return {core.node + (core.weight == "wh" ? "/h_in" : "/zr_in"), out};
}

Sites core_sites(const GraphF& graph, const ConvCore& core) {
  Sites s = core_sites(core);
  if (s.input.empty()) s.input = graph.node(core.node).inputs.at(0);
  return s;
}

const QuantRecord& record_at(const QuantizedGraph& qg, const std::string& site) {
  auto it = qg.activations.find(site);
  if (it == qg.activations.end()) {
    fail(ErrorCode::kMissingRecord, "no activation record for site '" + site + "'");
  }
  return it->second;
}

TensorF int8_conv(const QuantizedGraph& qg, const ConvCall<float>& call) {
  const std::string key = call.weight == "weight" ? call.node.id : call.node.id + "/" + call.weight;
  auto it = qg.convs.find(key);
  if (it == qg.convs.end()) fail(ErrorCode::kMissingRecord, "no quantized weights for '" + key + "'");
  const QuantizedConv& qc = it->second;
  const QuantRecord& in = record_at(qg, qc.input_site);
  const QuantRecord& out = record_at(qg, qc.output_site);
  const ConvAttrs& a = qc.geometry;
  const TensorF& x = call.x;
  if (x.rank() != 4 || x.dim(1) != a.in_channels) {
    fail(ErrorCode::kShapeMismatch, "quantized conv '" + key + "': input " + shape_string(x.shape()));
  }
  if (qc.requant.size() != static_cast<std::size_t>(a.out_channels)) {
    fail(ErrorCode::kInvalidGraph, "quantized conv '" + key + "' is not prepared");
  }

  // Entry quantization to zero-centred integer codes.
  TensorI32 codes(x.shape());
  for (Index i = 0; i < x.size(); ++i) codes[i] = quantize_value(x[i], in) - in.zero_point;

  const Index out_h = conv_output_extent(x.dim(2), a.kernel_h, a.stride, a.padding);
  const Index out_w = conv_output_extent(x.dim(3), a.kernel_w, a.stride, a.padding);
  const Index k = a.in_channels * a.kernel_h * a.kernel_w;
  const Index batch = x.dim(0);
  const detail::IntMatrix<std::int8_t> w = qc.weight.matrix(a.out_channels, k);
  const Eigen::Matrix<std::int32_t, Eigen::Dynamic, 1>* bias = qc.bias ? &qc.bias->vec() : nullptr;

  TensorF y({batch, a.out_channels, out_h, out_w});
  detail::IntMatrix<std::int32_t> cols, acc;
  auto& stats = kernel_stats();
  for (Index n = 0; n < batch; ++n) {
    ops::im2col(codes, n, a, out_h, out_w, cols);
    const bool flagged =
        raises_fp_flags([&] { detail::integer_accumulate<std::int32_t>(w, cols, bias, acc); });
    ++stats.accumulations;
    if (flagged) ++stats.fp_flag_events;
    float* dst = y.data() + n * a.out_channels * out_h * out_w;
    for (Index c = 0; c < a.out_channels; ++c) {
      const FixedPointMultiplier m = qc.requant[static_cast<std::size_t>(c)];
      for (Index p = 0; p < out_h * out_w; ++p) {
        const std::int64_t q = static_cast<std::int64_t>(out.zero_point) + apply_multiplier(acc(c, p), m);
        const auto clamped = static_cast<std::int32_t>(std::clamp<std::int64_t>(q, kActivationMin, kActivationMax));
        dst[c * out_h * out_w + p] = out.scale * static_cast<float>(clamped - out.zero_point);
      }
    }
  }
  return y;
}

}  // namespace

QuantRecord activation_record(float observed_min, float observed_max,
                              std::vector<std::string>* warnings) {
  QuantRecord r;
  r.scheme = Scheme::kAsymmetricPerTensor;
  r.observed_min = observed_min;
  r.observed_max = observed_max;
  const double lo = std::min(0.0, static_cast<double>(observed_min));
  const double hi = std::max(0.0, static_cast<double>(observed_max));
  if (!(hi > lo)) {
    r.scale = 1.0f;
    r.zero_point = 0;
    if (warnings) warnings->push_back("degenerate activation range; using scale 1");
    return r;
  }
  r.scale = static_cast<float>((hi - lo) / 255.0);
  const double zp = round_half_away(-lo * 255.0 / (hi - lo));
  r.zero_point = static_cast<std::int32_t>(std::clamp(zp, 0.0, 255.0));
  return r;
}

std::vector<float> weight_scales(const TensorF& weight, Scheme scheme, std::vector<std::string>* warnings) {
  const Index cout = weight.dim(0);
  const Index per = weight.size() / cout;
  const auto m = weight.matrix(cout, per);
  auto scale_of = [&](float max_abs) {
    if (!(max_abs > 0.0f)) {
      if (warnings) warnings->push_back("degenerate weight range; using scale 1");
      return 1.0f;
    }
    return static_cast<float>(static_cast<double>(max_abs) / kWeightMax);
  };
  if (scheme == Scheme::kSymmetricPerTensor) return {scale_of(m.cwiseAbs().maxCoeff())};
  std::vector<float> scales(static_cast<std::size_t>(cout));
  for (Index c = 0; c < cout; ++c) scales[static_cast<std::size_t>(c)] = scale_of(m.row(c).cwiseAbs().maxCoeff());
  return scales;
}

std::int32_t quantize_value(double x, const QuantRecord& record) {
  const double q = round_half_away(x / record.scale);
  if (record.scheme == Scheme::kAsymmetricPerTensor) {
    return static_cast<std::int32_t>(std::clamp(q + record.zero_point, double(kActivationMin), double(kActivationMax)));
  }
  return static_cast<std::int32_t>(std::clamp(q, double(-kWeightMax), double(kWeightMax)));
}

double dequantize_value(std::int32_t q, const QuantRecord& record) {
  return static_cast<double>(record.scale) * static_cast<double>(q - record.zero_point);
}

std::int8_t quantize_weight(float w, float scale) {
  const double q = round_half_away(static_cast<double>(w) / static_cast<double>(scale));
  return static_cast<std::int8_t>(std::clamp(q, double(-kWeightMax), double(kWeightMax)));
}

FixedPointMultiplier fixed_point(double real) {
  if (!(real > 0.0) || !std::isfinite(real)) return {0, 0};
  int exponent = 0;
  const double q = std::frexp(real, &exponent);
  auto m = static_cast<std::int64_t>(round_half_away(q * 2147483648.0));
  if (m == (std::int64_t{1} << 31)) {
    m /= 2;
    ++exponent;
  }
  return {static_cast<std::int32_t>(m), exponent};
}

std::int32_t apply_multiplier(std::int64_t acc, FixedPointMultiplier m) {
  const std::int64_t product = acc * static_cast<std::int64_t>(m.multiplier);
  const int right = 31 - m.shift;
  if (right <= 0) {
    const __int128 v = static_cast<__int128>(product) << std::min(-right, 64);
    const __int128 lo = std::numeric_limits<std::int32_t>::min();
    const __int128 hi = std::numeric_limits<std::int32_t>::max();
    return static_cast<std::int32_t>(v < lo ? lo : (v > hi ? hi : v));
  }
  if (right >= 63) return 0;
  const std::uint64_t mag = product < 0 ? static_cast<std::uint64_t>(-product) : static_cast<std::uint64_t>(product);
  const std::uint64_t rounded = (mag + (std::uint64_t{1} << (right - 1))) >> right;
  const auto signed_value = static_cast<std::int64_t>(rounded);
  return saturate_i32(product < 0 ? -signed_value : signed_value);
}

std::int32_t requantize_reference(std::int64_t acc, double real) {
  return saturate_i32(round_half_away(static_cast<double>(acc) * real));
}

Calibration calibrate(const GraphF& graph, const CalibrationSet& calib, Scheme weight_scheme) {
  validate(graph);
  if (calib.batches.empty()) fail(ErrorCode::kInvalidArgument, "calibration set is empty");
  if (weight_scheme == Scheme::kAsymmetricPerTensor) {
    fail(ErrorCode::kInvalidArgument, "weights use a symmetric scheme");
  }
  std::map<std::string, std::pair<float, float>> ranges;
  ExecOptions<float> opt;
  opt.observe = [&](const std::string& site, const TensorF& t) {
    if (t.size() == 0) return;
    const float mn = t.vec().minCoeff(), mx = t.vec().maxCoeff();
    auto [it, inserted] = ranges.try_emplace(site, mn, mx);
    if (!inserted) {
      it->second.first = std::min(it->second.first, mn);
      it->second.second = std::max(it->second.second, mx);
    }
  };
  for (const auto& batch : calib.batches) execute(graph, batch, opt);

  Calibration out;
  out.weight_scheme = weight_scheme;
  for (const auto& core : conv_cores(graph)) {
    const Sites sites = core_sites(graph, core);
    for (const auto& site : {sites.input, sites.output}) {
      if (out.activations.count(site)) continue;
      const auto& [mn, mx] = ranges.at(site);
      std::vector<std::string> w;
      out.activations[site] = activation_record(mn, mx, &w);
      for (auto& msg : w) out.warnings.push_back(site + ": " + msg);
    }
    std::vector<std::string> w;
    out.weight_scales[core.name()] =
        weight_scales(graph.node(core.node).param(core.weight), weight_scheme, &w);
    for (auto& msg : w) out.warnings.push_back(core.name() + ": " + msg);
  }
  return out;
}

QuantizedGraph quantize_graph(const GraphF& graph, const Calibration& calibration) {
  validate(graph);
  QuantizedGraph qg;
  qg.graph = graph;
  auto record = [&](const std::string& site) -> const QuantRecord& {
    auto it = calibration.activations.find(site);
    if (it == calibration.activations.end()) {
      fail(ErrorCode::kMissingRecord, "no activation record for site '" + site + "'");
    }
    return it->second;
  };
  for (const auto& core : conv_cores(graph)) {
    const auto& node = graph.node(core.node);
    auto ws = calibration.weight_scales.find(core.name());
    if (ws == calibration.weight_scales.end()) {
      fail(ErrorCode::kMissingRecord, "no weight record for layer '" + core.name() + "'");
    }
    const Sites sites = core_sites(graph, core);
    const QuantRecord& in = record(sites.input);
    qg.activations[sites.input] = in;
    qg.activations[sites.output] = record(sites.output);

    QuantizedConv qc;
    qc.node = core.node;
    qc.weight_param = core.weight;
    qc.bias_param = core.bias;
    qc.geometry = core.geometry;
    qc.scales = ws->second;
    qc.scheme = qc.scales.size() == 1 && core.geometry.out_channels > 1 ? Scheme::kSymmetricPerTensor
                                                                        : calibration.weight_scheme;
    if (qc.scales.size() != 1 && qc.scales.size() != static_cast<std::size_t>(core.geometry.out_channels)) {
      fail(ErrorCode::kShapeMismatch, "weight record for '" + core.name() + "' has wrong length");
    }
    qc.input_site = sites.input;
    qc.output_site = sites.output;
    const TensorF& w = node.param(core.weight);
    qc.weight = TensorI8(w.shape());
    const Index per = w.size() / core.geometry.out_channels;
    for (Index i = 0; i < w.size(); ++i) qc.weight[i] = quantize_weight(w[i], qc.scale_for(i / per));
    if (!core.bias.empty()) {
      const TensorF& b = node.param(core.bias);
      TensorI32 bq(b.shape());
      for (Index c = 0; c < b.size(); ++c) {
        const double s = static_cast<double>(in.scale) * static_cast<double>(qc.scale_for(c));
        bq[c] = saturate_i32(round_half_away(static_cast<double>(b[c]) / s));
      }
      qc.bias = std::move(bq);
    }
    auto& params = qg.graph.node(core.node).params;
    params.erase(core.weight);
    if (!core.bias.empty()) params.erase(core.bias);
    qg.convs.emplace(core.name(), std::move(qc));
  }
  prepare(qg);
  return qg;
}

void prepare(QuantizedGraph& qg) {
  for (auto& [name, qc] : qg.convs) {
    const double s_in = record_at(qg, qc.input_site).scale;
    const double s_out = record_at(qg, qc.output_site).scale;
    qc.requant.resize(static_cast<std::size_t>(qc.geometry.out_channels));
    for (Index c = 0; c < qc.geometry.out_channels; ++c) {
      qc.requant[static_cast<std::size_t>(c)] = fixed_point(s_in * qc.scale_for(c) / s_out);
    }
  }
}

TensorMap<float> quantized_forward(const QuantizedGraph& graph, const TensorMap<float>& inputs) {
  validate(graph.graph, false);
  ExecOptions<float> opt;
  opt.conv = [&graph](const ConvCall<float>& call) { return int8_conv(graph, call); };
  return execute(graph.graph, inputs, opt);
}

TensorF dequantize_weight(const QuantizedConv& conv) {
  TensorF w(conv.weight.shape());
  const Index per = w.size() / conv.geometry.out_channels;
  for (Index i = 0; i < w.size(); ++i) {
    w[i] = static_cast<float>(conv.weight[i]) * conv.scale_for(i / per);
  }
  return w;
}

KernelStats& kernel_stats() {
  thread_local KernelStats stats;
  return stats;
}

void reset_kernel_stats() { kernel_stats() = KernelStats{}; }

bool raises_fp_flags(const std::function<void()>& fn) {
  std::feclearexcept(FE_ALL_EXCEPT);
  fn();
  return std::fetestexcept(FE_ALL_EXCEPT) != 0;
}

QuantizeResult spaq_quantize(const GraphF& graph, const CalibrationSet& calib, const QuantizeOptions& options) {
  QuantizeResult r;
  r.calibration = calibrate(graph, calib, options.weight_scheme);
  r.graph = quantize_graph(graph, r.calibration);
  r.before = accounting::cost_report(graph, options.resolution, options.save);
  r.after = accounting::cost_report(r.graph, options.resolution, options.save);
  r.size_reduction = accounting::reduction(static_cast<double>(r.before.size_bytes),
                                           static_cast<double>(r.after.size_bytes));
  return r;
}

}  // namespace spaq::quant
