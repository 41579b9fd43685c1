#include <gtest/gtest.h>

#include <limits>

#include "spaq/accounting.hpp"
#include "spaq/quantize.hpp"
#include "spaq/zoo.hpp"
#include "test_util.hpp"

namespace spaq {
namespace {

using quant::QuantRecord;
using quant::Scheme;

quant::CalibrationSet single(const TensorMap<float>& in) {
  quant::CalibrationSet s;
  s.batches.push_back(in);
  s.samples = 1;
  return s;
}

TEST(Records, UnitMapping) {
  auto r = quant::activation_record(0.0f, 255.0f);
  EXPECT_EQ(r.scale, 1.0f);
  EXPECT_EQ(r.zero_point, 0);
  EXPECT_EQ(r.scheme, Scheme::kAsymmetricPerTensor);
}

TEST(Records, SymmetricRangeZeroPoint) {
  auto r = quant::activation_record(-1.0f, 1.0f);
  EXPECT_NEAR(r.scale, 2.0 / 255.0, 1e-9);
  EXPECT_EQ(r.zero_point, 128);  // 127.5 rounds away from zero
  EXPECT_EQ(r.observed_min, -1.0f);
  EXPECT_EQ(r.observed_max, 1.0f);
}

TEST(Records, RangeWidenedToIncludeZero) {
  auto r = quant::activation_record(0.5f, 2.0f);
  EXPECT_NEAR(r.scale, 2.0 / 255.0, 1e-9);
  EXPECT_EQ(r.zero_point, 0);
  EXPECT_EQ(r.observed_min, 0.5f);
  auto n = quant::activation_record(-3.0f, -1.0f);
  EXPECT_EQ(n.zero_point, 255);
  EXPECT_EQ(quant::quantize_value(0.0, n), 255);
}

TEST(Records, DegenerateRangeWarns) {
  std::vector<std::string> warnings;
  auto r = quant::activation_record(0.0f, 0.0f, &warnings);
  EXPECT_EQ(r.scale, 1.0f);
  EXPECT_EQ(warnings.size(), 1u);
  auto s = quant::weight_scales(TensorF({2, 1, 1, 1}, {0.0f, 0.5f}), Scheme::kSymmetricPerChannel, &warnings);
  EXPECT_EQ(s[0], 1.0f);
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(Records, WeightScales) {
  TensorF w({2, 1, 1, 2}, {0.635f, -0.1f, 0.2f, -0.254f});
  auto s = quant::weight_scales(w, Scheme::kSymmetricPerChannel);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_FLOAT_EQ(s[0], 0.005f);
  EXPECT_FLOAT_EQ(s[1], 0.002f);
  auto t = quant::weight_scales(w, Scheme::kSymmetricPerTensor);
  ASSERT_EQ(t.size(), 1u);
  EXPECT_FLOAT_EQ(t[0], 0.005f);
  EXPECT_EQ(quant::quantize_weight(0.635f, 0.005f), 127);
  EXPECT_EQ(quant::quantize_weight(0.0f, 0.005f), 0);
  EXPECT_EQ(quant::quantize_weight(-0.0025f, 0.005f), -1);  // half away from zero
}

TEST(Records, RoundingMode) {
  EXPECT_EQ(quant::round_half_away(2.5), 3.0);
  EXPECT_EQ(quant::round_half_away(-2.5), -3.0);
  EXPECT_EQ(quant::round_half_away(0.49), 0.0);
}

TEST(Records, RoundTripWithinHalfStep) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const float lo = static_cast<float>(-5 * rng.uniform()), hi = static_cast<float>(5 * rng.uniform() + 0.01);
    auto r = quant::activation_record(lo, hi);
    for (int k = 0; k < 200; ++k) {
      const double x = lo + (hi - lo) * rng.uniform();
      const double back = quant::dequantize_value(quant::quantize_value(x, r), r);
      // float scales leave the grid a few ulps short of the range ends
      EXPECT_LE(std::abs(back - x), r.scale / 2.0 * (1 + 1e-4)) << lo << " " << hi;
    }
  }
}

TEST(Records, ClampTotalAndMonotone) {
  auto r = quant::activation_record(-0.7f, 1.3f);
  QuantRecord w{0.01f, 0, Scheme::kSymmetricPerChannel, 0, 0};
  std::vector<double> xs;
  for (int k = -600; k <= 600; ++k) xs.push_back(k * 0.005);
  for (double m = 1.0; m < 1e7; m *= 1.7) {
    xs.push_back(m);
    xs.push_back(-m);
  }
  std::sort(xs.begin(), xs.end());
  std::int32_t prev_a = std::numeric_limits<std::int32_t>::min(), prev_w = prev_a;
  for (double x : xs) {
    const auto a = quant::quantize_value(x, r);
    const auto b = quant::quantize_value(x, w);
    EXPECT_GE(a, 0);
    EXPECT_LE(a, 255);
    EXPECT_GE(b, -127);
    EXPECT_LE(b, 127);
    EXPECT_GE(a, prev_a);
    EXPECT_GE(b, prev_w);
    prev_a = a;
    prev_w = b;
  }
  EXPECT_EQ(quant::quantize_value(std::numeric_limits<double>::infinity(), r), 255);
  EXPECT_EQ(quant::quantize_value(-std::numeric_limits<double>::infinity(), w), -127);
}

TEST(FixedPoint, MatchesDoubleReference) {
  Rng rng(3);
  for (int t = 0; t < 20000; ++t) {
    const double real = std::ldexp(0.5 + 0.5 * rng.uniform(), -static_cast<int>(rng.below(20)));
    const auto acc = static_cast<std::int64_t>(rng.below(1u << 24)) - (1 << 23);
    const auto m = quant::fixed_point(real);
    EXPECT_GE(m.multiplier, 1 << 30);
    EXPECT_LE(std::abs(quant::apply_multiplier(acc, m) - quant::requantize_reference(acc, real)), 1) << real;
  }
  EXPECT_EQ(quant::apply_multiplier(7, quant::fixed_point(1.0)), 7);
  EXPECT_EQ(quant::apply_multiplier(-3, quant::fixed_point(0.5)), -2);  // -1.5 away from zero
  EXPECT_EQ(quant::apply_multiplier(1000, quant::fixed_point(4.0)), 4000);
}

TEST(Calibrate, WeightRoundTripOnFnet) {
  GraphF g = zoo::build({"fnet", 0, {32, 32}, 7});
  auto qg = quant::quantize_graph(g, quant::calibrate(g, single(testing::random_inputs(g, {32, 32}, 1))));
  for (const auto& [name, qc] : qg.convs) {
    const TensorF& w = g.node(qc.node).param(qc.weight_param);
    const Index per = w.size() / qc.geometry.out_channels;
    ASSERT_EQ(qc.scales.size(), static_cast<std::size_t>(qc.geometry.out_channels));
    for (Index i = 0; i < w.size(); ++i) {
      const double s = qc.scale_for(i / per);
      ASSERT_LE(std::abs(s * qc.weight[i] - w[i]), s / 2 * (1 + 1e-9)) << name << "[" << i << "]";
    }
    EXPECT_TRUE(quant::dequantize_weight(qc).shape() == w.shape());
  }
}

TEST(Calibrate, Deterministic) {
  GraphF g = testing::random_graph(3);
  auto set = single(testing::random_inputs(g, {8, 8}, 2));
  auto a = quant::calibrate(g, set);
  auto b = quant::calibrate(g, set);
  EXPECT_EQ(a.activations, b.activations);
  EXPECT_EQ(a.weight_scales, b.weight_scales);
}

TEST(Calibrate, RecordsConvBoundariesAndGruSites) {
  GraphF g = zoo::build({"toy-gru"});
  auto cal = quant::calibrate(g, single(testing::random_inputs(g, {8, 8}, 2)));
  for (const char* site : {"x", "enc", "gru/zr_in", "gru/h_in", "gru/z", "gru/r", "gru/h", "head"}) {
    EXPECT_TRUE(cal.activations.count(site)) << site;
  }
  EXPECT_EQ(cal.weight_scales.size(), 5u);
}

TEST(Calibrate, RejectsBadInputs) {
  GraphF g = testing::random_graph(3);
  EXPECT_THROW(quant::calibrate(g, {}), Error);
  TensorMap<float> wrong{{"image", TensorF({1, 9, 8, 8})}};
  try {
    quant::calibrate(g, single(wrong));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kShapeMismatch);
  }
}

TEST(QuantizeGraph, MissingRecords) {
  GraphF g = testing::random_graph(5);
  auto cal = quant::calibrate(g, single(testing::random_inputs(g, {8, 8}, 2)));
  auto no_weights = cal;
  no_weights.weight_scales.erase("head");
  try {
    quant::quantize_graph(g, no_weights);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingRecord);
  }
  auto no_act = cal;
  no_act.activations.erase("head");
  EXPECT_THROW(quant::quantize_graph(g, no_act), Error);

  auto qg = quant::quantize_graph(g, cal);
  qg.activations.erase("head");
  try {
    quant::quantized_forward(qg, testing::random_inputs(g, {8, 8}, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingRecord);
  }
}

TEST(QuantizeGraph, MovesConvParametersOnly) {
  GraphF g = zoo::build({"toy-residual"});
  auto qg = quant::quantize_graph(g, quant::calibrate(g, single(testing::random_inputs(g, {8, 8}, 2))));
  EXPECT_EQ(qg.convs.size(), 4u);
  EXPECT_EQ(qg.graph.node("stem").params.size(), 0u);
  EXPECT_EQ(qg.graph.node("stem.norm").params.size(), 2u);
  EXPECT_EQ(g.node("stem").params.size(), 2u);  // source untouched
  const auto& stem = qg.convs.at("stem");
  ASSERT_TRUE(stem.bias.has_value());
  const double s = qg.activations.at("image").scale * stem.scale_for(1);
  EXPECT_NEAR(s * (*stem.bias)[1], g.node("stem").param("bias")[1], s / 2 * (1 + 1e-9));
}

TEST(QuantizedForward, IdentityScalesAreExact) {
  GraphBuilder<float> b("ints");
  b.input("x", 2);
  b.output(b.relu("r", b.conv("c", "x", 3, 3, 1, 1, true)));
  GraphF g = b.build();
  Rng rng(4);
  auto& w = g.node("c").params.at("weight");
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.below(2));
  g.node("c").params.at("bias") = TensorF({3}, {1.0f, 0.0f, 2.0f});
  TensorF x({1, 2, 5, 5});
  for (Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.below(14));
  TensorMap<float> in{{"x", x}};

  quant::Calibration cal;
  cal.activations["x"] = {1.0f, 0, Scheme::kAsymmetricPerTensor, 0.0f, 255.0f};
  cal.activations["c"] = {1.0f, 0, Scheme::kAsymmetricPerTensor, 0.0f, 255.0f};
  cal.weight_scales["c"] = {1.0f, 1.0f, 1.0f};
  auto qg = quant::quantize_graph(g, cal);
  auto a = quant::quantized_forward(qg, in);
  auto ref = forward(g, in);
  EXPECT_TRUE(a.at("r").bitwise_equal(ref.at("r")));
}

TEST(QuantizedForward, ZeroInputGivesBiasPath) {
  GraphF g = testing::random_graph(14, {false, false, false, 1, 6});
  auto cal = quant::calibrate(g, single(testing::random_inputs(g, {8, 8}, 3)));
  auto qg = quant::quantize_graph(g, cal);
  TensorMap<float> zero;
  for (const auto& i : g.inputs) zero[i.name] = TensorF({1, i.channels, 8, 8}, 0.0f);
  auto q = quant::quantized_forward(qg, zero);
  auto f = forward(g, zero);
  // The head reads the last hidden value, so allow one step per conv on the path.
  double steps = 0.0;
  for (const auto& [name, qc] : qg.convs) steps += qg.activations.at(qc.output_site).scale * 2;
  EXPECT_LE(testing::max_abs_diff(q.at("head"), f.at("head")), steps);
}

TEST(QuantizedForward, WithinAnalyticBoundOnRandomNets) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    GraphF g = testing::random_graph(seed, {false, false, true, 4, 8});
    auto in = testing::random_inputs(g, {8, 8}, seed + 100);
    auto qg = quant::quantize_graph(g, quant::calibrate(g, single(in)));
    auto q = quant::quantized_forward(qg, in);
    auto f = forward(g, in);
    auto bounds = testing::quant_error_bounds(g, qg, in);
    for (const auto& o : g.outputs) {
      EXPECT_LE(testing::worst_bound_slack(q.at(o), f.at(o), bounds.at(o)), 0.0) << seed;
      EXPECT_GT(testing::max_abs_diff(q.at(o), f.at(o)), 0.0) << "suspiciously exact, seed " << seed;
    }
  }
}

TEST(QuantizedForward, PerTensorSchemeAlsoBounded) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GraphF g = testing::random_graph(seed, {false, false, true, 4, 8});
    auto in = testing::random_inputs(g, {8, 8}, seed + 100);
    auto qg = quant::quantize_graph(g, quant::calibrate(g, single(in), Scheme::kSymmetricPerTensor));
    auto q = quant::quantized_forward(qg, in);
    auto f = forward(g, in);
    auto bounds = testing::quant_error_bounds(g, qg, in);
    for (const auto& o : g.outputs) EXPECT_LE(testing::worst_bound_slack(q.at(o), f.at(o), bounds.at(o)), 0.0);
  }
}

TEST(QuantizedForward, IntegerAccumulationRaisesNoFpFlags) {
  EXPECT_TRUE(quant::raises_fp_flags([] {
    volatile double a = 1.0, b = 3.0;
    volatile double c = a / b;
    (void)c;
  }));
  EXPECT_FALSE(quant::raises_fp_flags([] {
    volatile int a = 7, b = 3;
    volatile int c = a * b + a;
    (void)c;
  }));
  GraphF g = zoo::build({"toy-gru"});
  auto in = testing::random_inputs(g, {8, 8}, 5);
  auto qg = quant::quantize_graph(g, quant::calibrate(g, single(in)));
  quant::reset_kernel_stats();
  quant::quantized_forward(qg, in);
  EXPECT_EQ(quant::kernel_stats().accumulations, 5u);
  EXPECT_EQ(quant::kernel_stats().fp_flag_events, 0u);
}

TEST(QuantizedForward, GruNetStaysClose) {
  GraphF g = zoo::build({"toy-gru"});
  auto in = testing::random_inputs(g, {8, 8}, 5);
  auto qg = quant::quantize_graph(g, quant::calibrate(g, single(in)));
  auto q = quant::quantized_forward(qg, in);
  auto f = forward(g, in);
  EXPECT_LT(testing::max_abs_diff(q.at("gru"), f.at("gru")), 0.1);
}

TEST(SpaqQuantize, AllQuantizableTensorsGiveAQuarter) {
  // Bias-free, norm-free: every parameter becomes one byte. A million
  // weights keep the fixed file framing small next to the payload.
  GraphBuilder<float> b("plain");
  std::string x = b.input("x", 100);
  for (int i = 0; i < 10; ++i) x = b.conv("c" + std::to_string(i), x, i % 2 == 0 ? 1000 : 100, 1, 1, 0, false);
  b.output(x);
  GraphF g = b.build();
  initialize_parameters(g, 1);
  const auto calib = single(testing::random_inputs(g, {2, 2}, 1));
  auto r = quant::spaq_quantize(g, calib, {Scheme::kSymmetricPerTensor, {2, 2}, {}});
  EXPECT_EQ(r.before.precision, accounting::PrecisionState::kFp32);
  EXPECT_EQ(r.after.precision, accounting::PrecisionState::kInt8);
  EXPECT_EQ(r.after.params_total, r.before.params_total);
  EXPECT_EQ(r.after.flops_total, r.before.flops_total);
  EXPECT_GE(r.size_reduction.raw, 74.9);
  EXPECT_LT(r.size_reduction.raw, 75.0);
  EXPECT_EQ(r.after.size_bytes, accounting::serialized_size(r.graph));

  // Per-channel scales cost one extra 8-byte group per additional channel.
  auto c = quant::spaq_quantize(g, calib, {Scheme::kSymmetricPerChannel, {2, 2}, {}});
  std::uint64_t extra = 0;
  for (const auto& core : conv_cores(g)) extra += 8 * static_cast<std::uint64_t>(core.geometry.out_channels - 1);
  EXPECT_EQ(c.after.size_bytes - r.after.size_bytes, extra);
}

}  // namespace
}  // namespace spaq
