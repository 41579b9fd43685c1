#include <gtest/gtest.h>

#include "spaq/accounting.hpp"
#include "spaq/persistence.hpp"
#include "spaq/pruning.hpp"
#include "spaq/quantize.hpp"
#include "spaq/zoo.hpp"
#include "test_util.hpp"

namespace spaq {
namespace {

using accounting::CostReport;

GraphF single_conv(Index cin, Index cout, Index k, bool bias, Index pad = -1) {
  GraphBuilder<float> b("one");
  b.input("x", cin);
  b.output(b.conv("c", "x", cout, k, 1, pad, bias));
  GraphF g = b.build();
  initialize_parameters(g, 1);
  return g;
}

quant::CalibrationSet calib_for(const GraphF& g, Resolution res, Index samples = 2) {
  quant::CalibrationSet set;
  for (Index i = 0; i < samples; ++i) set.batches.push_back(testing::random_inputs(g, res, 40 + static_cast<std::uint64_t>(i)));
  set.samples = samples;
  return set;
}

TEST(CountParams, TinyConvolutions) {
  EXPECT_EQ(accounting::count_params(single_conv(1, 1, 1, true)).params_total, 2);
  EXPECT_EQ(accounting::count_params(single_conv(2, 4, 3, true)).params_total, 76);
  EXPECT_EQ(accounting::count_params(single_conv(2, 4, 3, false)).params_total, 72);
}

TEST(CountFlops, HandCountedExamples) {
  EXPECT_EQ(accounting::count_flops(single_conv(1, 1, 1, false), {1, 1}).flops_total, 2);
  EXPECT_EQ(accounting::count_flops(single_conv(1, 1, 3, false, 1), {4, 4}).flops_total, 2 * 9 * 16);
  EXPECT_EQ(accounting::count_flops(single_conv(1, 1, 3, true, 1), {4, 4}).flops_total, 2 * 9 * 16 + 16);
  EXPECT_EQ(accounting::count_flops(single_conv(1, 1, 3, false, 1), {4, 4}, accounting::FlopConvention::kMac)
                .flops_total,
            9 * 16);
}

TEST(CountFlops, OnlyConvolutionsCount) {
  GraphBuilder<float> b("mix");
  b.input("x", 2);
  b.output(b.tanh("t", b.relu("r", b.norm("n", b.conv("c", "x", 2, 1, 1, 0, false)))));
  GraphF g = b.build();
  initialize_parameters(g, 0);
  auto r = accounting::count_flops(g, {3, 3});
  EXPECT_EQ(r.flops_total, 2 * 2 * 2 * 9);
  EXPECT_EQ(r.find("n")->flops, 0);
}

TEST(Accounting, MatchesBruteForceRecountOnRandomGraphs) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    GraphF g = testing::random_graph(seed, {true, seed % 3 == 0, true, 4, 8});
    EXPECT_EQ(accounting::count_params(g).params_total, testing::recount_params(g)) << seed;
    EXPECT_EQ(accounting::count_flops(g, {8, 8}).flops_total, testing::recount_flops(g, {8, 8})) << seed;
    EXPECT_EQ(accounting::count_flops(g, {16, 24}).flops_total, testing::recount_flops(g, {16, 24})) << seed;
  }
}

TEST(Accounting, ZooRecount) {
  for (const char* name : {"fnet", "cnet", "updatenet"}) {
    GraphF g = zoo::build({name});
    EXPECT_EQ(accounting::count_params(g).params_total, testing::recount_params(g)) << name;
    EXPECT_EQ(accounting::count_flops(g, {64, 64}).flops_total, testing::recount_flops(g, {64, 64})) << name;
  }
}

void expect_additive(const CostReport& r) {
  Index p = 0, f = 0;
  std::uint64_t s = 0;
  for (const auto& l : r.per_layer) {
    p += l.params;
    f += l.flops;
    s += l.size_bytes;
  }
  EXPECT_EQ(p, r.params_total);
  EXPECT_EQ(f, r.flops_total);
  EXPECT_EQ(s, r.size_bytes);
}

TEST(Accounting, TotalsAreSumsOfRows) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GraphF g = testing::random_graph(seed, {true, seed % 2 == 1, true, 4, 8});
    expect_additive(accounting::cost_report(g, {8, 8}));
    auto q = quant::quantize_graph(g, quant::calibrate(g, calib_for(g, {8, 8})));
    expect_additive(accounting::cost_report(q, {8, 8}));
  }
  expect_additive(accounting::cost_report(zoo::build({"droid"})));
}

TEST(Accounting, ParamsIgnoreResolutionFlopsDoNot) {
  GraphF g = zoo::build({"fnet"});
  auto a = accounting::cost_report(g, {64, 64});
  auto b = accounting::cost_report(g, {128, 64});
  EXPECT_EQ(a.params_total, b.params_total);
  EXPECT_EQ(a.size_bytes, b.size_bytes);
  EXPECT_EQ(2 * a.flops_total, b.flops_total);
}

TEST(Accounting, SerializedSizeIsEncodedLength) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GraphF g = testing::random_graph(seed);
    EXPECT_EQ(accounting::serialized_size(g), persistence::encode(g).size());
    persistence::SaveOptions opt{false, {{"k", "v"}}};
    EXPECT_EQ(accounting::serialized_size(g, opt), persistence::encode(g, opt).size());
    auto q = quant::quantize_graph(g, quant::calibrate(g, calib_for(g, {8, 8})));
    EXPECT_EQ(accounting::serialized_size(q), persistence::encode(q).size());
  }
}

TEST(Accounting, PruningNeverIncreasesCosts) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    GraphF g = testing::random_graph(seed, {true, seed % 2 == 0, true, 4, 8});
    auto before = accounting::cost_report(g, {8, 8});
    GraphF p = pruning::apply_plan(g, testing::random_plan(g, seed + 1000));
    auto after = accounting::cost_report(p, {8, 8});
    EXPECT_LE(after.params_total, before.params_total);
    EXPECT_LE(after.flops_total, before.flops_total);
    EXPECT_LE(after.size_bytes, before.size_bytes);
  }
}

TEST(Accounting, UniformPruningOfChainShrinksFlopsFaster) {
  GraphBuilder<float> b("chain");
  b.input("x", 3);
  b.output(b.conv("head", b.conv("c2", b.conv("c1", "x", 10, 3), 10, 3), 4, 1, 1, 0));
  GraphF g = b.build();
  initialize_parameters(g, 2);
  pruning::PruningPlan plan;
  plan.layers.push_back({"c1", {"c1"}, 10, 280, 0.1, {3}});
  plan.layers.push_back({"c2", {"c2"}, 10, 910, 0.1, {7}});
  GraphF p = pruning::apply_plan(g, plan);
  auto r = accounting::reduction_report(accounting::cost_report(g, {8, 8}), accounting::cost_report(p, {8, 8}));
  auto conv = [](double cin, double cout, double k) { return (2 * k * k * cin * cout + cout) * 64; };
  const double base = conv(3, 10, 3) + conv(10, 10, 3) + conv(10, 4, 1);
  const double opt = conv(3, 9, 3) + conv(9, 9, 3) + conv(9, 4, 1);
  EXPECT_NEAR(r.flops.raw, 100 * (1 - opt / base), 1e-9);
  EXPECT_GT(r.flops.raw, 10.0);
}

TEST(Reduction, PublishedArithmetic) {
  auto a = accounting::reduction(4.64, 4.20);
  EXPECT_NEAR(a.raw, 100.0 * 0.44 / 4.64, 1e-12);
  EXPECT_DOUBLE_EQ(a.rounded, 9.48);
  EXPECT_NEAR(a.raw, 9.44, 0.5);  // published figure

  auto b = accounting::reduction(4.64, 3.76);
  EXPECT_NEAR(b.raw, 100.0 * 0.88 / 4.64, 1e-12);
  EXPECT_DOUBLE_EQ(b.rounded, 18.97);
  EXPECT_NEAR(b.raw, 18.90, 0.5);

  EXPECT_NEAR(accounting::reduction(15.32, 3.63).raw, 76.3, 0.05);
  EXPECT_NEAR(accounting::reduction(15.32, 3.25).raw, 78.8, 0.05);  // table lists 79.8
  EXPECT_EQ(accounting::reduction(5.0, 5.0).raw, 0.0);
}

TEST(Reduction, MismatchedResolutionsRejected) {
  GraphF g = zoo::build({"toy-residual"});
  auto a = accounting::cost_report(g, {8, 8});
  auto b = accounting::cost_report(g, {16, 16});
  EXPECT_THROW(accounting::reduction_report(a, b), Error);
  auto same = accounting::reduction_report(a, a);
  EXPECT_EQ(same.params.raw, 0.0);
  EXPECT_EQ(same.flops.raw, 0.0);
  EXPECT_EQ(same.size.raw, 0.0);
}

TEST(Size, MebibyteUnits) {
  EXPECT_DOUBLE_EQ(accounting::to_mib(1048576), 1.0);
  const double baseline = accounting::to_mib(4'000'000ull * 4);
  EXPECT_NEAR(baseline, 15.26, 0.005);
  EXPECT_NEAR(baseline, 15.32, 0.1);  // published baseline size
}

TEST(Size, FloatFileIsFourBytesPerParameterPlusFraming) {
  GraphF g = zoo::build({"cnet"});
  auto lay = persistence::layout(g);
  EXPECT_EQ(lay.payload, 8 + 4 * static_cast<std::uint64_t>(testing::recount_params(g)));
  EXPECT_EQ(lay.header, persistence::kHeaderBytes);
}

TEST(Size, MillionInt8WeightsPerTensor) {
  // Ten bias-free 1x1 convolutions of 100k weights each.
  GraphBuilder<float> b("million");
  std::string x = b.input("x", 100);
  for (int i = 0; i < 10; ++i) x = b.conv("c" + std::to_string(i), x, i % 2 == 0 ? 1000 : 100, 1, 1, 0, false);
  b.output(x);
  GraphF g = b.build();
  initialize_parameters(g, 3);
  EXPECT_EQ(testing::recount_params(g), 1'000'000);
  auto cal = quant::calibrate(g, calib_for(g, {2, 2}, 1), quant::Scheme::kSymmetricPerTensor);
  auto q = quant::quantize_graph(g, cal);
  auto lay = persistence::layout(q);
  EXPECT_EQ(lay.payload, 8 + 1'000'000u);
  std::uint64_t node_bytes = 0;
  for (const auto& [n, bytes] : lay.per_node) node_bytes += bytes;
  // The graph input's record has no owning node.
  EXPECT_EQ(node_bytes, 1'000'000u + 10 * 8 + 8 * (q.activations.size() - 1));
}

TEST(Size, PerTensorInt8IsAQuarterUpToMetadata) {
  for (const char* name : {"fnet", "cnet", "updatenet"}) {
    GraphF g = zoo::build({name});
    auto cal = quant::calibrate(g, calib_for(g, {32, 32}, 1), quant::Scheme::kSymmetricPerTensor);
    auto q = quant::quantize_graph(g, cal);

    // Payload: one byte per conv weight, int32 biases, fp32 norm parameters.
    std::uint64_t expected_payload = 8, groups = q.activations.size();
    for (const auto& n : g.nodes) {
      for (const auto& [pname, t] : n.params) {
        const bool weight = (n.kind == LayerKind::kConv2d && pname == "weight") ||
                            (n.kind == LayerKind::kConvGRUCell && pname[0] == 'w');
        expected_payload += static_cast<std::uint64_t>(t.size()) * (weight ? 1 : 4);
        groups += weight;
      }
    }
    const auto fp = persistence::layout(g);
    const auto lay = persistence::layout(q);
    EXPECT_EQ(lay.payload, expected_payload) << name;

    const double metadata_pct = 100.0 * static_cast<double>(8 * groups) / static_cast<double>(fp.total());
    EXPECT_LT(metadata_pct, 0.1) << name;
    auto r = accounting::reduction(static_cast<double>(fp.total()), static_cast<double>(lay.total()));
    EXPECT_LT(r.raw, 75.0) << name;
    EXPECT_GT(r.raw, 74.0) << name;
  }
}

TEST(ConvShare, CountsGruGatesAsConvolution) {
  GraphF g = zoo::build({"toy-gru"});
  auto s = accounting::conv_share(g);
  EXPECT_EQ(s.conv_params, s.total_params);
  GraphF r = zoo::build({"toy-residual"});
  auto t = accounting::conv_share(r);
  EXPECT_EQ(t.total_params - t.conv_params, 8);  // affine norm on 4 channels
}

}  // namespace
}  // namespace spaq
