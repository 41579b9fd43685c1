#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "spaq/accounting.hpp"
#include "spaq/forward.hpp"
#include "spaq/persistence.hpp"
#include "spaq/quantize.hpp"
#include "spaq/zoo.hpp"
#include "test_util.hpp"

namespace spaq {
namespace {

namespace fs = std::filesystem;
using Bytes = std::vector<std::uint8_t>;

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("spaq_test_" + name); }

quant::QuantizedGraph quantized(const GraphF& g, Resolution res, quant::Scheme scheme = quant::Scheme::kSymmetricPerChannel) {
  quant::CalibrationSet s;
  s.batches.push_back(testing::random_inputs(g, res, 1));
  s.samples = 1;
  return quant::quantize_graph(g, quant::calibrate(g, s, scheme));
}

ErrorCode decode_error(const Bytes& b) {
  try {
    persistence::decode(b);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kInvalidGraph;
}

template <typename T>
T read_le(const Bytes& b, std::size_t pos) {
  T v;
  std::memcpy(&v, b.data() + pos, sizeof(T));
  return v;
}

template <typename T>
void write_le(Bytes& b, std::size_t pos, T v) {
  std::memcpy(b.data() + pos, &v, sizeof(T));
}

/// Byte positions of each tensor-table offset field, found by walking the
/// header and table independently of the decoder.
struct TableWalk {
  std::vector<std::size_t> offset_fields;
  std::vector<std::uint8_t> dtypes;
  std::size_t payload_start = 0;  // first payload data byte
};

TableWalk walk(const Bytes& b) {
  TableWalk w;
  std::size_t p = 24;
  const auto desc = read_le<std::uint64_t>(b, p);
  p += 8 + desc;
  const auto n = read_le<std::uint32_t>(b, p);
  p += 4;
  for (std::uint32_t i = 0; i < n; ++i) {
    p += 4 + read_le<std::uint32_t>(b, p);  // name
    w.dtypes.push_back(b[p]);
    p += 1;
    const auto rank = read_le<std::uint32_t>(b, p);
    p += 4 + 8 * rank;
    w.offset_fields.push_back(p);
    p += 16;
  }
  const auto q = read_le<std::uint32_t>(b, p);
  p += 4;
  for (std::uint32_t i = 0; i < q; ++i) {
    p += 4 + read_le<std::uint32_t>(b, p);
    p += 1;
    const auto groups = read_le<std::uint32_t>(b, p);
    p += 4 + 8 * groups;
  }
  w.payload_start = p + 8;
  return w;
}

void expect_same_params(const GraphF& a, const GraphF& b) {
  ASSERT_EQ(a.nodes.size(), b.nodes.size());
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    EXPECT_EQ(a.nodes[i].id, b.nodes[i].id);
    EXPECT_EQ(a.nodes[i].kind, b.nodes[i].kind);
    EXPECT_EQ(a.nodes[i].inputs, b.nodes[i].inputs);
    ASSERT_EQ(a.nodes[i].params.size(), b.nodes[i].params.size());
    for (const auto& [k, t] : a.nodes[i].params) EXPECT_TRUE(t.bitwise_equal(b.nodes[i].params.at(k))) << a.nodes[i].id;
  }
}

TEST(Persistence, Fp32RoundTripIsBitExact) {
  for (const auto& name : zoo::model_names()) {
    const GraphF g = zoo::build({name});
    const Bytes bytes = persistence::encode(g);
    EXPECT_EQ(bytes.size(), accounting::serialized_size(g)) << name;
    auto d = persistence::decode(bytes);
    const auto& back = std::get<GraphF>(d.model);
    EXPECT_EQ(structural_fingerprint(back), structural_fingerprint(g));
    expect_same_params(g, back);
    EXPECT_EQ(persistence::encode(back), bytes) << name;
  }
}

TEST(Persistence, Int8RoundTripIsBitExact) {
  for (const char* name : {"toy-residual", "toy-gru", "fnet"}) {
    const GraphF g = zoo::build({name, 0, {16, 16}});
    const auto qg = quantized(g, {16, 16});
    const Bytes bytes = persistence::encode(qg);
    EXPECT_EQ(bytes.size(), accounting::serialized_size(qg)) << name;
    auto d = persistence::decode(bytes);
    auto& back = std::get<quant::QuantizedGraph>(d.model);
    EXPECT_EQ(persistence::encode(back), bytes) << name;
    ASSERT_EQ(back.convs.size(), qg.convs.size());
    for (const auto& [k, c] : qg.convs) {
      EXPECT_TRUE(c.weight.bitwise_equal(back.convs.at(k).weight)) << k;
      EXPECT_EQ(c.scales, back.convs.at(k).scales) << k;
      EXPECT_EQ(c.scheme, back.convs.at(k).scheme) << k;
      ASSERT_EQ(c.bias.has_value(), back.convs.at(k).bias.has_value()) << k;
      if (c.bias) {
        EXPECT_TRUE(c.bias->bitwise_equal(*back.convs.at(k).bias)) << k;
      }
    }
    for (const auto& [site, r] : qg.activations) {
      EXPECT_EQ(r, back.activations.at(site)) << site;
    }
    const auto in = testing::random_inputs(g, {16, 16}, 9);
    auto a = quant::quantized_forward(qg, in);
    auto b = quant::quantized_forward(back, in);
    for (const auto& [k, t] : a) EXPECT_TRUE(t.bitwise_equal(b.at(k))) << k;
  }
}

TEST(Persistence, SizeMatchesPredictionPerScheme) {
  const GraphF g = zoo::build({"toy-residual"});
  for (auto s : {quant::Scheme::kSymmetricPerChannel, quant::Scheme::kSymmetricPerTensor}) {
    const auto qg = quantized(g, {8, 8}, s);
    EXPECT_EQ(persistence::encode(qg).size(), accounting::serialized_size(qg));
    EXPECT_EQ(persistence::layout(qg).total(), persistence::encode(qg).size());
  }
}

TEST(Persistence, SaveLoadSaveIsIdempotent) {
  const GraphF g = zoo::build({"toy-gru"});
  const auto a = temp_file("a.spaq"), b = temp_file("b.spaq");
  persistence::SaveOptions opt;
  opt.metadata = {{"config_hash", "abc123"}, {"note", "x y"}};
  const auto n = persistence::save(g, a, opt);
  EXPECT_EQ(n, fs::file_size(a));
  auto d = persistence::load(a);
  EXPECT_EQ(d.metadata, opt.metadata);
  persistence::save(d.model, b, {true, d.metadata});
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  EXPECT_EQ(sa, sb);
  fs::remove(a);
  fs::remove(b);
}

TEST(Persistence, EmptyGraphIsLoadable) {
  GraphF g;
  g.name = "empty";
  const Bytes bytes = persistence::encode(g);
  const auto lay = persistence::layout(g);
  EXPECT_EQ(bytes.size(), lay.total());
  // Two zero counts for the tables and a zero payload length.
  EXPECT_EQ(lay.tensor_table, 4u);
  EXPECT_EQ(lay.quant_table, 4u);
  EXPECT_EQ(lay.payload, 8u);
  auto d = persistence::decode(bytes);
  EXPECT_TRUE(std::get<GraphF>(d.model).nodes.empty());
}

TEST(Persistence, HeaderFieldsAreLittleEndian) {
  const Bytes b = persistence::encode(zoo::build({"toy-residual"}));
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "SPAQ");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[5] | b[6] | b[7], 0);
  EXPECT_EQ(persistence::kHeaderBytes, 32u);
}

TEST(Persistence, DistinctErrors) {
  const Bytes good = persistence::encode(zoo::build({"toy-residual"}));

  Bytes magic = good;
  magic[0] = 'X';
  EXPECT_EQ(decode_error(magic), ErrorCode::kBadMagic);

  Bytes version = good;
  write_le<std::uint32_t>(version, 4, 99);
  EXPECT_EQ(decode_error(version), ErrorCode::kUnsupportedVersion);

  for (std::size_t cut : {std::size_t{2}, std::size_t{20}, good.size() / 2, good.size() - 1}) {
    EXPECT_EQ(decode_error(Bytes(good.begin(), good.begin() + static_cast<long>(cut))), ErrorCode::kTruncated) << cut;
  }

  Bytes overlap = good;
  const auto w = walk(good);
  ASSERT_GE(w.offset_fields.size(), 2u);
  write_le<std::uint64_t>(overlap, w.offset_fields[1], read_le<std::uint64_t>(good, w.offset_fields[0]));
  EXPECT_EQ(decode_error(overlap), ErrorCode::kOffsetOverlap);

  Bytes trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), ErrorCode::kMalformedFile);
}

TEST(Persistence, MissingFileIsIoError) {
  try {
    persistence::load(temp_file("does-not-exist.spaq"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

TEST(Persistence, VerifyFlagsCorruptedInt8Payload) {
  const GraphF g = zoo::build({"toy-residual"});
  const auto qg = quantized(g, {8, 8});
  const auto path = temp_file("verify.spaq");
  persistence::save(qg, path);
  auto ok = persistence::verify(path);
  EXPECT_TRUE(ok.has_digest);
  EXPECT_TRUE(ok.ok);
  EXPECT_EQ(ok.stored, persistence::output_digest(qg));

  // Flip one byte of the first int8 weight tensor.
  Bytes bytes = persistence::encode(qg);
  const auto w = walk(bytes);
  std::size_t p = 0;
  while (p < w.dtypes.size() && w.dtypes[p] != 1) ++p;
  ASSERT_LT(p, w.dtypes.size());
  const auto offset = read_le<std::uint64_t>(bytes, w.offset_fields[p]);
  bytes[w.payload_start + offset] ^= 0x40;
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_NO_THROW(persistence::load(path));
  auto bad = persistence::verify(path);
  EXPECT_TRUE(bad.has_digest);
  EXPECT_FALSE(bad.ok);
  EXPECT_NE(bad.stored, bad.computed);
  fs::remove(path);
}

TEST(Persistence, DigestCanBeOmitted) {
  const auto path = temp_file("nodigest.spaq");
  persistence::save(zoo::build({"toy-residual"}), path, {false, {}});
  auto v = persistence::verify(path);
  EXPECT_FALSE(v.has_digest);
  fs::remove(path);
}

TEST(Persistence, DigestIsDeterministicAndSensitive) {
  GraphF g = zoo::build({"toy-residual"});
  const auto a = persistence::output_digest(g);
  EXPECT_EQ(a, persistence::output_digest(zoo::build({"toy-residual"})));
  g.node("head").params.at("bias")[0] += 1.0f;
  EXPECT_NE(a, persistence::output_digest(g));
}

TEST(Persistence, PerNodeBytesCoverTensors) {
  const GraphF g = zoo::build({"cnet"});
  const auto lay = persistence::layout(g);
  std::uint64_t sum = 0;
  for (const auto& [k, v] : lay.per_node) sum += v;
  EXPECT_EQ(sum + 8, lay.payload);
  for (const auto& n : g.nodes) {
    std::uint64_t bytes = 0;
    for (const auto& [k, t] : n.params) bytes += 4 * static_cast<std::uint64_t>(t.size());
    if (bytes) {
      EXPECT_EQ(lay.per_node.at(n.id), bytes) << n.id;
    }
  }
}

}  // namespace
}  // namespace spaq
