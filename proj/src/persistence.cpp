#include "spaq/persistence.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "spaq/forward.hpp"
#include "spaq/quantize.hpp"

namespace spaq::persistence {

using json = nlohmann::json;

namespace {

constexpr char kActivationPrefix = '@';

struct TensorEntry {
  std::string name;  // "<node>:<param>"
  std::string node;
  DType dtype = DType::kFloat32;
  Shape shape;
  const void* data = nullptr;
  std::uint64_t bytes = 0;
  std::uint64_t offset = 0;
};

struct QuantEntry {
  std::string name;
  std::string node;  // empty when not attributable to a node
  quant::Scheme scheme = quant::Scheme::kSymmetricPerChannel;
  std::vector<std::pair<float, std::int32_t>> groups;
};

struct Plan {
  std::string descriptor;
  std::vector<TensorEntry> tensors;
  std::vector<QuantEntry> quants;
  std::uint32_t flags = 0;
};

json attrs_json(const LayerNode<float>& n) {
  json j = json::object();
  if (const auto* c = std::get_if<ConvAttrs>(&n.attrs)) {
    j = {{"in", c->in_channels}, {"out", c->out_channels}, {"kh", c->kernel_h}, {"kw", c->kernel_w},
         {"stride", c->stride}, {"padding", c->padding}, {"bias", c->bias}};
  } else if (const auto* m = std::get_if<NormAttrs>(&n.attrs)) {
    j = {{"channels", m->channels}, {"affine", m->affine}};
  } else if (const auto* g = std::get_if<GruAttrs>(&n.attrs)) {
    j = {{"hidden", g->hidden}, {"input", g->input}, {"kernel", g->kernel}};
  }
  return j;
}

json topology_json(const GraphF& g) {
  json j;
  j["format"] = "spaq-model";
  j["name"] = g.name;
  j["resolution_multiple"] = g.resolution_multiple;
  j["inputs"] = json::array();
  for (const auto& in : g.inputs) {
    j["inputs"].push_back({{"name", in.name}, {"channels", in.channels}, {"stride", in.stride}});
  }
  j["outputs"] = g.outputs;
  j["nodes"] = json::array();
  for (const auto& n : g.nodes) {
    j["nodes"].push_back({{"id", n.id}, {"kind", to_string(n.kind)}, {"inputs", n.inputs}, {"attrs", attrs_json(n)}});
  }
  return j;
}

template <typename T>
TensorEntry tensor_entry(const std::string& node, const std::string& param, const Tensor<T>& t) {
  TensorEntry e;
  e.name = node + ":" + param;
  e.node = node;
  e.dtype = Tensor<T>::kDType;
  e.shape = t.shape();
  e.data = t.data();
  e.bytes = static_cast<std::uint64_t>(t.size()) * sizeof(T);
  return e;
}

std::string site_owner(const GraphF& g, const std::string& site) {
  if (g.find(site)) return site;
  const auto slash = site.rfind('/');
  if (slash != std::string::npos) {
    const auto* n = g.find(site.substr(0, slash));
    if (n && n->kind == LayerKind::kConvGRUCell) return n->id;
  }
  return {};
}

void assign_offsets(Plan& p) {
  std::uint64_t offset = 0;
  for (auto& t : p.tensors) {
    t.offset = offset;
    offset += t.bytes;
  }
}

Plan make_plan(const GraphF& g, const SaveOptions& opt) {
  Plan p;
  json d = topology_json(g);
  d["state"] = "fp32";
  if (!opt.metadata.empty()) d["metadata"] = opt.metadata;
  p.descriptor = d.dump();
  for (const auto& n : g.nodes) {
    for (const auto& [name, t] : n.params) p.tensors.push_back(tensor_entry(n.id, name, t));
  }
  if (opt.digest) p.flags |= kFlagDigest;
  assign_offsets(p);
  return p;
}

Plan make_plan(const quant::QuantizedGraph& qg, const SaveOptions& opt) {
  Plan p;
  p.flags = kFlagInt8 | (opt.digest ? kFlagDigest : 0u);
  json d = topology_json(qg.graph);
  d["state"] = "int8";
  d["convs"] = json::array();
  d["activations"] = json::array();
  for (const auto& n : qg.graph.nodes) {
    // Parameters of a node sorted by name, whichever precision they are in.
    std::map<std::string, TensorEntry> entries;
    for (const auto& [name, t] : n.params) entries.emplace(name, tensor_entry(n.id, name, t));
    for (const auto& core : conv_cores_of(n)) {
      auto it = qg.convs.find(core.name());
      if (it == qg.convs.end()) fail(ErrorCode::kMissingRecord, "no quantized weights for '" + core.name() + "'");
      const auto& qc = it->second;
      entries.emplace(qc.weight_param, tensor_entry(n.id, qc.weight_param, qc.weight));
      if (qc.bias) entries.emplace(qc.bias_param, tensor_entry(n.id, qc.bias_param, *qc.bias));
      QuantEntry q;
      q.name = n.id + ":" + qc.weight_param;
      q.node = n.id;
      q.scheme = qc.scheme;
      for (float s : qc.scales) q.groups.emplace_back(s, 0);
      p.quants.push_back(std::move(q));
      d["convs"].push_back({{"core", core.name()},
                            {"node", qc.node},
                            {"weight", qc.weight_param},
                            {"bias", qc.bias_param},
                            {"input_site", qc.input_site},
                            {"output_site", qc.output_site}});
    }
    for (auto& [name, e] : entries) p.tensors.push_back(std::move(e));
  }
  for (const auto& [site, r] : qg.activations) {
    QuantEntry q;
    q.name = std::string(1, kActivationPrefix) + site;
    q.node = site_owner(qg.graph, site);
    q.scheme = r.scheme;
    q.groups.emplace_back(r.scale, r.zero_point);
    p.quants.push_back(std::move(q));
    d["activations"].push_back({{"site", site}, {"min", r.observed_min}, {"max", r.observed_max}});
  }
  if (!opt.metadata.empty()) d["metadata"] = opt.metadata;
  p.descriptor = d.dump();
  assign_offsets(p);
  return p;
}

std::uint64_t tensor_entry_bytes(const TensorEntry& t) {
  return 4 + t.name.size() + 1 + 4 + 8 * t.shape.size() + 8 + 8;
}

std::uint64_t quant_entry_bytes(const QuantEntry& q) { return 4 + q.name.size() + 1 + 4 + 8 * q.groups.size(); }

FileLayout plan_layout(const Plan& p) {
  FileLayout lay;
  lay.descriptor = p.descriptor.size();
  lay.tensor_table = 4;
  lay.quant_table = 4;
  lay.payload = 8;
  for (const auto& t : p.tensors) {
    lay.tensor_table += tensor_entry_bytes(t);
    lay.payload += t.bytes;
    lay.per_node[t.node] += t.bytes;
  }
  for (const auto& q : p.quants) {
    lay.quant_table += quant_entry_bytes(q);
    if (!q.node.empty()) lay.per_node[q.node] += 8 * q.groups.size();
  }
  return lay;
}

// --- little-endian writer / reader -----------------------------------------

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  template <typename T>
  void scalar(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    out_.insert(out_.end(), buf, buf + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), b, b + n);
  }
  void string(const std::string& s) {
    scalar(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor_payload(const TensorEntry& t) {
    const std::size_t width = dtype_size(t.dtype);
    if constexpr (std::endian::native == std::endian::little) {
      bytes(t.data, t.bytes);
    } else {
      const auto* b = static_cast<const std::uint8_t*>(t.data);
      for (std::uint64_t i = 0; i < t.bytes; i += width) {
        for (std::size_t k = width; k-- > 0;) out_.push_back(b[i + k]);
      }
    }
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::uint64_t n, const char* what) const {
    if (n > in_.size() - pos_) {
      fail(ErrorCode::kTruncated, std::string("file ends inside ") + what);
    }
  }
  template <typename T>
  T scalar(const char* what) {
    need(sizeof(T), what);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, in_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string string(const char* what) {
    const auto n = scalar<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void skip(std::uint64_t n, const char* what) {
    need(n, what);
    pos_ += n;
  }
  std::size_t remaining() const { return in_.size() - pos_; }
  const std::uint8_t* at(std::size_t p) const { return in_.data() + p; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> write_plan(const Plan& p, std::uint64_t digest) {
  const FileLayout lay = plan_layout(p);
  std::vector<std::uint8_t> out;
  out.reserve(lay.total());
  Writer w(out);
  w.bytes(kMagic, 4);
  w.scalar<std::uint32_t>(kFormatVersion);
  w.scalar<std::uint32_t>(p.flags);
  w.scalar<std::uint32_t>(0);
  w.scalar<std::uint64_t>(digest);
  w.scalar<std::uint64_t>(p.descriptor.size());
  w.bytes(p.descriptor.data(), p.descriptor.size());
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.tensors.size()));
  for (const auto& t : p.tensors) {
    w.string(t.name);
    w.scalar<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) w.scalar<std::uint64_t>(static_cast<std::uint64_t>(e));
    w.scalar<std::uint64_t>(t.offset);
    w.scalar<std::uint64_t>(t.bytes);
  }
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(p.quants.size()));
  for (const auto& q : p.quants) {
    w.string(q.name);
    w.scalar<std::uint8_t>(static_cast<std::uint8_t>(q.scheme));
    w.scalar<std::uint32_t>(static_cast<std::uint32_t>(q.groups.size()));
    for (const auto& [s, zp] : q.groups) {
      w.scalar<float>(s);
      w.scalar<std::int32_t>(zp);
    }
  }
  std::uint64_t payload = 0;
  for (const auto& t : p.tensors) payload += t.bytes;
  w.scalar<std::uint64_t>(payload);
  for (const auto& t : p.tensors) w.tensor_payload(t);
  if (out.size() != lay.total()) fail(ErrorCode::kIo, "internal size mismatch while encoding");
  return out;
}

// --- decoding ----------------------------------------------------------------

template <typename T>
T get_field(const json& j, const char* key) {
  if (!j.contains(key)) fail(ErrorCode::kMalformedFile, std::string("descriptor lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedFile, std::string("descriptor field '") + key + "': " + e.what());
  }
}

GraphF topology_from_json(const json& d) {
  GraphF g;
  g.name = get_field<std::string>(d, "name");
  g.resolution_multiple = get_field<Index>(d, "resolution_multiple");
  for (const auto& in : get_field<json>(d, "inputs")) {
    g.inputs.push_back({get_field<std::string>(in, "name"), get_field<Index>(in, "channels"),
                        get_field<Index>(in, "stride")});
  }
  g.outputs = get_field<std::vector<std::string>>(d, "outputs");
  for (const auto& jn : get_field<json>(d, "nodes")) {
    LayerNode<float> n;
    n.id = get_field<std::string>(jn, "id");
    try {
      n.kind = layer_kind_from_string(get_field<std::string>(jn, "kind"));
    } catch (const Error& e) {
      fail(ErrorCode::kMalformedFile, e.what());
    }
    n.inputs = get_field<std::vector<std::string>>(jn, "inputs");
    const json a = get_field<json>(jn, "attrs");
    switch (n.kind) {
      case LayerKind::kConv2d:
        n.attrs = ConvAttrs{get_field<Index>(a, "in"),     get_field<Index>(a, "out"),
                            get_field<Index>(a, "kh"),     get_field<Index>(a, "kw"),
                            get_field<Index>(a, "stride"), get_field<Index>(a, "padding"),
                            get_field<bool>(a, "bias")};
        break;
      case LayerKind::kInstanceNorm:
        n.attrs = NormAttrs{get_field<Index>(a, "channels"), get_field<bool>(a, "affine")};
        break;
      case LayerKind::kConvGRUCell:
        n.attrs = GruAttrs{get_field<Index>(a, "hidden"), get_field<Index>(a, "input"),
                           get_field<Index>(a, "kernel")};
        break;
      default:
        break;
    }
    g.nodes.push_back(std::move(n));
  }
  return g;
}

struct RawTensor {
  DType dtype;
  Shape shape;
  std::uint64_t offset;
  std::uint64_t bytes;
};

template <typename T>
Tensor<T> read_tensor(const RawTensor& raw, const std::uint8_t* payload) {
  Tensor<T> t(raw.shape);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(t.data(), payload + raw.offset, raw.bytes);
  } else {
    auto* dst = reinterpret_cast<std::uint8_t*>(t.data());
    for (std::uint64_t i = 0; i < raw.bytes; i += sizeof(T)) {
      for (std::size_t k = 0; k < sizeof(T); ++k) dst[i + k] = payload[raw.offset + i + sizeof(T) - 1 - k];
    }
  }
  return t;
}

std::pair<std::string, std::string> split_tensor_name(const std::string& name) {
  const auto colon = name.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == name.size()) {
    fail(ErrorCode::kMalformedFile, "tensor name '" + name + "' is not <node>:<param>");
  }
  return {name.substr(0, colon), name.substr(colon + 1)};
}

void wrap_validate(const GraphF& g, bool params) {
  try {
    validate(g, params);
  } catch (const Error& e) {
    fail(ErrorCode::kMalformedFile, std::string("invalid graph in file: ") + e.what());
  }
}

TensorMap<float> probe_inputs(const GraphF& g) {
  Index r0 = std::max<Index>(1, g.resolution_multiple);
  for (const auto& in : g.inputs) r0 = std::lcm(r0, in.stride);
  const Index side = r0 * std::max<Index>(2, (8 + r0 - 1) / r0);
  Rng rng(0x5350415144494745ULL);
  TensorMap<float> inputs;
  for (const auto& in : g.inputs) {
    const ActShape s = input_shape_at(in, {side, side});
    TensorF t({1, s.channels, s.height, s.width});
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    inputs[in.name] = std::move(t);
  }
  return inputs;
}

std::uint64_t hash_outputs(const GraphF& g, const TensorMap<float>& outs) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& o : g.outputs) {
    const auto& t = outs.at(o);
    h = fnv1a(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float), h);
  }
  return h;
}

void write_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(ErrorCode::kIo, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::kIo, "cannot rename onto '" + path.string() + "': " + ec.message());
}

}  // namespace

FileLayout layout(const GraphF& graph, const SaveOptions& options) {
  return plan_layout(make_plan(graph, options));
}

FileLayout layout(const quant::QuantizedGraph& graph, const SaveOptions& options) {
  return plan_layout(make_plan(graph, options));
}

std::vector<std::uint8_t> encode(const GraphF& graph, const SaveOptions& options) {
  validate(graph);
  return write_plan(make_plan(graph, options), options.digest ? output_digest(graph) : 0);
}

std::vector<std::uint8_t> encode(const quant::QuantizedGraph& graph, const SaveOptions& options) {
  validate(graph.graph, false);
  return write_plan(make_plan(graph, options), options.digest ? output_digest(graph) : 0);
}

Decoded decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (bytes.size() < 4) fail(ErrorCode::kTruncated, "file shorter than the magic number");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ErrorCode::kBadMagic, "not a SPAQ model file");
  r.skip(4, "magic");
  Decoded out;
  out.version = r.scalar<std::uint32_t>("header");
  if (out.version != kFormatVersion) {
    fail(ErrorCode::kUnsupportedVersion, "format version " + std::to_string(out.version) + " is not supported");
  }
  const auto flags = r.scalar<std::uint32_t>("header");
  r.scalar<std::uint32_t>("header");
  const auto digest = r.scalar<std::uint64_t>("header");
  if (flags & kFlagDigest) out.digest = digest;
  const auto desc_len = r.scalar<std::uint64_t>("header");
  r.need(desc_len, "descriptor");
  const std::string desc(reinterpret_cast<const char*>(r.at(r.pos())), desc_len);
  r.skip(desc_len, "descriptor");

  json d;
  try {
    d = json::parse(desc);
  } catch (const json::exception& e) {
    fail(ErrorCode::kMalformedFile, std::string("descriptor: ") + e.what());
  }
  if (d.contains("metadata")) out.metadata = get_field<std::map<std::string, std::string>>(d, "metadata");
  const std::string state = get_field<std::string>(d, "state");
  const bool int8 = (flags & kFlagInt8) != 0;
  if ((state == "int8") != int8 || (state != "int8" && state != "fp32")) {
    fail(ErrorCode::kMalformedFile, "descriptor state disagrees with header flags");
  }

  std::vector<std::pair<std::string, RawTensor>> tensors;
  const auto n_tensors = r.scalar<std::uint32_t>("tensor table");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = r.string("tensor table");
    const auto code = r.scalar<std::uint8_t>("tensor table");
    if (code > 2) fail(ErrorCode::kMalformedFile, "tensor '" + name + "' has unknown dtype code");
    RawTensor raw{static_cast<DType>(code), {}, 0, 0};
    const auto rank = r.scalar<std::uint32_t>("tensor table");
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto e = r.scalar<std::uint64_t>("tensor table");
      if (e == 0 || e > (std::uint64_t{1} << 40)) fail(ErrorCode::kMalformedFile, "tensor '" + name + "' extent");
      raw.shape.push_back(static_cast<Index>(e));
    }
    raw.offset = r.scalar<std::uint64_t>("tensor table");
    raw.bytes = r.scalar<std::uint64_t>("tensor table");
    if (raw.bytes != static_cast<std::uint64_t>(shape_numel(raw.shape)) * dtype_size(raw.dtype)) {
      fail(ErrorCode::kMalformedFile, "tensor '" + name + "' byte length disagrees with its shape");
    }
    tensors.emplace_back(std::move(name), raw);
  }
  std::map<std::string, QuantEntry> quants;
  const auto n_quants = r.scalar<std::uint32_t>("quant table");
  for (std::uint32_t i = 0; i < n_quants; ++i) {
    QuantEntry q;
    q.name = r.string("quant table");
    const auto code = r.scalar<std::uint8_t>("quant table");
    if (code > 2) fail(ErrorCode::kMalformedFile, "quant entry '" + q.name + "' has unknown scheme");
    q.scheme = static_cast<quant::Scheme>(code);
    const auto groups = r.scalar<std::uint32_t>("quant table");
    r.need(std::uint64_t{8} * groups, "quant table");
    for (std::uint32_t k = 0; k < groups; ++k) {
      const float s = r.scalar<float>("quant table");
      const auto zp = r.scalar<std::int32_t>("quant table");
      q.groups.emplace_back(s, zp);
    }
    if (!quants.emplace(q.name, q).second) fail(ErrorCode::kMalformedFile, "duplicate quant entry '" + q.name + "'");
  }
  const auto payload_len = r.scalar<std::uint64_t>("payload length");
  r.need(payload_len, "payload");
  const std::uint8_t* payload = r.at(r.pos());
  r.skip(payload_len, "payload");
  if (r.remaining() != 0) fail(ErrorCode::kMalformedFile, "trailing bytes after payload");

  // Offsets must lie within the payload and not overlap.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
  for (const auto& [name, raw] : tensors) {
    if (raw.offset > payload_len || raw.bytes > payload_len - raw.offset) {
      fail(ErrorCode::kMalformedFile, "tensor '" + name + "' lies outside the payload");
    }
    spans.emplace_back(raw.offset, raw.bytes);
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
      fail(ErrorCode::kOffsetOverlap, "tensor payload ranges overlap at offset " + std::to_string(spans[i].first));
    }
  }

  GraphF g = topology_from_json(d);
  std::set<std::string> seen;
  quant::QuantizedGraph qg;
  std::map<std::string, json> conv_desc;
  if (int8) {
    for (const auto& c : get_field<json>(d, "convs")) conv_desc[get_field<std::string>(c, "core")] = c;
  }
  std::map<std::string, std::pair<std::string, std::string>> core_of_param;  // node:param -> core
  if (int8) {
    for (const auto& n : g.nodes) {
      for (const auto& core : conv_cores_of(n)) {
        core_of_param[n.id + ":" + core.weight] = {core.name(), "weight"};
        if (!core.bias.empty()) core_of_param[n.id + ":" + core.bias] = {core.name(), "bias"};
      }
    }
  }
  for (const auto& [name, raw] : tensors) {
    if (!seen.insert(name).second) fail(ErrorCode::kMalformedFile, "duplicate tensor '" + name + "'");
    auto [node_id, param] = split_tensor_name(name);
    auto* node = g.find(node_id);
    if (!node) fail(ErrorCode::kMalformedFile, "tensor '" + name + "' names an unknown node");
    const bool has_quant = quants.count(name) > 0;
    if (raw.dtype == DType::kFloat32) {
      if (has_quant) fail(ErrorCode::kMalformedFile, "fp32 tensor '" + name + "' has a quant entry");
      node->params[param] = read_tensor<float>(raw, payload);
      continue;
    }
    if (!int8) fail(ErrorCode::kMalformedFile, "integer tensor '" + name + "' in an fp32 file");
    auto core_it = core_of_param.find(name);
    if (core_it == core_of_param.end()) fail(ErrorCode::kMalformedFile, "integer tensor '" + name + "' is not a conv parameter");
    const auto& [core_name, role] = core_it->second;
    auto& qc = qg.convs[core_name];
    if (role == "weight") {
      if (raw.dtype != DType::kInt8) fail(ErrorCode::kMalformedFile, "weight '" + name + "' must be int8");
      if (!has_quant) fail(ErrorCode::kMalformedFile, "int8 tensor '" + name + "' lacks a quant entry");
      qc.weight = read_tensor<std::int8_t>(raw, payload);
      const auto& q = quants.at(name);
      qc.scheme = q.scheme;
      for (const auto& [s, zp] : q.groups) {
        if (zp != 0 || !(s > 0.0f)) fail(ErrorCode::kMalformedFile, "weight quant entry '" + name + "' is not symmetric");
        qc.scales.push_back(s);
      }
    } else {
      if (raw.dtype != DType::kInt32) fail(ErrorCode::kMalformedFile, "bias '" + name + "' must be int32");
      if (has_quant) fail(ErrorCode::kMalformedFile, "int32 tensor '" + name + "' has a quant entry");
      qc.bias = read_tensor<std::int32_t>(raw, payload);
    }
  }

  if (!int8) {
    if (!quants.empty()) fail(ErrorCode::kMalformedFile, "fp32 file carries quant entries");
    wrap_validate(g, true);
    out.model = std::move(g);
    return out;
  }

  std::map<std::string, std::pair<float, float>> ranges;
  for (const auto& a : get_field<json>(d, "activations")) {
    ranges[get_field<std::string>(a, "site")] = {get_field<float>(a, "min"), get_field<float>(a, "max")};
  }
  for (const auto& [name, q] : quants) {
    if (name.empty() || name[0] != kActivationPrefix) {
      if (!seen.count(name)) fail(ErrorCode::kMalformedFile, "quant entry '" + name + "' has no tensor");
      continue;
    }
    const std::string site = name.substr(1);
    if (q.groups.size() != 1 || !ranges.count(site)) {
      fail(ErrorCode::kMalformedFile, "activation record '" + site + "' is malformed");
    }
    quant::QuantRecord rec;
    rec.scale = q.groups[0].first;
    rec.zero_point = q.groups[0].second;
    rec.scheme = q.scheme;
    rec.observed_min = ranges[site].first;
    rec.observed_max = ranges[site].second;
    if (!(rec.scale > 0.0f) || rec.zero_point < quant::kActivationMin || rec.zero_point > quant::kActivationMax) {
      fail(ErrorCode::kMalformedFile, "activation record '" + site + "' is out of range");
    }
    qg.activations[site] = rec;
  }
  for (const auto& n : g.nodes) {
    for (const auto& core : conv_cores_of(n)) {
      auto it = qg.convs.find(core.name());
      auto dit = conv_desc.find(core.name());
      if (it == qg.convs.end() || dit == conv_desc.end() || it->second.weight.size() == 0) {
        fail(ErrorCode::kMalformedFile, "quantized core '" + core.name() + "' is incomplete");
      }
      auto& qc = it->second;
      qc.node = n.id;
      qc.weight_param = core.weight;
      qc.bias_param = get_field<std::string>(dit->second, "bias");
      qc.geometry = core.geometry;
      qc.input_site = get_field<std::string>(dit->second, "input_site");
      qc.output_site = get_field<std::string>(dit->second, "output_site");
      const Shape want{core.geometry.out_channels, core.geometry.in_channels, core.geometry.kernel_h,
                       core.geometry.kernel_w};
      if (qc.weight.shape() != want || (qc.bias_param.empty() != !qc.bias) ||
          (qc.bias && qc.bias->shape() != Shape{core.geometry.out_channels}) ||
          (qc.scales.size() != 1 && qc.scales.size() != static_cast<std::size_t>(core.geometry.out_channels))) {
        fail(ErrorCode::kMalformedFile, "quantized core '" + core.name() + "' has inconsistent shapes");
      }
      if (!qg.activations.count(qc.input_site) || !qg.activations.count(qc.output_site)) {
        fail(ErrorCode::kMalformedFile, "quantized core '" + core.name() + "' lacks activation records");
      }
    }
  }
  if (qg.convs.size() != conv_cores(g).size()) fail(ErrorCode::kMalformedFile, "unexpected quantized tensors");
  wrap_validate(g, false);
  qg.graph = std::move(g);
  quant::prepare(qg);
  out.model = std::move(qg);
  return out;
}

std::uint64_t save(const GraphF& graph, const std::filesystem::path& path, const SaveOptions& options) {
  const auto bytes = encode(graph, options);
  write_atomic(path, bytes);
  return bytes.size();
}

std::uint64_t save(const quant::QuantizedGraph& graph, const std::filesystem::path& path,
                   const SaveOptions& options) {
  const auto bytes = encode(graph, options);
  write_atomic(path, bytes);
  return bytes.size();
}

std::uint64_t save(const Model& model, const std::filesystem::path& path, const SaveOptions& options) {
  return std::visit([&](const auto& g) { return save(g, path, options); }, model);
}

Decoded load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

std::uint64_t output_digest(const GraphF& graph) {
  if (graph.inputs.empty()) return fnv1a(nullptr, 0);
  return hash_outputs(graph, forward(graph, probe_inputs(graph)));
}

std::uint64_t output_digest(const quant::QuantizedGraph& graph) {
  if (graph.graph.inputs.empty()) return fnv1a(nullptr, 0);
  return hash_outputs(graph.graph, quant::quantized_forward(graph, probe_inputs(graph.graph)));
}

std::uint64_t output_digest(const Model& model) {
  return std::visit([](const auto& g) { return output_digest(g); }, model);
}

VerifyResult verify(const std::filesystem::path& path) {
  const Decoded d = load(path);
  VerifyResult v;
  v.has_digest = d.digest.has_value();
  v.computed = output_digest(d.model);
  v.stored = d.digest.value_or(0);
  v.ok = v.has_digest && v.stored == v.computed;
  return v;
}

const GraphF& topology(const Model& model) {
  if (const auto* g = std::get_if<GraphF>(&model)) return *g;
  return std::get<quant::QuantizedGraph>(model).graph;
}

}  // namespace spaq::persistence
