#include "spaq/zoo.hpp"

#include <algorithm>
#include <array>

namespace spaq::zoo {

namespace {

// Stem (7x7/2) + extra 3x3 conv + three stages of two residual blocks + 1x1
// head: 1 + 1 + 3 * (2 * 2 + 1) + 1 = 18 convolutions.
GraphF encoder(const std::string& name, Index output_dim, bool with_norm) {
  GraphBuilder<float> b(name, 8);
  std::string x = b.input("image", 3, 1);
  auto conv_block = [&](const std::string& id, const std::string& src, Index out, Index k,
                        Index stride, Index pad, const std::string& norm_id) {
    std::string y = b.conv(id, src, out, k, stride, pad);
    if (with_norm) y = b.norm(norm_id, y);
    return y;
  };

  x = b.relu("stem.relu", conv_block("stem", x, 64, 7, 2, 3, "stem.norm"));
  x = b.relu("conv2.relu", conv_block("conv2", x, 64, 3, 1, 1, "conv2.norm"));

  constexpr std::array<Index, 3> kWidths{64, 96, 128};
  constexpr std::array<Index, 3> kStrides{1, 2, 2};
  for (std::size_t s = 0; s < kWidths.size(); ++s) {
    for (int blk = 0; blk < 2; ++blk) {
      const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(blk);
      const Index stride = blk == 0 ? kStrides[s] : 1;
      std::string y = b.relu(p + ".relu1", conv_block(p + ".conv1", x, kWidths[s], 3, stride, 1, p + ".norm1"));
      y = b.relu(p + ".relu2", conv_block(p + ".conv2", y, kWidths[s], 3, 1, 1, p + ".norm2"));
      const std::string skip =
          blk == 0 ? conv_block(p + ".proj", x, kWidths[s], 1, stride, 0, p + ".norm3") : x;
      x = b.relu(p + ".relu3", b.add(p + ".add", {skip, y}));
    }
  }
  b.output(b.conv("head", x, output_dim, 1, 1, 0));
  return b.build();
}

// Correlation encoder 3, flow encoder 3, input fusion 2, GRU gates 3,
// revision head 3, confidence head 3, damping head 2 = 19 convolutions.
GraphF update_net() {
  GraphBuilder<float> b("updatenet", 8);
  const std::string net = b.input("net", 128, 8);
  const std::string inp = b.input("inp", 128, 8);
  const std::string corr = b.input("corr", 196, 8);
  const std::string flow = b.input("flow", 4, 8);

  std::string c = b.relu("corr.relu1", b.conv("corr.conv1", corr, 128, 1, 1, 0));
  c = b.relu("corr.relu2", b.conv("corr.conv2", c, 128, 3));
  c = b.relu("corr.relu3", b.conv("corr.conv3", c, 128, 3));

  std::string f = b.relu("flow.relu1", b.conv("flow.conv1", flow, 128, 7, 1, 3));
  f = b.relu("flow.relu2", b.conv("flow.conv2", f, 64, 3));
  f = b.relu("flow.relu3", b.conv("flow.conv3", f, 64, 3));

  std::string x = b.concat("fuse.cat", {inp, c, f});
  x = b.relu("fuse.relu1", b.conv("fuse.conv1", x, 128, 1, 1, 0));
  x = b.relu("fuse.relu2", b.conv("fuse.conv2", x, 128, 3));

  const std::string h = b.gru("gru", net, x, 3);
  b.output(h);

  std::string r = b.relu("delta.relu1", b.conv("delta.conv1", h, 64, 3));
  r = b.relu("delta.relu2", b.conv("delta.conv2", r, 64, 3));
  b.output(b.conv("delta.conv3", r, 2, 3));

  std::string w = b.relu("weight.relu1", b.conv("weight.conv1", h, 64, 3));
  w = b.relu("weight.relu2", b.conv("weight.conv2", w, 64, 3));
  b.output(b.sigmoid("weight.sigmoid", b.conv("weight.conv3", w, 2, 3)));

  std::string d = b.relu("damping.relu1", b.conv("damping.conv1", h, 64, 3));
  b.output(b.conv("damping.conv2", d, 1, 1, 1, 0));
  return b.build();
}

GraphF toy_residual(Index outer, Index inner) {
  GraphBuilder<float> b("toy-residual", 1);
  std::string x = b.input("image", 3, 1);
  x = b.relu("stem.relu", b.norm("stem.norm", b.conv("stem", x, outer, 3)));
  std::string y = b.relu("block.relu1", b.conv("block.conv1", x, inner, 3));
  y = b.conv("block.conv2", y, outer, 3);
  x = b.relu("block.relu2", b.add("block.add", {x, y}));
  b.output(b.conv("head", x, 3, 1, 1, 0));
  return b.build();
}

GraphF toy_gru(Index hidden, Index input) {
  GraphBuilder<float> b("toy-gru", 1);
  const std::string h = b.input("hidden", hidden, 1);
  std::string x = b.input("x", input, 1);
  x = b.relu("enc.relu", b.conv("enc", x, input, 3));
  const std::string g = b.gru("gru", h, x, 3);
  b.output(g);
  b.output(b.conv("head", g, 2, 1, 1, 0));
  return b.build();
}

Index width_or(const ZooSpec& spec, std::size_t i, Index fallback) {
  return i < spec.widths.size() ? spec.widths[i] : fallback;
}

}  // namespace

const std::vector<std::string>& model_names() {
  static const std::vector<std::string> names{"fnet",   "cnet",         "updatenet",
                                              "droid", "toy-residual", "toy-gru"};
  return names;
}

bool is_model_name(const std::string& name) {
  const auto& names = model_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

GraphF merge(const std::vector<GraphF>& parts, const std::string& name) {
  GraphF out;
  out.name = name;
  for (const auto& part : parts) {
    const std::string prefix = part.name + "/";
    out.resolution_multiple = std::max(out.resolution_multiple, part.resolution_multiple);
    for (auto in : part.inputs) {
      in.name = prefix + in.name;
      out.inputs.push_back(in);
    }
    for (auto n : part.nodes) {
      n.id = prefix + n.id;
      for (auto& src : n.inputs) src = prefix + src;
      out.nodes.push_back(std::move(n));
    }
    for (const auto& o : part.outputs) out.outputs.push_back(prefix + o);
  }
  validate(out);
  return out;
}

GraphF build(const ZooSpec& spec) {
  GraphF g;
  if (spec.name == "fnet") {
    g = encoder("fnet", spec.output_dim > 0 ? spec.output_dim : 128, true);
  } else if (spec.name == "cnet") {
    g = encoder("cnet", spec.output_dim > 0 ? spec.output_dim : 256, false);
  } else if (spec.name == "updatenet") {
    g = update_net();
  } else if (spec.name == "droid") {
    std::vector<GraphF> parts;
    for (const char* m : {"fnet", "cnet", "updatenet"}) {
      ZooSpec sub;
      sub.name = m;
      sub.seed = derive_seed(spec.seed, parts.size());
      parts.push_back(build(sub));
    }
    return merge(parts, "droid");
  } else if (spec.name == "toy-residual") {
    g = toy_residual(width_or(spec, 0, 4), width_or(spec, 1, 8));
  } else if (spec.name == "toy-gru") {
    g = toy_gru(width_or(spec, 0, 2), width_or(spec, 1, 3));
  } else {
    fail(ErrorCode::kUnknownModel, "unknown model '" + spec.name + "'");
  }
  initialize_parameters(g, spec.seed);
  return g;
}

ProfileReference profile_reference() { return {}; }

}  // namespace spaq::zoo
