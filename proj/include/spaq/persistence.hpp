#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "spaq/graph.hpp"
#include "spaq/quant_types.hpp"

namespace spaq::persistence {

inline constexpr char kMagic[4] = {'S', 'P', 'A', 'Q'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kFlagInt8 = 1u << 0;
inline constexpr std::uint32_t kFlagDigest = 1u << 1;
/// magic, version, flags, reserved, digest, descriptor length.
inline constexpr std::uint64_t kHeaderBytes = 4 + 4 + 4 + 4 + 8 + 8;

using Model = std::variant<GraphF, quant::QuantizedGraph>;

struct SaveOptions {
  bool digest = true;
  /// Free-form string pairs stored in the descriptor (e.g. a config hash).
  std::map<std::string, std::string> metadata;
};

/// Byte count of each file section.
struct FileLayout {
  std::uint64_t header = kHeaderBytes;
  std::uint64_t descriptor = 0;
  std::uint64_t tensor_table = 0;
  std::uint64_t quant_table = 0;
  std::uint64_t payload = 0;  // including its 8-byte length prefix
  /// Bytes attributable to each node: tensor data plus 8 bytes per
  /// quantization group of its tensors and activation sites.
  std::map<std::string, std::uint64_t> per_node;

  std::uint64_t total() const { return header + descriptor + tensor_table + quant_table + payload; }
};

FileLayout layout(const GraphF& graph, const SaveOptions& options = {});
FileLayout layout(const quant::QuantizedGraph& graph, const SaveOptions& options = {});

std::vector<std::uint8_t> encode(const GraphF& graph, const SaveOptions& options = {});
std::vector<std::uint8_t> encode(const quant::QuantizedGraph& graph, const SaveOptions& options = {});

struct Decoded {
  Model model;
  std::uint32_t version = 0;
  std::optional<std::uint64_t> digest;
  std::map<std::string, std::string> metadata;
};

Decoded decode(const std::vector<std::uint8_t>& bytes);

/// Writes atomically (temporary file + rename). Returns bytes written.
std::uint64_t save(const GraphF& graph, const std::filesystem::path& path,
                   const SaveOptions& options = {});
std::uint64_t save(const quant::QuantizedGraph& graph, const std::filesystem::path& path,
                   const SaveOptions& options = {});
std::uint64_t save(const Model& model, const std::filesystem::path& path,
                   const SaveOptions& options = {});

Decoded load(const std::filesystem::path& path);

/// Hash of the forward outputs on a fixed probe input.
std::uint64_t output_digest(const GraphF& graph);
std::uint64_t output_digest(const quant::QuantizedGraph& graph);
std::uint64_t output_digest(const Model& model);

struct VerifyResult {
  bool has_digest = false;
  bool ok = false;
  std::uint64_t stored = 0;
  std::uint64_t computed = 0;
};

VerifyResult verify(const std::filesystem::path& path);

const GraphF& topology(const Model& model);

}  // namespace spaq::persistence
