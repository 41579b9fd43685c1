#include <sstream>

#include "spaq/error.hpp"
#include "spaq/graph.hpp"
#include "spaq/tensor.hpp"

namespace spaq {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kDtypeMismatch: return "dtype mismatch";
    case ErrorCode::kMissingParameter: return "missing parameter";
    case ErrorCode::kInvalidGraph: return "invalid graph";
    case ErrorCode::kUnknownModel: return "unknown model";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kTapeMismatch: return "tape replay mismatch";
    case ErrorCode::kInfeasibleBudget: return "infeasible budget";
    case ErrorCode::kDegenerateSensitivity: return "degenerate sensitivity";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kMissingRecord: return "missing quantization record";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kUnsupportedVersion: return "unsupported version";
    case ErrorCode::kTruncated: return "truncated file";
    case ErrorCode::kOffsetOverlap: return "offset overlap";
    case ErrorCode::kMalformedFile: return "malformed file";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kDegenerateAlignment: return "degenerate alignment";
    case ErrorCode::kParse: return "parse error";
  }
  return "unknown error";
}

const char* to_string(DType dtype) {
  switch (dtype) {
    case DType::kFloat32: return "fp32";
    case DType::kInt8: return "int8";
    case DType::kInt32: return "int32";
    case DType::kFloat64: return "fp64";
  }
  return "?";
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kFloat32: return 4;
    case DType::kInt8: return 1;
    case DType::kInt32: return 4;
    case DType::kFloat64: return 8;
  }
  return 0;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "Conv2d";
    case LayerKind::kInstanceNorm: return "InstanceNorm";
    case LayerKind::kReLU: return "ReLU";
    case LayerKind::kSigmoid: return "Sigmoid";
    case LayerKind::kTanh: return "Tanh";
    case LayerKind::kAdd: return "Add";
    case LayerKind::kConcat: return "Concat";
    case LayerKind::kConvGRUCell: return "ConvGRUCell";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (auto k : {LayerKind::kConv2d, LayerKind::kInstanceNorm, LayerKind::kReLU, LayerKind::kSigmoid,
                 LayerKind::kTanh, LayerKind::kAdd, LayerKind::kConcat, LayerKind::kConvGRUCell}) {
    if (name == to_string(k)) return k;
  }
  fail(ErrorCode::kParse, "unknown layer kind '" + name + "'");
}

}  // namespace spaq
