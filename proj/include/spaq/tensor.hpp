#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "spaq/error.hpp"

namespace spaq {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

enum class DType : std::uint8_t { kFloat32 = 0, kInt8 = 1, kInt32 = 2, kFloat64 = 3 };

template <typename Scalar>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::kFloat32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::kFloat64;
};
template <>
struct dtype_of<std::int8_t> {
  static constexpr DType value = DType::kInt8;
};
template <>
struct dtype_of<std::int32_t> {
  static constexpr DType value = DType::kInt32;
};

const char* to_string(DType dtype);
std::size_t dtype_size(DType dtype);

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Dense row-major n-d array. The element type is the dtype, so it cannot
/// change after construction; `cast` produces a new tensor.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  static constexpr DType kDType = dtype_of<Scalar>::value;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector::Constant(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_extents();
    if (static_cast<Index>(values.size()) != shape_numel(shape_)) {
      fail(ErrorCode::kShapeMismatch, "payload length " + std::to_string(values.size()) +
                                          " does not match shape " + shape_string(shape_));
    }
    data_.resize(shape_numel(shape_));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      fail(ErrorCode::kShapeMismatch, "payload length " + std::to_string(data_.size()) +
                                          " does not match shape " + shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// NCHW element access.
  Scalar& at(Index n, Index c, Index h, Index w) { return data_[offset4(n, c, h, w)]; }
  Scalar at(Index n, Index c, Index h, Index w) const { return data_[offset4(n, c, h, w)]; }

  /// Views the payload as a rows x cols row-major matrix.
  MatrixMap matrix(Index rows, Index cols) { return MatrixMap(data_.data(), rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  /// Bit-level equality (distinguishes -0.0 and compares NaN payloads).
  bool bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_.data(), other.data_.data(),
                       static_cast<std::size_t>(data_.size()) * sizeof(Scalar)) == 0;
  }

 private:
  void check_extents() const {
    for (Index e : shape_) {
      if (e <= 0) fail(ErrorCode::kShapeMismatch, "non-positive extent in " + shape_string(shape_));
    }
  }

  Index offset4(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI8 = Tensor<std::int8_t>;
using TensorI32 = Tensor<std::int32_t>;

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const std::string& ctx) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kShapeMismatch,
         ctx + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

/// Concatenates NCHW tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<const Tensor<Scalar>*>& parts) {
  const Tensor<Scalar>& first = *parts.front();
  const Index n = first.dim(0), h = first.dim(2), w = first.dim(3);
  Index channels = 0;
  for (const auto* p : parts) {
    if (p->rank() != 4 || p->dim(0) != n || p->dim(2) != h || p->dim(3) != w) {
      fail(ErrorCode::kShapeMismatch, "concat: incompatible part " + shape_string(p->shape()));
    }
    channels += p->dim(1);
  }
  Tensor<Scalar> out({n, channels, h, w});
  const Index plane = h * w;
  for (Index b = 0; b < n; ++b) {
    Index offset = 0;
    for (const auto* p : parts) {
      const Index count = p->dim(1) * plane;
      std::copy_n(p->data() + b * count, count, out.data() + (b * channels + offset) * plane);
      offset += p->dim(1);
    }
  }
  return out;
}

/// Copies channels [begin, begin + count) of an NCHW tensor.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& x, Index begin, Index count) {
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, count, x.dim(2), x.dim(3)});
  for (Index b = 0; b < n; ++b) {
    std::copy_n(x.data() + (b * c + begin) * plane, count * plane, out.data() + b * count * plane);
  }
  return out;
}

/// Stacks single-sample tensors along the batch axis.
template <typename Scalar>
Tensor<Scalar> stack_batch(const std::vector<const Tensor<Scalar>*>& samples) {
  Shape shape = samples.front()->shape();
  shape[0] = 0;
  for (const auto* s : samples) shape[0] += s->dim(0);
  Tensor<Scalar> out(shape);
  Index offset = 0;
  for (const auto* s : samples) {
    std::copy_n(s->data(), s->size(), out.data() + offset);
    offset += s->size();
  }
  return out;
}

}  // namespace spaq
