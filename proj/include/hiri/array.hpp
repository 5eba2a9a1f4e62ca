#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "hiri/errors.hpp"

namespace hiri {

using Index = std::int64_t;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Resolves a possibly negative axis against `rank`.
inline int normalize_axis(int axis, int rank) {
  const int resolved = axis < 0 ? axis + rank : axis;
  if (resolved < 0 || resolved >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return resolved;
}

/// Dense row-major N-dimensional array.
template <typename Scalar>
class NdArray {
 public:
  using value_type = Scalar;

  NdArray() = default;
  explicit NdArray(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(numel(shape_)), fill) {}
  NdArray(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<Index>(data_.size()) != numel(shape_)) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }
  NdArray(Shape shape, std::initializer_list<Scalar> data)
      : NdArray(std::move(shape), std::vector<Scalar>(data)) {}

  static NdArray zeros(Shape shape) { return NdArray(std::move(shape)); }
  static NdArray ones(Shape shape) { return NdArray(std::move(shape), Scalar(1)); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_[normalize_axis(axis, rank())]; }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const Scalar& at(Index n, Index c, Index h, Index w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  /// Same data under a new shape with identical element count.
  NdArray reshaped(Shape shape) const {
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return NdArray(std::move(shape), data_);
  }

  /// View as a (rows x cols) row-major matrix; rows * cols must equal size().
  MatrixMap<Scalar> matrix(Index rows, Index cols) { return MatrixMap<Scalar>(data(), rows, cols); }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    return ConstMatrixMap<Scalar>(data(), rows, cols);
  }

  void fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

  NdArray& operator+=(const NdArray& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  template <typename Other>
  NdArray<Other> cast() const {
    NdArray<Other> out(shape_);
    for (Index i = 0; i < size(); ++i) out[i] = static_cast<Other>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  bool operator==(const NdArray& other) const = default;

  void require_same_shape(const NdArray& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(what) + ": shape " + shape_string(shape_) + " vs " +
                           shape_string(other.shape_));
    }
  }

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

using Array = NdArray<double>;
using ArrayF = NdArray<float>;

template <typename Scalar>
Scalar max_abs_diff(const NdArray<Scalar>& a, const NdArray<Scalar>& b) {
  a.require_same_shape(b, "max_abs_diff");
  Scalar worst(0);
  for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template <typename Scalar>
bool all_finite(const NdArray<Scalar>& a) {
  for (const Scalar v : a.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace hiri
