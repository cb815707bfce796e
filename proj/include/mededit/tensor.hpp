// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "mededit/error.hpp"

namespace mededit {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major tensor. Immutable by convention once handed to a graph or
// a checkpoint; arithmetic lives in free functions (ops.hpp) built on Eigen
// maps over the flat storage.
template <typename Scalar>
class TensorT {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Vector<Scalar, Eigen::Dynamic>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using VectorMap = Eigen::Map<Vector>;
  using ConstVectorMap = Eigen::Map<const Vector>;

  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(checked_numel(shape_)), Scalar(0));
  }

  TensorT(std::vector<int> shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static TensorT scalar(Scalar v) { return TensorT({1}, {v}); }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, Scalar v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool is_scalar() const { return numel() == 1; }

  int rows() const {
    require_2d("rows()");
    return shape_[0];
  }
  int cols() const {
    require_2d("cols()");
    return shape_[1];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar& at(int r, int c) {
    require_2d("at()");
    return data_[static_cast<std::size_t>(r) * shape_[1] + c];
  }
  Scalar at(int r, int c) const {
    require_2d("at()");
    return data_[static_cast<std::size_t>(r) * shape_[1] + c];
  }

  /// 2-D Eigen view.
  MatrixMap mat() {
    require_2d("mat()");
    return MatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatrixMap mat() const {
    require_2d("mat()");
    return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
  }

  /// Flat Eigen view over all elements, any rank.
  VectorMap vec() { return VectorMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstVectorMap vec() const {
    return ConstVectorMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  /// View of a contiguous row-major sub-block, e.g. one attention head.
  ConstMatrixMap block2d(std::int64_t offset, int r, int c) const {
    return ConstMatrixMap(data_.data() + offset, r, c);
  }
  MatrixMap block2d(std::int64_t offset, int r, int c) {
    return MatrixMap(data_.data() + offset, r, c);
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return vec().allFinite(); }

  friend bool operator==(const TensorT& a, const TensorT& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }

  void require_2d(const char* what) const {
    if (shape_.size() != 2) {
      throw ShapeError(std::string(what) + " requires a 2-D tensor, got shape " + shape_str(shape_));
    }
  }

  std::vector<int> shape_;
  std::vector<Scalar> data_;
};

using Tensor = TensorT<float>;

template <typename Scalar>
double l2_norm(const TensorT<Scalar>& t) {
  return t.vec().template cast<double>().norm();
}

template <typename To, typename From>
TensorT<To> tensor_cast(const TensorT<From>& t) {
  std::vector<To> data(t.storage().begin(), t.storage().end());
  return TensorT<To>(t.shape(), std::move(data));
}

}  // namespace mededit
