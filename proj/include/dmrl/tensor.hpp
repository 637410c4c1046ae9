#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "dmrl/common.hpp"

namespace dmrl {

using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return s.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major tensor over an Eigen buffer. Rank and dims are dynamic;
// scalar type is a template parameter (float for training, double for
// finite-difference oracles).
template <typename Scalar>
class Tensor {
 public:
  using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MapA = Eigen::Map<ArrayX>;
  using CMapA = Eigen::Map<const ArrayX>;
  using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixCM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = ArrayX::Zero(shape_numel(shape_));
  }
  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    data_ = ArrayX::Constant(shape_numel(shape_), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) { return Tensor(std::move(shape), v); }
  static Tensor from(Shape shape, std::initializer_list<Scalar> vals) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.numel())
      throw ShapeError("Tensor::from: value count does not match shape");
    Index i = 0;
    for (Scalar v : vals) t.data_[i++] = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  MapA flat() { return MapA(data_.data(), data_.size()); }
  CMapA flat() const { return CMapA(data_.data(), data_.size()); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // 4-D accessors for [N, C, H, W] layouts.
  Scalar& at4(Index n, Index c, Index y, Index x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar at4(Index n, Index c, Index y, Index x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar& at3(Index c, Index y, Index x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  Scalar at3(Index c, Index y, Index x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  Scalar& at2(Index r, Index c) { return data_[r * shape_[1] + c]; }
  Scalar at2(Index r, Index c) const { return data_[r * shape_[1] + c]; }

  // Matrix views over the flat buffer.
  Eigen::Map<MatrixRM> as_matrix(Index rows, Index cols) {
    return Eigen::Map<MatrixRM>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM> as_matrix(Index rows, Index cols) const {
    return Eigen::Map<const MatrixRM>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape: element count mismatch " + shape_str(shape_) + " -> " +
                       shape_str(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    out.flat() = data_.template cast<T>();
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Shape shape_;
  ArrayX data_;
};

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* ctx) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(ctx) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace dmrl
