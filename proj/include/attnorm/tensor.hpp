#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attnorm/common.hpp"

namespace attnorm {

/// Extents of a rank-4 feature map in (N, C, H, W) order.
struct Shape4 {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t numel() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  bool operator==(const Shape4&) const = default;

  std::string str() const;
};

/// Row-major dense matrix used for N x D summaries, attention weights and
/// fully-connected weights.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Dense rank-4 tensor, contiguous in N, C, H, W order.
template <class T>
class Tensor4 {
 public:
  Tensor4() = default;

  explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape) {
    if (!shape.valid()) {
      throw DimensionError("tensor extents must all be >= 1, got " + shape.str());
    }
    data_.assign(shape.numel(), fill);
  }

  Tensor4(Shape4 shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (!shape.valid() || data_.size() != shape.numel()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the H x W plane of (n, c).
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  // N x (C*H*W) view.
  ConstMatMap<T> as_matrix() const {
    return ConstMatMap<T>(data_.data(), static_cast<Eigen::Index>(shape_.n),
                          static_cast<Eigen::Index>(shape_.c * shape_.plane()));
  }
  MatMap<T> as_matrix() {
    return MatMap<T>(data_.data(), static_cast<Eigen::Index>(shape_.n),
                     static_cast<Eigen::Index>(shape_.c * shape_.plane()));
  }

  template <class U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.vec().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  Shape4 shape_{};
  std::vector<T> data_;
};

/// Wraps an N x D matrix as an N x D x 1 x 1 tensor.
template <class T>
Tensor4<T> tensor_from_matrix(const Mat<T>& m) {
  Tensor4<T> t(Shape4{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), 1, 1});
  MatMap<T>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

template <class T>
Mat<T> matrix_from_tensor(const Tensor4<T>& t) {
  return t.as_matrix();
}

template <class T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: length mismatch");
  T worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template <class T>
T max_abs_diff(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: " + a.shape().str() + " vs " + b.shape().str());
  return max_abs_diff<T>(a.span(), b.span());
}

}  // namespace attnorm
