#pragma once

// OpenMP-parallel compute kernels. Every kernel partitions work so that each
// output element (and each reduction) is produced in a fixed order, so
// results are bit-identical for any thread count.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "attnorm/tensor.hpp"

namespace attnorm::kernels {

// Fixed-order eight-lane reductions with double accumulators. The lane split
// depends only on n, so results do not depend on the thread count.
template <class T>
inline double lane_sum(const T* p, std::size_t n) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) a[k] += static_cast<double>(p[i + k]);
  for (; i < n; ++i) a[0] += static_cast<double>(p[i]);
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
}

template <class T>
inline double lane_sum_sq_dev(const T* p, std::size_t n, double mean) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) {
      const double d = static_cast<double>(p[i + k]) - mean;
      a[k] += d * d;
    }
  }
  for (; i < n; ++i) {
    const double d = static_cast<double>(p[i]) - mean;
    a[0] += d * d;
  }
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
}

template <class T>
inline double lane_dot(const T* x, const T* y, std::size_t n) {
  double a[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) a[k] += static_cast<double>(x[i + k]) * static_cast<double>(y[i + k]);
  for (; i < n; ++i) a[0] += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]));
}

struct ConvGeometry {
  std::size_t c_out = 0;
  std::size_t c_in = 0;
  std::size_t k = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_extent(std::size_t in) const;
  Shape4 output_shape(const Shape4& in) const;
  std::size_t weight_numel() const { return c_out * c_in * k * k; }
};

/// Validates geometry against an input shape; throws DimensionError.
void check_conv(const ConvGeometry& g, const Shape4& in);

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, const ConvGeometry& g);

/// Accumulates into dweight; writes dx if non-null.
template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const ConvGeometry& g,
                     const Tensor4<T>& dy, Tensor4<T>* dx, std::span<T> dweight);

template <class T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x);

template <class T>
Tensor4<T> global_avg_pool_backward(const Tensor4<T>& dy, const Shape4& in_shape);

/// out = v * weight^T (+ bias).  v: N x D_in, weight: D_out x D_in.
template <class T>
Mat<T> fully_connected(const Mat<T>& v, const Mat<T>& weight, const T* bias);

/// Returns dv; accumulates dweight (D_out x D_in) and dbias (D_out) if non-null.
template <class T>
Mat<T> fully_connected_backward(const Mat<T>& v, const Mat<T>& weight, const Mat<T>& dout,
                                T* dweight, T* dbias);

template <class T>
Tensor4<T> relu(const Tensor4<T>& x);

/// Derivative at exactly 0 is 0.
template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& dy);

/// Max pooling; argmax receives the flat input index of each output.
template <class T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad,
                    std::vector<std::size_t>& argmax);

template <class T>
Tensor4<T> max_pool_backward(const Tensor4<T>& dy, const Shape4& in_shape,
                             const std::vector<std::size_t>& argmax);

}  // namespace attnorm::kernels
