#pragma once

// Serial direct-loop implementations of the compute kernels. They exist as
// the baseline for tests and benchmarks and favor clarity over speed.

#include <cstddef>
#include <span>
#include <vector>

#include "attnorm/kernels.hpp"
#include "attnorm/normalization.hpp"

namespace attnorm::ref {

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, const kernels::ConvGeometry& g);

/// Overwrites dx and dweight.
template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const kernels::ConvGeometry& g,
                     const Tensor4<T>& dy, Tensor4<T>& dx, std::vector<T>& dweight);

template <class T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad);

template <class T>
Tensor4<T> max_pool_backward(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad,
                             const Tensor4<T>& dy);

template <class T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x);

/// out[n,o] = sum_i v[n,i] * w[o,i] + b[o]
template <class T>
Mat<T> fully_connected(const Mat<T>& v, const Mat<T>& weight, const T* bias);

/// Per block: mean and sqrt(population variance + eps), by direct summation.
template <class T>
MomentStats<T> block_moments(const Tensor4<T>& x, const BlockScheme& scheme, T eps);

template <class T>
Tensor4<T> standardize(const Tensor4<T>& x, const BlockScheme& scheme, T eps);

}  // namespace attnorm::ref
