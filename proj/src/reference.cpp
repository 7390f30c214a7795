#include "attnorm/reference.hpp"

#include <cmath>
#include <limits>

namespace attnorm::ref {

namespace {

// Input index for output position o and kernel tap t, or -1 when padded.
long tap(std::size_t o, std::size_t t, std::size_t stride, std::size_t pad, std::size_t extent) {
  const long i = static_cast<long>(o * stride + t) - static_cast<long>(pad);
  return (i < 0 || i >= static_cast<long>(extent)) ? -1 : i;
}

}  // namespace

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, const kernels::ConvGeometry& g) {
  kernels::check_conv(g, x.shape());
  const Shape4 s = x.shape();
  Tensor4<T> y(g.output_shape(s));
  const Shape4 o = y.shape();
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t co = 0; co < o.c; ++co)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          double acc = 0;
          for (std::size_t ci = 0; ci < s.c; ++ci)
            for (std::size_t kh = 0; kh < g.k; ++kh) {
              const long ih = tap(oh, kh, g.stride, g.pad, s.h);
              if (ih < 0) continue;
              for (std::size_t kw = 0; kw < g.k; ++kw) {
                const long iw = tap(ow, kw, g.stride, g.pad, s.w);
                if (iw < 0) continue;
                acc += static_cast<double>(x(n, ci, ih, iw)) * weight[((co * s.c + ci) * g.k + kh) * g.k + kw];
              }
            }
          y(n, co, oh, ow) = static_cast<T>(acc);
        }
  return y;
}

template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const kernels::ConvGeometry& g,
                     const Tensor4<T>& dy, Tensor4<T>& dx, std::vector<T>& dweight) {
  const Shape4 s = x.shape();
  const Shape4 o = g.output_shape(s);
  if (dy.shape() != o) throw DimensionError("ref conv2d_backward: cotangent " + dy.shape().str());
  std::vector<double> dxa(s.numel(), 0.0);
  std::vector<double> dwa(g.weight_numel(), 0.0);
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t co = 0; co < o.c; ++co)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          const double d = dy(n, co, oh, ow);
          for (std::size_t ci = 0; ci < s.c; ++ci)
            for (std::size_t kh = 0; kh < g.k; ++kh) {
              const long ih = tap(oh, kh, g.stride, g.pad, s.h);
              if (ih < 0) continue;
              for (std::size_t kw = 0; kw < g.k; ++kw) {
                const long iw = tap(ow, kw, g.stride, g.pad, s.w);
                if (iw < 0) continue;
                const std::size_t wi = ((co * s.c + ci) * g.k + kh) * g.k + kw;
                const std::size_t xi = ((n * s.c + ci) * s.h + ih) * s.w + iw;
                dxa[xi] += d * weight[wi];
                dwa[wi] += d * x[xi];
              }
            }
        }
  dx = Tensor4<T>(s);
  for (std::size_t i = 0; i < dxa.size(); ++i) dx[i] = static_cast<T>(dxa[i]);
  dweight.assign(dwa.begin(), dwa.end());
}

template <class T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const Shape4 s = x.shape();
  const kernels::ConvGeometry g{s.c, s.c, k, stride, pad};
  Tensor4<T> y(Shape4{s.n, s.c, g.out_extent(s.h), g.out_extent(s.w)});
  const Shape4 o = y.shape();
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t c = 0; c < o.c; ++c)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const long ih = tap(oh, kh, stride, pad, s.h);
              const long iw = tap(ow, kw, stride, pad, s.w);
              if (ih >= 0 && iw >= 0 && x(n, c, ih, iw) > best) best = x(n, c, ih, iw);
            }
          y(n, c, oh, ow) = best;
        }
  return y;
}

template <class T>
Tensor4<T> max_pool_backward(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad,
                             const Tensor4<T>& dy) {
  const Shape4 s = x.shape();
  const Shape4 o = dy.shape();
  Tensor4<T> dx(s);
  for (std::size_t n = 0; n < o.n; ++n)
    for (std::size_t c = 0; c < o.c; ++c)
      for (std::size_t oh = 0; oh < o.h; ++oh)
        for (std::size_t ow = 0; ow < o.w; ++ow) {
          // First maximum in scan order receives the gradient.
          T best = -std::numeric_limits<T>::infinity();
          long bh = -1;
          long bw = -1;
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const long ih = tap(oh, kh, stride, pad, s.h);
              const long iw = tap(ow, kw, stride, pad, s.w);
              if (ih >= 0 && iw >= 0 && x(n, c, ih, iw) > best) {
                best = x(n, c, ih, iw);
                bh = ih;
                bw = iw;
              }
            }
          dx(n, c, bh, bw) += dy(n, c, oh, ow);
        }
  return dx;
}

template <class T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
  const Shape4 s = x.shape();
  Tensor4<T> y(Shape4{s.n, s.c, 1, 1});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0;
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) acc += x(n, c, h, w);
      y(n, c, 0, 0) = static_cast<T>(acc / static_cast<double>(s.h * s.w));
    }
  return y;
}

template <class T>
Mat<T> fully_connected(const Mat<T>& v, const Mat<T>& weight, const T* bias) {
  if (v.cols() != weight.cols()) throw DimensionError("ref fully_connected: width mismatch");
  Mat<T> out(v.rows(), weight.rows());
  for (Eigen::Index n = 0; n < v.rows(); ++n)
    for (Eigen::Index o = 0; o < weight.rows(); ++o) {
      double acc = bias ? static_cast<double>(bias[o]) : 0.0;
      for (Eigen::Index i = 0; i < v.cols(); ++i) acc += static_cast<double>(v(n, i)) * weight(o, i);
      out(n, o) = static_cast<T>(acc);
    }
  return out;
}

template <class T>
MomentStats<T> block_moments(const Tensor4<T>& x, const BlockScheme& scheme, T eps) {
  scheme.validate(x.shape());
  const Shape4 s = x.shape();
  const std::size_t nb = scheme.num_blocks(s);
  std::vector<double> sum(nb, 0.0);
  std::vector<std::size_t> count(nb, 0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t b = scheme.block_of(s, n, c);
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          sum[b] += x(n, c, h, w);
          ++count[b];
        }
    }
  std::vector<double> mean(nb);
  for (std::size_t b = 0; b < nb; ++b) mean[b] = sum[b] / static_cast<double>(count[b]);
  std::vector<double> sq(nb, 0.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t b = scheme.block_of(s, n, c);
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const double d = x(n, c, h, w) - mean[b];
          sq[b] += d * d;
        }
    }
  MomentStats<T> st;
  st.m = count.empty() ? 0 : count[0];
  st.eps = eps;
  for (std::size_t b = 0; b < nb; ++b) {
    st.mu.push_back(static_cast<T>(mean[b]));
    st.sigma.push_back(static_cast<T>(std::sqrt(sq[b] / static_cast<double>(count[b]) + eps)));
  }
  return st;
}

template <class T>
Tensor4<T> standardize(const Tensor4<T>& x, const BlockScheme& scheme, T eps) {
  const MomentStats<T> st = block_moments(x, scheme, eps);
  const Shape4 s = x.shape();
  Tensor4<T> y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t b = scheme.block_of(s, n, c);
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) y(n, c, h, w) = (x(n, c, h, w) - st.mu[b]) / st.sigma[b];
    }
  return y;
}

#define ATTNORM_INSTANTIATE(T)                                                                                  \
  template Tensor4<T> conv2d_forward(const Tensor4<T>&, std::span<const T>, const kernels::ConvGeometry&);      \
  template void conv2d_backward(const Tensor4<T>&, std::span<const T>, const kernels::ConvGeometry&,           \
                                const Tensor4<T>&, Tensor4<T>&, std::vector<T>&);                               \
  template Tensor4<T> max_pool(const Tensor4<T>&, std::size_t, std::size_t, std::size_t);                       \
  template Tensor4<T> max_pool_backward(const Tensor4<T>&, std::size_t, std::size_t, std::size_t,               \
                                        const Tensor4<T>&);                                                     \
  template Tensor4<T> global_avg_pool(const Tensor4<T>&);                                                       \
  template Mat<T> fully_connected(const Mat<T>&, const Mat<T>&, const T*);                                      \
  template MomentStats<T> block_moments(const Tensor4<T>&, const BlockScheme&, T);                              \
  template Tensor4<T> standardize(const Tensor4<T>&, const BlockScheme&, T);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm::ref
