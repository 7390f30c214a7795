#include "attnorm/kernels.hpp"

#include <algorithm>
#include <limits>

#include "attnorm/common.hpp"

namespace attnorm {

std::string Shape4::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

namespace kernels {

namespace {

// Upper bound on the im2col buffer (elements) per chunk.
template <class T>
using ColMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>;
template <class T>
using ConstColMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>>;

constexpr std::size_t kColsBudget = std::size_t{1} << 18;

std::size_t samples_per_chunk(const ConvGeometry& g, std::size_t n, std::size_t out_plane) {
  const std::size_t per_sample = g.c_in * g.k * g.k * out_plane;
  return std::clamp<std::size_t>(kColsBudget / std::max<std::size_t>(per_sample, 1), 1, n);
}

// Output columns [lo, hi) read inside the input row for kernel offset kx.
struct ValidRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline ValidRange valid_columns(std::size_t kx, std::size_t pad, std::size_t stride, std::size_t in_w,
                                std::size_t wo) {
  ValidRange r;
  r.lo = kx >= pad ? 0 : (pad - kx + stride - 1) / stride;
  // ox * stride + kx - pad <= in_w - 1
  if (in_w + pad < kx + 1) return {0, 0};
  r.hi = std::min(wo, (in_w + pad - kx - 1) / stride + 1);
  if (r.hi < r.lo) r.hi = r.lo;
  return r;
}

// Writes the patches of one sample into columns [col0, col0 + Ho*Wo) of a
// (C_in*k*k) x ld row-major matrix.
template <class T>
void im2col(const T* x, const Shape4& in, const ConvGeometry& g, std::size_t ho, std::size_t wo, T* cols,
            std::size_t ld, std::size_t col0) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ci = 0; ci < in.c; ++ci) {
    const T* xc = x + ci * in.plane();
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((ci * g.k + ky) * g.k + kx) * ld + col0;
        const ValidRange vr = valid_columns(kx, g.pad, g.stride, in.w, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * in.w;
          std::fill(dst, dst + vr.lo, T(0));
          if (g.stride == 1) {
            if (vr.hi > vr.lo) std::copy(src + vr.lo + kx - g.pad, src + vr.hi + kx - g.pad, dst + vr.lo);
          } else {
            for (std::size_t ox = vr.lo; ox < vr.hi; ++ox) dst[ox] = src[ox * g.stride + kx - g.pad];
          }
          std::fill(dst + vr.hi, dst + wo, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, std::size_t ld, std::size_t col0, const Shape4& in, const ConvGeometry& g,
                std::size_t ho, std::size_t wo, T* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t ci = 0; ci < in.c; ++ci) {
    T* dxc = dx + ci * in.plane();
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((ci * g.k + ky) * g.k + kx) * ld + col0;
        const ValidRange vr = valid_columns(kx, g.pad, g.stride, in.w, wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(in.h)) continue;
          T* dst = dxc + static_cast<std::size_t>(iy) * in.w;
          const T* src = row + oy * wo;
          if (g.stride == 1) {
            const std::size_t shift = kx - g.pad;  // wraps when kx < pad; ox + shift stays in range
            for (std::size_t ox = vr.lo; ox < vr.hi; ++ox) dst[ox + shift] += src[ox];
          } else {
            for (std::size_t ox = vr.lo; ox < vr.hi; ++ox) dst[ox * g.stride + kx - g.pad] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t ConvGeometry::out_extent(std::size_t in) const { return (in + 2 * pad - k) / stride + 1; }

Shape4 ConvGeometry::output_shape(const Shape4& in) const {
  return Shape4{in.n, c_out, out_extent(in.h), out_extent(in.w)};
}

void check_conv(const ConvGeometry& g, const Shape4& in) {
  if (g.stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (g.k < 1 || g.c_out < 1 || g.c_in < 1) throw ConfigError("conv2d: empty kernel");
  if (in.c != g.c_in) {
    throw DimensionError("conv2d: input has " + std::to_string(in.c) + " channels, kernel expects " +
                         std::to_string(g.c_in));
  }
  if (g.k > in.h + 2 * g.pad || g.k > in.w + 2 * g.pad) {
    throw DimensionError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " + in.str());
  }
}

template <class T>
Tensor4<T> conv2d_forward(const Tensor4<T>& x, std::span<const T> weight, const ConvGeometry& g) {
  const Shape4& in = x.shape();
  check_conv(g, in);
  if (weight.size() != g.weight_numel()) throw DimensionError("conv2d: weight size mismatch");
  const Shape4 os = g.output_shape(in);
  Tensor4<T> out(os);
  const auto plane = static_cast<Eigen::Index>(os.plane());
  const auto kdim = static_cast<Eigen::Index>(g.c_in * g.k * g.k);
  const auto c_out = static_cast<Eigen::Index>(g.c_out);
  // Column-major views: the im2col buffer is plane x kdim, W is kdim x C_out,
  // and the output planes of one sample are plane x C_out.
  const ConstColMap<T> wt(weight.data(), kdim, c_out);

#pragma omp parallel
  {
    std::vector<T> cols(static_cast<std::size_t>(kdim * plane));
#pragma omp for schedule(static)
    for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(in.n); ++n) {
      const auto s = static_cast<std::size_t>(n);
      im2col(x.plane(s, 0), in, g, os.h, os.w, cols.data(), os.plane(), 0);
      ColMap<T> y(out.plane(s, 0), plane, c_out);
      y.noalias() = ConstColMap<T>(cols.data(), plane, kdim) * wt;
    }
  }
  return out;
}

template <class T>
void conv2d_backward(const Tensor4<T>& x, std::span<const T> weight, const ConvGeometry& g,
                     const Tensor4<T>& dy, Tensor4<T>* dx, std::span<T> dweight) {
  const Shape4& in = x.shape();
  check_conv(g, in);
  const Shape4 os = g.output_shape(in);
  if (dy.shape() != os) throw DimensionError("conv2d backward: cotangent shape " + dy.shape().str());
  if (dweight.size() != g.weight_numel()) throw DimensionError("conv2d backward: weight grad size mismatch");
  if (dx != nullptr) *dx = Tensor4<T>(in);

  const std::size_t plane = os.plane();
  const auto pl = static_cast<Eigen::Index>(plane);
  const auto kdim = static_cast<Eigen::Index>(g.c_in * g.k * g.k);
  const auto c_out = static_cast<Eigen::Index>(g.c_out);
  const std::size_t spc = samples_per_chunk(g, in.n, plane);
  const std::size_t chunks = (in.n + spc - 1) / spc;
  const ConstMatMap<T> wmat(weight.data(), c_out, kdim);
  // One weight-gradient partial per chunk, summed afterwards in chunk order.
  std::vector<Mat<T>> partial(chunks);

#pragma omp parallel
  {
    std::vector<T> cols(static_cast<std::size_t>(kdim) * plane);
    Mat<T> dcols(kdim, pl);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ch = 0; ch < static_cast<std::ptrdiff_t>(chunks); ++ch) {
      const std::size_t n0 = static_cast<std::size_t>(ch) * spc;
      const std::size_t n1 = std::min(in.n, n0 + spc);
      Mat<T>& dw = partial[static_cast<std::size_t>(ch)];
      dw.setZero(c_out, kdim);
      for (std::size_t n = n0; n < n1; ++n) {
        im2col(x.plane(n, 0), in, g, os.h, os.w, cols.data(), plane, 0);
        const ConstMatMap<T> cmat(cols.data(), kdim, pl);
        const ConstMatMap<T> dmat(dy.plane(n, 0), c_out, pl);
        dw.noalias() += dmat * cmat.transpose();
        if (dx != nullptr) {
          dcols.noalias() = wmat.transpose() * dmat;
          col2im_add(dcols.data(), plane, 0, in, g, os.h, os.w, dx->plane(n, 0));
        }
      }
    }
  }
  MatMap<T> dw(dweight.data(), c_out, kdim);
  for (const auto& p : partial) dw += p;
}

template <class T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
  const Shape4& s = x.shape();
  Tensor4<T> out(Shape4{s.n, s.c, 1, 1});
  const std::size_t planes = s.n * s.c;
  const std::size_t p = s.plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(planes); ++i) {
    const T* src = x.data() + static_cast<std::size_t>(i) * p;
    out[static_cast<std::size_t>(i)] = static_cast<T>(lane_sum(src, p) / static_cast<double>(p));
  }
  return out;
}

template <class T>
Tensor4<T> global_avg_pool_backward(const Tensor4<T>& dy, const Shape4& in_shape) {
  if (dy.shape() != Shape4{in_shape.n, in_shape.c, 1, 1}) {
    throw DimensionError("global_avg_pool backward: cotangent shape " + dy.shape().str());
  }
  Tensor4<T> dx(in_shape);
  const std::size_t p = in_shape.plane();
  const T inv = T(1) / static_cast<T>(p);
  const std::size_t planes = in_shape.n * in_shape.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(planes); ++i) {
    T* dst = dx.data() + static_cast<std::size_t>(i) * p;
    std::fill(dst, dst + p, dy[static_cast<std::size_t>(i)] * inv);
  }
  return dx;
}

template <class T>
Mat<T> fully_connected(const Mat<T>& v, const Mat<T>& weight, const T* bias) {
  if (v.cols() != weight.cols()) {
    throw DimensionError("fully_connected: input width " + std::to_string(v.cols()) + " vs weight columns " +
                         std::to_string(weight.cols()));
  }
  Mat<T> out = v * weight.transpose();
  if (bias != nullptr) {
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      for (Eigen::Index c = 0; c < out.cols(); ++c) out(r, c) += bias[c];
    }
  }
  return out;
}

template <class T>
Mat<T> fully_connected_backward(const Mat<T>& v, const Mat<T>& weight, const Mat<T>& dout, T* dweight,
                                T* dbias) {
  if (dout.rows() != v.rows() || dout.cols() != weight.rows()) {
    throw DimensionError("fully_connected backward: cotangent shape mismatch");
  }
  if (dweight != nullptr) {
    MatMap<T>(dweight, weight.rows(), weight.cols()).noalias() += dout.transpose() * v;
  }
  if (dbias != nullptr) {
    for (Eigen::Index c = 0; c < dout.cols(); ++c) {
      T acc = 0;
      for (Eigen::Index r = 0; r < dout.rows(); ++r) acc += dout(r, c);
      dbias[c] += acc;
    }
  }
  return dout * weight;
}

template <class T>
Tensor4<T> relu(const Tensor4<T>& x) {
  Tensor4<T> out(x.shape());
  const std::size_t n = x.size();
  const T* px = x.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const T v = px[i];
    po[i] = v < T(0) ? T(0) : v;
  }
  return out;
}

template <class T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& dy) {
  if (x.shape() != dy.shape()) throw DimensionError("relu backward: shape mismatch");
  Tensor4<T> dx(x.shape());
  const std::size_t n = x.size();
  const T* px = x.data();
  const T* pd = dy.data();
  T* po = dx.data();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const T d = pd[i];
    po[i] = px[i] > T(0) ? d : T(0);
  }
  return dx;
}

template <class T>
Tensor4<T> max_pool(const Tensor4<T>& x, std::size_t k, std::size_t stride, std::size_t pad,
                    std::vector<std::size_t>& argmax) {
  const Shape4& s = x.shape();
  if (k > s.h + 2 * pad || k > s.w + 2 * pad) throw DimensionError("max_pool: window larger than input");
  const std::size_t ho = (s.h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (s.w + 2 * pad - k) / stride + 1;
  Tensor4<T> out(Shape4{s.n, s.c, ho, wo});
  argmax.assign(out.size(), 0);
  const std::size_t planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const std::size_t base = static_cast<std::size_t>(pi) * s.plane();
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t where = base;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(s.h)) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(s.w)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * s.w + static_cast<std::size_t>(ix);
            if (x[idx] > best) {
              best = x[idx];
              where = idx;
            }
          }
        }
        const std::size_t o = static_cast<std::size_t>(pi) * ho * wo + oy * wo + ox;
        out[o] = best;
        argmax[o] = where;
      }
    }
  }
  return out;
}

template <class T>
Tensor4<T> max_pool_backward(const Tensor4<T>& dy, const Shape4& in_shape, const std::vector<std::size_t>& argmax) {
  if (argmax.size() != dy.size()) throw DimensionError("max_pool backward: cotangent shape mismatch");
  Tensor4<T> dx(in_shape);
  // Windows of one plane only touch that plane, so planes are independent.
  const std::size_t planes = in_shape.n * in_shape.c;
  const std::size_t per_plane = dy.size() / planes;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const std::size_t o0 = static_cast<std::size_t>(pi) * per_plane;
    for (std::size_t o = o0; o < o0 + per_plane; ++o) dx[argmax[o]] += dy[o];
  }
  return dx;
}

#define ATTNORM_INSTANTIATE(T)                                                                              \
  template Tensor4<T> conv2d_forward(const Tensor4<T>&, std::span<const T>, const ConvGeometry&);          \
  template void conv2d_backward(const Tensor4<T>&, std::span<const T>, const ConvGeometry&, const Tensor4<T>&, \
                                Tensor4<T>*, std::span<T>);                                                 \
  template Tensor4<T> global_avg_pool(const Tensor4<T>&);                                                   \
  template Tensor4<T> global_avg_pool_backward(const Tensor4<T>&, const Shape4&);                           \
  template Mat<T> fully_connected(const Mat<T>&, const Mat<T>&, const T*);                                  \
  template Mat<T> fully_connected_backward(const Mat<T>&, const Mat<T>&, const Mat<T>&, T*, T*);            \
  template Tensor4<T> relu(const Tensor4<T>&);                                                              \
  template Tensor4<T> relu_backward(const Tensor4<T>&, const Tensor4<T>&);                                  \
  template Tensor4<T> max_pool(const Tensor4<T>&, std::size_t, std::size_t, std::size_t,                    \
                               std::vector<std::size_t>&);                                                  \
  template Tensor4<T> max_pool_backward(const Tensor4<T>&, const Shape4&, const std::vector<std::size_t>&);

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace kernels
}  // namespace attnorm
