#pragma once

// Naive loop implementations used as test oracles. They share no code with
// the library beyond the tensor container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <vector>

#include "attnorm/tensor.hpp"

namespace oracle {

using attnorm::Shape4;
using Tensor = attnorm::Tensor4<double>;
using Matrix = std::vector<std::vector<double>>;

inline Tensor random_tensor(Shape4 s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s);
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

inline std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline double max_abs(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double at(const Tensor& x, std::size_t n, std::size_t c, long h, long w) {
  const Shape4& s = x.shape();
  if (h < 0 || w < 0 || h >= static_cast<long>(s.h) || w >= static_cast<long>(s.w)) return 0.0;
  return x(n, c, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
}

// weight layout: [co][ci][ky][kx]
inline Tensor conv(const Tensor& x, const std::vector<double>& wt, std::size_t co_n, std::size_t k,
                   std::size_t stride, std::size_t pad) {
  const Shape4& s = x.shape();
  const std::size_t ho = (s.h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (s.w + 2 * pad - k) / stride + 1;
  Tensor y(Shape4{s.n, co_n, ho, wo});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t co = 0; co < co_n; ++co)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = 0;
          for (std::size_t ci = 0; ci < s.c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                acc += wt[((co * s.c + ci) * k + ky) * k + kx] * at(x, n, ci, iy, ix);
              }
          y(n, co, oy, ox) = acc;
        }
  return y;
}

// Gradients of sum(dy * conv(x, w)) by scattering every product term.
inline void conv_grads(const Tensor& x, const std::vector<double>& wt, std::size_t co_n, std::size_t k,
                       std::size_t stride, std::size_t pad, const Tensor& dy, Tensor& dx, std::vector<double>& dw) {
  const Shape4& s = x.shape();
  dx = Tensor(s);
  dw.assign(wt.size(), 0.0);
  const Shape4& o = dy.shape();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t co = 0; co < co_n; ++co)
      for (std::size_t oy = 0; oy < o.h; ++oy)
        for (std::size_t ox = 0; ox < o.w; ++ox)
          for (std::size_t ci = 0; ci < s.c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.h) || ix >= static_cast<long>(s.w)) continue;
                const std::size_t wi = ((co * s.c + ci) * k + ky) * k + kx;
                const double g = dy(n, co, oy, ox);
                dw[wi] += g * x(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                dx(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) += g * wt[wi];
              }
}

// Padding never wins: padded cells are skipped, not treated as zeros.
inline Tensor max_pool(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
  const Shape4& s = x.shape();
  const std::size_t ho = (s.h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (s.w + 2 * pad - k) / stride + 1;
  Tensor y(Shape4{s.n, s.c, ho, wo});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.h) || ix >= static_cast<long>(s.w)) continue;
              best = std::max(best, x(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)));
            }
          y(n, c, oy, ox) = best;
        }
  return y;
}

inline Matrix avg_pool(const Tensor& x) {
  const Shape4& s = x.shape();
  Matrix m(s.n, std::vector<double>(s.c, 0.0));
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0;
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) acc += x(n, c, h, w);
      m[n][c] = acc / static_cast<double>(s.h * s.w);
    }
  return m;
}

// w: [out][in]
inline Matrix fc(const Matrix& v, const Matrix& w, const std::vector<double>* b) {
  Matrix out(v.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t n = 0; n < v.size(); ++n)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double acc = b != nullptr ? (*b)[o] : 0.0;
      for (std::size_t i = 0; i < v[n].size(); ++i) acc += v[n][i] * w[o][i];
      out[n][o] = acc;
    }
  return out;
}

// Standardization blocks: groups == 0 means one block per channel across the
// batch, otherwise per (instance, group).
struct Moments {
  std::vector<double> mu;
  std::vector<double> sigma;
};

inline std::size_t block_index(const Shape4& s, std::size_t groups, std::size_t n, std::size_t c) {
  if (groups == 0) return c;
  return n * groups + c / (s.c / groups);
}

inline Moments moments(const Tensor& x, std::size_t groups, double eps) {
  const Shape4& s = x.shape();
  const std::size_t nb = groups == 0 ? s.c : s.n * groups;
  std::vector<double> sum(nb, 0.0), cnt(nb, 0.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const std::size_t j = block_index(s, groups, n, c);
          sum[j] += x(n, c, h, w);
          cnt[j] += 1;
        }
  Moments m;
  m.mu.resize(nb);
  for (std::size_t j = 0; j < nb; ++j) m.mu[j] = sum[j] / cnt[j];
  std::vector<double> sq(nb, 0.0);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const std::size_t j = block_index(s, groups, n, c);
          const double d = x(n, c, h, w) - m.mu[j];
          sq[j] += d * d;
        }
  m.sigma.resize(nb);
  for (std::size_t j = 0; j < nb; ++j) m.sigma[j] = std::sqrt(sq[j] / cnt[j] + eps);
  return m;
}

inline Tensor standardize(const Tensor& x, std::size_t groups, double eps) {
  const Moments m = moments(x, groups, eps);
  const Shape4& s = x.shape();
  Tensor y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const std::size_t j = block_index(s, groups, n, c);
          y(n, c, h, w) = (x(n, c, h, w) - m.mu[j]) / m.sigma[j];
        }
  return y;
}

// Channel summaries: kind 0 mean, 1 (means, stds), 2 mean / (std + eps).
inline Matrix summary(const Tensor& x, int kind, double eps) {
  const Shape4& s = x.shape();
  const double p = static_cast<double>(s.h * s.w);
  Matrix out(s.n, std::vector<double>(kind == 1 ? 2 * s.c : s.c, 0.0));
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double acc = 0;
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) acc += x(n, c, h, w);
      const double mu = acc / p;
      double sq = 0;
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) sq += (x(n, c, h, w) - mu) * (x(n, c, h, w) - mu);
      const double sd = std::sqrt(sq / p);
      if (kind == 0) {
        out[n][c] = mu;
      } else if (kind == 1) {
        out[n][c] = mu;
        out[n][s.c + c] = sd;
      } else {
        out[n][c] = mu / (sd + eps);
      }
    }
  return out;
}

inline double hsig(double a) {
  if (a <= -3) return 0;
  if (a >= 3) return 1;
  return (a + 3) / 6;
}

// Activation kinds: 0 relu, 1 sigmoid, 2 softmax over the row, 3 hsigmoid.
inline Matrix activate(const Matrix& z, int kind) {
  Matrix out = z;
  for (auto& row : out) {
    if (kind == 2) {
      double mx = row[0];
      for (double v : row) mx = std::max(mx, v);
      double tot = 0;
      for (double& v : row) tot += (v = std::exp(v - mx));
      for (double& v : row) v /= tot;
      continue;
    }
    for (double& v : row) {
      if (kind == 0) v = v > 0 ? v : 0;
      if (kind == 1) v = 1 / (1 + std::exp(-v));
      if (kind == 3) v = hsig(v);
    }
  }
  return out;
}

// Per-column standardization of a matrix (BN over the batch rows).
inline Matrix batch_standardize(const Matrix& z, double eps) {
  Matrix out = z;
  const std::size_t n = z.size();
  for (std::size_t k = 0; k < z[0].size(); ++k) {
    double mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += z[i][k];
    mu /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (z[i][k] - mu) * (z[i][k] - mu);
    var /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) out[i][k] = (z[i][k] - mu) / std::sqrt(var + eps);
  }
  return out;
}

// fc weight given as [in][K] (the attention layout); transposed here.
inline Matrix attention_weights(const Tensor& x, int summary_kind, double rsd_eps, const Matrix& w_in_k,
                                const std::vector<double>* bias, bool with_bn, const std::vector<double>& bn_gamma,
                                const std::vector<double>& bn_beta, double bn_eps, int act) {
  const Matrix s = summary(x, summary_kind, rsd_eps);
  const std::size_t k = w_in_k[0].size();
  Matrix wt(k, std::vector<double>(w_in_k.size()));
  for (std::size_t i = 0; i < w_in_k.size(); ++i)
    for (std::size_t j = 0; j < k; ++j) wt[j][i] = w_in_k[i][j];
  Matrix z = fc(s, wt, bias);
  if (with_bn) {
    z = batch_standardize(z, bn_eps);
    for (auto& row : z)
      for (std::size_t j = 0; j < k; ++j) row[j] = bn_gamma[j] * row[j] + bn_beta[j];
  }
  return activate(z, act);
}

// Sums the K recalibrated maps explicitly.
inline Tensor mixture_sum(const Tensor& xhat, const Matrix& lambda, const Matrix& gamma, const Matrix& beta) {
  const Shape4& s = xhat.shape();
  Tensor y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t k = 0; k < gamma.size(); ++k)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t h = 0; h < s.h; ++h)
          for (std::size_t w = 0; w < s.w; ++w)
            y(n, c, h, w) += lambda[n][k] * (gamma[k][c] * xhat(n, c, h, w) + beta[k][c]);
  return y;
}

// SE gate applied to x: sigmoid(W_e relu(W_s avgpool(x) + b_s) + b_e) * x.
inline Tensor se(const Tensor& x, const Matrix& ws, const std::vector<double>& bs, const Matrix& we,
                 const std::vector<double>& be, Matrix* gate_out = nullptr) {
  const Matrix pooled = avg_pool(x);
  const Matrix v = activate(fc(pooled, ws, &bs), 0);
  const Matrix gate = activate(fc(v, we, &be), 1);
  const Shape4& s = x.shape();
  Tensor y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) y(n, c, h, w) = gate[n][c] * x(n, c, h, w);
  if (gate_out != nullptr) *gate_out = gate;
  return y;
}

template <class M>
Matrix to_rows(const M& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return out;
}

inline double max_abs(const Matrix& a, const Matrix& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

}  // namespace oracle
