#include "attnorm/normalization.hpp"

#include <cmath>

#include "attnorm/kernels.hpp"

namespace attnorm {

namespace {

// Calls f(plane_pointer_offset) for every H x W plane of block j.
template <class F>
void for_each_plane(const Shape4& s, const BlockScheme& scheme, std::size_t j, F&& f) {
  const std::size_t p = s.plane();
  if (scheme.kind == BlockScheme::Kind::kBatch) {
    for (std::size_t n = 0; n < s.n; ++n) f((n * s.c + j) * p);
  } else {
    const std::size_t cpg = s.c / scheme.groups;
    const std::size_t n = j / scheme.groups;
    const std::size_t g = j % scheme.groups;
    for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) f((n * s.c + c) * p);
  }
}

template <class T>
void block_mean_var(const Tensor4<T>& x, const BlockScheme& scheme, std::size_t j, double& mean, double& var) {
  const Shape4& s = x.shape();
  const std::size_t p = s.plane();
  double acc = 0;
  for_each_plane(s, scheme, j, [&](std::size_t off) { acc += kernels::lane_sum(x.data() + off, p); });
  const auto m = static_cast<double>(scheme.block_size(s));
  mean = acc / m;
  double sq = 0;
  for_each_plane(s, scheme, j, [&](std::size_t off) { sq += kernels::lane_sum_sq_dev(x.data() + off, p, mean); });
  var = sq / m;
}

}  // namespace

void BlockScheme::validate(const Shape4& s) const {
  if (kind == Kind::kGroup) {
    if (groups == 0 || s.c % groups != 0) {
      throw ConfigError("group normalization: " + std::to_string(groups) + " groups do not divide " +
                        std::to_string(s.c) + " channels");
    }
  }
}

std::size_t BlockScheme::num_blocks(const Shape4& s) const {
  return kind == Kind::kBatch ? s.c : s.n * groups;
}

std::size_t BlockScheme::block_size(const Shape4& s) const {
  return kind == Kind::kBatch ? s.n * s.plane() : (s.c / groups) * s.plane();
}

std::size_t BlockScheme::block_of(const Shape4& s, std::size_t n, std::size_t c) const {
  return kind == Kind::kBatch ? c : n * groups + c / (s.c / groups);
}

std::string BlockScheme::str() const {
  return kind == Kind::kBatch ? "batch" : "group(" + std::to_string(groups) + ")";
}

std::size_t default_gn_groups(std::size_t channels) {
  if (channels < 32) return channels;
  if (channels % 32 != 0) {
    throw ConfigError("group normalization: 32 groups do not divide " + std::to_string(channels) + " channels");
  }
  return 32;
}

template <class T>
MomentStats<T> compute_block_moments(const Tensor4<T>& x, const BlockScheme& scheme, T eps) {
  if (!(eps > T(0))) throw ConfigError("normalization eps must be positive");
  const Shape4& s = x.shape();
  scheme.validate(s);
  const std::size_t blocks = scheme.num_blocks(s);
  MomentStats<T> st;
  st.mu.resize(blocks);
  st.sigma.resize(blocks);
  st.m = scheme.block_size(s);
  st.eps = eps;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(blocks); ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    double mean = 0;
    double var = 0;
    block_mean_var(x, scheme, j, mean, var);
    st.mu[j] = static_cast<T>(mean);
    st.sigma[j] = static_cast<T>(std::sqrt(var + static_cast<double>(eps)));
  }
  return st;
}

template <class T>
Tensor4<T> standardize(const Tensor4<T>& x, const MomentStats<T>& stats, const BlockScheme& scheme) {
  const Shape4& s = x.shape();
  scheme.validate(s);
  if (stats.mu.size() != scheme.num_blocks(s) || stats.sigma.size() != stats.mu.size()) {
    throw DimensionError("standardize: statistics do not match the block partition of " + s.str());
  }
  Tensor4<T> out(s);
  const std::size_t planes = s.n * s.c;
  const std::size_t p = s.plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const std::size_t j = scheme.block_of(s, i / s.c, i % s.c);
    const T mu = stats.mu[j];
    const T inv = T(1) / stats.sigma[j];
    const T* src = x.data() + i * p;
    T* dst = out.data() + i * p;
    for (std::size_t k = 0; k < p; ++k) dst[k] = (src[k] - mu) * inv;
  }
  return out;
}

template <class T>
Tensor4<T> affine(const Tensor4<T>& xhat, const AffineParams<T>& params) {
  return detail::channel_affine(xhat, params.gamma, params.beta);
}

template <class T>
RunningStats<T> update_running(const RunningStats<T>& rs, const std::vector<T>& batch_mean,
                               const std::vector<T>& batch_var, T momentum) {
  if (!(momentum > T(0) && momentum <= T(1))) throw ConfigError("running-stat momentum must be in (0, 1]");
  if (batch_mean.size() != rs.mean.size() || batch_var.size() != rs.var.size()) {
    throw DimensionError("update_running: channel count mismatch");
  }
  RunningStats<T> out = rs;
  for (std::size_t c = 0; c < rs.mean.size(); ++c) {
    out.mean[c] = (T(1) - momentum) * rs.mean[c] + momentum * batch_mean[c];
    out.var[c] = (T(1) - momentum) * rs.var[c] + momentum * batch_var[c];
  }
  out.momentum = momentum;
  out.count = rs.count + 1;
  return out;
}

template <class T>
Tensor4<T> bn_forward(const Tensor4<T>& x, const AffineParams<T>& params, RunningStats<T>& rs, Mode mode, T eps) {
  Standardizer<T> st(x.shape().c, BlockScheme::batch(), eps, rs.momentum);
  st.set_running(rs);
  Tensor4<T> xhat = st.forward(x, mode);
  rs = st.running();
  return affine(xhat, params);
}

template <class T>
Tensor4<T> gn_forward(const Tensor4<T>& x, const AffineParams<T>& params, std::size_t groups, T eps) {
  const BlockScheme scheme = BlockScheme::group(groups);
  return affine(standardize(x, compute_block_moments(x, scheme, eps), scheme), params);
}

// ---------------------------------------------------------------------------
// Standardizer

template <class T>
Standardizer<T>::Standardizer(std::size_t channels, BlockScheme scheme, T eps, T momentum)
    : channels_(channels),
      scheme_(scheme),
      eps_(eps),
      momentum_(momentum),
      running_mean_("running_mean", {channels}, ParamKind::kRunningStat, T(0)),
      running_var_("running_var", {channels}, ParamKind::kRunningStat, T(1)) {
  if (channels == 0) throw ConfigError("normalization over zero channels");
  if (!(eps > T(0))) throw ConfigError("normalization eps must be positive");
  if (!(momentum > T(0) && momentum <= T(1))) throw ConfigError("running-stat momentum must be in (0, 1]");
  scheme_.validate(Shape4{1, channels, 1, 1});
}

template <class T>
RunningStats<T> Standardizer<T>::running() const {
  return {running_mean_.value, running_var_.value, momentum_, count_};
}

template <class T>
void Standardizer<T>::set_running(const RunningStats<T>& rs) {
  if (rs.mean.size() != channels_ || rs.var.size() != channels_) {
    throw DimensionError("running statistics have wrong channel count");
  }
  running_mean_.value = rs.mean;
  running_var_.value = rs.var;
  momentum_ = rs.momentum;
  count_ = rs.count;
}

template <class T>
Tensor4<T> Standardizer<T>::forward(const Tensor4<T>& x, Mode mode) {
  const Shape4& s = x.shape();
  if (s.c != channels_) {
    throw DimensionError("normalization expects " + std::to_string(channels_) + " channels, got " + s.str());
  }
  used_batch_stats_ = !has_running() || (mode == Mode::kTrain && !frozen_);
  if (used_batch_stats_) {
    const MomentStats<T> st = compute_block_moments(x, scheme_, eps_);
    xhat_ = standardize(x, st, scheme_);
    inv_sigma_.resize(st.sigma.size());
    for (std::size_t j = 0; j < st.sigma.size(); ++j) inv_sigma_[j] = T(1) / st.sigma[j];
    if (has_running()) {
      std::vector<T> var(channels_);
      for (std::size_t c = 0; c < channels_; ++c) {
        var[c] = st.sigma[c] * st.sigma[c] - eps_;
        if (var[c] < T(0)) var[c] = T(0);
      }
      const RunningStats<T> next = update_running(running(), st.mu, var, momentum_);
      running_mean_.value = next.mean;
      running_var_.value = next.var;
      count_ = next.count;
    }
    return xhat_;
  }

  if (count_ == 0) throw StateError("uninitialized running statistics");
  inv_sigma_.resize(channels_);
  for (std::size_t c = 0; c < channels_; ++c) inv_sigma_[c] = T(1) / std::sqrt(running_var_.value[c] + eps_);
  xhat_ = Tensor4<T>(s);
  const std::size_t planes = s.n * s.c;
  const std::size_t p = s.plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const std::size_t c = i % s.c;
    const T mu = running_mean_.value[c];
    const T inv = inv_sigma_[c];
    const T* src = x.data() + i * p;
    T* dst = xhat_.data() + i * p;
    for (std::size_t k = 0; k < p; ++k) dst[k] = (src[k] - mu) * inv;
  }
  return xhat_;
}

template <class T>
Tensor4<T> Standardizer<T>::backward(const Tensor4<T>& dxhat) const {
  const Shape4& s = xhat_.shape();
  if (dxhat.shape() != s) throw DimensionError("normalization backward: cotangent shape " + dxhat.shape().str());
  Tensor4<T> dx(s);
  const std::size_t p = s.plane();
  if (!used_batch_stats_) {
    const std::size_t planes = s.n * s.c;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
      const auto i = static_cast<std::size_t>(pi);
      const T inv = inv_sigma_[i % s.c];
      for (std::size_t k = 0; k < p; ++k) dx[i * p + k] = dxhat[i * p + k] * inv;
    }
    return dx;
  }
  // dx = (1/sigma) * (g - mean(g) - xhat * mean(g * xhat)) within each block.
  const std::size_t blocks = scheme_.num_blocks(s);
  const auto m = static_cast<double>(scheme_.block_size(s));
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(blocks); ++jj) {
    const auto j = static_cast<std::size_t>(jj);
    double sg = 0;
    double sgx = 0;
    for_each_plane(s, scheme_, j, [&](std::size_t off) {
      sg += kernels::lane_sum(dxhat.data() + off, p);
      sgx += kernels::lane_dot(dxhat.data() + off, xhat_.data() + off, p);
    });
    const T mg = static_cast<T>(sg / m);
    const T mgx = static_cast<T>(sgx / m);
    const T inv = inv_sigma_[j];
    for_each_plane(s, scheme_, j, [&](std::size_t off) {
      for (std::size_t k = 0; k < p; ++k) dx[off + k] = inv * (dxhat[off + k] - mg - xhat_[off + k] * mgx);
    });
  }
  return dx;
}

template <class T>
void Standardizer<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  if (!has_running()) return;
  out.push_back({join_name(prefix, running_mean_.name), &running_mean_});
  out.push_back({join_name(prefix, running_var_.name), &running_var_});
}

// ---------------------------------------------------------------------------
// Channel affine helpers

namespace detail {

template <class T>
Tensor4<T> channel_affine(const Tensor4<T>& xhat, const std::vector<T>& gamma, const std::vector<T>& beta) {
  const Shape4& s = xhat.shape();
  if (gamma.size() != s.c || beta.size() != s.c) {
    throw DimensionError("affine: parameter length does not match " + std::to_string(s.c) + " channels");
  }
  Tensor4<T> out(s);
  const std::size_t planes = s.n * s.c;
  const std::size_t p = s.plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const T g = gamma[i % s.c];
    const T b = beta[i % s.c];
    for (std::size_t k = 0; k < p; ++k) out[i * p + k] = g * xhat[i * p + k] + b;
  }
  return out;
}

template <class T>
Tensor4<T> channel_affine_backward(const Tensor4<T>& xhat, const std::vector<T>& gamma, const Tensor4<T>& dy,
                                   Param<T>& dgamma, Param<T>& dbeta) {
  const Shape4& s = xhat.shape();
  if (dy.shape() != s) throw DimensionError("affine backward: cotangent shape " + dy.shape().str());
  Tensor4<T> dxhat(s);
  const std::size_t p = s.plane();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t cc = 0; cc < static_cast<std::ptrdiff_t>(s.c); ++cc) {
    const auto c = static_cast<std::size_t>(cc);
    double sg = 0;
    double sb = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * p;
      sg += kernels::lane_dot(dy.data() + off, xhat.data() + off, p);
      sb += kernels::lane_sum(dy.data() + off, p);
      for (std::size_t k = 0; k < p; ++k) dxhat[off + k] = gamma[c] * dy[off + k];
    }
    if (dgamma.trainable) dgamma.grad[c] += static_cast<T>(sg);
    if (dbeta.trainable) dbeta.grad[c] += static_cast<T>(sb);
  }
  return dxhat;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layers

template <class T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, T eps, T momentum)
    : std_(channels, BlockScheme::batch(), eps, momentum),
      gamma_("gamma", {channels}, ParamKind::kNormAffine, T(1)),
      beta_("beta", {channels}, ParamKind::kNormAffine, T(0)) {}

template <class T>
Tensor4<T> BatchNorm2d<T>::forward(const Tensor4<T>& x) {
  return detail::channel_affine(std_.forward(x, this->mode_), gamma_.value, beta_.value);
}

template <class T>
Tensor4<T> BatchNorm2d<T>::backward(const Tensor4<T>& dy) {
  return std_.backward(detail::channel_affine_backward(std_.xhat(), gamma_.value, dy, gamma_, beta_));
}

template <class T>
void BatchNorm2d<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, gamma_.name), &gamma_});
  out.push_back({join_name(prefix, beta_.name), &beta_});
  std_.collect(prefix, out);
}

template <class T>
void BatchNorm2d<T>::zero_scale() {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(0));
}

template <class T>
void BatchNorm2d<T>::set_params(const AffineParams<T>& p) {
  if (p.gamma.size() != gamma_.numel() || p.beta.size() != beta_.numel()) {
    throw DimensionError("BatchNorm2d: affine parameter length mismatch");
  }
  gamma_.value = p.gamma;
  beta_.value = p.beta;
}

template <class T>
GroupNorm<T>::GroupNorm(std::size_t channels, std::size_t groups, T eps)
    : std_(channels, BlockScheme::group(groups), eps),
      gamma_("gamma", {channels}, ParamKind::kNormAffine, T(1)),
      beta_("beta", {channels}, ParamKind::kNormAffine, T(0)) {}

template <class T>
Tensor4<T> GroupNorm<T>::forward(const Tensor4<T>& x) {
  return detail::channel_affine(std_.forward(x, this->mode_), gamma_.value, beta_.value);
}

template <class T>
Tensor4<T> GroupNorm<T>::backward(const Tensor4<T>& dy) {
  return std_.backward(detail::channel_affine_backward(std_.xhat(), gamma_.value, dy, gamma_, beta_));
}

template <class T>
void GroupNorm<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, gamma_.name), &gamma_});
  out.push_back({join_name(prefix, beta_.name), &beta_});
}

template <class T>
void GroupNorm<T>::zero_scale() {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(0));
}

template <class T>
void GroupNorm<T>::set_params(const AffineParams<T>& p) {
  if (p.gamma.size() != gamma_.numel() || p.beta.size() != beta_.numel()) {
    throw DimensionError("GroupNorm: affine parameter length mismatch");
  }
  gamma_.value = p.gamma;
  beta_.value = p.beta;
}

#define ATTNORM_INSTANTIATE(T)                                                                                \
  template MomentStats<T> compute_block_moments(const Tensor4<T>&, const BlockScheme&, T);                     \
  template Tensor4<T> standardize(const Tensor4<T>&, const MomentStats<T>&, const BlockScheme&);               \
  template Tensor4<T> affine(const Tensor4<T>&, const AffineParams<T>&);                                      \
  template RunningStats<T> update_running(const RunningStats<T>&, const std::vector<T>&, const std::vector<T>&, \
                                          T);                                                                 \
  template Tensor4<T> bn_forward(const Tensor4<T>&, const AffineParams<T>&, RunningStats<T>&, Mode, T);       \
  template Tensor4<T> gn_forward(const Tensor4<T>&, const AffineParams<T>&, std::size_t, T);                  \
  template Tensor4<T> detail::channel_affine(const Tensor4<T>&, const std::vector<T>&, const std::vector<T>&); \
  template Tensor4<T> detail::channel_affine_backward(const Tensor4<T>&, const std::vector<T>&,                \
                                                      const Tensor4<T>&, Param<T>&, Param<T>&);               \
  template class Standardizer<T>;                                                                             \
  template class BatchNorm2d<T>;                                                                              \
  template class GroupNorm<T>;

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
