#include "attnorm/attentive_norm.hpp"

#include "attnorm/init.hpp"
#include "attnorm/kernels.hpp"

namespace attnorm {

namespace {

BlockScheme resolve_backbone(BlockScheme b, std::size_t channels) {
  if (b.kind == BlockScheme::Kind::kGroup && b.groups == 0) b.groups = default_gn_groups(channels);
  return b;
}

// Salt so the attention subnetwork does not reuse the mixture's stream.
constexpr std::uint64_t kAttentionSeedSalt = 0x9e3779b97f4a7c15ULL;

}  // namespace

template <class T>
EffectiveAffine<T> effective_affine(const Mat<T>& lambda, const MixtureAffine<T>& mixture) {
  if (mixture.gamma.rows() != mixture.beta.rows() || mixture.gamma.cols() != mixture.beta.cols()) {
    throw DimensionError("effective_affine: gamma and beta banks differ in shape");
  }
  if (lambda.cols() != mixture.gamma.rows()) {
    throw DimensionError("effective_affine: lambda has " + std::to_string(lambda.cols()) + " components, mixture has " +
                         std::to_string(mixture.gamma.rows()));
  }
  return {lambda * mixture.gamma, lambda * mixture.beta};
}

template <class T>
AttentiveNorm<T>::AttentiveNorm(std::size_t channels, const ANConfig& cfg, std::uint64_t seed)
    : channels_(channels),
      cfg_(cfg),
      std_(channels, resolve_backbone(cfg.backbone, channels), static_cast<T>(cfg.eps), static_cast<T>(cfg.momentum)),
      gamma_("mixture.gamma", {cfg.k, channels}, ParamKind::kNormAffine),
      beta_("mixture.beta", {cfg.k, channels}, ParamKind::kNormAffine),
      attn_(channels, cfg.k, cfg.attention, seed ^ kAttentionSeedSalt) {
  if (cfg.k < 1) throw ConfigError("attentive normalization needs K >= 1");
  cfg_.backbone = std_.scheme();
  init::Rng rng(seed);
  init::normal<T>(gamma_.value, 1.0, 0.1, rng);
  init::normal<T>(beta_.value, 0.0, 0.1, rng);
}

template <class T>
Tensor4<T> AttentiveNorm<T>::forward(const Tensor4<T>& x) {
  const Shape4& s = x.shape();
  if (s.c != channels_) {
    throw DimensionError("attentive normalization expects " + std::to_string(channels_) + " channels, got " + s.str());
  }
  lambda_ = attn_.forward(x, this->mode_);
  const Tensor4<T>& xhat = std_.forward(x, this->mode_);
  eff_ = effective_affine(lambda_, mixture());
  Tensor4<T> y(s);
  const std::size_t p = s.plane();
  const std::size_t planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const auto r = static_cast<Eigen::Index>(i / s.c);
    const auto c = static_cast<Eigen::Index>(i % s.c);
    const T g = eff_.gamma(r, c);
    const T b = eff_.beta(r, c);
    for (std::size_t k = 0; k < p; ++k) y[i * p + k] = g * xhat[i * p + k] + b;
  }
  return y;
}

template <class T>
Tensor4<T> AttentiveNorm<T>::backward(const Tensor4<T>& dy) {
  const Tensor4<T>& xhat = std_.xhat();
  const Shape4& s = xhat.shape();
  if (dy.shape() != s) throw DimensionError("attentive normalization backward: cotangent shape " + dy.shape().str());
  const std::size_t p = s.plane();
  const std::size_t planes = s.n * s.c;
  Mat<T> dgamma_eff(s.n, s.c);
  Mat<T> dbeta_eff(s.n, s.c);
  Tensor4<T> dxhat(s);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const auto r = static_cast<Eigen::Index>(i / s.c);
    const auto c = static_cast<Eigen::Index>(i % s.c);
    const T g = eff_.gamma(r, c);
    const double sg = kernels::lane_dot(dy.data() + i * p, xhat.data() + i * p, p);
    const double sb = kernels::lane_sum(dy.data() + i * p, p);
    for (std::size_t k = 0; k < p; ++k) dxhat[i * p + k] = g * dy[i * p + k];
    dgamma_eff(r, c) = static_cast<T>(sg);
    dbeta_eff(r, c) = static_cast<T>(sb);
  }
  if (gamma_.trainable) gamma_.grad_matrix().noalias() += lambda_.transpose() * dgamma_eff;
  if (beta_.trainable) beta_.grad_matrix().noalias() += lambda_.transpose() * dbeta_eff;
  const Mat<T> dlambda =
      dgamma_eff * gamma_.value_matrix().transpose() + dbeta_eff * beta_.value_matrix().transpose();

  Tensor4<T> dx = std_.backward(dxhat);
  const Tensor4<T> dx_attn = attn_.backward(dlambda);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_attn[i];
  return dx;
}

template <class T>
void AttentiveNorm<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, gamma_.name), &gamma_});
  out.push_back({join_name(prefix, beta_.name), &beta_});
  std_.collect(prefix, out);
  attn_.collect(join_name(prefix, "attn"), out);
}

template <class T>
void AttentiveNorm<T>::zero_scale() {
  std::fill(gamma_.value.begin(), gamma_.value.end(), T(0));
}

template <class T>
void AttentiveNorm<T>::set_finetune_frozen(bool attention_bn) {
  set_frozen_standardization(true);
  set_frozen_mixture(true);
  attn_.set_bn_frozen(attention_bn);
}

template <class T>
void AttentiveNorm<T>::set_frozen_standardization(bool f) {
  frozen_std_ = f;
  std_.set_frozen(f);
}

template <class T>
void AttentiveNorm<T>::set_frozen_mixture(bool f) {
  gamma_.trainable = !f;
  beta_.trainable = !f;
  if (f) {
    gamma_.zero_grad();
    beta_.zero_grad();
  }
}

template <class T>
MixtureAffine<T> AttentiveNorm<T>::mixture() const {
  const auto k = static_cast<Eigen::Index>(cfg_.k);
  const auto c = static_cast<Eigen::Index>(channels_);
  return {ConstMatMap<T>(gamma_.value.data(), k, c), ConstMatMap<T>(beta_.value.data(), k, c)};
}

template <class T>
void AttentiveNorm<T>::set_mixture(const MixtureAffine<T>& m) {
  const auto k = static_cast<Eigen::Index>(cfg_.k);
  const auto c = static_cast<Eigen::Index>(channels_);
  if (m.gamma.rows() != k || m.gamma.cols() != c || m.beta.rows() != k || m.beta.cols() != c) {
    throw DimensionError("mixture must be " + std::to_string(k) + " x " + std::to_string(c));
  }
  gamma_.value_matrix() = m.gamma;
  beta_.value_matrix() = m.beta;
}

template EffectiveAffine<float> effective_affine(const Mat<float>&, const MixtureAffine<float>&);
template EffectiveAffine<double> effective_affine(const Mat<double>&, const MixtureAffine<double>&);
template class AttentiveNorm<float>;
template class AttentiveNorm<double>;

}  // namespace attnorm
