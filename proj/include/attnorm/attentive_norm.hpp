#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "attnorm/attention.hpp"
#include "attnorm/normalization.hpp"

namespace attnorm {

struct ANConfig {
  std::size_t k = 10;
  BlockScheme backbone = BlockScheme::batch();
  AttentionConfig attention{};
  double eps = kDefaultNormEps;
  double momentum = kDefaultMomentum;
};

/// K x C re-scaling and re-shifting banks.
template <class T>
struct MixtureAffine {
  Mat<T> gamma;
  Mat<T> beta;
};

/// Instance-specific N x C affine obtained by mixing the K banks.
template <class T>
struct EffectiveAffine {
  Mat<T> gamma;
  Mat<T> beta;
};

/// gamma_eff = lambda * gamma, beta_eff = lambda * beta.
template <class T>
EffectiveAffine<T> effective_affine(const Mat<T>& lambda, const MixtureAffine<T>& mixture);

/// Attentive normalization: block-wise standardization followed by an
/// attention-weighted mixture of K channel-wise affine transforms,
///
///   y[n,c,h,w] = sum_k lambda[n,k] * (gamma[k,c] * xhat[n,c,h,w] + beta[k,c]),
///
/// where lambda comes from the attention subnetwork applied to the raw input.
template <class T>
class AttentiveNorm final : public NormModule<T> {
 public:
  /// gamma[k,c] = 1 + 0.1 * N(0,1), beta[k,c] = 0.1 * N(0,1), seeded.
  AttentiveNorm(std::size_t channels, const ANConfig& cfg, std::uint64_t seed);

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "AttentiveNorm"; }
  void zero_scale() override;
  std::size_t channels() const override { return channels_; }

  /// Fine-tuning mode: mixture and standardization statistics fixed, the
  /// attention subnetwork's weights stay trainable. The subnetwork's own BN
  /// statistics are frozen too unless `attention_bn` is false.
  void set_finetune_frozen(bool attention_bn = true);
  void set_frozen_standardization(bool f);
  void set_frozen_mixture(bool f);
  bool frozen_standardization() const { return frozen_std_; }
  bool frozen_mixture() const { return !gamma_.trainable; }
  /// Whether the attention subnetwork's own BN statistics also freeze.
  void set_attention_bn_frozen(bool f) { attn_.set_bn_frozen(f); }

  const ANConfig& config() const { return cfg_; }
  MixtureAffine<T> mixture() const;
  void set_mixture(const MixtureAffine<T>& m);
  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  AttentionNet<T>& attention() { return attn_; }
  Standardizer<T>& standardizer() { return std_; }

  const Mat<T>& lambda() const { return lambda_; }
  const EffectiveAffine<T>& effective() const { return eff_; }
  const Tensor4<T>& xhat() const { return std_.xhat(); }

 private:
  std::size_t channels_;
  ANConfig cfg_;
  Standardizer<T> std_;
  Param<T> gamma_;  // K x C
  Param<T> beta_;   // K x C
  AttentionNet<T> attn_;
  bool frozen_std_ = false;

  Mat<T> lambda_;
  EffectiveAffine<T> eff_;
};

template <class T>
std::unique_ptr<AttentiveNorm<T>> an_init(std::size_t channels, std::size_t k, std::uint64_t seed,
                                          ANConfig cfg = {}) {
  cfg.k = k;
  return std::make_unique<AttentiveNorm<T>>(channels, cfg, seed);
}

}  // namespace attnorm
