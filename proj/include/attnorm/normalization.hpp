#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "attnorm/module.hpp"
#include "attnorm/tensor.hpp"

namespace attnorm {

inline constexpr double kDefaultNormEps = 1e-5;
inline constexpr double kDefaultMomentum = 0.1;

/// How a feature map is partitioned into standardization blocks.
///   batch: one block per channel, spanning every instance and position.
///   group: one block per (instance, channel group), spanning H x W.
struct BlockScheme {
  enum class Kind { kBatch, kGroup };
  Kind kind = Kind::kBatch;
  std::size_t groups = 0;

  static BlockScheme batch() { return {Kind::kBatch, 0}; }
  static BlockScheme group(std::size_t g) { return {Kind::kGroup, g}; }

  void validate(const Shape4& s) const;
  std::size_t num_blocks(const Shape4& s) const;
  std::size_t block_size(const Shape4& s) const;
  std::size_t block_of(const Shape4& s, std::size_t n, std::size_t c) const;
  std::string str() const;
};

/// 32 groups, or C groups when C < 32.
std::size_t default_gn_groups(std::size_t channels);

template <class T>
struct MomentStats {
  std::vector<T> mu;
  std::vector<T> sigma;  // sqrt(population variance + eps)
  std::size_t m = 0;     // block size
  T eps = T(kDefaultNormEps);
};

template <class T>
struct RunningStats {
  std::vector<T> mean;
  std::vector<T> var;
  T momentum = T(kDefaultMomentum);
  std::size_t count = 0;

  static RunningStats fresh(std::size_t channels, T momentum = T(kDefaultMomentum)) {
    return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1)), momentum, 0};
  }
  bool initialized() const { return count > 0; }
};

template <class T>
struct AffineParams {
  std::vector<T> gamma;
  std::vector<T> beta;

  static AffineParams identity(std::size_t channels) {
    return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0))};
  }
};

template <class T>
MomentStats<T> compute_block_moments(const Tensor4<T>& x, const BlockScheme& scheme, T eps);

/// x_hat = (x - mu_j) / sigma_j over the block j each position belongs to.
template <class T>
Tensor4<T> standardize(const Tensor4<T>& x, const MomentStats<T>& stats, const BlockScheme& scheme);

template <class T>
Tensor4<T> affine(const Tensor4<T>& xhat, const AffineParams<T>& params);

/// new = (1 - momentum) * old + momentum * batch, per channel.
template <class T>
RunningStats<T> update_running(const RunningStats<T>& rs, const std::vector<T>& batch_mean,
                               const std::vector<T>& batch_var, T momentum);

/// Functional batch normalization. Train mode standardizes with batch moments
/// and updates rs; eval mode uses running mean and sqrt(running var + eps).
template <class T>
Tensor4<T> bn_forward(const Tensor4<T>& x, const AffineParams<T>& params, RunningStats<T>& rs, Mode mode,
                      T eps = T(kDefaultNormEps));

template <class T>
Tensor4<T> gn_forward(const Tensor4<T>& x, const AffineParams<T>& params, std::size_t groups,
                      T eps = T(kDefaultNormEps));

/// Stateful standardization used by the BN, GN and AN layers: owns running
/// statistics for the batch scheme and the activations its backward needs.
template <class T>
class Standardizer {
 public:
  Standardizer(std::size_t channels, BlockScheme scheme, T eps = T(kDefaultNormEps),
               T momentum = T(kDefaultMomentum));

  Tensor4<T> forward(const Tensor4<T>& x, Mode mode);
  Tensor4<T> backward(const Tensor4<T>& dxhat) const;

  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out);

  // Frozen: running statistics are used in every mode and never updated.
  void set_frozen(bool f) { frozen_ = f; }
  bool frozen() const { return frozen_; }

  const BlockScheme& scheme() const { return scheme_; }
  std::size_t channels() const { return channels_; }
  T eps() const { return eps_; }
  const Tensor4<T>& xhat() const { return xhat_; }
  bool has_running() const { return scheme_.kind == BlockScheme::Kind::kBatch; }
  RunningStats<T> running() const;
  void set_running(const RunningStats<T>& rs);
  // Marks running statistics as usable (e.g. after loading them from disk).
  void mark_initialized() { count_ = std::max<std::size_t>(count_, 1); }

 private:
  std::size_t channels_;
  BlockScheme scheme_;
  T eps_;
  T momentum_;
  bool frozen_ = false;
  Param<T> running_mean_;
  Param<T> running_var_;
  std::size_t count_ = 0;

  Tensor4<T> xhat_;
  std::vector<T> inv_sigma_;  // per block (batch stats) or per channel (running)
  bool used_batch_stats_ = true;
};

/// A normalization layer whose final re-scaling can be zeroed.
template <class T>
class NormModule : public Module<T> {
 public:
  virtual void zero_scale() = 0;
  virtual std::size_t channels() const = 0;
};

template <class T>
class BatchNorm2d final : public NormModule<T> {
 public:
  explicit BatchNorm2d(std::size_t channels, T eps = T(kDefaultNormEps), T momentum = T(kDefaultMomentum));

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "BatchNorm2d"; }
  void zero_scale() override;
  std::size_t channels() const override { return std_.channels(); }

  AffineParams<T> params() const { return {gamma_.value, beta_.value}; }
  void set_params(const AffineParams<T>& p);
  Standardizer<T>& standardizer() { return std_; }

 private:
  Standardizer<T> std_;
  Param<T> gamma_;
  Param<T> beta_;
};

template <class T>
class GroupNorm final : public NormModule<T> {
 public:
  GroupNorm(std::size_t channels, std::size_t groups, T eps = T(kDefaultNormEps));

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "GroupNorm"; }
  void zero_scale() override;
  std::size_t channels() const override { return std_.channels(); }

  void set_params(const AffineParams<T>& p);

 private:
  Standardizer<T> std_;
  Param<T> gamma_;
  Param<T> beta_;
};

namespace detail {
// y = gamma_c * xhat + beta_c and its backward, shared by the BN and GN layers.
template <class T>
Tensor4<T> channel_affine(const Tensor4<T>& xhat, const std::vector<T>& gamma, const std::vector<T>& beta);
template <class T>
Tensor4<T> channel_affine_backward(const Tensor4<T>& xhat, const std::vector<T>& gamma, const Tensor4<T>& dy,
                                   Param<T>& dgamma, Param<T>& dbeta);
}  // namespace detail

}  // namespace attnorm
