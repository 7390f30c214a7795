#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "attnorm/module.hpp"
#include "attnorm/normalization.hpp"
#include "attnorm/tensor.hpp"

namespace attnorm {

/// What describes a channel of one instance over its H x W extent.
struct Summarizer {
  enum class Kind { kMean, kMeanStd, kRSD };
  Kind kind = Kind::kRSD;
  double eps = 1e-5;  // RSD stability constant

  /// Width D of the summary for C channels (2C for mean+std).
  std::size_t width(std::size_t channels) const { return kind == Kind::kMeanStd ? 2 * channels : channels; }
};

enum class Activation { kReLU, kSigmoid, kSoftmax, kHSigmoid };
enum class AttentionChoice { kChoice1, kChoice2 };

std::string to_string(Summarizer::Kind k);
std::string to_string(Activation a);
std::string to_string(AttentionChoice c);
Summarizer::Kind parse_summarizer(const std::string& s);
Activation parse_activation(const std::string& s);
AttentionChoice parse_choice(const std::string& s);

/// min(max(a + 3, 0), 6) / 6
template <class T>
T hsigmoid(T a) {
  return std::min(std::max(a + T(3), T(0)), T(6)) / T(6);
}

/// 1/6 strictly inside (-3, 3), 0 elsewhere (including the boundaries).
template <class T>
T hsigmoid_grad(T a) {
  return (a > T(-3) && a < T(3)) ? T(1) / T(6) : T(0);
}

template <class T>
T sigmoid(T a) {
  return a >= T(0) ? T(1) / (T(1) + std::exp(-a)) : std::exp(a) / (T(1) + std::exp(a));
}

/// Per-instance, per-channel spatial mean and population standard deviation.
template <class T>
struct ChannelMoments {
  Mat<T> mu;     // N x C
  Mat<T> sigma;  // N x C
};

template <class T>
ChannelMoments<T> channel_moments(const Tensor4<T>& x);

template <class T>
Mat<T> channel_summary(const ChannelMoments<T>& mom, const Summarizer& s);

template <class T>
Mat<T> channel_summary(const Tensor4<T>& x, const Summarizer& s) {
  return channel_summary(channel_moments(x), s);
}

template <class T>
Tensor4<T> channel_summary_backward(const Tensor4<T>& x, const ChannelMoments<T>& mom, const Summarizer& s,
                                    const Mat<T>& dsummary);

/// Row-wise activation; softmax normalizes each row (over K).
template <class T>
Mat<T> activate(const Mat<T>& z, Activation a);

template <class T>
Mat<T> activate_backward(const Mat<T>& z, const Mat<T>& out, const Mat<T>& dout, Activation a);

/// Squeeze width for SE: channels / r, which must be at least 1.
std::size_t se_hidden_width(std::size_t channels, std::size_t r);

/// Squeeze-and-excitation gate:
///   v = relu(fc(avgpool(x))), lambda = sigmoid(fc(v)), y = lambda[n,c] * x.
template <class T>
class SqueezeExcite final : public Module<T> {
 public:
  SqueezeExcite(std::size_t channels, std::size_t hidden, std::uint64_t seed);

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "SqueezeExcite"; }

  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }
  Param<T>& squeeze_weight() { return w_s_; }
  Param<T>& squeeze_bias() { return b_s_; }
  Param<T>& excite_weight() { return w_e_; }
  Param<T>& excite_bias() { return b_e_; }
  const Mat<T>& gate() const { return gate_; }

 private:
  std::size_t channels_;
  std::size_t hidden_;
  Param<T> w_s_;  // hidden x C
  Param<T> b_s_;
  Param<T> w_e_;  // C x hidden
  Param<T> b_e_;

  Tensor4<T> x_;
  Mat<T> pooled_;
  Mat<T> pre_s_;
  Mat<T> v_;
  Mat<T> gate_;
};

struct AttentionConfig {
  Summarizer summarizer{};
  AttentionChoice choice = AttentionChoice::kChoice2;
  Activation activation = Activation::kHSigmoid;
};

/// The attention-weight subnetwork producing the N x K mixture weights:
///   Choice 1: act(fc(summary(x)))       with a biased fc
///   Choice 2: act(BN(fc(summary(x))))   with a bias-free fc and a per-K BN
template <class T>
class AttentionNet {
 public:
  AttentionNet(std::size_t channels, std::size_t k, const AttentionConfig& cfg, std::uint64_t seed);

  Mat<T> forward(const Tensor4<T>& x, Mode mode);
  Tensor4<T> backward(const Mat<T>& dlambda);
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out);

  const AttentionConfig& config() const { return cfg_; }
  std::size_t k() const { return k_; }
  std::size_t input_width() const { return d_in_; }

  /// Freezes the Choice-2 BN statistics (running stats used in train mode too).
  void set_bn_frozen(bool f);
  bool has_bn() const { return cfg_.choice == AttentionChoice::kChoice2; }

  Param<T>& fc_weight() { return fc_w_; }  // D_in x K
  Param<T>* fc_bias() { return has_bn() ? nullptr : &fc_b_; }
  Param<T>* bn_gamma() { return has_bn() ? &bn_gamma_ : nullptr; }
  Param<T>* bn_beta() { return has_bn() ? &bn_beta_ : nullptr; }
  Standardizer<T>* bn_standardizer() { return has_bn() ? &bn_std_ : nullptr; }

  /// Activation inputs of the last forward (N x K).
  const Mat<T>& preactivation() const { return z_; }
  /// fc outputs of the last forward, before the optional BN (N x K).
  const Mat<T>& fc_output() const { return z0_; }
  const Mat<T>& summary() const { return s_; }

 private:
  std::size_t channels_;
  std::size_t k_;
  std::size_t d_in_;
  AttentionConfig cfg_;
  Param<T> fc_w_;
  Param<T> fc_b_;
  Param<T> bn_gamma_;
  Param<T> bn_beta_;
  Standardizer<T> bn_std_;

  Tensor4<T> x_;
  ChannelMoments<T> mom_;
  Mat<T> s_;
  Mat<T> z0_;
  Mat<T> zhat_;
  Mat<T> z_;
  Mat<T> lambda_;
};

}  // namespace attnorm
