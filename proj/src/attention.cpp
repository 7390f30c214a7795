#include "attnorm/attention.hpp"

#include <cmath>

#include "attnorm/init.hpp"
#include "attnorm/kernels.hpp"

namespace attnorm {

std::string to_string(Summarizer::Kind k) {
  switch (k) {
    case Summarizer::Kind::kMean: return "mean";
    case Summarizer::Kind::kMeanStd: return "meanstd";
    case Summarizer::Kind::kRSD: return "rsd";
  }
  return "?";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::kReLU: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftmax: return "softmax";
    case Activation::kHSigmoid: return "hsigmoid";
  }
  return "?";
}

std::string to_string(AttentionChoice c) { return c == AttentionChoice::kChoice1 ? "1" : "2"; }

Summarizer::Kind parse_summarizer(const std::string& s) {
  if (s == "mean") return Summarizer::Kind::kMean;
  if (s == "meanstd") return Summarizer::Kind::kMeanStd;
  if (s == "rsd") return Summarizer::Kind::kRSD;
  throw ConfigError("unknown summarizer '" + s + "' (mean|meanstd|rsd)");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kReLU;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "softmax") return Activation::kSoftmax;
  if (s == "hsigmoid") return Activation::kHSigmoid;
  throw ConfigError("unknown activation '" + s + "' (relu|sigmoid|softmax|hsigmoid)");
}

AttentionChoice parse_choice(const std::string& s) {
  if (s == "1") return AttentionChoice::kChoice1;
  if (s == "2") return AttentionChoice::kChoice2;
  throw ConfigError("unknown attention choice '" + s + "' (1|2)");
}

template <class T>
ChannelMoments<T> channel_moments(const Tensor4<T>& x) {
  const Shape4& s = x.shape();
  ChannelMoments<T> m{Mat<T>(s.n, s.c), Mat<T>(s.n, s.c)};
  const std::size_t p = s.plane();
  const std::size_t planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const T* src = x.data() + i * p;
    const double mean = kernels::lane_sum(src, p) / static_cast<double>(p);
    const double sq = kernels::lane_sum_sq_dev(src, p, mean);
    const auto r = static_cast<Eigen::Index>(i / s.c);
    const auto c = static_cast<Eigen::Index>(i % s.c);
    m.mu(r, c) = static_cast<T>(mean);
    m.sigma(r, c) = static_cast<T>(std::sqrt(sq / static_cast<double>(p)));
  }
  return m;
}

template <class T>
Mat<T> channel_summary(const ChannelMoments<T>& mom, const Summarizer& s) {
  const Eigen::Index n = mom.mu.rows();
  const Eigen::Index c = mom.mu.cols();
  switch (s.kind) {
    case Summarizer::Kind::kMean: return mom.mu;
    case Summarizer::Kind::kMeanStd: {
      Mat<T> out(n, 2 * c);
      out.leftCols(c) = mom.mu;
      out.rightCols(c) = mom.sigma;
      return out;
    }
    case Summarizer::Kind::kRSD: {
      if (!(s.eps > 0)) throw ConfigError("RSD summarizer needs eps > 0");
      Mat<T> out(n, c);
      const T eps = static_cast<T>(s.eps);
      for (Eigen::Index r = 0; r < n; ++r) {
        for (Eigen::Index j = 0; j < c; ++j) out(r, j) = mom.mu(r, j) / (mom.sigma(r, j) + eps);
      }
      return out;
    }
  }
  return {};
}

template <class T>
Tensor4<T> channel_summary_backward(const Tensor4<T>& x, const ChannelMoments<T>& mom, const Summarizer& s,
                                    const Mat<T>& ds) {
  const Shape4& sh = x.shape();
  const auto c_count = static_cast<Eigen::Index>(sh.c);
  if (ds.rows() != static_cast<Eigen::Index>(sh.n) ||
      ds.cols() != static_cast<Eigen::Index>(s.width(sh.c))) {
    throw DimensionError("channel_summary backward: cotangent shape mismatch");
  }
  Tensor4<T> dx(sh);
  const std::size_t p = sh.plane();
  const T inv_p = T(1) / static_cast<T>(p);
  const T eps = static_cast<T>(s.eps);
  const std::size_t planes = sh.n * sh.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const auto r = static_cast<Eigen::Index>(i / sh.c);
    const auto c = static_cast<Eigen::Index>(i % sh.c);
    const T mu = mom.mu(r, c);
    const T sigma = mom.sigma(r, c);
    T dmu = 0;
    T dsig = 0;
    switch (s.kind) {
      case Summarizer::Kind::kMean: dmu = ds(r, c); break;
      case Summarizer::Kind::kMeanStd:
        dmu = ds(r, c);
        dsig = ds(r, c_count + c);
        break;
      case Summarizer::Kind::kRSD: {
        const T den = sigma + eps;
        dmu = ds(r, c) / den;
        dsig = -ds(r, c) * mu / (den * den);
        break;
      }
    }
    // d sigma / d x_k = (x_k - mu) / (P sigma); taken as 0 where sigma == 0.
    const T ksig = sigma > T(0) ? dsig * inv_p / sigma : T(0);
    const T* src = x.data() + i * p;
    T* dst = dx.data() + i * p;
    for (std::size_t k = 0; k < p; ++k) dst[k] = dmu * inv_p + ksig * (src[k] - mu);
  }
  return dx;
}

template <class T>
Mat<T> activate(const Mat<T>& z, Activation a) {
  Mat<T> out(z.rows(), z.cols());
  switch (a) {
    case Activation::kReLU: out = z.cwiseMax(T(0)); break;
    case Activation::kSigmoid: out = z.unaryExpr([](T v) { return sigmoid(v); }); break;
    case Activation::kHSigmoid: out = z.unaryExpr([](T v) { return hsigmoid(v); }); break;
    case Activation::kSoftmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const T mx = z.row(r).maxCoeff();
        T sum = 0;
        for (Eigen::Index c = 0; c < z.cols(); ++c) {
          out(r, c) = std::exp(z(r, c) - mx);
          sum += out(r, c);
        }
        out.row(r) /= sum;
      }
      break;
  }
  return out;
}

template <class T>
Mat<T> activate_backward(const Mat<T>& z, const Mat<T>& out, const Mat<T>& dout, Activation a) {
  Mat<T> dz(z.rows(), z.cols());
  switch (a) {
    case Activation::kReLU:
      dz = (z.array() > T(0)).select(dout, Mat<T>::Zero(z.rows(), z.cols()));
      break;
    case Activation::kSigmoid: dz = dout.array() * out.array() * (T(1) - out.array()); break;
    case Activation::kHSigmoid:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        for (Eigen::Index c = 0; c < z.cols(); ++c) dz(r, c) = dout(r, c) * hsigmoid_grad(z(r, c));
      }
      break;
    case Activation::kSoftmax:
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const T dot = out.row(r).dot(dout.row(r));
        for (Eigen::Index c = 0; c < z.cols(); ++c) dz(r, c) = out(r, c) * (dout(r, c) - dot);
      }
      break;
  }
  return dz;
}

std::size_t se_hidden_width(std::size_t channels, std::size_t r) {
  if (r < 1) throw ConfigError("SE reduction rate must be >= 1");
  const std::size_t hidden = channels / r;
  if (hidden < 1) {
    throw ConfigError("SE squeeze width " + std::to_string(channels) + "/" + std::to_string(r) + " is below 1");
  }
  return hidden;
}

// ---------------------------------------------------------------------------
// SqueezeExcite

template <class T>
SqueezeExcite<T>::SqueezeExcite(std::size_t channels, std::size_t hidden, std::uint64_t seed)
    : channels_(channels),
      hidden_(hidden),
      w_s_("squeeze.weight", {hidden, channels}, ParamKind::kWeight),
      b_s_("squeeze.bias", {hidden}, ParamKind::kBias),
      w_e_("excite.weight", {channels, hidden}, ParamKind::kWeight),
      b_e_("excite.bias", {channels}, ParamKind::kBias) {
  if (channels < 1 || hidden < 1) throw ConfigError("SE needs at least one channel and one hidden unit");
  init::Rng rng(seed);
  init::uniform_fan_in<T>(w_s_.value, channels, rng);
  init::uniform_fan_in<T>(w_e_.value, hidden, rng);
}

template <class T>
Tensor4<T> SqueezeExcite<T>::forward(const Tensor4<T>& x) {
  const Shape4& s = x.shape();
  if (s.c != channels_) throw DimensionError("SE expects " + std::to_string(channels_) + " channels, got " + s.str());
  x_ = x;
  pooled_ = matrix_from_tensor(kernels::global_avg_pool(x));
  const Mat<T> ws = w_s_.value_matrix();
  const Mat<T> we = w_e_.value_matrix();
  pre_s_ = kernels::fully_connected(pooled_, ws, b_s_.value.data());
  v_ = pre_s_.cwiseMax(T(0));
  gate_ = activate(kernels::fully_connected(v_, we, b_e_.value.data()), Activation::kSigmoid);
  Tensor4<T> y(s);
  const std::size_t p = s.plane();
  const std::size_t planes = s.n * s.c;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const T g = gate_(static_cast<Eigen::Index>(i / s.c), static_cast<Eigen::Index>(i % s.c));
    for (std::size_t k = 0; k < p; ++k) y[i * p + k] = g * x[i * p + k];
  }
  return y;
}

template <class T>
Tensor4<T> SqueezeExcite<T>::backward(const Tensor4<T>& dy) {
  const Shape4& s = x_.shape();
  if (dy.shape() != s) throw DimensionError("SE backward: cotangent shape " + dy.shape().str());
  const std::size_t p = s.plane();
  const std::size_t planes = s.n * s.c;
  Tensor4<T> dx(s);
  Mat<T> dgate(s.n, s.c);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(planes); ++pi) {
    const auto i = static_cast<std::size_t>(pi);
    const auto r = static_cast<Eigen::Index>(i / s.c);
    const auto c = static_cast<Eigen::Index>(i % s.c);
    const T g = gate_(r, c);
    const double acc = kernels::lane_dot(dy.data() + i * p, x_.data() + i * p, p);
    for (std::size_t k = 0; k < p; ++k) dx[i * p + k] = g * dy[i * p + k];
    dgate(r, c) = static_cast<T>(acc);
  }
  const Mat<T> ws = w_s_.value_matrix();
  const Mat<T> we = w_e_.value_matrix();
  const Mat<T> de = activate_backward(gate_, gate_, dgate, Activation::kSigmoid);
  Mat<T> dv = kernels::fully_connected_backward(v_, we, de, w_e_.trainable ? w_e_.grad.data() : nullptr,
                                                b_e_.trainable ? b_e_.grad.data() : nullptr);
  const Mat<T> dpre = activate_backward(pre_s_, v_, dv, Activation::kReLU);
  const Mat<T> dpool = kernels::fully_connected_backward(pooled_, ws, dpre, w_s_.trainable ? w_s_.grad.data() : nullptr,
                                                         b_s_.trainable ? b_s_.grad.data() : nullptr);
  const Tensor4<T> dx_pool = kernels::global_avg_pool_backward(tensor_from_matrix(dpool), s);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dx_pool[i];
  return dx;
}

template <class T>
void SqueezeExcite<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  for (Param<T>* p : {&w_s_, &b_s_, &w_e_, &b_e_}) out.push_back({join_name(prefix, p->name), p});
}

// ---------------------------------------------------------------------------
// AttentionNet

template <class T>
AttentionNet<T>::AttentionNet(std::size_t channels, std::size_t k, const AttentionConfig& cfg, std::uint64_t seed)
    : channels_(channels),
      k_(k),
      d_in_(cfg.summarizer.width(channels)),
      cfg_(cfg),
      fc_w_("fc.weight", {cfg.summarizer.width(channels), k}, ParamKind::kWeight),
      fc_b_("fc.bias", {k}, ParamKind::kBias),
      bn_gamma_("bn.gamma", {k}, ParamKind::kNormAffine, T(1)),
      bn_beta_("bn.beta", {k}, ParamKind::kNormAffine, T(0)),
      bn_std_(k, BlockScheme::batch()) {
  if (channels < 1 || k < 1) throw ConfigError("attention subnetwork needs C >= 1 and K >= 1");
  init::Rng rng(seed);
  init::uniform_fan_in<T>(fc_w_.value, d_in_, rng);
}

template <class T>
void AttentionNet<T>::set_bn_frozen(bool f) {
  bn_std_.set_frozen(f);
}

template <class T>
Mat<T> AttentionNet<T>::forward(const Tensor4<T>& x, Mode mode) {
  if (x.shape().c != channels_) {
    throw DimensionError("attention subnetwork expects " + std::to_string(channels_) + " channels, got " +
                         x.shape().str());
  }
  x_ = x;
  mom_ = channel_moments(x);
  s_ = channel_summary(mom_, cfg_.summarizer);
  z0_ = s_ * fc_w_.value_matrix();
  if (has_bn()) {
    zhat_ = matrix_from_tensor(bn_std_.forward(tensor_from_matrix(z0_), mode));
    z_.resize(zhat_.rows(), zhat_.cols());
    for (Eigen::Index r = 0; r < z_.rows(); ++r) {
      for (Eigen::Index c = 0; c < z_.cols(); ++c) z_(r, c) = bn_gamma_.value[c] * zhat_(r, c) + bn_beta_.value[c];
    }
  } else {
    z_ = z0_;
    for (Eigen::Index r = 0; r < z_.rows(); ++r) {
      for (Eigen::Index c = 0; c < z_.cols(); ++c) z_(r, c) += fc_b_.value[c];
    }
  }
  lambda_ = activate(z_, cfg_.activation);
  return lambda_;
}

template <class T>
Tensor4<T> AttentionNet<T>::backward(const Mat<T>& dlambda) {
  if (dlambda.rows() != lambda_.rows() || dlambda.cols() != lambda_.cols()) {
    throw DimensionError("attention backward: cotangent must be N x K");
  }
  const Mat<T> dz = activate_backward(z_, lambda_, dlambda, cfg_.activation);
  Mat<T> dz0;
  if (has_bn()) {
    Mat<T> dzhat(dz.rows(), dz.cols());
    for (Eigen::Index c = 0; c < dz.cols(); ++c) {
      T sg = 0;
      T sb = 0;
      for (Eigen::Index r = 0; r < dz.rows(); ++r) {
        sg += dz(r, c) * zhat_(r, c);
        sb += dz(r, c);
        dzhat(r, c) = bn_gamma_.value[c] * dz(r, c);
      }
      if (bn_gamma_.trainable) bn_gamma_.grad[c] += sg;
      if (bn_beta_.trainable) bn_beta_.grad[c] += sb;
    }
    dz0 = matrix_from_tensor(bn_std_.backward(tensor_from_matrix(dzhat)));
  } else {
    dz0 = dz;
    if (fc_b_.trainable) {
      for (Eigen::Index c = 0; c < dz.cols(); ++c) fc_b_.grad[c] += dz.col(c).sum();
    }
  }
  if (fc_w_.trainable) fc_w_.grad_matrix().noalias() += s_.transpose() * dz0;
  const Mat<T> ds = dz0 * fc_w_.value_matrix().transpose();
  return channel_summary_backward(x_, mom_, cfg_.summarizer, ds);
}

template <class T>
void AttentionNet<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, fc_w_.name), &fc_w_});
  if (has_bn()) {
    out.push_back({join_name(prefix, bn_gamma_.name), &bn_gamma_});
    out.push_back({join_name(prefix, bn_beta_.name), &bn_beta_});
    bn_std_.collect(join_name(prefix, "bn"), out);
  } else {
    out.push_back({join_name(prefix, fc_b_.name), &fc_b_});
  }
}

#define ATTNORM_INSTANTIATE(T)                                                                               \
  template ChannelMoments<T> channel_moments(const Tensor4<T>&);                                            \
  template Mat<T> channel_summary(const ChannelMoments<T>&, const Summarizer&);                             \
  template Tensor4<T> channel_summary_backward(const Tensor4<T>&, const ChannelMoments<T>&, const Summarizer&, \
                                               const Mat<T>&);                                              \
  template Mat<T> activate(const Mat<T>&, Activation);                                                      \
  template Mat<T> activate_backward(const Mat<T>&, const Mat<T>&, const Mat<T>&, Activation);               \
  template class SqueezeExcite<T>;                                                                          \
  template class AttentionNet<T>;

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
