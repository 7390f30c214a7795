#include "attnorm/layers.hpp"

#include "attnorm/init.hpp"

namespace attnorm {

template <class T>
Tensor4<T> forward_traced(Module<T>& m, const Tensor4<T>& x, const std::string& path) {
  if (auto* seq = dynamic_cast<Sequential<T>*>(&m)) return seq->forward_traced(x, path);
  if (auto* blk = dynamic_cast<ResidualBlock<T>*>(&m)) return blk->forward_traced(x, path);
  Tensor4<T> y = m.forward(x);
  if (!y.all_finite()) throw NumericError("non-finite activation produced by " + path + " (" + m.kind() + ")");
  return y;
}

// ---------------------------------------------------------------------------

template <class T>
Conv2d<T>::Conv2d(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, std::size_t pad,
                  std::uint64_t seed)
    : g_{c_out, c_in, k, stride, pad}, weight_("weight", {c_out, c_in, k, k}, ParamKind::kWeight) {
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  init::Rng rng(seed);
  // He normal with fan_out = C_out * k * k.
  init::kaiming_normal<T>(weight_.value, c_out * k * k, rng);
}

template <class T>
Tensor4<T> Conv2d<T>::forward(const Tensor4<T>& x) {
  x_ = x;
  return kernels::conv2d_forward<T>(x, weight_.value, g_);
}

template <class T>
Tensor4<T> Conv2d<T>::backward(const Tensor4<T>& dy) {
  Tensor4<T> dx;
  std::vector<T> scratch;
  std::span<T> dw = weight_.grad;
  if (!weight_.trainable) {
    scratch.assign(weight_.numel(), T(0));
    dw = scratch;
  }
  kernels::conv2d_backward<T>(x_, weight_.value, g_, dy, needs_input_grad_ ? &dx : nullptr, dw);
  if (!needs_input_grad_) dx = Tensor4<T>(x_.shape());
  return dx;
}

template <class T>
void Conv2d<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, weight_.name), &weight_});
}

// ---------------------------------------------------------------------------

template <class T>
Tensor4<T> ReLU<T>::forward(const Tensor4<T>& x) {
  x_ = x;
  return kernels::relu(x);
}

template <class T>
Tensor4<T> ReLU<T>::backward(const Tensor4<T>& dy) {
  return kernels::relu_backward(x_, dy);
}

template <class T>
Tensor4<T> MaxPool2d<T>::forward(const Tensor4<T>& x) {
  in_shape_ = x.shape();
  return kernels::max_pool(x, k_, stride_, pad_, argmax_);
}

template <class T>
Tensor4<T> MaxPool2d<T>::backward(const Tensor4<T>& dy) {
  return kernels::max_pool_backward(dy, in_shape_, argmax_);
}

template <class T>
Tensor4<T> GlobalAvgPool<T>::forward(const Tensor4<T>& x) {
  in_shape_ = x.shape();
  return kernels::global_avg_pool(x);
}

template <class T>
Tensor4<T> GlobalAvgPool<T>::backward(const Tensor4<T>& dy) {
  return kernels::global_avg_pool_backward(dy, in_shape_);
}

// ---------------------------------------------------------------------------

template <class T>
Linear<T>::Linear(std::size_t d_in, std::size_t d_out, bool bias, std::uint64_t seed)
    : has_bias_(bias),
      weight_("weight", {d_out, d_in}, ParamKind::kWeight),
      bias_("bias", {d_out}, ParamKind::kBias) {
  init::Rng rng(seed);
  init::uniform_fan_in<T>(weight_.value, d_in, rng);
}

template <class T>
Tensor4<T> Linear<T>::forward(const Tensor4<T>& x) {
  x_ = x.as_matrix();
  const Mat<T> w = weight_.value_matrix();
  return tensor_from_matrix(kernels::fully_connected(x_, w, has_bias_ ? bias_.value.data() : nullptr));
}

template <class T>
Tensor4<T> Linear<T>::backward(const Tensor4<T>& dy) {
  const Mat<T> w = weight_.value_matrix();
  const Mat<T> dx = kernels::fully_connected_backward(
      x_, w, matrix_from_tensor(dy), weight_.trainable ? weight_.grad.data() : nullptr,
      has_bias_ && bias_.trainable ? bias_.grad.data() : nullptr);
  return tensor_from_matrix(dx);
}

template <class T>
void Linear<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  out.push_back({join_name(prefix, weight_.name), &weight_});
  if (has_bias_) out.push_back({join_name(prefix, bias_.name), &bias_});
}

// ---------------------------------------------------------------------------

template <class T>
Module<T>& Sequential<T>::add(std::string name, ModulePtr<T> m) {
  for (const auto& [n, _] : children_) {
    if (n == name) throw ConfigError("duplicate layer name '" + name + "'");
  }
  m->set_mode(this->mode_);
  children_.emplace_back(std::move(name), std::move(m));
  return *children_.back().second;
}

template <class T>
Tensor4<T> Sequential<T>::forward(const Tensor4<T>& x) {
  if (children_.empty()) return x;
  Tensor4<T> h = children_.front().second->forward(x);
  for (std::size_t i = 1; i < children_.size(); ++i) h = children_[i].second->forward(h);
  return h;
}

template <class T>
Tensor4<T> Sequential<T>::forward_traced(const Tensor4<T>& x, const std::string& path) {
  Tensor4<T> h = x;
  for (auto& [name, m] : children_) h = attnorm::forward_traced(*m, h, join_name(path, name));
  return h;
}

template <class T>
Tensor4<T> Sequential<T>::backward(const Tensor4<T>& dy) {
  if (children_.empty()) return dy;
  Tensor4<T> g = children_.back().second->backward(dy);
  for (std::size_t i = children_.size() - 1; i-- > 0;) g = children_[i].second->backward(g);
  return g;
}

template <class T>
void Sequential<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  for (auto& [name, m] : children_) m->collect(join_name(prefix, name), out);
}

template <class T>
void Sequential<T>::set_mode(Mode m) {
  this->mode_ = m;
  for (auto& [_, c] : children_) c->set_mode(m);
}

// ---------------------------------------------------------------------------

template <class T>
Tensor4<T> ResidualBlock<T>::forward(const Tensor4<T>& x) {
  sum_ = branch_.forward(x);
  const Tensor4<T> sc = shortcut_.forward(x);
  if (sc.shape() != sum_.shape()) {
    throw DimensionError("residual block: branch " + sum_.shape().str() + " vs shortcut " + sc.shape().str());
  }
  for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += sc[i];
  return kernels::relu(sum_);
}

template <class T>
Tensor4<T> ResidualBlock<T>::forward_traced(const Tensor4<T>& x, const std::string& path) {
  sum_ = branch_.forward_traced(x, join_name(path, "branch"));
  const Tensor4<T> sc = shortcut_.forward_traced(x, join_name(path, "shortcut"));
  for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += sc[i];
  return kernels::relu(sum_);
}

template <class T>
Tensor4<T> ResidualBlock<T>::backward(const Tensor4<T>& dy) {
  const Tensor4<T> dsum = kernels::relu_backward(sum_, dy);
  Tensor4<T> dx = branch_.backward(dsum);
  const Tensor4<T> dsc = shortcut_.backward(dsum);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsc[i];
  return dx;
}

template <class T>
void ResidualBlock<T>::collect(const std::string& prefix, std::vector<NamedParam<T>>& out) {
  branch_.collect(prefix, out);
  shortcut_.collect(join_name(prefix, "shortcut"), out);
}

template <class T>
void ResidualBlock<T>::set_mode(Mode m) {
  this->mode_ = m;
  branch_.set_mode(m);
  shortcut_.set_mode(m);
}

#define ATTNORM_INSTANTIATE(T)                                                             \
  template Tensor4<T> forward_traced(Module<T>&, const Tensor4<T>&, const std::string&); \
  template class Conv2d<T>;                                                                \
  template class ReLU<T>;                                                                  \
  template class MaxPool2d<T>;                                                             \
  template class GlobalAvgPool<T>;                                                         \
  template class Linear<T>;                                                                \
  template class Sequential<T>;                                                            \
  template class ResidualBlock<T>;

ATTNORM_INSTANTIATE(float)
ATTNORM_INSTANTIATE(double)
#undef ATTNORM_INSTANTIATE

}  // namespace attnorm
