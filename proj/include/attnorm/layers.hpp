#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnorm/kernels.hpp"
#include "attnorm/module.hpp"

namespace attnorm {

/// Runs forward and raises NumericError naming `path` when the output is not
/// finite. Composite layers descend so the innermost offender is reported.
template <class T>
Tensor4<T> forward_traced(Module<T>& m, const Tensor4<T>& x, const std::string& path);

/// Bias-free 2-D convolution.
template <class T>
class Conv2d final : public Module<T> {
 public:
  Conv2d(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride, std::size_t pad,
         std::uint64_t seed);

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "Conv2d"; }

  const kernels::ConvGeometry& geometry() const { return g_; }
  Param<T>& weight() { return weight_; }
  // The first layer of a network has no use for an input cotangent.
  void set_needs_input_grad(bool b) { needs_input_grad_ = b; }

 private:
  kernels::ConvGeometry g_;
  Param<T> weight_;
  Tensor4<T> x_;
  bool needs_input_grad_ = true;
};

template <class T>
class ReLU final : public Module<T> {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  std::string kind() const override { return "ReLU"; }

 private:
  Tensor4<T> x_;
};

template <class T>
class MaxPool2d final : public Module<T> {
 public:
  MaxPool2d(std::size_t k, std::size_t stride, std::size_t pad) : k_(k), stride_(stride), pad_(pad) {}

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  std::string kind() const override { return "MaxPool2d"; }

 private:
  std::size_t k_;
  std::size_t stride_;
  std::size_t pad_;
  Shape4 in_shape_{};
  std::vector<std::size_t> argmax_;
};

template <class T>
class GlobalAvgPool final : public Module<T> {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  std::string kind() const override { return "GlobalAvgPool"; }

 private:
  Shape4 in_shape_{};
};

/// Fully-connected layer on N x D x 1 x 1 tensors; weight is D_out x D_in.
template <class T>
class Linear final : public Module<T> {
 public:
  Linear(std::size_t d_in, std::size_t d_out, bool bias, std::uint64_t seed);

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  std::string kind() const override { return "Linear"; }

  Param<T>& weight() { return weight_; }
  Param<T>* bias() { return has_bias_ ? &bias_ : nullptr; }

 private:
  bool has_bias_;
  Param<T> weight_;
  Param<T> bias_;
  Mat<T> x_;
};

/// Ordered chain of named layers.
template <class T>
class Sequential : public Module<T> {
 public:
  Sequential() = default;

  Module<T>& add(std::string name, ModulePtr<T> m);
  template <class M>
  M& emplace(std::string name, std::unique_ptr<M> m) {
    M& ref = *m;
    add(std::move(name), std::move(m));
    return ref;
  }

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  void set_mode(Mode m) override;
  std::string kind() const override { return "Sequential"; }

  Tensor4<T> forward_traced(const Tensor4<T>& x, const std::string& path);

  std::size_t size() const { return children_.size(); }
  bool empty() const { return children_.empty(); }
  const std::string& name_at(std::size_t i) const { return children_[i].first; }
  Module<T>& at(std::size_t i) { return *children_[i].second; }

 private:
  std::vector<std::pair<std::string, ModulePtr<T>>> children_;
};

/// relu(branch(x) + shortcut(x)); an empty shortcut is the identity.
template <class T>
class ResidualBlock final : public Module<T> {
 public:
  ResidualBlock() = default;

  Sequential<T>& branch() { return branch_; }
  Sequential<T>& shortcut() { return shortcut_; }

  Tensor4<T> forward(const Tensor4<T>& x) override;
  Tensor4<T> backward(const Tensor4<T>& dy) override;
  void collect(const std::string& prefix, std::vector<NamedParam<T>>& out) override;
  void set_mode(Mode m) override;
  std::string kind() const override { return "ResidualBlock"; }

  Tensor4<T> forward_traced(const Tensor4<T>& x, const std::string& path);

 private:
  Sequential<T> branch_;
  Sequential<T> shortcut_;
  Tensor4<T> sum_;
};

}  // namespace attnorm
