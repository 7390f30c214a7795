#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "attnorm/common.hpp"
#include "attnorm/tensor.hpp"

namespace attnorm {

enum class ParamKind {
  kWeight,       // conv / fc weights
  kBias,         // fc biases
  kNormAffine,   // gamma / beta of normalization layers, AN mixture banks
  kRunningStat,  // running mean / variance, not trainable, no gradient
};

/// A named parameter or buffer owned by a layer.
template <class T>
struct Param {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<T> value;
  std::vector<T> grad;
  ParamKind kind = ParamKind::kWeight;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> d, ParamKind k, T fill = T(0))
      : name(std::move(n)), dims(std::move(d)), kind(k), trainable(k != ParamKind::kRunningStat) {
    value.assign(numel(), fill);
    if (kind != ParamKind::kRunningStat) grad.assign(numel(), T(0));
  }

  std::size_t numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }
  bool is_buffer() const { return kind == ParamKind::kRunningStat; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  MatMap<T> value_matrix() {
    return MatMap<T>(value.data(), static_cast<Eigen::Index>(dims.at(0)),
                     static_cast<Eigen::Index>(numel() / dims.at(0)));
  }
  ConstMatMap<T> value_matrix() const {
    return ConstMatMap<T>(value.data(), static_cast<Eigen::Index>(dims.at(0)),
                          static_cast<Eigen::Index>(numel() / dims.at(0)));
  }
  MatMap<T> grad_matrix() {
    return MatMap<T>(grad.data(), static_cast<Eigen::Index>(dims.at(0)),
                     static_cast<Eigen::Index>(numel() / dims.at(0)));
  }
};

template <class T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// A differentiable layer: forward saves what backward needs; backward maps
/// an output cotangent to the input cotangent and accumulates parameter
/// gradients. backward may be called repeatedly after a single forward.
template <class T>
class Module {
 public:
  virtual ~Module() = default;

  virtual Tensor4<T> forward(const Tensor4<T>& x) = 0;
  virtual Tensor4<T> backward(const Tensor4<T>& dy) = 0;

  virtual void collect(const std::string& /*prefix*/, std::vector<NamedParam<T>>& /*out*/) {}
  virtual void set_mode(Mode m) { mode_ = m; }
  Mode mode() const { return mode_; }
  virtual std::string kind() const = 0;

  std::vector<NamedParam<T>> named_params(const std::string& prefix = "") {
    std::vector<NamedParam<T>> out;
    collect(prefix, out);
    return out;
  }

  void zero_grad() {
    for (auto& np : named_params()) np.param->zero_grad();
  }

 protected:
  Mode mode_ = Mode::kTrain;
};

template <class T>
using ModulePtr = std::unique_ptr<Module<T>>;

}  // namespace attnorm
