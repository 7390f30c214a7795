#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

namespace attnorm::init {

using Rng = std::mt19937_64;

// He et al. normal initialization, std = sqrt(2 / fan).
template <class T>
void kaiming_normal(std::span<T> w, std::size_t fan, Rng& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan)));
  for (auto& v : w) v = static_cast<T>(nd(rng));
}

// Uniform in +-1/sqrt(fan_in).
template <class T>
void uniform_fan_in(std::span<T> w, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> ud(-bound, bound);
  for (auto& v : w) v = static_cast<T>(ud(rng));
}

template <class T>
void normal(std::span<T> w, double mean, double std, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : w) v = static_cast<T>(mean + nd(rng) * std);
}

}  // namespace attnorm::init
