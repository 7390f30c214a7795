#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "attnorm/module.hpp"

namespace attnorm {

struct FdOptions {
  double h = 1e-6;               // central-difference step, scaled by max(|v|, 1)
  std::size_t max_coords = 48;   // sampled coordinates per tensor (0 = all)
  double floor_frac = 1e-3;      // error floor as a fraction of the largest |analytic|
  std::uint64_t seed = 1;
};

struct FdEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel = 0;
};

struct FdReport {
  std::string label;
  double tol = 1e-4;
  std::size_t checked = 0;
  double max_rel = 0;
  FdEntry worst;

  bool passed() const { return checked > 0 && max_rel <= tol; }
  std::string str() const;
};

/// rel = |a - n| / max(|a|, |n|, floor).
double fd_relative_error(double analytic, double numeric, double floor);

/// Compares the gradient of sum(w * m(x)) for a random projection w against
/// central differences, over the input and every trainable parameter.
FdReport fd_check_module(Module<double>& m, const Tensor4<double>& x, const std::string& label,
                         const FdOptions& opt = {});

/// Checks grad against central differences of a scalar function.
FdReport fd_check_function(const std::string& label, const std::function<double(const std::vector<double>&)>& f,
                           const std::vector<double>& x, const std::vector<double>& grad, const FdOptions& opt = {});

/// Every layer family plus an end-to-end micro network.
std::vector<FdReport> run_gradcheck_suite(std::uint64_t seed = 7);

}  // namespace attnorm
