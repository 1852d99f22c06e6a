#pragma once

#include "m2dclap/params.hpp"

#include <functional>
#include <string>

namespace m2dclap {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  int coords_checked = 0;
  std::string worst;  // "<tensor>[i]" of the largest relative error

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  // Richardson-extrapolated central differences at steps h and h/2:
  // (4 D(h/2) - D(h)) / 3, truncation error O(h^4).
  double step = 1e-3;
  // Coordinates sampled per tensor (all of them when the tensor is smaller).
  int coords_per_tensor = 8;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  uint64_t seed = 1;
  // Tensor name prefix filter; empty checks everything.
  std::string prefix;
};

// Compares `analytic` (same layout as `params`) against central differences of
// `loss`. Throws Error if the loss is non-finite at any probe point.
GradCheckReport grad_check(const std::function<double(const ParamStore&)>& loss, const ParamStore& params,
                           const ParamStore& analytic, const GradCheckOptions& opts = {});

// Dense-matrix form for loss inputs that are not parameters (e.g. S).
GradCheckReport grad_check(const std::function<double(const Matrix&)>& loss, const Matrix& x,
                           const Matrix& analytic, const GradCheckOptions& opts = {});

}  // namespace m2dclap
