#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rescaps/tensor.hpp"

namespace rescaps {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares the analytic gradient of f with central differences
// (f(p+h) - f(p-h)) / 2h for every element of every parameter. Relative error
// uses denominator max(|analytic|, |numeric|, 1e-8). f must rebuild its
// computation from the given parameter tensors each call; a changing baseline
// value between two calls is reported as nondeterminism.
GradCheckReport finite_diff_check(
    const std::function<Tensor()>& f,
    const std::vector<std::pair<std::string, Tensor>>& params, double h,
    double tol);

}  // namespace rescaps
