#pragma once

#include <cstddef>
#include <functional>

#include "dvd/tensor.hpp"

namespace dvd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = false;
};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences. The relative error of coordinate i is
/// |a_i - n_i| / max(|a_i|, |n_i|, floor).
///
/// Throws std::runtime_error when two evaluations at the base point differ.
GradCheckReport check_gradient(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h = 1e-5,
                               double tol = 1e-4, double floor = 1e-5);

}  // namespace dvd
