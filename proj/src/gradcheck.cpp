#include "dvd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dvd {

namespace {

double evaluate(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x) {
  NoGradGuard guard;
  Tensor y = fn(x);
  if (y.numel() != 1) throw ShapeError("check_gradient: function is not scalar-valued");
  return y.item();
}

}  // namespace

GradCheckReport check_gradient(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x, double h, double tol,
                               double floor) {
  if (!(h > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");

  Tensor leaf = x.detach().set_requires_grad(true);
  Tensor y = fn(leaf);
  if (y.numel() != 1) throw ShapeError("check_gradient: function is not scalar-valued");
  std::vector<double> analytic(x.numel(), 0.0);
  if (y.requires_grad()) {
    Tensor g = grad(y, leaf);
    std::copy(g.data().begin(), g.data().end(), analytic.begin());
  }

  const double base1 = evaluate(fn, x.detach());
  const double base2 = evaluate(fn, x.detach());
  if (base1 != base2 || base1 != y.item()) {
    throw std::runtime_error("check_gradient: function is not deterministic at the base point");
  }

  GradCheckReport report;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor plus = x.detach();
    Tensor minus = x.detach();
    plus.data_mut()[i] += h;
    minus.data_mut()[i] -= h;
    const double numeric = (evaluate(fn, plus) - evaluate(fn, minus)) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error < tol || report.max_rel_error == 0.0;
  return report;
}

}  // namespace dvd
