#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dvd/random.hpp"
#include "dvd/tensor.hpp"

namespace dvd::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Central differences computed without going through the library's checker.
inline std::vector<double> numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                            double h = 1e-5) {
  std::vector<double> g(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor p = x.detach();
    Tensor m = x.detach();
    p.data_mut()[i] += h;
    m.data_mut()[i] -= h;
    g[i] = (f(p) - f(m)) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace dvd::testing
