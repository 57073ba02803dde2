#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "camkit/error.hpp"
#include "camkit/tensor.hpp"

namespace camkit {

using ScalarFn = std::function<double(const Tensor&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
inline Tensor finite_diff_grad(const ScalarFn& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error(Errc::invalid_argument, "finite difference step must be > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps gradients that are zero
/// up to roundoff from reporting huge relative errors.
inline double relative_error(double a, double b, double floor = 1e-4) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

inline double max_relative_error(const Tensor& a, const Tensor& b, double floor = 1e-4) {
  if (a.shape() != b.shape()) {
    throw Error(Errc::shape_mismatch,
                "comparing " + to_string(a.shape()) + " with " + to_string(b.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace camkit
