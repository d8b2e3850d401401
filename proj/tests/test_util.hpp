#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "freqexit/autodiff.hpp"
#include "freqexit/rng.hpp"

namespace freqexit::testing {

inline TensorR random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  TensorR t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

/// Central finite difference of `loss` with respect to one scalar slot.
inline double central_difference(const std::function<double()>& loss, double& slot,
                                  double h = 1e-5) {
  const double saved = slot;
  slot = saved + h;
  const double up = loss();
  slot = saved - h;
  const double down = loss();
  slot = saved;
  return (up - down) / (2.0 * h);
}

}  // namespace freqexit::testing
