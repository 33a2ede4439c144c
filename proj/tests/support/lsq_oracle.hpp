#pragma once

// Finite-difference oracle for the learned-step-size gradient.
//
// The scale gradient treats round() as the identity (straight-through) and
// decides clipping on the unrounded position x/s + z. The function whose exact
// derivative that rule reports is the relaxed quantizer
//   q~(s) = s * (clip(x/s + z, qmin, qmax) - z) + rho * s * [x/s0 + z in range],
//   rho = round(x/s0) - x/s0,
// which coincides with fake_quantize at s = s0. Differentiating it numerically
// gives an independent check of the analytic rule. On clipped entries q~ and
// fake_quantize are the same function of s.

#include <algorithm>
#include <cmath>
#include <vector>

#include "fpq/quantizer.hpp"

namespace fpq::testing {

inline double relaxed_quantizer(double x, double s, double s0, double z, double lo, double hi) {
  const double r0 = x / s0;
  const double rho = std::nearbyint(r0) - r0;
  const bool in_range = r0 + z >= lo && r0 + z <= hi;
  return s * (std::clamp(x / s + z, lo, hi) - z) + (in_range ? rho * s : 0.0);
}

// d/ds of sum_i upstream_i * q~(x_i) for a per-tensor spec, without the
// gradient-scale factor.
inline double relaxed_scale_derivative(const std::vector<float>& x, const std::vector<float>& upstream,
                                       double s0, double z, double lo, double hi, double h = 1e-6) {
  double up = 0.0, down = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    up += upstream[i] * relaxed_quantizer(x[i], s0 + h, s0, z, lo, hi);
    down += upstream[i] * relaxed_quantizer(x[i], s0 - h, s0, z, lo, hi);
  }
  return (up - down) / (2 * h);
}

// True if x/s0 sits at least `margin` away from a rounding midpoint and from
// both clip bounds, so round() is locally constant and the clip branch fixed.
inline bool away_from_discontinuities(double x, double s0, double z, double lo, double hi,
                                      double margin = 0.05) {
  const double r = x / s0;
  const double frac = r - std::floor(r);
  if (std::fabs(frac - 0.5) < margin) return false;
  const double position = r + z;
  return std::fabs(position - lo) > margin && std::fabs(position - hi) > margin;
}

}  // namespace fpq::testing
