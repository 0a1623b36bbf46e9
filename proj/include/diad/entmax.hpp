/*
 * Copyright 2026 The diad Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>

#include "diad/common.hpp"

namespace diad {

// Sparse attention transforms used for feature selection and soft splits.
//
// entmax15(z) solves max_p <p, z> + H_1.5(p) over the simplex. The solution is
// p_i = [ (z_i - max z)/2 - tau ]_+^2 with tau chosen so the outputs sum to 1;
// it is exactly sparse (coordinates far below the max get exactly zero) yet
// continuously differentiable in z.
//
// entmoid is the two-class case on logits (x/2, -x/2): a sigmoid-shaped curve
// that saturates exactly at |x| >= 2 T.

namespace detail {

// Threshold tau for the sorted, shifted, halved logits u (descending).
// Support size is the largest k with tau_k <= u_(k).
inline double entmax15_threshold(const std::vector<double>& u_sorted) {
  const int n = static_cast<int>(u_sorted.size());
  double cum = 0.0;
  double cum_sq = 0.0;
  double tau = 0.0;
  for (int k = 1; k <= n; ++k) {
    const double u = u_sorted[static_cast<std::size_t>(k - 1)];
    cum += u;
    cum_sq += u * u;
    const double mean = cum / k;
    // Sum of squared deviations within the top-k prefix.
    const double ss = cum_sq - k * mean * mean;
    const double delta = (1.0 - ss) / k;
    const double tau_k = mean - std::sqrt(std::max(delta, 0.0));
    if (tau_k <= u) tau = tau_k;
  }
  return tau;
}

}  // namespace detail

// Forward transform at temperature T. Throws on empty input, non-positive
// temperature, or non-finite logits.
inline Vector entmax15(const Vector& logits, double temperature) {
  if (logits.size() == 0) throw InvalidInputError("entmax15: empty logits");
  if (!(temperature > 0.0)) {
    throw InvalidInputError("entmax15: temperature must be positive");
  }
  if (!logits.allFinite()) {
    throw InvalidInputError("entmax15: logits must be finite");
  }
  const Eigen::Index n = logits.size();
  const double zmax = logits.maxCoeff();
  std::vector<double> u(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    u[static_cast<std::size_t>(i)] = (logits[i] - zmax) / (2.0 * temperature);
  }
  std::vector<double> sorted = u;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const double tau = detail::entmax15_threshold(sorted);

  Vector p(n);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = u[static_cast<std::size_t>(i)] - tau;
    const double v = d > 0.0 ? d * d : 0.0;
    p[i] = v;
    sum += v;
  }
  // The closed form sums to 1 up to roundoff; normalize so the simplex
  // invariant holds exactly even for extreme logit scales.
  p /= sum;
  return p;
}

// Vector-Jacobian product for p = entmax15(z, T) with respect to the logits z.
// Derivation: on the support p_i = (v_i - tau)^2 with v = z/(2T) and
// d tau / d v_k = s_k / sum(s) for s = sqrt(p), which gives
// dz = s .* (dY - q) / T with q = <dY, s> / sum(s). Off-support entries get
// exactly zero gradient (the transform is flat there).
inline Vector entmax15_vjp(const Vector& p, const Vector& upstream,
                           double temperature) {
  if (p.size() != upstream.size()) {
    throw ContractError("entmax15_vjp: size mismatch");
  }
  const Eigen::Index n = p.size();
  double s_sum = 0.0;
  double q_num = 0.0;
  Vector s(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s[i] = p[i] > 0.0 ? std::sqrt(p[i]) : 0.0;
    s_sum += s[i];
    q_num += upstream[i] * s[i];
  }
  const double q = q_num / s_sum;
  Vector dz(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    dz[i] = s[i] * (upstream[i] - q) / temperature;
  }
  return dz;
}

// Spec-level surface for the family; only alpha = 1.5 has a closed form here.
inline Vector entmax_alpha(const Vector& logits, double temperature,
                           double alpha) {
  if (alpha != 1.5) {
    throw InvalidInputError(
        "entmax_alpha: only alpha = 1.5 is implemented");
  }
  return entmax15(logits, temperature);
}

// Two-class entmax-1.5 response: the first coordinate of entmax15 on the
// logit pair (y/2, -y/2) at temperature 1, in closed form. Exactly 0 below
// -2, exactly 1 above 2, and ((y + sqrt(8 - y^2)) / 4)^2 in between.
inline double entmoid_unit(double y) {
  if (y <= -2.0) return 0.0;
  if (y >= 2.0) return 1.0;
  const double r = std::sqrt(8.0 - y * y);
  const double w = (y + r) / 4.0;
  return w * w;
}

// Derivative of entmoid_unit; continuous (0 at the saturation boundary).
inline double entmoid_unit_grad(double y) {
  if (y <= -2.0 || y >= 2.0) return 0.0;
  const double r = std::sqrt(8.0 - y * y);
  return (4.0 - y * y) / (4.0 * r);
}

// Soft binary gate at temperature T.
inline double entmoid(double x, double temperature) {
  if (!(temperature > 0.0)) {
    throw InvalidInputError("entmoid: temperature must be positive");
  }
  if (!std::isfinite(x)) throw InvalidInputError("entmoid: non-finite input");
  return entmoid_unit(x / temperature);
}

}  // namespace diad
