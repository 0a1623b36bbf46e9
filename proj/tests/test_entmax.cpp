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

#include "diad/entmax.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "diad/common.hpp"

namespace {

using diad::Vector;

// Independent oracle: the entmax-1.5 threshold tau is the unique root of
// f(tau) = sum_i max(u_i - tau, 0)^2 - 1, which is continuous and strictly
// decreasing where positive. Solve by bisection, no sorting involved, so this
// shares no code path with the closed-form implementation under test.
Vector entmax15_bisection_oracle(const Vector& logits, double temperature) {
  const Eigen::Index n = logits.size();
  const double zmax = logits.maxCoeff();
  Vector u(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    u[i] = (logits[i] - zmax) / (2.0 * temperature);
  }
  const double umax = u.maxCoeff();
  double lo = umax - 1.0;  // sum >= (umax - lo)^2 = 1
  double hi = umax;        // sum = 0 < 1
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = u[i] - mid;
      if (d > 0.0) s += d * d;
    }
    if (s > 1.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  const double tau = 0.5 * (lo + hi);
  Vector p(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = u[i] - tau;
    p[i] = d > 0.0 ? d * d : 0.0;
  }
  return p;
}

}  // namespace

TEST_CASE("entmax15 matches the bisection oracle on the pinned example") {
  Vector z(3);
  z << 1.0, 0.5, -0.2;
  const Vector got = diad::entmax15(z, 1.0);
  const Vector want = entmax15_bisection_oracle(z, 1.0);
  REQUIRE(got.size() == 3);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(std::abs(got[i] - want[i]) < 1e-6);
  }
  REQUIRE(std::abs(got.sum() - 1.0) < 1e-9);
}

TEST_CASE("entmax15 matches the oracle and sums to one on random draws") {
  diad::Rng rng(20260816);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_index(12));
    Vector z(n);
    for (int i = 0; i < n; ++i) z[i] = rng.normal(0.0, 3.0);
    const double t = rng.uniform(0.1, 1.0);
    const Vector got = diad::entmax15(z, t);
    const Vector want = entmax15_bisection_oracle(z, t);
    REQUIRE(std::abs(got.sum() - 1.0) < 1e-12);
    for (int i = 0; i < n; ++i) {
      REQUIRE(got[i] >= 0.0);
      REQUIRE(std::abs(got[i] - want[i]) < 1e-6);
    }
  }
}

TEST_CASE("entmax15 is exactly sparse for well separated logits") {
  Vector z(3);
  z << 10.0, 0.0, 0.0;
  const Vector p = diad::entmax15(z, 0.1);
  REQUIRE(p[0] == 1.0);
  REQUIRE(p[1] == 0.0);
  REQUIRE(p[2] == 0.0);
}

TEST_CASE("entmax15 is uniform on equal logits") {
  for (int n : {1, 2, 5, 9}) {
    Vector z = Vector::Constant(n, 0.7);
    const Vector p = diad::entmax15(z, 0.5);
    for (int i = 0; i < n; ++i) {
      REQUIRE(std::abs(p[i] - 1.0 / n) < 1e-12);
    }
  }
}

TEST_CASE("entmax15 is shift invariant and permutation equivariant") {
  diad::Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_index(6));
    Vector z(n);
    for (int i = 0; i < n; ++i) z[i] = rng.normal(0.0, 2.0);
    const double t = rng.uniform(0.1, 1.0);
    const Vector p = diad::entmax15(z, t);

    const double shift = rng.normal(0.0, 5.0);
    const Vector p_shift = diad::entmax15(z.array() + shift, t);
    for (int i = 0; i < n; ++i) {
      REQUIRE(std::abs(p[i] - p_shift[i]) < 1e-9);
    }

    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    Vector z_perm(n);
    for (int i = 0; i < n; ++i) z_perm[i] = z[perm[static_cast<std::size_t>(i)]];
    const Vector p_perm = diad::entmax15(z_perm, t);
    for (int i = 0; i < n; ++i) {
      REQUIRE(std::abs(p_perm[i] - p[perm[static_cast<std::size_t>(i)]]) <
              1e-12);
    }
  }
}

TEST_CASE("lower temperature never grows the entmax support") {
  Vector z(4);
  z << 0.9, 0.4, 0.1, -0.3;
  const Vector warm = diad::entmax15(z, 1.0);
  const Vector cold = diad::entmax15(z, 0.1);
  for (int i = 0; i < 4; ++i) {
    if (warm[i] == 0.0) REQUIRE(cold[i] == 0.0);
  }
  REQUIRE(cold[0] > warm[0]);
}

TEST_CASE("entmax15_vjp matches central finite differences") {
  diad::Rng rng(99);
  const double h = 1e-5;
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_index(7));
    Vector z(n), dy(n);
    for (int i = 0; i < n; ++i) {
      z[i] = rng.normal(0.0, 1.0);
      dy[i] = rng.normal(0.0, 1.0);
    }
    const double t = rng.uniform(0.3, 1.0);
    const Vector p = diad::entmax15(z, t);
    const Vector dz = diad::entmax15_vjp(p, dy, t);
    for (int k = 0; k < n; ++k) {
      Vector zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      const double lp = dy.dot(diad::entmax15(zp, t));
      const double lm = dy.dot(diad::entmax15(zm, t));
      const double fd = (lp - lm) / (2.0 * h);
      REQUIRE(std::abs(dz[k] - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("entmax_alpha accepts only alpha 1.5") {
  Vector z(2);
  z << 0.3, -0.1;
  REQUIRE_THROWS_AS(diad::entmax_alpha(z, 1.0, 2.0), diad::InvalidInputError);
  REQUIRE_THROWS_AS(diad::entmax_alpha(z, 1.0, 1.0), diad::InvalidInputError);
  const Vector a = diad::entmax_alpha(z, 0.7, 1.5);
  const Vector b = diad::entmax15(z, 0.7);
  REQUIRE(a.isApprox(b));
}

TEST_CASE("entmax15 rejects bad inputs") {
  Vector empty(0);
  REQUIRE_THROWS_AS(diad::entmax15(empty, 1.0), diad::InvalidInputError);
  Vector z(2);
  z << 0.0, 1.0;
  REQUIRE_THROWS_AS(diad::entmax15(z, 0.0), diad::InvalidInputError);
  REQUIRE_THROWS_AS(diad::entmax15(z, -1.0), diad::InvalidInputError);
  z[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(diad::entmax15(z, 1.0), diad::InvalidInputError);
}

TEST_CASE("entmoid equals the two class entmax closed form") {
  // Pinned example: x = 0.3, T = 1, cross-checked against entmax_alpha on
  // the logit pair (x/2, -x/2).
  for (double x : {0.3, -1.2, 0.01, 1.9, 2.0, 2.7, -5.0}) {
    for (double t : {1.0, 0.5, 0.1}) {
      Vector pair(2);
      pair << x / 2.0, -x / 2.0;
      const Vector p = diad::entmax_alpha(pair, t, 1.5);
      REQUIRE(std::abs(diad::entmoid(x, t) - p[0]) < 1e-9);
    }
  }
}

TEST_CASE("entmoid midpoint, symmetry, and saturation") {
  REQUIRE(std::abs(diad::entmoid(0.0, 1.0) - 0.5) < 1e-12);
  REQUIRE(diad::entmoid(2.0, 1.0) == 1.0);
  REQUIRE(diad::entmoid(-2.0, 1.0) == 0.0);
  REQUIRE(diad::entmoid(3.5, 1.0) == 1.0);
  REQUIRE(diad::entmoid(0.25, 0.1) == 1.0);  // saturates at |x| >= 2T

  diad::Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const double y = rng.uniform(-6.0, 6.0);
    REQUIRE(std::abs(diad::entmoid_unit(y) + diad::entmoid_unit(-y) - 1.0) <
            1e-12);
  }
}

TEST_CASE("entmoid is monotone and its derivative matches finite differences") {
  diad::Rng rng(17);
  const double h = 1e-6;
  for (int trial = 0; trial < 150; ++trial) {
    const double y = rng.uniform(-3.0, 3.0);
    const double y2 = rng.uniform(-3.0, 3.0);
    const double lo = std::min(y, y2), hi = std::max(y, y2);
    REQUIRE(diad::entmoid_unit(lo) <= diad::entmoid_unit(hi) + 1e-15);

    if (std::abs(std::abs(y) - 2.0) < 1e-3) continue;  // kink of the 2nd deriv
    const double fd =
        (diad::entmoid_unit(y + h) - diad::entmoid_unit(y - h)) / (2.0 * h);
    REQUIRE(std::abs(diad::entmoid_unit_grad(y) - fd) <
            1e-5 * std::max(1.0, std::abs(fd)));
  }
}
