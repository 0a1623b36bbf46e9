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

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace diad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Error taxonomy. Every throw in the library uses one of these so callers and
// tests can distinguish failure kinds without string matching.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller passed a value outside the documented domain (bad config field,
// negative count, empty batch where one is required, ...).
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// An internal invariant or inter-argument contract was violated (shape
// mismatch, backward from a non-scalar, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Input data does not match the expected schema (CSV cell not numeric,
// unknown label column, wrong feature count at scoring time).
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Labels exist but cannot be used (not 0/1, single class where two are
// required, not enough positives for the requested subsample).
class LabelError : public Error {
 public:
  using Error::Error;
};

// A metric is undefined on the given inputs (AUC with one class present).
class MetricError : public Error {
 public:
  using Error::Error;
};

// Operation requires a fully annealed model (hard routing, explanations).
class NotHardenedError : public Error {
 public:
  using Error::Error;
};

// Serialized model carries an unsupported format version.
class VersionError : public Error {
 public:
  using Error::Error;
};

// Serialized payload is unreadable or structurally broken.
class CorruptFileError : public Error {
 public:
  using Error::Error;
};

// A ratio denominator that smoothing should keep positive reached zero.
class DivisionGuardError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All randomness in the library flows through Rng streams
// derived from a user seed, so runs are reproducible bit-for-bit on one
// machine regardless of library or platform RNG choices.
// ---------------------------------------------------------------------------

// SplitMix64: used only to whiten seeds and derive independent substreams.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t s = seed;
    engine_.seed(splitmix64(s));
  }

  // Independent substream for a named purpose. Identical (seed, tag) pairs
  // yield identical streams; distinct tags decorrelate them.
  Rng fork(std::uint64_t tag) const {
    std::uint64_t s = seed_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1));
    return Rng(splitmix64(s));
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  // Uniform integer in [0, n). Multiply-high mapping keeps the draw a pure
  // function of one engine output.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw InvalidInputError("uniform_index: n must be positive");
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_cached_) {
      have_cached_ = false;
      return mean + stddev * cached_;
    }
    // Box-Muller; u1 bounded away from 0 so log stays finite.
    double u1 = 0.0;
    do {
      u1 = uniform01();
    } while (u1 <= 1e-300);
    const double u2 = uniform01();
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = kTwoPi * u2;
    cached_ = r * std::sin(theta);
    have_cached_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from {0, ..., n-1}, in random order.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) {
      throw InvalidInputError("sample_without_replacement: k out of range");
    }
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    // Partial Fisher-Yates: first k slots are the sample.
    for (int i = 0; i < k; ++i) {
      const int j =
          i + static_cast<int>(uniform_index(static_cast<std::uint64_t>(n - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace diad
