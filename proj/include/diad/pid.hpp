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
#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "diad/adam.hpp"
#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/graph.hpp"
#include "diad/model.hpp"

namespace diad {

struct StepLog {
  long step = 0;
  double loss = 0.0;
  double temperature = 0.0;
  double learning_rate = 0.0;
  double wall_ms = 0.0;
};

struct UnsupervisedResult {
  std::vector<StepLog> history;
};

// Reference-volume batch: independent uniform draws over the transformed
// feature box [-1, 1]^d.
inline Matrix sample_uniform(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 1 || cols < 1) throw InvalidInputError("sample_uniform: empty shape");
  Matrix u(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) u(i, j) = rng.uniform(-1.0, 1.0);
  }
  return u;
}

// EMA pull of one tree's leaf weights toward the sparsity target, broadcast
// across all response columns. Runs outside the gradient tape.
inline void update_leaf_weights(Eigen::Ref<Matrix, 0, Eigen::OuterStride<>> w,
                                const Vector& s, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw InvalidInputError("update_leaf_weights: gamma must be in (0, 1]");
  }
  if (w.rows() != s.size()) {
    throw ContractError("update_leaf_weights: leaf count mismatch");
  }
  for (Eigen::Index r = 0; r < w.cols(); ++r) {
    w.col(r) = (1.0 - gamma) * w.col(r) + gamma * s;
  }
}

// Linear learning-rate warmup over the first `warmup` steps.
inline double warmup_lr(double base, long step, int warmup) {
  if (warmup <= 0) return base;
  return base * std::min(1.0, (static_cast<double>(step) + 1.0) /
                                  static_cast<double>(warmup));
}

// Unsupervised training with the squared density-ratio moment objective:
// gradient steps on the structural parameters, EMA updates on leaf weights,
// linear temperature anneal. X is in original units; the trainer fits the
// min-max window on first use and keeps a row subsample for explanations.
inline UnsupervisedResult train_unsupervised(
    ModelState& m, const Matrix& x,
    const std::function<void(const StepLog&)>& on_step = {}) {
  const TrainConfig& cfg = m.config;
  cfg.validate();
  if (x.rows() < 1) throw InvalidInputError("train: empty dataset");
  if (x.cols() != m.n_features) {
    throw SchemaError("train: expected " + std::to_string(m.n_features) +
                      " features, got " + std::to_string(x.cols()));
  }
  if (!x.allFinite()) throw InvalidInputError("train: non-finite inputs");

  if (!m.minmax.fitted()) m.minmax = minmax_fit(x);
  const Matrix xt = minmax_transform(x, m.minmax);
  const Eigen::Index rows = x.rows();
  const int d = m.n_features;
  const int batch = cfg.batch_size;
  const int trees_total = cfg.layers * cfg.trees_per_layer;
  const double keep_prob = 1.0 - cfg.dropout_rate;

  Rng root(cfg.seed);
  Rng data_rng = root.fork(0xda7a5917ULL);
  Rng unif_rng = root.fork(0x0151b0f0ULL);
  Rng drop_rng = root.fork(0xd40b0a5eULL);
  Rng init_rng = root.fork(0x1247bea7ULL);
  Rng sub_rng = root.fork(0x5ab5a3b1ULL);

  if (m.explain_sample.rows() == 0) {
    const int n_sub =
        static_cast<int>(std::min<Eigen::Index>(4096, rows));
    const std::vector<int> pick = sub_rng.sample_without_replacement(
        static_cast<int>(rows), n_sub);
    m.explain_sample.resize(n_sub, d);
    for (int i = 0; i < n_sub; ++i) {
      m.explain_sample.row(i) = x.row(pick[static_cast<std::size_t>(i)]);
    }
  }

  UnsupervisedResult result;
  if (cfg.steps == 0) return result;

  ModelGraph mg(m, ModelGraph::Mode::kUnsupervised);
  AdamOptimizer opt(mg.graph(), mg.structure_params());
  const int leaves = cfg.leaves();

  Matrix xb(batch, d);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const double temp = m.temperature_at(m.anneal_position);
    const double lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps);

    if (rows >= batch) {
      const std::vector<int> pick = data_rng.sample_without_replacement(
          static_cast<int>(rows), batch);
      for (int i = 0; i < batch; ++i) {
        xb.row(i) = xt.row(pick[static_cast<std::size_t>(i)]);
      }
    } else {
      // Fewer rows than the batch size: draw with replacement.
      for (int i = 0; i < batch; ++i) {
        xb.row(i) = xt.row(static_cast<Eigen::Index>(
            data_rng.uniform_index(static_cast<std::uint64_t>(rows))));
      }
    }
    Matrix dm(1, trees_total);
    for (int t = 0; t < trees_total; ++t) {
      dm(0, t) = drop_rng.uniform01() < keep_prob ? 1.0 : 0.0;
    }

    mg.set_temperature(temp);
    mg.set_data(xb);
    mg.set_uniform(sample_uniform(unif_rng, batch, d));
    mg.set_drop_mask(dm);
    if (!m.thresholds_initialized) mg.init_thresholds_from_batch(m, init_rng);

    mg.graph().forward(mg.loss());
    const double loss = mg.graph().value(mg.loss())(0, 0);
    mg.graph().zero_grads();
    mg.graph().backward(mg.loss());
    opt.step(lr);

    for (int l = 0; l < cfg.layers; ++l) {
      const Matrix& stats =
          cfg.normalize_sparsity ? mg.sparsity_norm(l) : mg.sparsity_raw(l);
      Matrix& w = mg.leaf_weights_value(l);
      for (int t = 0; t < cfg.trees_per_layer; ++t) {
        const Vector s =
            stats.middleCols(static_cast<Eigen::Index>(t) * leaves, leaves)
                .row(0)
                .transpose();
        update_leaf_weights(
            w.middleRows(static_cast<Eigen::Index>(t) * leaves, leaves), s,
            cfg.ema_gamma);
      }
    }

    m.anneal_position += 1;
    const double wall_ms =
        std::chrono::duration<double, std::milli>(
            std::chrono::steady_clock::now() - t0)
            .count();
    StepLog entry{step, loss, temp, lr, wall_ms};
    result.history.push_back(entry);
    if (on_step) on_step(entry);
  }

  mg.store_params(m);
  return result;
}

}  // namespace diad
