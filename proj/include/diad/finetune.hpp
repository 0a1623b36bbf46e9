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
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "diad/adam.hpp"
#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/model.hpp"

namespace diad {

struct FinetuneConfig {
  std::string loss = "auc";  // "auc" (pairwise hinge) or "bce"
  double learning_rate = 1e-3;
  int max_epochs = 200;
  int patience = 10;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (loss != "auc" && loss != "bce") {
      throw InvalidInputError("finetune config: loss must be auc or bce");
    }
    if (!(learning_rate > 0.0)) {
      throw InvalidInputError("finetune config: learning_rate must be positive");
    }
    if (max_epochs < 0) throw InvalidInputError("finetune config: max_epochs < 0");
    if (patience < 1) throw InvalidInputError("finetune config: patience < 1");
    if (batch_size < 2) throw InvalidInputError("finetune config: batch_size < 2");
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auc = std::numeric_limits<double>::quiet_NaN();
  bool improved = false;
};

struct FinetuneResult {
  std::vector<EpochLog> history;
  int best_epoch = -1;
  double best_val_auc = std::numeric_limits<double>::quiet_NaN();
  bool used_validation = false;
};

// Mean pairwise hinge: positives should outscore negatives; every
// (positive, negative) pair with the wrong ordering contributes its margin.
inline double auc_pairwise_loss(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) {
    throw LabelError("auc_pairwise_loss: size mismatch");
  }
  std::vector<double> pos, neg;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    (labels[i] > 0.5 ? pos : neg).push_back(scores[i]);
  }
  if (pos.empty() || neg.empty()) {
    throw LabelError("auc_pairwise_loss: need both classes");
  }
  double sum = 0.0;
  for (double p : pos) {
    for (double n : neg) sum += std::max(n - p, 0.0);
  }
  return sum / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// Mean binary cross-entropy on logits: softplus(s) - y * s.
inline double bce_loss_value(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) {
    throw LabelError("bce_loss_value: size mismatch");
  }
  if (scores.size() == 0) throw InvalidInputError("bce_loss_value: empty");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    const double v = scores[i];
    sum += std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))) -
           labels[i] * v;
  }
  return sum / static_cast<double>(scores.size());
}

// Earliest index attaining the highest validation score.
inline std::size_t select_model(const std::vector<double>& val_aucs) {
  if (val_aucs.empty()) throw MetricError("select_model: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < val_aucs.size(); ++i) {
    if (val_aucs[i] > val_aucs[best]) best = i;
  }
  return best;
}

// Class-balanced batches: shuffled negatives are cut into half-batch chunks
// (the last chunk wraps around), and a pool of reshuffled positive copies
// fills the other half. Every batch lists its positives first.
inline std::vector<std::vector<int>> balanced_batches(
    const std::vector<int>& pos, const std::vector<int>& neg, int batch_size,
    Rng& rng) {
  if (pos.empty() || neg.empty()) {
    throw LabelError("balanced_batches: need both classes");
  }
  if (batch_size < 2) throw InvalidInputError("balanced_batches: batch too small");
  const std::size_t half = static_cast<std::size_t>(batch_size / 2);
  std::vector<int> negs = neg;
  rng.shuffle(negs);
  const std::size_t n_batches = (negs.size() + half - 1) / half;

  std::vector<int> pool;
  while (pool.size() < n_batches * half) {
    std::vector<int> copy = pos;
    rng.shuffle(copy);
    pool.insert(pool.end(), copy.begin(), copy.end());
  }

  std::vector<std::vector<int>> batches;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<int> rows;
    rows.reserve(2 * half);
    for (std::size_t k = 0; k < half; ++k) rows.push_back(pool[b * half + k]);
    for (std::size_t k = 0; k < half; ++k) {
      rows.push_back(negs[(b * half + k) % negs.size()]);
    }
    batches.push_back(std::move(rows));
  }
  return batches;
}

namespace detail {

inline void check_binary_labels(const Vector& y, const char* what) {
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) {
      throw LabelError(std::string(what) + ": labels must be 0 or 1");
    }
  }
}

}  // namespace detail

// Supervised fine-tuning on a small labeled set. All parameters train,
// leaf-weight EMA is off, the temperature stays at the anneal floor, and the
// checkpoint is the earliest epoch with the strictly best hard validation
// AUC (patience epochs without improvement stop the run). Entering
// fine-tuning finalizes the anneal so hard routing is live; a scratch model
// gets its min-max window from the labeled data and its thresholds from the
// first batch.
inline FinetuneResult finetune(
    ModelState& m, const Matrix& x, const Vector& y, const Matrix& x_val,
    const Vector& y_val, const FinetuneConfig& fcfg,
    const std::function<void(const EpochLog&)>& on_epoch = {}) {
  fcfg.validate();
  m.config.validate();
  if (x.rows() < 1) throw InvalidInputError("finetune: empty dataset");
  if (x.cols() != m.n_features) {
    throw SchemaError("finetune: expected " + std::to_string(m.n_features) +
                      " features, got " + std::to_string(x.cols()));
  }
  if (y.size() != x.rows()) throw LabelError("finetune: label count mismatch");
  detail::check_binary_labels(y, "finetune");
  if (!x.allFinite()) throw InvalidInputError("finetune: non-finite inputs");
  const bool use_val = x_val.rows() > 0;
  if (use_val) {
    if (x_val.cols() != m.n_features) {
      throw SchemaError("finetune: validation feature count mismatch");
    }
    if (y_val.size() != x_val.rows()) {
      throw LabelError("finetune: validation label count mismatch");
    }
    detail::check_binary_labels(y_val, "finetune validation");
    if (!x_val.allFinite()) {
      throw InvalidInputError("finetune: non-finite validation inputs");
    }
    const double vsum = y_val.sum();
    if (vsum == 0.0 || vsum == static_cast<double>(y_val.size())) {
      throw LabelError("finetune: validation needs both classes");
    }
  }

  std::vector<int> pos, neg;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    (y[i] > 0.5 ? pos : neg).push_back(static_cast<int>(i));
  }
  if (pos.empty() || neg.empty()) {
    throw LabelError("finetune: need both classes");
  }

  if (!m.minmax.fitted()) m.minmax = minmax_fit(x);
  // Fine-tuning finalizes the anneal; hard routing is available from here on.
  m.anneal_position =
      std::max(m.anneal_position, static_cast<long>(m.config.anneal_steps));

  FinetuneResult result;
  result.used_validation = use_val;
  if (fcfg.max_epochs == 0) return result;

  const Matrix xt = minmax_transform(x, m.minmax);
  const Matrix xvt = use_val ? minmax_transform(x_val, m.minmax) : Matrix();
  const bool use_auc = fcfg.loss == "auc";
  const int half = fcfg.batch_size / 2;

  ModelGraph mg(m,
                use_auc ? ModelGraph::Mode::kFinetuneAuc
                        : ModelGraph::Mode::kFinetuneBce,
                half);
  mg.set_temperature(m.config.min_temperature);
  if (!use_auc) {
    Vector yb(2 * half);
    yb.head(half).setOnes();
    yb.tail(half).setZero();
    mg.set_labels(yb);
  }
  AdamOptimizer opt(mg.graph(), mg.all_params());
  Rng root(fcfg.seed);
  Rng batch_rng = root.fork(0xba7c4e5dULL);
  Rng init_rng = root.fork(0x1247bea7ULL);

  ModelState best = m;
  double best_auc = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  Matrix xb(2 * half, m.n_features);

  for (int epoch = 0; epoch < fcfg.max_epochs; ++epoch) {
    const std::vector<std::vector<int>> batches =
        balanced_batches(pos, neg, fcfg.batch_size, batch_rng);
    double loss_sum = 0.0;
    for (const std::vector<int>& rows : batches) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        xb.row(static_cast<Eigen::Index>(i)) =
            xt.row(rows[i]);
      }
      mg.set_data(xb);
      if (!m.thresholds_initialized) mg.init_thresholds_from_batch(m, init_rng);
      mg.graph().forward(mg.loss());
      loss_sum += mg.graph().value(mg.loss())(0, 0);
      mg.graph().zero_grads();
      mg.graph().backward(mg.loss());
      opt.step(fcfg.learning_rate);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(batches.size());
    if (use_val) {
      mg.store_params(m);
      const HardModel hm = harden(m);
      entry.val_auc = auc_metric(hard_forward(hm, xvt).scores, y_val);
      if (entry.val_auc > best_auc) {
        best_auc = entry.val_auc;
        best = m;
        result.best_epoch = epoch;
        since_best = 0;
        entry.improved = true;
      } else {
        ++since_best;
      }
    }
    result.history.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (use_val && since_best >= fcfg.patience) break;
  }

  if (use_val) {
    m = best;
    result.best_val_auc = best_auc;
  } else {
    mg.store_params(m);
  }
  return result;
}

}  // namespace diad
