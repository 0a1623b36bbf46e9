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

#include <cmath>
#include <vector>

#include "diad/common.hpp"
#include "diad/graph.hpp"

namespace diad {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One Adam update with bias correction. step_count is 1 on the first call.
inline void adam_update(Matrix& param, const Matrix& grad, Matrix& m,
                        Matrix& v, long step_count, double lr,
                        const AdamConfig& cfg = AdamConfig{}) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw ContractError("adam_update: parameter/gradient shape mismatch");
  }
  if (m.rows() != param.rows() || m.cols() != param.cols()) {
    m = Matrix::Zero(param.rows(), param.cols());
    v = Matrix::Zero(param.rows(), param.cols());
  }
  if (step_count < 1) throw InvalidInputError("adam_update: step_count < 1");
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
  param.array() -=
      lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.epsilon);
}

// Adam bound to a set of parameter nodes in a graph. step() consumes the
// gradients currently stored on those nodes.
class AdamOptimizer {
 public:
  AdamOptimizer(Graph& graph, std::vector<int> params,
                AdamConfig cfg = AdamConfig{})
      : graph_(graph), params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
  }

  void step(double lr) {
    ++step_count_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Matrix& value = graph_.mutable_value(params_[i]);
      adam_update(value, graph_.grad(params_[i]), m_[i], v_[i], step_count_,
                  lr, cfg_);
    }
  }

  long step_count() const { return step_count_; }

 private:
  Graph& graph_;
  std::vector<int> params_;
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  long step_count_ = 0;
};

}  // namespace diad
