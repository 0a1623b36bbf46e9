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

#include "diad/pid.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <limits>
#include <vector>

#include "diad/common.hpp"
#include "diad/graph.hpp"
#include "diad/model.hpp"

namespace {

using diad::Graph;
using diad::InvalidInputError;
using diad::Matrix;
using diad::ModelGraph;
using diad::ModelState;
using diad::Rng;
using diad::StepLog;
using diad::TrainConfig;
using diad::UnsupervisedResult;
using diad::Vector;

TEST_CASE("moment loss reproduces the pinned two-leaf value") {
  // Volume ratios (0.9, 0.1) against data ratios (0.1, 0.9):
  // 0.81/0.1 + 0.01/0.9 = 73/9.
  Graph g;
  Matrix cd(1, 2), cu(1, 2);
  cd << 1.0, 9.0;
  cu << 9.0, 1.0;
  const int a = g.input(cd);
  const int b = g.input(cu);
  const int dm = g.input(Matrix::Ones(1, 1));
  const int loss = g.pid_moment(a, b, dm, 1, 1, 0.0, 1.0);
  g.forward(loss);
  REQUIRE(g.value(loss)(0, 0) == Catch::Approx(-73.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("smoothing pulls both ratio estimates toward uniform") {
  Graph g;
  Matrix cd(1, 2), cu(1, 2);
  cd << 0.0, 10.0;
  cu << 10.0, 0.0;
  const int a = g.input(cd);
  const int b = g.input(cu);
  const int dm = g.input(Matrix::Ones(1, 1));
  // delta = 5: V = (15, 5)/20 = (0.75, 0.25), D = (5, 15)/20 = (0.25, 0.75).
  const int loss = g.pid_moment(a, b, dm, 1, 1, 5.0, 1.0);
  g.forward(loss);
  const double want = 0.75 * 0.75 / 0.25 + 0.25 * 0.25 / 0.75;
  REQUIRE(g.value(loss)(0, 0) == Catch::Approx(-want).epsilon(1e-12));
}

TEST_CASE("per-tree dropout is unbiased in exact expectation") {
  Rng rng(3);
  Matrix cd(1, 4), cu(1, 4);
  for (int j = 0; j < 4; ++j) {
    cd(0, j) = rng.uniform(0.5, 10.0);
    cu(0, j) = rng.uniform(0.5, 10.0);
  }
  const double keep = 0.6;

  auto loss_for = [&](const Matrix& mask, double keep_prob) {
    Graph g;
    const int a = g.input(cd);
    const int b = g.input(cu);
    const int dm = g.input(mask);
    const int loss = g.pid_moment(a, b, dm, 2, 1, 1.0, keep_prob);
    g.forward(loss);
    return g.value(loss)(0, 0);
  };

  const double full = loss_for(Matrix::Ones(1, 2), 1.0);
  double expectation = 0.0;
  for (int bits = 0; bits < 4; ++bits) {
    Matrix mask(1, 2);
    mask << (bits & 1 ? 1.0 : 0.0), (bits & 2 ? 1.0 : 0.0);
    const double p = ((bits & 1) ? keep : 1.0 - keep) *
                     ((bits & 2) ? keep : 1.0 - keep);
    expectation += p * loss_for(mask, keep);
  }
  REQUIRE(expectation == Catch::Approx(full).epsilon(1e-12));
}

TEST_CASE("data-weighted raw sparsity sums to one per tree") {
  Rng rng(17);
  for (int trial = 0; trial < 30; ++trial) {
    const int trees = 1 + static_cast<int>(rng.uniform_index(3));
    const int depth = 1 + static_cast<int>(rng.uniform_index(3));
    const int leaves = 1 << depth;
    Matrix cd(1, trees * leaves), cu(1, trees * leaves);
    for (int j = 0; j < trees * leaves; ++j) {
      cd(0, j) = rng.uniform(0.0, 20.0);
      cu(0, j) = rng.uniform(0.0, 20.0);
    }
    Graph g;
    const int a = g.input(cd);
    const int b = g.input(cu);
    const int dm = g.input(Matrix::Ones(1, trees));
    const int loss = g.pid_moment(a, b, dm, trees, depth, 2.0, 1.0);
    g.forward(loss);
    const diad::Node& n = g.node(loss);
    const Matrix& dr = n.aux[1];    // normalized data ratios
    const Matrix& shat = n.aux[2];  // raw sparsity V/D
    for (int t = 0; t < trees; ++t) {
      double sum = 0.0;
      for (int leaf = 0; leaf < leaves; ++leaf) {
        sum += dr(0, t * leaves + leaf) * shat(0, t * leaves + leaf);
      }
      REQUIRE(sum == Catch::Approx(1.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("update_leaf_weights blends toward the target") {
  Matrix w = Matrix::Zero(4, 3);
  Vector s = Vector::Ones(4);
  diad::update_leaf_weights(w, s, 0.1);
  for (int leaf = 0; leaf < 4; ++leaf) {
    for (int r = 0; r < 3; ++r) REQUIRE(w(leaf, r) == Catch::Approx(0.1));
  }
  // Repeated pulls converge geometrically toward s on every response column.
  for (int k = 0; k < 200; ++k) diad::update_leaf_weights(w, s, 0.1);
  REQUIRE(w.minCoeff() == Catch::Approx(1.0).epsilon(1e-8));

  Matrix w2 = Matrix::Constant(2, 1, 5.0);
  Vector s2(2);
  s2 << -1.0, 1.0;
  diad::update_leaf_weights(w2, s2, 1.0);  // gamma 1 copies the target
  REQUIRE(w2(0, 0) == -1.0);
  REQUIRE(w2(1, 0) == 1.0);

  // Per-tree blocks of a stacked weight matrix update independently.
  Matrix stack = Matrix::Zero(8, 2);
  Vector s3 = Vector::Constant(4, 0.5);
  diad::update_leaf_weights(stack.middleRows(4, 4), s3, 0.5);
  REQUIRE(stack.topRows(4).isZero());
  REQUIRE(stack.bottomRows(4).minCoeff() == Catch::Approx(0.25));

  REQUIRE_THROWS_AS(diad::update_leaf_weights(w, s, 0.0), InvalidInputError);
  REQUIRE_THROWS_AS(diad::update_leaf_weights(w, Vector::Ones(3), 0.5),
                    diad::ContractError);
}

TEST_CASE("warmup ramps linearly then holds the base rate") {
  REQUIRE(diad::warmup_lr(0.1, 0, 4) == Catch::Approx(0.025));
  REQUIRE(diad::warmup_lr(0.1, 1, 4) == Catch::Approx(0.05));
  REQUIRE(diad::warmup_lr(0.1, 2, 4) == Catch::Approx(0.075));
  REQUIRE(diad::warmup_lr(0.1, 3, 4) == Catch::Approx(0.1));
  REQUIRE(diad::warmup_lr(0.1, 9, 4) == Catch::Approx(0.1));
  REQUIRE(diad::warmup_lr(0.1, 0, 0) == Catch::Approx(0.1));
}

TEST_CASE("sample_uniform covers the box deterministically per fork") {
  Rng a = Rng(5).fork(1);
  Rng b = Rng(5).fork(1);
  const Matrix u1 = diad::sample_uniform(a, 50, 3);
  const Matrix u2 = diad::sample_uniform(b, 50, 3);
  REQUIRE(u1 == u2);
  REQUIRE(u1.minCoeff() >= -1.0);
  REQUIRE(u1.maxCoeff() <= 1.0);
  REQUIRE(u1.minCoeff() < -0.5);  // actually spreads out
  REQUIRE(u1.maxCoeff() > 0.5);
  Rng c = Rng(5).fork(2);
  REQUIRE(diad::sample_uniform(c, 50, 3) != u1);
  REQUIRE_THROWS_AS(diad::sample_uniform(a, 0, 3), InvalidInputError);
}

TEST_CASE("whole-model gradients match finite differences") {
  TrainConfig cfg;
  cfg.layers = 2;
  cfg.trees_per_layer = 2;
  cfg.depth = 2;
  cfg.extra_tree_dim = 0;
  cfg.column_subsample = 1.0;
  cfg.dropout_rate = 0.0;
  cfg.smoothing_delta = 3.0;
  cfg.seed = 23;
  const int d = 3;
  ModelState m = diad::init_model(cfg, d);
  Rng rng(61);
  for (auto& layer : m.layers) {
    for (diad::TreeParameters& tp : layer) {
      for (Eigen::Index i = 0; i < tp.sel1.size(); ++i) {
        tp.sel1[i] += rng.normal(0.0, 0.8);
        tp.sel2[i] += rng.normal(0.0, 0.8);
      }
      for (int c = 0; c < cfg.depth; ++c) {
        tp.thresholds[c] = rng.uniform(-0.4, 0.4);
        tp.log_slopes[c] = rng.uniform(-0.3, 0.3);
      }
      for (Eigen::Index i = 0; i < tp.leaf_weights.size(); ++i) {
        tp.leaf_weights(i / tp.leaf_weights.cols(),
                        i % tp.leaf_weights.cols()) = rng.normal(0.0, 0.5);
      }
    }
  }

  ModelGraph mg(m, ModelGraph::Mode::kUnsupervised);
  mg.set_temperature(0.5);
  const int batch = 6;
  Matrix xb(batch, d), ub(batch, d);
  for (int i = 0; i < batch; ++i) {
    for (int j = 0; j < d; ++j) {
      xb(i, j) = rng.uniform(-1.0, 1.0);
      ub(i, j) = rng.uniform(-1.0, 1.0);
    }
  }
  mg.set_data(xb);
  mg.set_uniform(ub);
  mg.set_drop_mask(Matrix::Ones(1, 4));

  Graph& g = mg.graph();
  g.forward(mg.loss());
  g.zero_grads();
  g.backward(mg.loss());

  std::vector<int> params = mg.structure_params();
  for (int l = 0; l < cfg.layers; ++l) params.push_back(mg.all_params()[8 + l]);

  const double h = 1e-5;
  int checked = 0;
  for (int p : params) {
    const Matrix analytic = g.node(p).grad;
    Matrix& v = g.mutable_value(p);
    REQUIRE(analytic.rows() == v.rows());
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      for (Eigen::Index j = 0; j < v.cols(); ++j) {
        const double keep = v(i, j);
        v(i, j) = keep + h;
        g.forward(mg.loss());
        const double up = g.value(mg.loss())(0, 0);
        v(i, j) = keep - h;
        g.forward(mg.loss());
        const double dn = g.value(mg.loss())(0, 0);
        v(i, j) = keep;
        const double fd = (up - dn) / (2.0 * h);
        REQUIRE(analytic(i, j) ==
                Catch::Approx(fd).epsilon(5e-4).margin(5e-6));
        ++checked;
      }
    }
  }
  REQUIRE(checked > 50);
}

Matrix blob_data(int rows, int d, Rng& rng) {
  Matrix x(rows, d);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < d; ++j) {
      x(i, j) = i % 20 == 0 ? rng.uniform(-1.0, 1.0) : rng.normal(0.0, 0.2);
    }
  }
  return x;
}

TrainConfig smoke_config() {
  TrainConfig cfg;
  cfg.layers = 2;
  cfg.trees_per_layer = 4;
  cfg.depth = 2;
  cfg.extra_tree_dim = 1;
  cfg.batch_size = 32;
  cfg.steps = 30;
  cfg.warmup_steps = 10;
  cfg.anneal_steps = 20;
  cfg.smoothing_delta = 5.0;
  cfg.dropout_rate = 0.5;
  cfg.column_subsample = 1.0;
  cfg.learning_rate = 0.01;
  cfg.seed = 2;
  return cfg;
}

TEST_CASE("unsupervised training runs the full protocol") {
  TrainConfig cfg = smoke_config();
  Rng rng(44);
  const Matrix x = blob_data(200, 3, rng);
  ModelState m = diad::init_model(cfg, 3);
  const ModelState fresh = m;

  int callbacks = 0;
  const UnsupervisedResult res = diad::train_unsupervised(
      m, x, [&callbacks](const StepLog&) { ++callbacks; });

  REQUIRE(res.history.size() == 30);
  REQUIRE(callbacks == 30);
  REQUIRE(m.anneal_position == 30);
  REQUIRE(m.hardened());
  REQUIRE(m.thresholds_initialized);
  REQUIRE(m.minmax.fitted());
  REQUIRE(m.explain_sample.rows() == 200);
  REQUIRE(m.explain_sample.cols() == 3);

  for (std::size_t k = 0; k < res.history.size(); ++k) {
    const StepLog& e = res.history[k];
    REQUIRE(e.step == static_cast<long>(k));
    REQUIRE(std::isfinite(e.loss));
    REQUIRE(e.temperature ==
            Catch::Approx(fresh.temperature_at(static_cast<long>(k))));
    REQUIRE(e.learning_rate ==
            Catch::Approx(diad::warmup_lr(0.01, static_cast<long>(k), 10)));
    REQUIRE(e.wall_ms >= 0.0);
    if (k > 0) REQUIRE(e.temperature <= res.history[k - 1].temperature);
  }
  REQUIRE(res.history.front().temperature == Catch::Approx(1.0));
  REQUIRE(res.history.back().temperature == Catch::Approx(0.1));

  // Explain subsample rows come from the training data unchanged.
  bool found = false;
  for (Eigen::Index r = 0; r < x.rows() && !found; ++r) {
    if (m.explain_sample.row(0) == x.row(r)) found = true;
  }
  REQUIRE(found);

  // EMA moved the leaf weights; normalized targets keep them inside [-1, 1].
  double max_abs = 0.0;
  for (const auto& layer : m.layers) {
    for (const diad::TreeParameters& tp : layer) {
      max_abs = std::max(max_abs, tp.leaf_weights.cwiseAbs().maxCoeff());
    }
  }
  REQUIRE(max_abs > 0.0);
  REQUIRE(max_abs <= 1.0 + 1e-9);

  // Structural parameters actually trained.
  REQUIRE_FALSE(m.layers[0][0].sel1.isApprox(fresh.layers[0][0].sel1, 0.0));

  // The trained model is hard-evaluable and produces finite scores.
  const Vector scores = diad::score_samples(m, x);
  REQUIRE(scores.size() == 200);
  REQUIRE(scores.allFinite());
}

TEST_CASE("training is reproducible per seed") {
  TrainConfig cfg = smoke_config();
  cfg.steps = 12;
  Rng rng(44);
  const Matrix x = blob_data(100, 3, rng);

  ModelState m1 = diad::init_model(cfg, 3);
  ModelState m2 = diad::init_model(cfg, 3);
  const UnsupervisedResult r1 = diad::train_unsupervised(m1, x);
  const UnsupervisedResult r2 = diad::train_unsupervised(m2, x);
  REQUIRE(r1.history.size() == r2.history.size());
  for (std::size_t k = 0; k < r1.history.size(); ++k) {
    REQUIRE(r1.history[k].loss == r2.history[k].loss);
  }
  REQUIRE(m1.layers[0][0].sel1 == m2.layers[0][0].sel1);
  REQUIRE(m1.layers[1][2].thresholds == m2.layers[1][2].thresholds);
  REQUIRE(m1.f0 == m2.f0);

  TrainConfig other = cfg;
  other.seed = 3;
  ModelState m3 = diad::init_model(other, 3);
  const UnsupervisedResult r3 = diad::train_unsupervised(m3, x);
  REQUIRE(r3.history.back().loss != r1.history.back().loss);
}

TEST_CASE("zero steps leaves parameters untouched") {
  TrainConfig cfg = smoke_config();
  cfg.steps = 0;
  Rng rng(9);
  const Matrix x = blob_data(50, 3, rng);
  ModelState m = diad::init_model(cfg, 3);
  const ModelState fresh = m;
  const UnsupervisedResult res = diad::train_unsupervised(m, x);
  REQUIRE(res.history.empty());
  REQUIRE(m.layers[0][0].sel1 == fresh.layers[0][0].sel1);
  REQUIRE(m.layers[1][3].leaf_weights == fresh.layers[1][3].leaf_weights);
  REQUIRE_FALSE(m.thresholds_initialized);
  REQUIRE(m.minmax.fitted());          // ingestion still happens
  REQUIRE(m.explain_sample.rows() == 50);
  REQUIRE(m.anneal_position == 0);
}

TEST_CASE("small datasets fall back to sampling with replacement") {
  TrainConfig cfg = smoke_config();
  cfg.steps = 3;
  cfg.batch_size = 16;
  Rng rng(31);
  Matrix x(5, 3);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = rng.uniform(-1.0, 1.0);
  }
  ModelState m = diad::init_model(cfg, 3);
  const UnsupervisedResult res = diad::train_unsupervised(m, x);
  REQUIRE(res.history.size() == 3);
  for (const StepLog& e : res.history) REQUIRE(std::isfinite(e.loss));
}

TEST_CASE("trainer validates inputs") {
  TrainConfig cfg = smoke_config();
  ModelState m = diad::init_model(cfg, 3);
  REQUIRE_THROWS_AS(diad::train_unsupervised(m, Matrix::Zero(0, 3)),
                    InvalidInputError);
  REQUIRE_THROWS_AS(diad::train_unsupervised(m, Matrix::Zero(10, 2)),
                    diad::SchemaError);
  Matrix bad = Matrix::Zero(10, 3);
  bad(4, 1) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(diad::train_unsupervised(m, bad), InvalidInputError);
}

}  // namespace
