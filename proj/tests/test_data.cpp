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

#include "diad/data.hpp"

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <set>

#include "diad/common.hpp"

namespace {

using diad::Dataset;
using diad::Matrix;
using diad::Rng;
using diad::Vector;

std::string write_temp_csv(const std::string& name, const std::string& body) {
  const std::string path = "/tmp/diad_test_" + name + ".csv";
  std::ofstream out(path);
  out << body;
  return path;
}

// Quadratic pair-counting oracle for the ROC area: ties count one half.
double auc_pairs_oracle(const Vector& scores, const Vector& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1.0) continue;
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0.0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

Dataset synthetic_labeled(Rng& rng, int n, int d, double anomaly_ratio) {
  Dataset ds;
  ds.X.resize(n, d);
  ds.labels.resize(n);
  for (int j = 0; j < d; ++j) ds.feature_names.push_back("f" + std::to_string(j));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) ds.X(i, j) = rng.normal();
    ds.labels[i] = rng.uniform01() < anomaly_ratio ? 1.0 : 0.0;
  }
  return ds;
}

}  // namespace

TEST_CASE("csv loading parses features and labels") {
  const std::string path = write_temp_csv(
      "basic", "a,b,y\n1.0,2.0,0\n3.5,-1.25,1\n0.25,4.0,0\n");
  const Dataset ds = diad::load_csv(path, std::string("y"));
  REQUIRE(ds.rows() == 3);
  REQUIRE(ds.cols() == 2);
  REQUIRE(ds.feature_names == std::vector<std::string>{"a", "b"});
  REQUIRE(ds.labels[1] == 1.0);
  REQUIRE(ds.X(1, 1) == -1.25);
  REQUIRE(ds.dropped_rows == 0);

  const Dataset unlabeled = diad::load_csv(path);
  REQUIRE(unlabeled.cols() == 3);
  REQUIRE_FALSE(unlabeled.has_labels());
}

TEST_CASE("csv loading distinguishes failure kinds") {
  REQUIRE_THROWS_AS(diad::load_csv("/tmp/diad_definitely_missing.csv"),
                    diad::IoError);

  const std::string bad_cell =
      write_temp_csv("badcell", "a,b\n1.0,fish\n");
  REQUIRE_THROWS_AS(diad::load_csv(bad_cell), diad::SchemaError);

  const std::string good = write_temp_csv("goodlab", "a,b,y\n1,2,0\n");
  REQUIRE_THROWS_AS(diad::load_csv(good, std::string("target")),
                    diad::SchemaError);

  const std::string bad_label = write_temp_csv("badlab", "a,y\n1.0,2\n");
  REQUIRE_THROWS_AS(diad::load_csv(bad_label, std::string("y")),
                    diad::LabelError);

  const std::string ragged = write_temp_csv("ragged", "a,b\n1.0\n");
  REQUIRE_THROWS_AS(diad::load_csv(ragged), diad::SchemaError);
}

TEST_CASE("csv rows with non-finite cells are dropped and counted") {
  const std::string path = write_temp_csv(
      "nanrow", "a,b\n1.0,2.0\nnan,3.0\n4.0,5.0\n");
  const Dataset ds = diad::load_csv(path);
  REQUIRE(ds.rows() == 2);
  REQUIRE(ds.dropped_rows == 1);
  REQUIRE(ds.X(1, 0) == 4.0);
}

TEST_CASE("minmax transform maps the fitted range onto [-1, 1]") {
  Matrix x(4, 3);
  x << 0.0, 10.0, 7.0,
       5.0, 20.0, 7.0,
       2.5, 15.0, 7.0,
       1.0, 12.0, 7.0;
  const diad::MinMaxStats s = diad::minmax_fit(x);
  const Matrix t = diad::minmax_transform(x, s);
  REQUIRE(t.col(0).minCoeff() == -1.0);
  REQUIRE(t.col(0).maxCoeff() == 1.0);
  REQUIRE(std::abs(t(2, 0) - 0.0) < 1e-12);
  // Constant column maps to zero.
  REQUIRE(t.col(2).isZero());

  // Unseen values clamp into the range.
  Matrix probe(2, 3);
  probe << -100.0, 11.0, 3.0,
           100.0, 13.0, 9.0;
  const Matrix tp = diad::minmax_transform(probe, s);
  REQUIRE(tp(0, 0) == -1.0);
  REQUIRE(tp(1, 0) == 1.0);

  // Untransform inverts interior points.
  REQUIRE(std::abs(diad::minmax_untransform(t(3, 1), 1, s) - 12.0) < 1e-12);

  Matrix wrong(1, 2);
  REQUIRE_THROWS_AS(diad::minmax_transform(wrong, s), diad::SchemaError);
}

TEST_CASE("split produces 64/16/20 on one hundred unlabeled rows") {
  Rng rng(1);
  Dataset ds = synthetic_labeled(rng, 100, 3, 0.0);
  ds.labels.resize(0);
  const diad::SplitResult r = diad::split(ds, 0.64, 0.16, 7);
  REQUIRE(r.train.rows() == 64);
  REQUIRE(r.val.rows() == 16);
  REQUIRE(r.test.rows() == 20);
  REQUIRE_FALSE(r.stratified);

  // Disjoint and exhaustive.
  std::set<int> all;
  for (int i : r.train_idx) all.insert(i);
  for (int i : r.val_idx) all.insert(i);
  for (int i : r.test_idx) all.insert(i);
  REQUIRE(all.size() == 100);
}

TEST_CASE("stratified split preserves the anomaly ratio within one sample") {
  Rng rng(2);
  Dataset ds;
  ds.X.resize(1000, 2);
  ds.labels.resize(1000);
  ds.feature_names = {"a", "b"};
  for (int i = 0; i < 1000; ++i) {
    ds.X(i, 0) = rng.normal();
    ds.X(i, 1) = rng.normal();
    ds.labels[i] = i < 50 ? 1.0 : 0.0;  // exactly 5%
  }
  const diad::SplitResult r = diad::split(ds, 0.64, 0.16, 11);
  REQUIRE(r.stratified);
  auto count_pos = [](const Dataset& d) {
    return static_cast<int>(d.labels.sum());
  };
  REQUIRE(std::abs(count_pos(r.train) - 0.05 * r.train.rows()) <= 1.0);
  REQUIRE(std::abs(count_pos(r.val) - 0.05 * r.val.rows()) <= 1.0);
  REQUIRE(std::abs(count_pos(r.test) - 0.05 * r.test.rows()) <= 1.0);

  // Same seed, same index sets.
  const diad::SplitResult r2 = diad::split(ds, 0.64, 0.16, 11);
  REQUIRE(r.train_idx == r2.train_idx);
  REQUIRE(r.val_idx == r2.val_idx);
  REQUIRE(r.test_idx == r2.test_idx);

  const diad::SplitResult r3 = diad::split(ds, 0.64, 0.16, 12);
  REQUIRE(r.train_idx != r3.train_idx);
}

TEST_CASE("split falls back to unstratified with too few anomalies") {
  Rng rng(3);
  Dataset ds = synthetic_labeled(rng, 50, 2, 0.0);
  ds.labels[4] = 1.0;  // a single anomaly cannot be stratified
  const diad::SplitResult r = diad::split(ds, 0.6, 0.2, 5);
  REQUIRE_FALSE(r.stratified);
  REQUIRE(r.train.rows() + r.val.rows() + r.test.rows() == 50);
}

TEST_CASE("label subsampling keeps the contamination rate") {
  Rng rng(4);
  Dataset ds;
  ds.X.resize(500, 2);
  ds.labels.resize(500);
  ds.feature_names = {"a", "b"};
  for (int i = 0; i < 500; ++i) {
    ds.X(i, 0) = rng.normal();
    ds.X(i, 1) = rng.normal();
    ds.labels[i] = i < 50 ? 1.0 : 0.0;  // ratio 0.1
  }
  const diad::SubsampleResult r = diad::subsample_labels(ds, 5, 99);
  REQUIRE(r.labeled.rows() == 50);  // 5 anomalies + floor(5 * 0.9 / 0.1)
  REQUIRE(static_cast<int>(r.labeled.labels.sum()) == 5);
  for (int i = 0; i < 5; ++i) REQUIRE(r.labeled.labels[i] == 1.0);

  const diad::SubsampleResult zero = diad::subsample_labels(ds, 0, 99);
  REQUIRE(zero.labeled.rows() == 0);

  REQUIRE_THROWS_AS(diad::subsample_labels(ds, 51, 99), diad::LabelError);

  Dataset unlabeled = ds;
  unlabeled.labels.resize(0);
  REQUIRE_THROWS_AS(diad::subsample_labels(unlabeled, 5, 99),
                    diad::LabelError);
}

TEST_CASE("noise features are appended without touching the originals") {
  Rng rng(5);
  const Dataset ds = synthetic_labeled(rng, 40, 3, 0.2);
  const Dataset noisy = diad::add_noise_features(ds, 4, 123);
  REQUIRE(noisy.cols() == 7);
  REQUIRE(noisy.feature_names[3] == "noise_0");
  REQUIRE(noisy.X.leftCols(3) == ds.X);  // bit-identical
  REQUIRE(noisy.labels == ds.labels);
  REQUIRE(noisy.X.rightCols(4).minCoeff() >= -1.0);
  REQUIRE(noisy.X.rightCols(4).maxCoeff() <= 1.0);

  const Dataset noisy2 = diad::add_noise_features(ds, 4, 123);
  REQUIRE(noisy.X == noisy2.X);
  const Dataset noisy3 = diad::add_noise_features(ds, 4, 124);
  REQUIRE(noisy.X != noisy3.X);
}

TEST_CASE("auc handles the pinned examples") {
  Vector s(2), y(2);
  s << 0.9, 0.1;
  y << 1.0, 0.0;
  REQUIRE(diad::auc_metric(s, y) == 1.0);

  s << 0.1, 0.9;
  REQUIRE(diad::auc_metric(s, y) == 0.0);

  s << 0.8, 0.8;
  REQUIRE(diad::auc_metric(s, y) == 0.5);

  Vector one_class = Vector::Ones(2);
  REQUIRE_THROWS_AS(diad::auc_metric(s, one_class), diad::MetricError);

  Vector bad(2);
  bad << 2.0, 0.0;
  REQUIRE_THROWS_AS(diad::auc_metric(s, bad), diad::LabelError);
}

TEST_CASE("auc matches the quadratic pair oracle with ties present") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5 + static_cast<int>(rng.uniform_index(60));
    Vector s(n), y(n);
    int pos = 0;
    for (int i = 0; i < n; ++i) {
      // Quantized scores force frequent ties.
      s[i] = std::round(rng.normal() * 4.0) / 4.0;
      y[i] = rng.uniform01() < 0.4 ? 1.0 : 0.0;
      pos += y[i] == 1.0 ? 1 : 0;
    }
    if (pos == 0 || pos == n) continue;
    REQUIRE(std::abs(diad::auc_metric(s, y) - auc_pairs_oracle(s, y)) < 1e-12);
  }
}
