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

// Fine-tuning walkthrough on a task whose labels contradict density: a
// sparse tail is labeled normal while a cluster inside a dense mode is the
// real anomaly. Unsupervised training ranks them the density way; a handful
// of labels reverses the ordering and the affected shape curve's direction.

#include <cstdio>

#include "diad/data.hpp"
#include "diad/explain.hpp"
#include "diad/finetune.hpp"
#include "diad/model.hpp"
#include "diad/pid.hpp"

using namespace diad;

namespace {

Dataset make_conflict(int n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.feature_names = {"load", "usage", "drift", "spread"};
  ds.X.resize(n, 4);
  ds.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 4; ++j) ds.X(i, j) = rng.normal(0.0, 0.12);
    const double u = rng.uniform01();
    if (u < 0.035) {
      ds.labels[i] = 1.0;
      ds.X(i, 1) = rng.normal(0.55, 0.07);  // anomaly inside a benign mode
    } else if (u < 0.07) {
      ds.labels[i] = 1.0;
      ds.X(i, 3) = rng.uniform(0.4, 0.9) * (rng.uniform01() < 0.5 ? -1.0 : 1.0);
    } else if (u < 0.17) {
      ds.labels[i] = 0.0;
      ds.X(i, 1) = rng.uniform(-1.4, -0.7);  // sparse tail, labeled normal
    } else if (u < 0.21) {
      ds.labels[i] = 0.0;
      ds.X(i, 1) = rng.normal(0.55, 0.07);  // the benign side of the mode
    } else {
      ds.labels[i] = 0.0;
    }
  }
  return ds;
}

double direction(const ModelState& m, int feature) {
  const ShapeCurve c = extract_main_effect(m, feature);
  return c.values.empty() ? 0.0 : c.values.back() - c.values.front();
}

}  // namespace

int main() {
  Dataset ds = make_conflict(2400, 519);
  SplitResult sp = split(ds, 0.64, 0.16, 19);
  const Dataset labeled = subsample_labels(sp.train, 15, 19).labeled;
  std::printf("label budget: %lld rows, %d marked anomalous\n",
              static_cast<long long>(labeled.X.rows()),
              static_cast<int>(labeled.labels.sum()));

  TrainConfig tc;
  tc.steps = 500;
  tc.warmup_steps = 250;
  tc.anneal_steps = 250;
  tc.layers = 2;
  tc.trees_per_layer = 24;
  tc.depth = 3;
  tc.batch_size = 512;
  tc.seed = 19;

  ModelState pre = init_model(tc, 4, ds.feature_names);
  train_unsupervised(pre, sp.train.X);
  const double auc_pre =
      auc_metric(score_samples(pre, sp.test.X), sp.test.labels);
  std::printf("unsupervised model: test AUC %.4f, usage-curve direction %+.3f\n",
              auc_pre, direction(pre, 1));

  FinetuneConfig fc;
  fc.seed = 19;
  fc.learning_rate = 5e-3;
  fc.patience = 60;
  fc.max_epochs = 400;
  ModelState ft = pre;
  const FinetuneResult fr =
      finetune(ft, labeled.X, labeled.labels, sp.val.X, sp.val.labels, fc);
  const double auc_ft =
      auc_metric(score_samples(ft, sp.test.X), sp.test.labels);
  std::printf("fine-tuned model:   test AUC %.4f, usage-curve direction %+.3f "
              "(best epoch %d of %zu)\n",
              auc_ft, direction(ft, 1), fr.best_epoch, fr.history.size());

  std::printf("\nthe sparse usage tail scored high before fine-tuning; the\n"
              "labels say the dense mode hides the real anomalies, so the\n"
              "curve's direction reverses once the labels are applied.\n");
  return 0;
}
