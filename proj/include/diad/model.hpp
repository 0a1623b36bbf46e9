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
#include <memory>
#include <string>
#include <vector>

#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/entmax.hpp"
#include "diad/graph.hpp"

namespace diad {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 2048;
  double learning_rate = 1e-3;
  double ema_gamma = 0.1;  // leaf-weight EMA rate
  int steps = 2000;
  int warmup_steps = 1000;       // linear learning-rate warmup
  double smoothing_delta = 50.0;  // additive count smoothing
  double dropout_rate = 0.75;     // per-tree moment drop probability
  int layers = 3;
  int trees_per_layer = 300;
  int extra_tree_dim = 1;  // responses beyond the score, fed to later layers
  int depth = 4;
  int attention_dim = 12;  // recorded with the model; no effect on this engine
  double column_subsample = 0.4;  // fraction of raw features offered per tree
  int anneal_steps = 1000;        // linear temperature anneal 1 -> min
  double min_temperature = 0.1;
  bool normalize_sparsity = true;  // min-max normalize the EMA target
  std::uint64_t seed = 0;

  int responses() const { return 1 + extra_tree_dim; }
  int leaves() const { return 1 << depth; }

  void validate() const {
    if (batch_size < 1) throw InvalidInputError("config: batch_size < 1");
    if (!(learning_rate > 0.0)) {
      throw InvalidInputError("config: learning_rate must be positive");
    }
    if (!(ema_gamma > 0.0 && ema_gamma <= 1.0)) {
      throw InvalidInputError("config: ema_gamma must be in (0, 1]");
    }
    if (steps < 0) throw InvalidInputError("config: steps < 0");
    if (warmup_steps < 0) throw InvalidInputError("config: warmup_steps < 0");
    if (!(smoothing_delta >= 0.0)) {
      throw InvalidInputError("config: smoothing_delta must be >= 0");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw InvalidInputError("config: dropout_rate must be in [0, 1)");
    }
    if (layers < 1) throw InvalidInputError("config: layers < 1");
    if (trees_per_layer < 1) {
      throw InvalidInputError("config: trees_per_layer < 1");
    }
    if (extra_tree_dim < 0) {
      throw InvalidInputError("config: extra_tree_dim < 0");
    }
    if (depth < 1 || depth > 12) {
      throw InvalidInputError("config: depth must be in [1, 12]");
    }
    if (attention_dim < 0) {
      throw InvalidInputError("config: attention_dim < 0");
    }
    if (!(column_subsample > 0.0 && column_subsample <= 1.0)) {
      throw InvalidInputError("config: column_subsample must be in (0, 1]");
    }
    if (anneal_steps < 0) throw InvalidInputError("config: anneal_steps < 0");
    if (!(min_temperature > 0.0 && min_temperature <= 1.0)) {
      throw InvalidInputError("config: min_temperature must be in (0, 1]");
    }
  }
};

// ---------------------------------------------------------------------------
// Wiring: candidates and effective feature sets.
// ---------------------------------------------------------------------------

// Set of at most two raw features; the structural budget of every tree.
struct FeatureSet {
  int a = -1;
  int b = -1;

  static FeatureSet single(int f) {
    FeatureSet s;
    s.a = f;
    return s;
  }

  int size() const { return (a >= 0 ? 1 : 0) + (b >= 0 ? 1 : 0); }

  bool contains(int f) const { return f >= 0 && (f == a || f == b); }

  void insert(int f) {
    if (f < 0) throw ContractError("FeatureSet: negative feature");
    if (contains(f)) return;
    if (a < 0) {
      a = f;
    } else if (b < 0) {
      b = f;
      if (a > b) std::swap(a, b);
    } else {
      throw ContractError("FeatureSet: more than two raw features");
    }
  }

  bool operator==(const FeatureSet& o) const { return a == o.a && b == o.b; }
};

inline int union_size(const FeatureSet& x, const FeatureSet& y) {
  FeatureSet u = x;
  int extra = 0;
  for (int f : {y.a, y.b}) {
    if (f >= 0 && !u.contains(f)) {
      if (u.size() + extra >= 2) {
        ++extra;  // would exceed the budget; just count it
      } else {
        u.insert(f);
      }
    }
  }
  return u.size() + extra;
}

// Tree-output candidates make the ensemble residual: layer l may consume the
// responses of every tree in layers strictly before l, after the raw features.
struct Candidate {
  bool is_raw = true;
  int feature = -1;  // raw
  int layer = -1, tree = -1, dim = -1;  // tree output
};

// Second-head selection rule: a candidate is selectable iff adding its raw
// features to those of the first head's pick keeps the tree within two raw
// features. The first head's pick is always self-compatible, so the mask is
// never empty.
inline std::vector<char> compatibility_mask(
    const std::vector<FeatureSet>& candidate_sets,
    const std::vector<char>& base_allowed, int head1_pick) {
  if (candidate_sets.size() != base_allowed.size()) {
    throw ContractError("compatibility_mask: size mismatch");
  }
  if (head1_pick < 0 ||
      head1_pick >= static_cast<int>(candidate_sets.size())) {
    throw ContractError("compatibility_mask: head-1 pick out of range");
  }
  const FeatureSet& s1 = candidate_sets[static_cast<std::size_t>(head1_pick)];
  std::vector<char> out(candidate_sets.size(), 0);
  for (std::size_t k = 0; k < candidate_sets.size(); ++k) {
    out[k] = base_allowed[k] && union_size(s1, candidate_sets[k]) <= 2;
  }
  return out;
}

// First index attaining the maximum among allowed entries.
inline int masked_argmax(const Vector& v, const std::vector<char>& allowed) {
  int best = -1;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!allowed[static_cast<std::size_t>(i)]) continue;
    if (best < 0 || v[i] > v[best]) best = static_cast<int>(i);
  }
  if (best < 0) throw ContractError("masked_argmax: empty mask");
  return best;
}

// ---------------------------------------------------------------------------
// Model state.
// ---------------------------------------------------------------------------

struct TreeParameters {
  Vector sel1, sel2;    // selection logits over the layer's candidates
  Vector thresholds;    // one per depth, in transformed units
  Vector log_slopes;    // one per depth; slope = exp(log_slope) > 0
  Matrix leaf_weights;  // leaves x responses; response 0 is the score
  std::vector<int> column_mask;  // raw features this tree may select
};

struct ModelState {
  TrainConfig config;
  int n_features = 0;
  std::vector<std::string> feature_names;
  std::vector<std::vector<TreeParameters>> layers;  // [layer][tree]
  MinMaxStats minmax;
  double f0 = 0.0;          // global score offset
  long anneal_position = 0;  // training steps taken against the anneal
  bool thresholds_initialized = false;
  Matrix explain_sample;  // training-row subsample (original units)

  bool hardened() const { return anneal_position >= config.anneal_steps; }

  double temperature_at(long step) const {
    if (config.anneal_steps == 0) return config.min_temperature;
    const double frac =
        std::min(1.0, static_cast<double>(step) /
                          static_cast<double>(config.anneal_steps));
    return 1.0 + (config.min_temperature - 1.0) * frac;
  }

  double current_temperature() const {
    return temperature_at(anneal_position);
  }
};

inline int candidate_count(const ModelState& m, int layer) {
  return m.n_features +
         layer * m.config.trees_per_layer * m.config.responses();
}

inline std::vector<Candidate> layer_candidates(const ModelState& m,
                                               int layer) {
  std::vector<Candidate> out;
  out.reserve(static_cast<std::size_t>(candidate_count(m, layer)));
  for (int f = 0; f < m.n_features; ++f) {
    Candidate c;
    c.is_raw = true;
    c.feature = f;
    out.push_back(c);
  }
  for (int l = 0; l < layer; ++l) {
    for (int t = 0; t < m.config.trees_per_layer; ++t) {
      for (int r = 0; r < m.config.responses(); ++r) {
        Candidate c;
        c.is_raw = false;
        c.layer = l;
        c.tree = t;
        c.dim = r;
        out.push_back(c);
      }
    }
  }
  return out;
}

// Head-1 mask: the column subsample restricts raw candidates; tree-output
// candidates are open (the compatibility rule alone governs them).
inline std::vector<char> base_candidate_mask(const ModelState& m, int layer,
                                             const TreeParameters& tree) {
  std::vector<char> mask(static_cast<std::size_t>(candidate_count(m, layer)),
                         0);
  for (int f : tree.column_mask) mask[static_cast<std::size_t>(f)] = 1;
  for (int k = m.n_features; k < candidate_count(m, layer); ++k) {
    mask[static_cast<std::size_t>(k)] = 1;
  }
  return mask;
}

inline ModelState init_model(const TrainConfig& cfg, int n_features,
                             std::vector<std::string> feature_names = {}) {
  cfg.validate();
  if (n_features < 1) throw InvalidInputError("init_model: n_features < 1");
  if (!feature_names.empty() &&
      static_cast<int>(feature_names.size()) != n_features) {
    throw InvalidInputError("init_model: feature name count mismatch");
  }
  ModelState m;
  m.config = cfg;
  m.n_features = n_features;
  if (feature_names.empty()) {
    for (int f = 0; f < n_features; ++f) {
      m.feature_names.push_back("f" + std::to_string(f));
    }
  } else {
    m.feature_names = std::move(feature_names);
  }

  Rng rng = Rng(cfg.seed).fork(0x1417);
  const int mask_size = std::max(
      1, static_cast<int>(std::lround(cfg.column_subsample * n_features)));
  m.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const int cands =
        n_features + l * cfg.trees_per_layer * cfg.responses();
    for (int t = 0; t < cfg.trees_per_layer; ++t) {
      TreeParameters tp;
      tp.column_mask = rng.sample_without_replacement(n_features, mask_size);
      std::sort(tp.column_mask.begin(), tp.column_mask.end());
      tp.sel1.resize(cands);
      tp.sel2.resize(cands);
      for (int k = 0; k < cands; ++k) {
        tp.sel1[k] = rng.normal(0.0, 0.01);
        tp.sel2[k] = rng.normal(0.0, 0.01);
      }
      tp.thresholds = Vector::Zero(cfg.depth);
      tp.log_slopes = Vector::Zero(cfg.depth);
      tp.leaf_weights = Matrix::Zero(cfg.leaves(), cfg.responses());
      m.layers[static_cast<std::size_t>(l)].push_back(std::move(tp));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Single-sample reference ops. These mirror one tree's soft forward pass in
// plain loops; the batched graph path is cross-checked against them.
// ---------------------------------------------------------------------------

// Entmax selection weights over allowed candidates; others get exactly zero.
inline Vector selection_weights(const Vector& logits,
                                const std::vector<char>& allowed,
                                double temperature) {
  if (static_cast<std::size_t>(logits.size()) != allowed.size()) {
    throw ContractError("selection_weights: size mismatch");
  }
  std::vector<int> idx;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (allowed[static_cast<std::size_t>(i)]) idx.push_back(static_cast<int>(i));
  }
  if (idx.empty()) throw ContractError("selection_weights: empty mask");
  Vector sub(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) sub[static_cast<Eigen::Index>(i)] = logits[idx[i]];
  const Vector p = entmax15(sub, temperature);
  Vector out = Vector::Zero(logits.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = p[static_cast<Eigen::Index>(i)];
  return out;
}

// Per-depth selected values G^c = <w_head(c), inputs>; odd depths (1st, 3rd,
// ...) read the first head, even depths the second.
inline Vector select_inputs(const TreeParameters& tree, const Vector& inputs,
                            double temperature,
                            const std::vector<char>& mask1,
                            const std::vector<char>& mask2) {
  if (inputs.size() != tree.sel1.size()) {
    throw ContractError("select_inputs: input/logit size mismatch");
  }
  const Vector w1 = selection_weights(tree.sel1, mask1, temperature);
  const Vector w2 = selection_weights(tree.sel2, mask2, temperature);
  const int depth = static_cast<int>(tree.thresholds.size());
  Vector g(depth);
  for (int c = 0; c < depth; ++c) {
    g[c] = (c % 2 == 0 ? w1 : w2).dot(inputs);
  }
  return g;
}

// Soft leaf memberships from the per-depth values; multiplies the per-depth
// gates with depth 0 as the most significant bit of the leaf index.
inline Vector leaf_assignment(const TreeParameters& tree, const Vector& g,
                              double temperature) {
  const int depth = static_cast<int>(tree.thresholds.size());
  if (g.size() != depth) throw ContractError("leaf_assignment: depth mismatch");
  Vector e = Vector::Ones(1);
  for (int c = 0; c < depth; ++c) {
    const double slope = std::exp(tree.log_slopes[c]);
    const double h =
        entmoid((g[c] - tree.thresholds[c]) / slope, temperature);
    Vector next(e.size() * 2);
    for (Eigen::Index k = 0; k < e.size(); ++k) {
      next[2 * k] = e[k] * h;
      next[2 * k + 1] = e[k] * (1.0 - h);
    }
    e = next;
  }
  return e;
}

// Response vector w^T e; entry 0 is the tree's score contribution.
inline Vector tree_output(const TreeParameters& tree, const Vector& e) {
  if (e.size() != tree.leaf_weights.rows()) {
    throw ContractError("tree_output: leaf count mismatch");
  }
  return tree.leaf_weights.transpose() * e;
}

// ---------------------------------------------------------------------------
// Hard (annealed) evaluator: argmax selection, step splits.
// ---------------------------------------------------------------------------

struct HardTree {
  int cand1 = -1, cand2 = -1;   // winning candidate per head
  std::vector<int> split_cand;  // per depth, cand1/cand2 alternating
  Vector thresholds;
  Matrix leaf_weights;
  FeatureSet features;  // effective raw features, size 1 or 2
};

struct HardModel {
  int n_features = 0;
  int depth = 0;
  int responses = 1;
  int trees_per_layer = 0;
  double f0 = 0.0;
  std::vector<std::vector<HardTree>> layers;
};

// Resolves all selections with hard argmax under the same masking rules the
// soft pass uses. Requires a fully annealed model.
inline HardModel harden(const ModelState& m) {
  if (!m.hardened()) {
    throw NotHardenedError(
        "model is not fully annealed; finish training before hard routing");
  }
  HardModel hm;
  hm.n_features = m.n_features;
  hm.depth = m.config.depth;
  hm.responses = m.config.responses();
  hm.trees_per_layer = m.config.trees_per_layer;
  hm.f0 = m.f0;

  std::vector<std::vector<FeatureSet>> tree_sets;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const int layer = static_cast<int>(l);
    std::vector<Candidate> cands = layer_candidates(m, layer);
    std::vector<FeatureSet> cand_sets(cands.size());
    for (std::size_t k = 0; k < cands.size(); ++k) {
      cand_sets[k] = cands[k].is_raw
                         ? FeatureSet::single(cands[k].feature)
                         : tree_sets[static_cast<std::size_t>(cands[k].layer)]
                                    [static_cast<std::size_t>(cands[k].tree)];
    }
    std::vector<HardTree> row;
    std::vector<FeatureSet> row_sets;
    for (const TreeParameters& tp : m.layers[l]) {
      const std::vector<char> mask1 = base_candidate_mask(m, layer, tp);
      HardTree ht;
      ht.cand1 = masked_argmax(tp.sel1, mask1);
      const std::vector<char> mask2 =
          compatibility_mask(cand_sets, mask1, ht.cand1);
      ht.cand2 = masked_argmax(tp.sel2, mask2);
      for (int c = 0; c < m.config.depth; ++c) {
        ht.split_cand.push_back(c % 2 == 0 ? ht.cand1 : ht.cand2);
      }
      ht.thresholds = tp.thresholds;
      ht.leaf_weights = tp.leaf_weights;
      ht.features = cand_sets[static_cast<std::size_t>(ht.cand1)];
      for (int f : {cand_sets[static_cast<std::size_t>(ht.cand2)].a,
                    cand_sets[static_cast<std::size_t>(ht.cand2)].b}) {
        if (f >= 0) ht.features.insert(f);
      }
      row_sets.push_back(ht.features);
      row.push_back(std::move(ht));
    }
    tree_sets.push_back(std::move(row_sets));
    hm.layers.push_back(std::move(row));
  }
  return hm;
}

struct HardEval {
  Vector scores;
  // Per layer: [batch x trees] integer leaf index of each sample.
  std::vector<Eigen::MatrixXi> leaf_index;
};

// Evaluates the hard model on already-transformed inputs. Splits route to
// the gate-open side when the selected value is >= the threshold.
inline HardEval hard_forward(const HardModel& hm, const Matrix& xt) {
  if (xt.cols() != hm.n_features) {
    throw SchemaError("hard_forward: expected " +
                      std::to_string(hm.n_features) + " features, got " +
                      std::to_string(xt.cols()));
  }
  const int n_layers = static_cast<int>(hm.layers.size());
  const int m = hm.trees_per_layer;
  const int resp = hm.responses;
  HardEval out;
  out.scores = Vector::Zero(xt.rows());
  for (int l = 0; l < n_layers; ++l) {
    out.leaf_index.emplace_back(xt.rows(), m);
  }
  std::vector<double> cand_values;
  for (Eigen::Index i = 0; i < xt.rows(); ++i) {
    cand_values.assign(static_cast<std::size_t>(hm.n_features) +
                           static_cast<std::size_t>(n_layers) *
                               static_cast<std::size_t>(m) *
                               static_cast<std::size_t>(resp),
                       0.0);
    for (int f = 0; f < hm.n_features; ++f) {
      cand_values[static_cast<std::size_t>(f)] = xt(i, f);
    }
    double score_sum = 0.0;
    for (int l = 0; l < n_layers; ++l) {
      for (int t = 0; t < m; ++t) {
        const HardTree& ht = hm.layers[static_cast<std::size_t>(l)]
                                      [static_cast<std::size_t>(t)];
        int leaf = 0;
        for (int c = 0; c < hm.depth; ++c) {
          const double v =
              cand_values[static_cast<std::size_t>(ht.split_cand[static_cast<std::size_t>(c)])];
          const int bit = v >= ht.thresholds[c] ? 0 : 1;
          leaf = (leaf << 1) | bit;
        }
        out.leaf_index[static_cast<std::size_t>(l)](i, t) = leaf;
        score_sum += ht.leaf_weights(leaf, 0);
        const std::size_t base =
            static_cast<std::size_t>(hm.n_features) +
            (static_cast<std::size_t>(l) * static_cast<std::size_t>(m) +
             static_cast<std::size_t>(t)) *
                static_cast<std::size_t>(resp);
        for (int r = 0; r < resp; ++r) {
          cand_values[base + static_cast<std::size_t>(r)] =
              ht.leaf_weights(leaf, r);
        }
      }
    }
    out.scores[i] =
        score_sum / (static_cast<double>(n_layers) * static_cast<double>(m)) +
        hm.f0;
  }
  return out;
}

// Anomaly scores for original-unit inputs through the hard evaluator.
inline Vector score_samples(const ModelState& m, const Matrix& x) {
  const HardModel hm = harden(m);
  return hard_forward(hm, minmax_transform(x, m.minmax)).scores;
}

// Effective raw-feature set of every tree (hard routing).
inline std::vector<std::vector<FeatureSet>> effective_feature_sets(
    const ModelState& m) {
  const HardModel hm = harden(m);
  std::vector<std::vector<FeatureSet>> out;
  for (const auto& layer : hm.layers) {
    std::vector<FeatureSet> row;
    for (const HardTree& ht : layer) row.push_back(ht.features);
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched differentiable graph over the whole ensemble.
//
// Selection weights, compatibility masks, and wiring tokens are shared by the
// data and uniform chains (they do not depend on the batch). Tokens are
// opaque nodes that refresh each tree's current feature set from the head
// argmaxes during the forward sweep, so the next layer's compatibility masks
// always see up-to-date wiring.
// ---------------------------------------------------------------------------

class ModelGraph {
 public:
  enum class Mode { kScore, kUnsupervised, kFinetuneAuc, kFinetuneBce };

  ModelGraph(const ModelState& model, Mode mode, int npos = 0)
      : mode_(mode),
        n_features_(model.n_features),
        n_layers_(model.config.layers),
        trees_(model.config.trees_per_layer),
        depth_(model.config.depth),
        resp_(model.config.responses()) {
    build(model, npos);
    load_params(model);
  }

  Graph& graph() { return g_; }
  const Graph& graph() const { return g_; }

  // --- inputs ---------------------------------------------------------------

  void set_temperature(double t) {
    g_.set_value(temperature_, Matrix::Constant(1, 1, t));
  }

  void set_data(const Matrix& xt) { g_.set_value(x_data_, xt); }

  void set_uniform(const Matrix& xu) {
    require_mode(Mode::kUnsupervised, "set_uniform");
    g_.set_value(x_unif_, xu);
  }

  // 0/1 keep indicators, one per tree across all layers [1 x layers*trees].
  void set_drop_mask(const Matrix& dm) {
    require_mode(Mode::kUnsupervised, "set_drop_mask");
    g_.set_value(drop_mask_, dm);
  }

  void set_labels(const Vector& y) {
    require_mode(Mode::kFinetuneBce, "set_labels");
    g_.set_value(labels_, y);
  }

  // --- nodes ----------------------------------------------------------------

  int loss() const {
    if (loss_ < 0) throw ContractError("this graph mode has no loss node");
    return loss_;
  }
  int scores() const { return scores_; }
  int data_memberships(int layer) const { return data_.e[static_cast<std::size_t>(layer)]; }
  int data_gdepth(int layer) const { return data_.gdepth[static_cast<std::size_t>(layer)]; }
  int head_weights(int layer, int head) const {
    const LayerNodes& ln = layers_[static_cast<std::size_t>(layer)];
    return head == 0 ? ln.p1 : ln.p2;
  }
  int head2_mask_node(int layer) const {
    return layers_[static_cast<std::size_t>(layer)].mask2;
  }

  // Current wiring sets under the current parameters and temperature. The
  // last layer's token is a sink no score depends on, so refresh it here.
  const std::vector<std::vector<FeatureSet>>& wiring_sets() {
    g_.forward(layers_.back().token);
    return *tree_sets_;
  }

  std::vector<int> structure_params() const {
    std::vector<int> out;
    for (const LayerNodes& ln : layers_) {
      out.push_back(ln.sel1);
      out.push_back(ln.sel2);
      out.push_back(ln.thresholds);
      out.push_back(ln.log_slopes);
    }
    return out;
  }

  std::vector<int> all_params() const {
    std::vector<int> out = structure_params();
    for (const LayerNodes& ln : layers_) out.push_back(ln.leaf_weights);
    out.push_back(f0_);
    return out;
  }

  Matrix& leaf_weights_value(int layer) {
    return g_.mutable_value(layers_[static_cast<std::size_t>(layer)].leaf_weights);
  }

  // Sparsity statistics of the last unsupervised forward, per layer.
  const Matrix& volume_ratio(int layer) const { return pid_aux(layer, 0); }
  const Matrix& data_ratio(int layer) const { return pid_aux(layer, 1); }
  const Matrix& sparsity_raw(int layer) const { return pid_aux(layer, 2); }
  const Matrix& sparsity_norm(int layer) const { return pid_aux(layer, 3); }

  // --- parameter transfer -----------------------------------------------------

  void load_params(const ModelState& m) {
    for (int l = 0; l < n_layers_; ++l) {
      const LayerNodes& ln = layers_[static_cast<std::size_t>(l)];
      const int cands = n_features_ + l * trees_ * resp_;
      Matrix sel1(cands, trees_), sel2(cands, trees_);
      Matrix th(1, trees_ * depth_), ls(1, trees_ * depth_);
      Matrix w(trees_ * (1 << depth_), resp_);
      for (int t = 0; t < trees_; ++t) {
        const TreeParameters& tp =
            m.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)];
        sel1.col(t) = tp.sel1;
        sel2.col(t) = tp.sel2;
        for (int c = 0; c < depth_; ++c) {
          th(0, t * depth_ + c) = tp.thresholds[c];
          ls(0, t * depth_ + c) = tp.log_slopes[c];
        }
        w.middleRows(static_cast<Eigen::Index>(t) * (1 << depth_),
                     1 << depth_) = tp.leaf_weights;
      }
      g_.mutable_value(ln.sel1) = sel1;
      g_.mutable_value(ln.sel2) = sel2;
      g_.mutable_value(ln.thresholds) = th;
      g_.mutable_value(ln.log_slopes) = ls;
      g_.mutable_value(ln.leaf_weights) = w;
    }
    g_.mutable_value(f0_) = Matrix::Constant(1, 1, m.f0);
  }

  void store_params(ModelState& m) const {
    for (int l = 0; l < n_layers_; ++l) {
      const LayerNodes& ln = layers_[static_cast<std::size_t>(l)];
      const Matrix& sel1 = g_.value(ln.sel1);
      const Matrix& sel2 = g_.value(ln.sel2);
      const Matrix& th = g_.value(ln.thresholds);
      const Matrix& ls = g_.value(ln.log_slopes);
      const Matrix& w = g_.value(ln.leaf_weights);
      for (int t = 0; t < trees_; ++t) {
        TreeParameters& tp =
            m.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)];
        tp.sel1 = sel1.col(t);
        tp.sel2 = sel2.col(t);
        for (int c = 0; c < depth_; ++c) {
          tp.thresholds[c] = th(0, t * depth_ + c);
          tp.log_slopes[c] = ls(0, t * depth_ + c);
        }
        tp.leaf_weights =
            w.middleRows(static_cast<Eigen::Index>(t) * (1 << depth_),
                         1 << depth_);
      }
    }
    m.f0 = g_.value(f0_)(0, 0);
  }

  // Lazily fills thresholds from values the splits actually see: for every
  // gate, a uniformly drawn row of the current batch's selected values.
  void init_thresholds_from_batch(ModelState& m, Rng& rng) {
    if (m.thresholds_initialized) return;
    for (int l = 0; l < n_layers_; ++l) {
      const int gnode = data_.gdepth[static_cast<std::size_t>(l)];
      g_.forward(gnode);
      const Matrix& gd = g_.value(gnode);
      Matrix& th = g_.mutable_value(layers_[static_cast<std::size_t>(l)].thresholds);
      for (Eigen::Index j = 0; j < gd.cols(); ++j) {
        th(0, j) = gd(static_cast<Eigen::Index>(
                          rng.uniform_index(static_cast<std::uint64_t>(gd.rows()))),
                      j);
      }
    }
    m.thresholds_initialized = true;
    store_params(m);
  }

  int n_layers() const { return n_layers_; }
  int trees_per_layer() const { return trees_; }

  int counts_data(int layer) const { return data_.counts[static_cast<std::size_t>(layer)]; }
  int counts_uniform(int layer) const { return unif_.counts[static_cast<std::size_t>(layer)]; }

 private:
  struct LayerNodes {
    int sel1 = -1, sel2 = -1;
    int thresholds = -1, log_slopes = -1;
    int leaf_weights = -1;
    int mask1 = -1, mask2 = -1;
    int p1 = -1, p2 = -1;
    int token = -1;
    int pid = -1;
  };

  struct Chain {
    int x = -1;
    std::vector<int> gdepth, e, out, counts;
  };

  void require_mode(Mode m, const char* what) const {
    if (mode_ != m) {
      throw ContractError(std::string(what) + ": wrong graph mode");
    }
  }

  const Matrix& pid_aux(int layer, int which) const {
    require_mode(Mode::kUnsupervised, "sparsity stats");
    const Node& n = g_.node(layers_[static_cast<std::size_t>(layer)].pid);
    if (n.aux.size() < 4) {
      throw ContractError("sparsity stats: run a forward pass first");
    }
    return n.aux[static_cast<std::size_t>(which)];
  }

  void build(const ModelState& model, int npos);
  Chain build_chain(int x_node);

  Mode mode_;
  int n_features_, n_layers_, trees_, depth_, resp_;
  Graph g_;
  std::shared_ptr<std::vector<std::vector<FeatureSet>>> tree_sets_;
  std::vector<LayerNodes> layers_;
  std::vector<std::vector<Candidate>> cands_;  // per layer
  Chain data_, unif_;
  int temperature_ = -1;
  int x_data_ = -1, x_unif_ = -1;
  int drop_mask_ = -1;
  int labels_ = -1;
  int f0_ = -1;
  int scores_ = -1;
  int loss_ = -1;
};

inline void ModelGraph::build(const ModelState& model, int npos) {
  const int m = trees_;
  const int leaves = 1 << depth_;
  tree_sets_ = std::make_shared<std::vector<std::vector<FeatureSet>>>(
      static_cast<std::size_t>(n_layers_),
      std::vector<FeatureSet>(static_cast<std::size_t>(m)));

  temperature_ = g_.input(Matrix::Constant(1, 1, 1.0));

  // Wiring and parameters, batch independent.
  int prev_token = -1;
  for (int l = 0; l < n_layers_; ++l) {
    cands_.push_back(layer_candidates(model, l));
    const int n_cands = static_cast<int>(cands_[static_cast<std::size_t>(l)].size());
    LayerNodes ln;
    ln.sel1 = g_.param(Matrix::Zero(n_cands, m));
    ln.sel2 = g_.param(Matrix::Zero(n_cands, m));
    ln.thresholds = g_.param(Matrix::Zero(1, m * depth_));
    ln.log_slopes = g_.param(Matrix::Zero(1, m * depth_));
    ln.leaf_weights = g_.param(Matrix::Zero(m * leaves, resp_));

    Matrix base(n_cands, m);
    std::vector<std::vector<char>> base_cols;
    for (int t = 0; t < m; ++t) {
      const std::vector<char> bm = base_candidate_mask(
          model, l,
          model.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)]);
      for (int k = 0; k < n_cands; ++k) base(k, t) = bm[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
      base_cols.push_back(bm);
    }
    ln.mask1 = g_.constant(base);
    ln.p1 = g_.masked_entmax_cols(ln.sel1, temperature_, ln.mask1);

    // Head-2 mask refreshes from head 1's current argmax and the wiring sets
    // of earlier layers each forward pass.
    auto sets = tree_sets_;
    auto cands_l = std::make_shared<std::vector<Candidate>>(cands_[static_cast<std::size_t>(l)]);
    auto base_l = std::make_shared<std::vector<std::vector<char>>>(base_cols);
    std::vector<int> mask_inputs = {ln.p1};
    if (prev_token >= 0) mask_inputs.push_back(prev_token);
    ln.mask2 = g_.opaque(mask_inputs, [sets, cands_l, base_l, m,
                                       n_cands](Graph& gg, Node& nn) {
      const Matrix& p1 = gg.value(nn.inputs[0]);
      std::vector<FeatureSet> cand_sets(cands_l->size());
      for (std::size_t k = 0; k < cands_l->size(); ++k) {
        const Candidate& c = (*cands_l)[k];
        cand_sets[k] = c.is_raw ? FeatureSet::single(c.feature)
                                : (*sets)[static_cast<std::size_t>(c.layer)]
                                         [static_cast<std::size_t>(c.tree)];
      }
      nn.value.resize(n_cands, m);
      for (int t = 0; t < m; ++t) {
        int arg1 = -1;
        for (int k = 0; k < n_cands; ++k) {
          if (p1(k, t) > 0.0 && (arg1 < 0 || p1(k, t) > p1(arg1, t))) arg1 = k;
        }
        if (arg1 < 0) throw ContractError("head-1 weights are all zero");
        const std::vector<char> allowed =
            compatibility_mask(cand_sets, (*base_l)[static_cast<std::size_t>(t)], arg1);
        for (int k = 0; k < n_cands; ++k) {
          nn.value(k, t) = allowed[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
        }
      }
    });
    ln.p2 = g_.masked_entmax_cols(ln.sel2, temperature_, ln.mask2);

    // Token: publish this layer's effective feature sets for later layers.
    const int layer_idx = l;
    std::vector<int> token_inputs = {ln.p1, ln.p2};
    if (prev_token >= 0) token_inputs.push_back(prev_token);
    ln.token = g_.opaque(token_inputs, [sets, cands_l, layer_idx, m,
                                        n_cands](Graph& gg, Node& nn) {
      const Matrix& p1 = gg.value(nn.inputs[0]);
      const Matrix& p2 = gg.value(nn.inputs[1]);
      for (int t = 0; t < m; ++t) {
        int arg1 = -1, arg2 = -1;
        for (int k = 0; k < n_cands; ++k) {
          if (p1(k, t) > 0.0 && (arg1 < 0 || p1(k, t) > p1(arg1, t))) arg1 = k;
          if (p2(k, t) > 0.0 && (arg2 < 0 || p2(k, t) > p2(arg2, t))) arg2 = k;
        }
        if (arg1 < 0 || arg2 < 0) {
          throw ContractError("selection weights are all zero");
        }
        auto set_of = [&](int k) {
          const Candidate& c = (*cands_l)[static_cast<std::size_t>(k)];
          return c.is_raw ? FeatureSet::single(c.feature)
                          : (*sets)[static_cast<std::size_t>(c.layer)]
                                   [static_cast<std::size_t>(c.tree)];
        };
        FeatureSet fs = set_of(arg1);
        const FeatureSet fs2 = set_of(arg2);
        for (int f : {fs2.a, fs2.b}) {
          if (f >= 0) fs.insert(f);
        }
        (*sets)[static_cast<std::size_t>(layer_idx)][static_cast<std::size_t>(t)] = fs;
      }
      nn.value = Matrix::Zero(1, 1);
    });
    prev_token = ln.token;
    layers_.push_back(ln);
  }

  f0_ = g_.param(Matrix::Zero(1, 1));

  // Chains.
  x_data_ = g_.input(0, n_features_);
  data_ = build_chain(x_data_);

  std::vector<int> primaries;
  for (int l = 0; l < n_layers_; ++l) {
    std::vector<int> idx;
    for (int t = 0; t < m; ++t) idx.push_back(t * resp_);
    primaries.push_back(g_.gather_cols(data_.out[static_cast<std::size_t>(l)], idx));
  }
  scores_ = g_.add_scalar(g_.rowmean(g_.hconcat(primaries)), f0_);

  if (mode_ == Mode::kUnsupervised) {
    x_unif_ = g_.input(0, n_features_);
    unif_ = build_chain(x_unif_);
    drop_mask_ = g_.input(Matrix::Ones(1, n_layers_ * m));
    const double keep = 1.0 - model.config.dropout_rate;
    int total = -1;
    for (int l = 0; l < n_layers_; ++l) {
      std::vector<int> idx;
      for (int t = 0; t < m; ++t) idx.push_back(l * m + t);
      const int dm_l = g_.gather_cols(drop_mask_, idx);
      layers_[static_cast<std::size_t>(l)].pid = g_.pid_moment(
          data_.counts[static_cast<std::size_t>(l)],
          unif_.counts[static_cast<std::size_t>(l)], dm_l, m, depth_,
          model.config.smoothing_delta, keep);
      total = total < 0 ? layers_[static_cast<std::size_t>(l)].pid
                        : g_.add(total, layers_[static_cast<std::size_t>(l)].pid);
    }
    loss_ = total;
  } else if (mode_ == Mode::kFinetuneAuc) {
    if (npos < 1) throw InvalidInputError("finetune graph: npos < 1");
    loss_ = g_.pairwise_hinge(scores_, npos);
  } else if (mode_ == Mode::kFinetuneBce) {
    labels_ = g_.input(0, 1);
    loss_ = g_.bce_with_logits(scores_, labels_);
  }
}

inline ModelGraph::Chain ModelGraph::build_chain(int x_node) {
  const int m = trees_;
  Chain ch;
  ch.x = x_node;
  std::vector<int> inputs_parts = {x_node};
  for (int l = 0; l < n_layers_; ++l) {
    const LayerNodes& ln = layers_[static_cast<std::size_t>(l)];
    const int in_l = inputs_parts.size() == 1 ? x_node : g_.hconcat(inputs_parts);
    const int g1 = g_.matmul(in_l, ln.p1);
    const int g2 = g_.matmul(in_l, ln.p2);
    const int gboth = g_.hconcat({g1, g2});
    std::vector<int> idx(static_cast<std::size_t>(m) * static_cast<std::size_t>(depth_));
    for (int t = 0; t < m; ++t) {
      for (int c = 0; c < depth_; ++c) {
        idx[static_cast<std::size_t>(t * depth_ + c)] = (c % 2 == 0 ? 0 : m) + t;
      }
    }
    const int gdepth = g_.gather_cols(gboth, idx);
    const int h = g_.split_entmoid(gdepth, ln.thresholds, ln.log_slopes,
                                   temperature_);
    const int e = g_.leaf_expand(h, m, depth_);
    const int out = g_.tree_response(e, ln.leaf_weights, m, depth_, resp_);
    ch.gdepth.push_back(gdepth);
    ch.e.push_back(e);
    ch.out.push_back(out);
    ch.counts.push_back(g_.colsum(e));
    inputs_parts.push_back(out);
  }
  return ch;
}

// ---------------------------------------------------------------------------
// Convenience forward passes.
// ---------------------------------------------------------------------------

struct ForwardResult {
  Vector scores;
  std::vector<Matrix> leaf_memberships;  // per layer, [batch x trees*leaves]
};

// Soft forward at the given temperature; input in original units.
inline ForwardResult soft_forward(const ModelState& m, const Matrix& x,
                                  double temperature) {
  ModelGraph mg(m, ModelGraph::Mode::kScore);
  mg.set_temperature(temperature);
  mg.set_data(minmax_transform(x, m.minmax));
  mg.graph().forward(mg.scores());
  ForwardResult out;
  out.scores = mg.graph().value(mg.scores()).col(0);
  for (int l = 0; l < m.config.layers; ++l) {
    out.leaf_memberships.push_back(mg.graph().value(mg.data_memberships(l)));
  }
  return out;
}

// Soft per-leaf occupancy counts per layer: [1 x trees*leaves].
inline std::vector<Matrix> leaf_counts(const ModelState& m, const Matrix& x,
                                       double temperature) {
  const ForwardResult fr = soft_forward(m, x, temperature);
  std::vector<Matrix> out;
  for (const Matrix& e : fr.leaf_memberships) {
    out.push_back(e.colwise().sum());
  }
  return out;
}

}  // namespace diad
