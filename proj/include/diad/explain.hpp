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
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/model.hpp"

namespace diad {

// ---------------------------------------------------------------------------
// Exact additive decomposition of a hardened ensemble.
//
// Every hardened tree is a piecewise-constant function of its one or two
// effective raw features, so the whole score is a GA2M: bias plus per-feature
// step curves plus per-pair step surfaces. Components are represented on
// breakpoint grids in original units; evaluation reproduces the hard score
// exactly. Interactions are purified against the stored subsample's marginal
// cell weights (weighted row and column means move into the main effects,
// whose weighted means then move into the bias).
// ---------------------------------------------------------------------------

struct MainComponent {
  int feature = -1;
  std::vector<double> breaks;  // strictly inside (min, max), sorted
  std::vector<double> values;  // one per cell, breaks.size() + 1
  double centering_offset = 0.0;  // weighted mean moved into the bias
};

struct PairComponent {
  int feature_a = -1, feature_b = -1;  // a < b
  std::vector<double> breaks_a, breaks_b;
  Matrix values;  // (cells_a x cells_b)
  double centering_offset = 0.0;  // weighted grand mean moved into the bias
};

struct Decomposition {
  double bias = 0.0;
  int n_features = 0;
  std::vector<double> lo, hi;  // per-feature clamp window, original units
  std::vector<MainComponent> mains;
  std::vector<PairComponent> pairs;
};

namespace detail {

// Cell index under the hard split convention: a value equal to a breakpoint
// belongs to the cell on its right. Out-of-window values clamp.
inline int cell_of(const std::vector<double>& breaks, double lo, double hi,
                   double x) {
  const double v = std::clamp(x, lo, hi);
  return static_cast<int>(
      std::upper_bound(breaks.begin(), breaks.end(), v) - breaks.begin());
}

inline std::vector<double> cell_midpoints(const std::vector<double>& breaks,
                                          double lo, double hi) {
  std::vector<double> edges;
  edges.push_back(lo);
  edges.insert(edges.end(), breaks.begin(), breaks.end());
  edges.push_back(hi);
  std::vector<double> mids;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    mids.push_back(0.5 * (edges[i] + edges[i + 1]));
  }
  return mids;
}

// Normalized per-cell sample mass; uniform when no sample rows are stored.
inline std::vector<double> cell_weights(const Matrix& sample, int feature,
                                        const std::vector<double>& breaks,
                                        double lo, double hi) {
  std::vector<double> w(breaks.size() + 1, 0.0);
  if (sample.rows() == 0) {
    const double u = 1.0 / static_cast<double>(w.size());
    for (double& v : w) v = u;
    return w;
  }
  for (Eigen::Index r = 0; r < sample.rows(); ++r) {
    w[static_cast<std::size_t>(cell_of(breaks, lo, hi, sample(r, feature)))] +=
        1.0;
  }
  for (double& v : w) v /= static_cast<double>(sample.rows());
  return w;
}

// All (feature, location) points where a tree's response can change, in
// original units. A split on a raw feature jumps at its untransformed
// threshold; a split on another tree's output can only jump where that tree
// jumps, so inner breakpoints propagate outward (a superset is fine).
inline const std::set<std::pair<int, double>>& tree_jumps(
    const HardModel& hm, const MinMaxStats& mm, int layer, int tree,
    std::vector<std::vector<std::set<std::pair<int, double>>>>& memo,
    std::vector<std::vector<char>>& done) {
  auto& out = memo[static_cast<std::size_t>(layer)][static_cast<std::size_t>(tree)];
  if (done[static_cast<std::size_t>(layer)][static_cast<std::size_t>(tree)]) {
    return out;
  }
  done[static_cast<std::size_t>(layer)][static_cast<std::size_t>(tree)] = 1;
  const HardTree& ht =
      hm.layers[static_cast<std::size_t>(layer)][static_cast<std::size_t>(tree)];
  for (int c = 0; c < hm.depth; ++c) {
    const int cand = ht.split_cand[static_cast<std::size_t>(c)];
    if (cand < hm.n_features) {
      const double lo = mm.min[cand], hi = mm.max[cand];
      if (hi > lo) {
        const double x = minmax_untransform(ht.thresholds[c], cand, mm);
        if (x > lo && x < hi) out.insert({cand, x});
      }
    } else {
      const int flat = cand - hm.n_features;
      const int resp = hm.responses;
      const int inner_layer = flat / (hm.trees_per_layer * resp);
      const int inner_tree = (flat / resp) % hm.trees_per_layer;
      const auto& inner =
          tree_jumps(hm, mm, inner_layer, inner_tree, memo, done);
      out.insert(inner.begin(), inner.end());
    }
  }
  return out;
}

// Sum of the per-tree primary contributions of `group` trees at each row.
inline std::vector<double> group_values(const HardModel& hm,
                                        const HardEval& he,
                                        const std::vector<std::pair<int, int>>& group) {
  const double norm = static_cast<double>(hm.layers.size()) *
                      static_cast<double>(hm.trees_per_layer);
  std::vector<double> out(static_cast<std::size_t>(he.scores.size()), 0.0);
  for (const auto& [l, t] : group) {
    const HardTree& ht =
        hm.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)];
    const Eigen::MatrixXi& leaves = he.leaf_index[static_cast<std::size_t>(l)];
    for (Eigen::Index r = 0; r < leaves.rows(); ++r) {
      out[static_cast<std::size_t>(r)] +=
          ht.leaf_weights(leaves(r, t), 0) / norm;
    }
  }
  return out;
}

}  // namespace detail

inline Decomposition decompose(const ModelState& m) {
  const HardModel hm = harden(m);
  if (!m.minmax.fitted()) {
    throw ContractError("decompose: model has no fitted feature window");
  }
  const int d = m.n_features;
  const int n_layers = static_cast<int>(hm.layers.size());
  const int trees = hm.trees_per_layer;

  Decomposition dec;
  dec.bias = m.f0;
  dec.n_features = d;
  for (int j = 0; j < d; ++j) {
    dec.lo.push_back(m.minmax.min[j]);
    dec.hi.push_back(m.minmax.max[j]);
  }

  // Group trees by their exact effective feature set.
  std::map<std::pair<int, int>, std::vector<std::pair<int, int>>> groups;
  for (int l = 0; l < n_layers; ++l) {
    for (int t = 0; t < trees; ++t) {
      const FeatureSet& fs =
          hm.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(t)].features;
      const std::pair<int, int> key =
          fs.size() == 1 ? std::pair<int, int>{fs.a, -1}
                         : std::pair<int, int>{fs.a, fs.b};
      groups[key].push_back({l, t});
    }
  }

  // Breakpoints: per group on its own axes, union per feature for the mains.
  std::vector<std::vector<std::set<std::pair<int, double>>>> memo(
      static_cast<std::size_t>(n_layers),
      std::vector<std::set<std::pair<int, double>>>(static_cast<std::size_t>(trees)));
  std::vector<std::vector<char>> done(
      static_cast<std::size_t>(n_layers),
      std::vector<char>(static_cast<std::size_t>(trees), 0));
  const auto axis_breaks = [&](const std::vector<std::pair<int, int>>& group,
                               int feature) {
    std::set<double> pts;
    for (const auto& [l, t] : group) {
      for (const auto& [f, x] : detail::tree_jumps(hm, m.minmax, l, t, memo, done)) {
        if (f == feature) pts.insert(x);
      }
    }
    return std::vector<double>(pts.begin(), pts.end());
  };

  std::vector<std::set<double>> union_breaks(static_cast<std::size_t>(d));
  std::map<std::pair<int, int>, std::pair<std::vector<double>, std::vector<double>>>
      pair_axes;
  for (const auto& [key, group] : groups) {
    if (key.second < 0) {
      const std::vector<double> br = axis_breaks(group, key.first);
      union_breaks[static_cast<std::size_t>(key.first)].insert(br.begin(), br.end());
    } else {
      const std::vector<double> ba = axis_breaks(group, key.first);
      const std::vector<double> bb = axis_breaks(group, key.second);
      union_breaks[static_cast<std::size_t>(key.first)].insert(ba.begin(), ba.end());
      union_breaks[static_cast<std::size_t>(key.second)].insert(bb.begin(), bb.end());
      pair_axes[key] = {ba, bb};
    }
  }

  // Main components on per-feature union grids (created lazily for features
  // that only appear through interaction folds).
  std::vector<int> main_index(static_cast<std::size_t>(d), -1);
  const auto ensure_main = [&](int feature) -> MainComponent& {
    int& idx = main_index[static_cast<std::size_t>(feature)];
    if (idx < 0) {
      MainComponent mc;
      mc.feature = feature;
      mc.breaks.assign(union_breaks[static_cast<std::size_t>(feature)].begin(),
                       union_breaks[static_cast<std::size_t>(feature)].end());
      mc.values.assign(mc.breaks.size() + 1, 0.0);
      idx = static_cast<int>(dec.mains.size());
      dec.mains.push_back(std::move(mc));
    }
    return dec.mains[static_cast<std::size_t>(idx)];
  };

  // Evaluate a group's summed contribution on a batch of synthetic rows.
  const auto evaluate_rows = [&](const Matrix& synth,
                                 const std::vector<std::pair<int, int>>& group) {
    const HardEval he = hard_forward(hm, minmax_transform(synth, m.minmax));
    return detail::group_values(hm, he, group);
  };

  for (const auto& [key, group] : groups) {
    if (key.second < 0) {
      MainComponent& mc = ensure_main(key.first);
      const std::vector<double> mids = detail::cell_midpoints(
          mc.breaks, dec.lo[static_cast<std::size_t>(key.first)],
          dec.hi[static_cast<std::size_t>(key.first)]);
      Matrix synth = Matrix::Zero(static_cast<Eigen::Index>(mids.size()), d);
      for (std::size_t i = 0; i < mids.size(); ++i) {
        synth(static_cast<Eigen::Index>(i), key.first) = mids[i];
      }
      const std::vector<double> vals = evaluate_rows(synth, group);
      for (std::size_t i = 0; i < vals.size(); ++i) mc.values[i] += vals[i];
    } else {
      PairComponent pc;
      pc.feature_a = key.first;
      pc.feature_b = key.second;
      pc.breaks_a = pair_axes[key].first;
      pc.breaks_b = pair_axes[key].second;
      const std::vector<double> ma = detail::cell_midpoints(
          pc.breaks_a, dec.lo[static_cast<std::size_t>(pc.feature_a)],
          dec.hi[static_cast<std::size_t>(pc.feature_a)]);
      const std::vector<double> mb = detail::cell_midpoints(
          pc.breaks_b, dec.lo[static_cast<std::size_t>(pc.feature_b)],
          dec.hi[static_cast<std::size_t>(pc.feature_b)]);
      Matrix synth = Matrix::Zero(
          static_cast<Eigen::Index>(ma.size() * mb.size()), d);
      for (std::size_t i = 0; i < ma.size(); ++i) {
        for (std::size_t j = 0; j < mb.size(); ++j) {
          const Eigen::Index row = static_cast<Eigen::Index>(i * mb.size() + j);
          synth(row, pc.feature_a) = ma[i];
          synth(row, pc.feature_b) = mb[j];
        }
      }
      const std::vector<double> vals = evaluate_rows(synth, group);
      pc.values.resize(static_cast<Eigen::Index>(ma.size()),
                       static_cast<Eigen::Index>(mb.size()));
      for (std::size_t i = 0; i < ma.size(); ++i) {
        for (std::size_t j = 0; j < mb.size(); ++j) {
          pc.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
              vals[i * mb.size() + j];
        }
      }
      dec.pairs.push_back(std::move(pc));
    }
  }

  // Purify interactions: weighted row and column means fold into the mains,
  // the weighted grand mean folds into the bias. Product marginal weights
  // make a single pass exact.
  for (PairComponent& pc : dec.pairs) {
    const int a = pc.feature_a, b = pc.feature_b;
    const std::vector<double> wa = detail::cell_weights(
        m.explain_sample, a, pc.breaks_a, dec.lo[static_cast<std::size_t>(a)],
        dec.hi[static_cast<std::size_t>(a)]);
    const std::vector<double> wb = detail::cell_weights(
        m.explain_sample, b, pc.breaks_b, dec.lo[static_cast<std::size_t>(b)],
        dec.hi[static_cast<std::size_t>(b)]);
    const Eigen::Index na = pc.values.rows(), nb = pc.values.cols();
    Vector r = Vector::Zero(na), c = Vector::Zero(nb);
    for (Eigen::Index i = 0; i < na; ++i) {
      for (Eigen::Index j = 0; j < nb; ++j) {
        r[i] += wb[static_cast<std::size_t>(j)] * pc.values(i, j);
        c[j] += wa[static_cast<std::size_t>(i)] * pc.values(i, j);
      }
    }
    double g = 0.0;
    for (Eigen::Index i = 0; i < na; ++i) g += wa[static_cast<std::size_t>(i)] * r[i];
    pc.centering_offset = g;
    for (Eigen::Index i = 0; i < na; ++i) {
      for (Eigen::Index j = 0; j < nb; ++j) {
        pc.values(i, j) -= r[i] + c[j] - g;
      }
    }
    MainComponent& main_a = ensure_main(a);
    const std::vector<double> mids_a = detail::cell_midpoints(
        main_a.breaks, dec.lo[static_cast<std::size_t>(a)],
        dec.hi[static_cast<std::size_t>(a)]);
    for (std::size_t i = 0; i < main_a.values.size(); ++i) {
      main_a.values[i] += r[detail::cell_of(pc.breaks_a,
                                            dec.lo[static_cast<std::size_t>(a)],
                                            dec.hi[static_cast<std::size_t>(a)],
                                            mids_a[i])] -
                          g;
    }
    MainComponent& main_b = ensure_main(b);
    const std::vector<double> mids_b = detail::cell_midpoints(
        main_b.breaks, dec.lo[static_cast<std::size_t>(b)],
        dec.hi[static_cast<std::size_t>(b)]);
    for (std::size_t j = 0; j < main_b.values.size(); ++j) {
      main_b.values[j] += c[detail::cell_of(pc.breaks_b,
                                            dec.lo[static_cast<std::size_t>(b)],
                                            dec.hi[static_cast<std::size_t>(b)],
                                            mids_b[j])] -
                          g;
    }
    dec.bias += g;
  }

  // Center the mains against the subsample marginals.
  for (MainComponent& mc : dec.mains) {
    const std::vector<double> w = detail::cell_weights(
        m.explain_sample, mc.feature, mc.breaks,
        dec.lo[static_cast<std::size_t>(mc.feature)],
        dec.hi[static_cast<std::size_t>(mc.feature)]);
    double mu = 0.0;
    for (std::size_t i = 0; i < mc.values.size(); ++i) mu += w[i] * mc.values[i];
    for (double& v : mc.values) v -= mu;
    mc.centering_offset = mu;
    dec.bias += mu;
  }
  return dec;
}

inline double eval_main(const Decomposition& dec, const MainComponent& mc,
                        double x) {
  return mc.values[static_cast<std::size_t>(detail::cell_of(
      mc.breaks, dec.lo[static_cast<std::size_t>(mc.feature)],
      dec.hi[static_cast<std::size_t>(mc.feature)], x))];
}

inline double eval_pair(const Decomposition& dec, const PairComponent& pc,
                        double xa, double xb) {
  const int i = detail::cell_of(pc.breaks_a,
                                dec.lo[static_cast<std::size_t>(pc.feature_a)],
                                dec.hi[static_cast<std::size_t>(pc.feature_a)], xa);
  const int j = detail::cell_of(pc.breaks_b,
                                dec.lo[static_cast<std::size_t>(pc.feature_b)],
                                dec.hi[static_cast<std::size_t>(pc.feature_b)], xb);
  return pc.values(i, j);
}

// Full additive reconstruction; equals the hard score for every input.
inline double eval_decomposition(const Decomposition& dec, const Vector& x) {
  if (x.size() != dec.n_features) {
    throw SchemaError("eval_decomposition: feature count mismatch");
  }
  double total = dec.bias;
  for (const MainComponent& mc : dec.mains) {
    total += eval_main(dec, mc, x[mc.feature]);
  }
  for (const PairComponent& pc : dec.pairs) {
    total += eval_pair(dec, pc, x[pc.feature_a], x[pc.feature_b]);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Export structures: shape curves and surfaces on display grids.
// ---------------------------------------------------------------------------

struct ShapeCurve {
  int feature = -1;
  std::string name;
  std::vector<double> edges;    // sorted, first = min, last = max
  std::vector<double> values;   // per interval, edges.size() - 1
  std::vector<double> density;  // per interval, sums to 1
  double centering_offset = 0.0;
};

struct ShapeSurface {
  int feature_a = -1, feature_b = -1;
  std::string name_a, name_b;
  std::vector<double> edges_a, edges_b;
  Matrix values;   // (intervals_a x intervals_b)
  Matrix density;  // joint subsample mass per cell
  double centering_offset = 0.0;
};

struct ExplanationGraph {
  double bias = 0.0;
  std::vector<ShapeCurve> mains;     // one per feature, flat when unused
  std::vector<ShapeSurface> pairs;   // one per interacting feature pair
};

namespace detail {

inline std::vector<double> display_edges(double lo, double hi,
                                         const std::vector<double>& breaks,
                                         int grid_size) {
  std::set<double> pts;
  pts.insert(lo);
  pts.insert(hi);
  if (hi > lo) {
    for (int k = 1; k + 1 < grid_size + 1; ++k) {
      pts.insert(lo + (hi - lo) * static_cast<double>(k) /
                          static_cast<double>(grid_size - 1));
    }
  }
  for (double b : breaks) {
    if (b > lo && b < hi) pts.insert(b);
  }
  return std::vector<double>(pts.begin(), pts.end());
}

inline std::vector<double> interval_density(const Matrix& sample, int feature,
                                            const std::vector<double>& edges) {
  std::vector<double> out(edges.size() > 1 ? edges.size() - 1 : 1, 0.0);
  if (sample.rows() == 0 || edges.size() < 2) return out;
  const std::vector<double> inner(edges.begin() + 1, edges.end() - 1);
  for (Eigen::Index r = 0; r < sample.rows(); ++r) {
    out[static_cast<std::size_t>(
        cell_of(inner, edges.front(), edges.back(), sample(r, feature)))] += 1.0;
  }
  for (double& v : out) v /= static_cast<double>(sample.rows());
  return out;
}

}  // namespace detail

inline ExplanationGraph build_explanation_graph(const ModelState& m,
                                                int grid_size = 101) {
  if (grid_size < 2) {
    throw InvalidInputError("build_explanation_graph: grid_size must be >= 2");
  }
  const Decomposition dec = decompose(m);
  ExplanationGraph eg;
  eg.bias = dec.bias;

  std::vector<const MainComponent*> by_feature(
      static_cast<std::size_t>(dec.n_features), nullptr);
  for (const MainComponent& mc : dec.mains) {
    by_feature[static_cast<std::size_t>(mc.feature)] = &mc;
  }
  for (int j = 0; j < dec.n_features; ++j) {
    ShapeCurve sc;
    sc.feature = j;
    sc.name = m.feature_names[static_cast<std::size_t>(j)];
    const std::vector<double> breaks =
        by_feature[static_cast<std::size_t>(j)] == nullptr
            ? std::vector<double>{}
            : by_feature[static_cast<std::size_t>(j)]->breaks;
    sc.edges = detail::display_edges(dec.lo[static_cast<std::size_t>(j)],
                                     dec.hi[static_cast<std::size_t>(j)], breaks,
                                     grid_size);
    for (std::size_t i = 0; i + 1 < sc.edges.size(); ++i) {
      const double mid = 0.5 * (sc.edges[i] + sc.edges[i + 1]);
      sc.values.push_back(by_feature[static_cast<std::size_t>(j)] == nullptr
                              ? 0.0
                              : eval_main(dec, *by_feature[static_cast<std::size_t>(j)],
                                          mid));
    }
    if (sc.values.empty()) sc.values.push_back(0.0);  // degenerate window
    sc.density = detail::interval_density(m.explain_sample, j, sc.edges);
    if (by_feature[static_cast<std::size_t>(j)] != nullptr) {
      sc.centering_offset = by_feature[static_cast<std::size_t>(j)]->centering_offset;
    }
    eg.mains.push_back(std::move(sc));
  }

  for (const PairComponent& pc : dec.pairs) {
    ShapeSurface ss;
    ss.feature_a = pc.feature_a;
    ss.feature_b = pc.feature_b;
    ss.name_a = m.feature_names[static_cast<std::size_t>(pc.feature_a)];
    ss.name_b = m.feature_names[static_cast<std::size_t>(pc.feature_b)];
    ss.centering_offset = pc.centering_offset;
    ss.edges_a = detail::display_edges(
        dec.lo[static_cast<std::size_t>(pc.feature_a)],
        dec.hi[static_cast<std::size_t>(pc.feature_a)], pc.breaks_a, grid_size);
    ss.edges_b = detail::display_edges(
        dec.lo[static_cast<std::size_t>(pc.feature_b)],
        dec.hi[static_cast<std::size_t>(pc.feature_b)], pc.breaks_b, grid_size);
    const std::size_t na = ss.edges_a.size() - 1, nb = ss.edges_b.size() - 1;
    ss.values.resize(static_cast<Eigen::Index>(na), static_cast<Eigen::Index>(nb));
    for (std::size_t i = 0; i < na; ++i) {
      const double ma = 0.5 * (ss.edges_a[i] + ss.edges_a[i + 1]);
      for (std::size_t j = 0; j < nb; ++j) {
        const double mb = 0.5 * (ss.edges_b[j] + ss.edges_b[j + 1]);
        ss.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            eval_pair(dec, pc, ma, mb);
      }
    }
    ss.density = Matrix::Zero(static_cast<Eigen::Index>(na),
                              static_cast<Eigen::Index>(nb));
    if (m.explain_sample.rows() > 0 && ss.edges_a.size() >= 2 &&
        ss.edges_b.size() >= 2) {
      const std::vector<double> ia(ss.edges_a.begin() + 1, ss.edges_a.end() - 1);
      const std::vector<double> ib(ss.edges_b.begin() + 1, ss.edges_b.end() - 1);
      for (Eigen::Index r = 0; r < m.explain_sample.rows(); ++r) {
        const int ca = detail::cell_of(ia, ss.edges_a.front(), ss.edges_a.back(),
                                       m.explain_sample(r, pc.feature_a));
        const int cb = detail::cell_of(ib, ss.edges_b.front(), ss.edges_b.back(),
                                       m.explain_sample(r, pc.feature_b));
        ss.density(ca, cb) += 1.0 / static_cast<double>(m.explain_sample.rows());
      }
    }
    eg.pairs.push_back(std::move(ss));
  }
  return eg;
}

inline ShapeCurve extract_main_effect(const ModelState& m, int feature,
                                      int grid_size = 101) {
  if (feature < 0 || feature >= m.n_features) {
    throw InvalidInputError("extract_main_effect: feature out of range");
  }
  ExplanationGraph eg = build_explanation_graph(m, grid_size);
  return eg.mains[static_cast<std::size_t>(feature)];
}

inline ShapeSurface extract_interaction(const ModelState& m, int feature_a,
                                        int feature_b, int grid_size = 101) {
  if (feature_a < 0 || feature_a >= m.n_features || feature_b < 0 ||
      feature_b >= m.n_features || feature_a == feature_b) {
    throw InvalidInputError("extract_interaction: bad feature pair");
  }
  const int a = std::min(feature_a, feature_b);
  const int b = std::max(feature_a, feature_b);
  ExplanationGraph eg = build_explanation_graph(m, grid_size);
  for (ShapeSurface& ss : eg.pairs) {
    if (ss.feature_a == a && ss.feature_b == b) return ss;
  }
  // No trees couple this pair: a flat zero surface on the display grid.
  ShapeSurface ss;
  ss.feature_a = a;
  ss.feature_b = b;
  ss.name_a = m.feature_names[static_cast<std::size_t>(a)];
  ss.name_b = m.feature_names[static_cast<std::size_t>(b)];
  ss.edges_a = detail::display_edges(m.minmax.min[a], m.minmax.max[a], {},
                                     grid_size);
  ss.edges_b = detail::display_edges(m.minmax.min[b], m.minmax.max[b], {},
                                     grid_size);
  const Eigen::Index na = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(ss.edges_a.size()) - 1);
  const Eigen::Index nb = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(ss.edges_b.size()) - 1);
  ss.values = Matrix::Zero(na, nb);
  ss.density = Matrix::Zero(na, nb);
  return ss;
}

// ---------------------------------------------------------------------------
// Per-sample attribution.
// ---------------------------------------------------------------------------

struct AttributionTerm {
  std::string name;
  std::vector<int> features;  // one entry for mains, two for interactions
  double value = 0.0;
};

struct Attribution {
  double bias = 0.0;
  double total = 0.0;  // bias plus every component, equals the hard score
  std::vector<AttributionTerm> terms;
};

// Additive attribution of one sample's score, largest magnitudes first.
// top_k < 0 keeps every term; the total always includes all of them.
inline Attribution explain_sample(const ModelState& m, const Vector& x,
                                  int top_k = -1) {
  if (x.size() != m.n_features) {
    throw SchemaError("explain_sample: expected " +
                      std::to_string(m.n_features) + " features, got " +
                      std::to_string(x.size()));
  }
  const Decomposition dec = decompose(m);
  Attribution attr;
  attr.bias = dec.bias;
  attr.total = dec.bias;
  for (const MainComponent& mc : dec.mains) {
    AttributionTerm term;
    term.name = m.feature_names[static_cast<std::size_t>(mc.feature)];
    term.features = {mc.feature};
    term.value = eval_main(dec, mc, x[mc.feature]);
    attr.total += term.value;
    attr.terms.push_back(std::move(term));
  }
  for (const PairComponent& pc : dec.pairs) {
    AttributionTerm term;
    term.name = m.feature_names[static_cast<std::size_t>(pc.feature_a)] + ":" +
                m.feature_names[static_cast<std::size_t>(pc.feature_b)];
    term.features = {pc.feature_a, pc.feature_b};
    term.value = eval_pair(dec, pc, x[pc.feature_a], x[pc.feature_b]);
    attr.total += term.value;
    attr.terms.push_back(std::move(term));
  }
  std::stable_sort(attr.terms.begin(), attr.terms.end(),
                   [](const AttributionTerm& a, const AttributionTerm& b) {
                     return std::abs(a.value) > std::abs(b.value);
                   });
  if (top_k >= 0 && static_cast<std::size_t>(top_k) < attr.terms.size()) {
    attr.terms.resize(static_cast<std::size_t>(top_k));
  }
  return attr;
}

}  // namespace diad
