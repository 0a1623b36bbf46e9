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
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diad/common.hpp"

namespace diad {

struct Dataset {
  Matrix X;  // rows are samples, columns are features
  std::vector<std::string> feature_names;
  Vector labels;  // empty when unlabeled; otherwise one 0/1 entry per row
  int dropped_rows = 0;  // rows removed at load due to non-finite values

  Eigen::Index rows() const { return X.rows(); }
  Eigen::Index cols() const { return X.cols(); }
  bool has_labels() const { return labels.size() > 0; }

  Dataset select_rows(const std::vector<int>& idx) const {
    Dataset out;
    out.feature_names = feature_names;
    out.X.resize(static_cast<Eigen::Index>(idx.size()), X.cols());
    if (has_labels()) out.labels.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0 || idx[i] >= X.rows()) {
        throw ContractError("select_rows: index out of range");
      }
      out.X.row(static_cast<Eigen::Index>(i)) = X.row(idx[i]);
      if (has_labels()) out.labels[static_cast<Eigen::Index>(i)] = labels[idx[i]];
    }
    return out;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

inline double parse_cell(const std::string& cell, int row, int col) {
  const char* b = cell.data();
  const char* e = b + cell.size();
  double value = 0.0;
  auto res = std::from_chars(b, e, value, std::chars_format::general);
  if (res.ec != std::errc() || res.ptr != e) {
    throw SchemaError("csv: cell at data row " + std::to_string(row) +
                      ", column " + std::to_string(col) +
                      " is not numeric: '" + cell + "'");
  }
  return value;
}

}  // namespace detail

// Loads a headered CSV of numeric features, optionally peeling off a 0/1
// label column by name. Rows containing non-finite values (nan/inf) are
// dropped and counted in dropped_rows. Distinct failures raise distinct
// error kinds: IoError (missing file), SchemaError (bad header, unknown
// label column, non-numeric cell), LabelError (labels other than 0/1).
inline Dataset load_csv(const std::string& path,
                        const std::optional<std::string>& label_column = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open csv file: " + path);
  std::string line;
  if (!std::getline(in, line)) {
    throw SchemaError("csv: file has no header row: " + path);
  }
  std::vector<std::string> header = detail::split_csv_line(line);
  if (header.empty()) throw SchemaError("csv: empty header row: " + path);

  int label_idx = -1;
  if (label_column) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == *label_column) {
        label_idx = static_cast<int>(i);
        break;
      }
    }
    if (label_idx < 0) {
      throw SchemaError("csv: label column '" + *label_column +
                        "' not found in header of " + path);
    }
  }

  Dataset ds;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (static_cast<int>(i) != label_idx) ds.feature_names.push_back(header[i]);
  }

  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  int data_row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw SchemaError("csv: data row " + std::to_string(data_row) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(header.size()));
    }
    std::vector<double> row;
    row.reserve(header.size());
    double label = 0.0;
    bool finite = true;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = detail::parse_cell(cells[c], data_row, static_cast<int>(c));
      if (!std::isfinite(v)) finite = false;
      if (static_cast<int>(c) == label_idx) {
        label = v;
      } else {
        row.push_back(v);
      }
    }
    if (!finite) {
      ++ds.dropped_rows;
    } else {
      rows.push_back(std::move(row));
      if (label_idx >= 0) labels.push_back(label);
    }
    ++data_row;
  }

  ds.X.resize(static_cast<Eigen::Index>(rows.size()),
              static_cast<Eigen::Index>(ds.feature_names.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      ds.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  if (label_idx >= 0) {
    ds.labels.resize(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0.0 && labels[i] != 1.0) {
        throw LabelError("csv: label values must be 0 or 1, found " +
                         std::to_string(labels[i]));
      }
      ds.labels[static_cast<Eigen::Index>(i)] = labels[i];
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Min-max preprocessing to [-1, 1], fitted on training data only. Transform
// clamps unseen values into the fitted range; constant columns map to 0.
// ---------------------------------------------------------------------------

struct MinMaxStats {
  Vector min;
  Vector max;
  bool fitted() const { return min.size() > 0; }
};

inline MinMaxStats minmax_fit(const Matrix& X) {
  if (X.rows() == 0 || X.cols() == 0) {
    throw InvalidInputError("minmax_fit: empty matrix");
  }
  MinMaxStats s;
  s.min = X.colwise().minCoeff();
  s.max = X.colwise().maxCoeff();
  return s;
}

inline Matrix minmax_transform(const Matrix& X, const MinMaxStats& s) {
  if (!s.fitted()) throw ContractError("minmax_transform: stats not fitted");
  if (X.cols() != s.min.size()) {
    throw SchemaError("minmax_transform: expected " +
                      std::to_string(s.min.size()) + " features, got " +
                      std::to_string(X.cols()));
  }
  Matrix out(X.rows(), X.cols());
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    const double lo = s.min[c], hi = s.max[c];
    if (hi > lo) {
      const double scale = 2.0 / (hi - lo);
      for (Eigen::Index r = 0; r < X.rows(); ++r) {
        const double v = std::clamp(X(r, c), lo, hi);
        out(r, c) = (v - lo) * scale - 1.0;
      }
    } else {
      out.col(c).setZero();
    }
  }
  return out;
}

// Maps a transformed coordinate of feature c back to original units.
inline double minmax_untransform(double v, int c, const MinMaxStats& s) {
  if (!s.fitted()) throw ContractError("minmax_untransform: stats not fitted");
  const double lo = s.min[c], hi = s.max[c];
  if (hi <= lo) return lo;
  return lo + (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * (hi - lo);
}

// ---------------------------------------------------------------------------
// Train/val/test splitting, label subsampling, noise-feature injection.
// ---------------------------------------------------------------------------

struct SplitResult {
  Dataset train, val, test;
  std::vector<int> train_idx, val_idx, test_idx;
  bool stratified = false;
};

namespace detail {

// Largest-remainder allocation of n items to the given fractions; ties go to
// earlier slots. The counts always sum to n.
inline std::vector<int> allocate_counts(int n, const std::vector<double>& fracs) {
  std::vector<int> base(fracs.size());
  std::vector<std::pair<double, int>> rem;
  int assigned = 0;
  for (std::size_t i = 0; i < fracs.size(); ++i) {
    const double target = n * fracs[i];
    base[i] = static_cast<int>(std::floor(target));
    assigned += base[i];
    rem.push_back({target - base[i], static_cast<int>(i)});
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  for (int k = 0; k < n - assigned; ++k) {
    base[static_cast<std::size_t>(rem[static_cast<std::size_t>(k)].second)] += 1;
  }
  return base;
}

}  // namespace detail

// Splits into train/val/test by the given fractions (test takes the rest).
// Labeled data with at least 3 samples of each class is stratified so each
// split preserves the anomaly ratio within one sample; otherwise the split
// is plain (stratified = false in the result).
inline SplitResult split(const Dataset& ds, double train_frac, double val_frac,
                         std::uint64_t seed) {
  if (!(train_frac > 0.0) || !(val_frac >= 0.0) ||
      !(train_frac + val_frac < 1.0)) {
    throw InvalidInputError("split: fractions must satisfy 0 < train, "
                            "0 <= val, train + val < 1");
  }
  if (ds.rows() < 3) throw InvalidInputError("split: need at least 3 rows");

  const int n = static_cast<int>(ds.rows());
  std::vector<std::vector<int>> groups;
  bool stratified = false;
  if (ds.has_labels()) {
    std::vector<int> pos, neg;
    for (int i = 0; i < n; ++i) {
      (ds.labels[i] > 0.5 ? pos : neg).push_back(i);
    }
    if (static_cast<int>(pos.size()) >= 3 && static_cast<int>(neg.size()) >= 3) {
      groups = {neg, pos};
      stratified = true;
    }
  }
  if (!stratified) {
    std::vector<int> all(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
    groups = {all};
  }

  Rng rng = Rng(seed).fork(0xda7a5917);
  const std::vector<double> fracs = {train_frac, val_frac,
                                     1.0 - train_frac - val_frac};
  SplitResult res;
  res.stratified = stratified;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    std::vector<int>& g = groups[gi];
    rng.shuffle(g);
    const std::vector<int> counts =
        detail::allocate_counts(static_cast<int>(g.size()), fracs);
    int at = 0;
    for (int k = 0; k < counts[0]; ++k) res.train_idx.push_back(g[static_cast<std::size_t>(at++)]);
    for (int k = 0; k < counts[1]; ++k) res.val_idx.push_back(g[static_cast<std::size_t>(at++)]);
    for (int k = 0; k < counts[2]; ++k) res.test_idx.push_back(g[static_cast<std::size_t>(at++)]);
  }
  std::sort(res.train_idx.begin(), res.train_idx.end());
  std::sort(res.val_idx.begin(), res.val_idx.end());
  std::sort(res.test_idx.begin(), res.test_idx.end());
  res.train = ds.select_rows(res.train_idx);
  res.val = ds.select_rows(res.val_idx);
  res.test = ds.select_rows(res.test_idx);
  return res;
}

struct SubsampleResult {
  Dataset labeled;  // n positives followed by the drawn negatives
  std::vector<int> labeled_idx;
};

// Draws a small labeled set: n anomalies plus floor(n * (1 - r) / r)
// negatives, where r is the anomaly ratio of the source, so the labeled set
// preserves the contamination rate. n = 0 yields an empty labeled set.
inline SubsampleResult subsample_labels(const Dataset& ds, int n_anomalies,
                                        std::uint64_t seed) {
  if (!ds.has_labels()) {
    throw LabelError("subsample_labels: dataset has no labels");
  }
  if (n_anomalies < 0) {
    throw InvalidInputError("subsample_labels: negative count");
  }
  SubsampleResult out;
  out.labeled.feature_names = ds.feature_names;
  out.labeled.X.resize(0, ds.cols());
  out.labeled.labels.resize(0);
  if (n_anomalies == 0) return out;

  std::vector<int> pos, neg;
  for (int i = 0; i < ds.rows(); ++i) {
    (ds.labels[i] > 0.5 ? pos : neg).push_back(i);
  }
  const int p = static_cast<int>(pos.size());
  const int m = static_cast<int>(neg.size());
  if (n_anomalies > p) {
    throw LabelError("subsample_labels: requested " +
                     std::to_string(n_anomalies) + " anomalies but only " +
                     std::to_string(p) + " are available");
  }
  const double r = static_cast<double>(p) / static_cast<double>(p + m);
  const int n_neg = std::min(
      m, static_cast<int>(std::floor(n_anomalies * (1.0 - r) / r)));

  Rng rng = Rng(seed).fork(0x1abe1ed);
  std::vector<int> pos_pick = rng.sample_without_replacement(p, n_anomalies);
  std::vector<int> neg_pick = rng.sample_without_replacement(m, n_neg);
  for (int i : pos_pick) out.labeled_idx.push_back(pos[static_cast<std::size_t>(i)]);
  for (int i : neg_pick) out.labeled_idx.push_back(neg[static_cast<std::size_t>(i)]);
  out.labeled = ds.select_rows(out.labeled_idx);
  return out;
}

// Appends k independent noise columns drawn uniformly from [-1, 1]. The
// original columns and labels are carried over unchanged.
inline Dataset add_noise_features(const Dataset& ds, int k, std::uint64_t seed) {
  if (k < 0) throw InvalidInputError("add_noise_features: negative count");
  Dataset out;
  out.feature_names = ds.feature_names;
  out.labels = ds.labels;
  out.dropped_rows = ds.dropped_rows;
  out.X.resize(ds.rows(), ds.cols() + k);
  out.X.leftCols(ds.cols()) = ds.X;
  Rng rng = Rng(seed).fork(0x401f3);
  for (int j = 0; j < k; ++j) {
    out.feature_names.push_back("noise_" + std::to_string(j));
    for (Eigen::Index r = 0; r < ds.rows(); ++r) {
      out.X(r, ds.cols() + j) = rng.uniform(-1.0, 1.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

// Area under the ROC curve via the rank statistic; tied scores contribute
// half. Throws MetricError unless both classes are present.
inline double auc_metric(const Vector& scores, const Vector& labels) {
  if (scores.size() != labels.size()) {
    throw ContractError("auc_metric: size mismatch");
  }
  const Eigen::Index n = scores.size();
  Eigen::Index p = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] != 0.0 && labels[i] != 1.0) {
      throw LabelError("auc_metric: labels must be 0 or 1");
    }
    if (labels[i] == 1.0) ++p;
  }
  if (p == 0 || p == n) {
    throw MetricError("auc_metric: undefined with a single class");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[a] < scores[b];
  });
  // Average ranks over tie groups, accumulate the positive rank sum.
  double rank_sum_pos = 0.0;
  Eigen::Index i = 0;
  while (i < n) {
    Eigen::Index j = i;
    while (j + 1 < n && scores[order[static_cast<std::size_t>(j + 1)]] ==
                            scores[order[static_cast<std::size_t>(i)]]) {
      ++j;
    }
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) {
      if (labels[order[static_cast<std::size_t>(k)]] == 1.0) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(p);
  const double nn = static_cast<double>(n - p);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

}  // namespace diad
