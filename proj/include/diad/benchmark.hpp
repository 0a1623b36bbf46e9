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
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/finetune.hpp"
#include "diad/io.hpp"
#include "diad/model.hpp"
#include "diad/pid.hpp"

namespace diad {

// ---------------------------------------------------------------------------
// Experiment configuration: a plain key = value text file. Keys mirror the
// TrainConfig field names directly and the FinetuneConfig field names behind
// a finetune_ prefix; dashes in keys are read as underscores. '#' starts a
// comment. Sweep axes are comma-separated lists.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::vector<std::string> datasets;      // CSV paths or registered names
  std::string label_column = "label";
  std::vector<std::uint64_t> seeds = {0};
  std::vector<int> label_budgets = {0};   // entries > 0 add fine-tuned runs
  std::vector<int> noise_features = {0};  // extra uniform columns per run
  double train_fraction = 0.64;
  double val_fraction = 0.16;
  TrainConfig train;
  FinetuneConfig finetune;
};

namespace detail {

inline std::string normalize_key(std::string k) {
  for (char& c : k) {
    if (c == '-') c = '_';
  }
  return k;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(v);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double parse_double_value(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw InvalidInputError("");
    return d;
  } catch (const std::exception&) {
    throw InvalidInputError("config: bad number for " + key + ": '" + v + "'");
  }
}

inline long long parse_int_value(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw InvalidInputError("");
    return n;
  } catch (const std::exception&) {
    throw InvalidInputError("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline bool parse_bool_value(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidInputError("config: bad boolean for " + key + ": '" + v + "'");
}

struct ConfigEntry {
  int line_no = 0;
  std::string key;
  std::string value;
};

// Splits a key = value document ('#' comments, blank lines skipped) into
// entries with normalized keys. `what` names the document in diagnostics.
inline std::vector<ConfigEntry> parse_config_lines(const std::string& text,
                                                   const std::string& what) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw InvalidInputError(what + " line " + std::to_string(line_no) +
                              ": expected key = value");
    }
    ConfigEntry e;
    e.line_no = line_no;
    e.key = normalize_key(trim(line.substr(0, eq)));
    e.value = trim(line.substr(eq + 1));
    if (e.key.empty() || e.value.empty()) {
      throw InvalidInputError(what + " line " + std::to_string(line_no) +
                              ": empty key or value");
    }
    out.push_back(std::move(e));
  }
  return out;
}

// Applies one normalized key to a TrainConfig field of the same name.
// Returns false when the key is not a training field.
inline bool apply_train_key(TrainConfig& tc, const std::string& key,
                            const std::string& value) {
  if (key == "batch_size") {
    tc.batch_size = static_cast<int>(parse_int_value(key, value));
  } else if (key == "learning_rate") {
    tc.learning_rate = parse_double_value(key, value);
  } else if (key == "ema_gamma") {
    tc.ema_gamma = parse_double_value(key, value);
  } else if (key == "steps") {
    tc.steps = static_cast<int>(parse_int_value(key, value));
  } else if (key == "warmup_steps") {
    tc.warmup_steps = static_cast<int>(parse_int_value(key, value));
  } else if (key == "smoothing_delta") {
    tc.smoothing_delta = parse_double_value(key, value);
  } else if (key == "dropout_rate") {
    tc.dropout_rate = parse_double_value(key, value);
  } else if (key == "layers") {
    tc.layers = static_cast<int>(parse_int_value(key, value));
  } else if (key == "trees_per_layer") {
    tc.trees_per_layer = static_cast<int>(parse_int_value(key, value));
  } else if (key == "extra_tree_dim") {
    tc.extra_tree_dim = static_cast<int>(parse_int_value(key, value));
  } else if (key == "depth") {
    tc.depth = static_cast<int>(parse_int_value(key, value));
  } else if (key == "attention_dim") {
    tc.attention_dim = static_cast<int>(parse_int_value(key, value));
  } else if (key == "column_subsample") {
    tc.column_subsample = parse_double_value(key, value);
  } else if (key == "anneal_steps") {
    tc.anneal_steps = static_cast<int>(parse_int_value(key, value));
  } else if (key == "min_temperature") {
    tc.min_temperature = parse_double_value(key, value);
  } else if (key == "normalize_sparsity") {
    tc.normalize_sparsity = parse_bool_value(key, value);
  } else if (key == "seed") {
    tc.seed = static_cast<std::uint64_t>(parse_int_value(key, value));
  } else {
    return false;
  }
  return true;
}

// Applies one finetune_-prefixed key to a FinetuneConfig field. The prefix
// keeps learning_rate and batch_size from colliding with training keys.
inline bool apply_finetune_key(FinetuneConfig& fc, const std::string& key,
                               const std::string& value) {
  if (key == "finetune_loss") {
    fc.loss = value;
  } else if (key == "finetune_learning_rate") {
    fc.learning_rate = parse_double_value(key, value);
  } else if (key == "finetune_max_epochs") {
    fc.max_epochs = static_cast<int>(parse_int_value(key, value));
  } else if (key == "finetune_patience") {
    fc.patience = static_cast<int>(parse_int_value(key, value));
  } else if (key == "finetune_batch_size") {
    fc.batch_size = static_cast<int>(parse_int_value(key, value));
  } else if (key == "finetune_seed") {
    fc.seed = static_cast<std::uint64_t>(parse_int_value(key, value));
  } else {
    return false;
  }
  return true;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  for (const detail::ConfigEntry& e :
       detail::parse_config_lines(text, "experiment config")) {
    const std::string& key = e.key;
    const std::string& value = e.value;
    if (key == "datasets") {
      cfg.datasets = detail::split_list(value);
    } else if (key == "label_column") {
      cfg.label_column = value;
    } else if (key == "seeds") {
      cfg.seeds.clear();
      for (const std::string& s : detail::split_list(value)) {
        cfg.seeds.push_back(
            static_cast<std::uint64_t>(detail::parse_int_value(key, s)));
      }
    } else if (key == "label_budgets") {
      cfg.label_budgets.clear();
      for (const std::string& s : detail::split_list(value)) {
        cfg.label_budgets.push_back(
            static_cast<int>(detail::parse_int_value(key, s)));
      }
    } else if (key == "noise_features") {
      cfg.noise_features.clear();
      for (const std::string& s : detail::split_list(value)) {
        cfg.noise_features.push_back(
            static_cast<int>(detail::parse_int_value(key, s)));
      }
    } else if (key == "train_fraction") {
      cfg.train_fraction = detail::parse_double_value(key, value);
    } else if (key == "val_fraction") {
      cfg.val_fraction = detail::parse_double_value(key, value);
    } else if (detail::apply_train_key(cfg.train, key, value)) {
    } else if (detail::apply_finetune_key(cfg.finetune, key, value)) {
    } else {
      throw InvalidInputError("experiment config line " +
                              std::to_string(e.line_no) + ": unknown key '" +
                              key + "'");
    }
  }
  cfg.train.validate();
  cfg.finetune.validate();
  if (!(cfg.train_fraction > 0.0 && cfg.val_fraction >= 0.0 &&
        cfg.train_fraction + cfg.val_fraction < 1.0)) {
    throw InvalidInputError("experiment config: bad split fractions");
  }
  if (cfg.seeds.empty()) {
    throw InvalidInputError("experiment config: seeds list is empty");
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open experiment config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

// ---------------------------------------------------------------------------
// Sweep: every (dataset, noise, seed) cell pretrains once and scores the
// test split; each positive label budget then fine-tunes a copy. Failures
// are recorded in the cell, never fatal to the sweep.
// ---------------------------------------------------------------------------

struct BenchmarkCell {
  std::string dataset;
  std::uint64_t seed = 0;
  int n_anomalies = 0;
  int noise_k = 0;
  std::string stage;  // "unsupervised" or "finetuned"
  double auc = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string error;
};

struct BenchmarkReport {
  std::vector<BenchmarkCell> cells;
};

using NamedDataset = std::pair<std::string, Dataset>;

inline BenchmarkReport run_benchmark(
    const ExperimentConfig& cfg, const std::vector<NamedDataset>& datasets) {
  BenchmarkReport report;
  for (const auto& [name, ds] : datasets) {
    for (int noise_k : cfg.noise_features) {
      for (std::uint64_t seed : cfg.seeds) {
        BenchmarkCell base;
        base.dataset = name;
        base.seed = seed;
        base.noise_k = noise_k;
        base.stage = "unsupervised";
        ModelState pretrained;
        SplitResult parts;
        bool pretrain_ok = false;
        try {
          if (!ds.has_labels()) {
            throw LabelError("dataset has no labels to evaluate against");
          }
          const Dataset noisy = add_noise_features(ds, noise_k, seed);
          parts = split(noisy, cfg.train_fraction, cfg.val_fraction, seed);
          TrainConfig tc = cfg.train;
          tc.seed = seed;
          pretrained = init_model(tc, static_cast<int>(noisy.cols()),
                                  noisy.feature_names);
          train_unsupervised(pretrained, parts.train.X);
          base.auc = auc_metric(score_samples(pretrained, parts.test.X),
                                parts.test.labels);
          pretrain_ok = true;
        } catch (const Error& e) {
          base.failed = true;
          base.error = e.what();
        }
        report.cells.push_back(base);

        for (int budget : cfg.label_budgets) {
          if (budget <= 0) continue;
          BenchmarkCell cell;
          cell.dataset = name;
          cell.seed = seed;
          cell.n_anomalies = budget;
          cell.noise_k = noise_k;
          cell.stage = "finetuned";
          if (!pretrain_ok) {
            cell.failed = true;
            cell.error = "pretraining failed: " + base.error;
            report.cells.push_back(cell);
            continue;
          }
          try {
            const SubsampleResult sub =
                subsample_labels(parts.train, budget, seed);
            ModelState tuned = pretrained;
            FinetuneConfig fc = cfg.finetune;
            fc.seed = seed;
            finetune(tuned, sub.labeled.X, sub.labeled.labels, parts.val.X,
                     parts.val.labels, fc);
            cell.auc = auc_metric(score_samples(tuned, parts.test.X),
                                  parts.test.labels);
          } catch (const Error& e) {
            cell.failed = true;
            cell.error = e.what();
          }
          report.cells.push_back(cell);
        }
      }
    }
  }
  return report;
}

// File-path variant: loads each configured CSV, keyed by its path.
inline BenchmarkReport run_benchmark(const ExperimentConfig& cfg) {
  std::vector<NamedDataset> datasets;
  for (const std::string& path : cfg.datasets) {
    datasets.push_back({path, load_csv(path, cfg.label_column)});
  }
  return run_benchmark(cfg, datasets);
}

// ---------------------------------------------------------------------------
// Report rendering: a machine-readable CSV plus a human-readable summary
// with mean +/- standard error per cell group and Average / Rank aggregates.
// ---------------------------------------------------------------------------

inline std::string report_csv(const BenchmarkReport& report) {
  std::ostringstream out;
  out << "dataset,seed,n-anomalies,noise-k,stage,auc\n";
  for (const BenchmarkCell& c : report.cells) {
    out << c.dataset << "," << c.seed << "," << c.n_anomalies << ","
        << c.noise_k << "," << c.stage << "," << detail::fmt_double(c.auc)
        << "\n";
  }
  return out.str();
}

inline void write_report_csv(const BenchmarkReport& report,
                             const std::string& path) {
  detail::write_text_file(path, report_csv(report));
}

// Mean and standard error (sample std over sqrt(n); 0 for a single value).
inline std::pair<double, double> mean_stderr(const std::vector<double>& v) {
  if (v.empty()) throw MetricError("mean_stderr: empty sample");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  return {mean, sd / std::sqrt(static_cast<double>(v.size()))};
}

// Average rank per column: each row ranks its columns (rank 1 = largest
// value, tied values share the mean of their ranks), then ranks average
// over rows.
inline std::vector<double> mean_ranks(const Matrix& values) {
  if (values.rows() == 0 || values.cols() == 0) {
    throw MetricError("mean_ranks: empty table");
  }
  std::vector<double> avg(static_cast<std::size_t>(values.cols()), 0.0);
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    std::vector<int> order(static_cast<std::size_t>(values.cols()));
    for (std::size_t j = 0; j < order.size(); ++j) {
      order[j] = static_cast<int>(j);
    }
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return values(r, a) > values(r, b);
    });
    std::size_t i = 0;
    while (i < order.size()) {
      std::size_t k = i;
      while (k + 1 < order.size() &&
             values(r, order[k + 1]) == values(r, order[i])) {
        ++k;
      }
      const double shared =
          (static_cast<double>(i + 1) + static_cast<double>(k + 1)) / 2.0;
      for (std::size_t q = i; q <= k; ++q) {
        avg[static_cast<std::size_t>(order[q])] += shared;
      }
      i = k + 1;
    }
  }
  for (double& a : avg) a /= static_cast<double>(values.rows());
  return avg;
}

namespace detail {

// Human-facing AUC rendering; the report CSV keeps full precision.
inline std::string fmt_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace detail

inline std::string summarize_report(const BenchmarkReport& report) {
  // Group: (dataset, n-anomalies, noise-k, stage) -> AUCs over seeds.
  std::map<std::tuple<std::string, int, int, std::string>, std::vector<double>>
      groups;
  int failures = 0;
  for (const BenchmarkCell& c : report.cells) {
    if (c.failed) {
      ++failures;
      continue;
    }
    groups[{c.dataset, c.n_anomalies, c.noise_k, c.stage}].push_back(c.auc);
  }

  std::ostringstream out;
  out << "benchmark summary\n";
  for (const auto& [key, aucs] : groups) {
    const auto& [dataset, budget, noise_k, stage] = key;
    const auto [mean, se] = mean_stderr(aucs);
    out << "  " << dataset << " n-anomalies=" << budget
        << " noise-k=" << noise_k << " stage=" << stage << ": auc "
        << detail::fmt_metric(mean) << " +/- " << detail::fmt_metric(se)
        << " (n=" << aucs.size() << ")\n";
  }

  // Aggregates across datasets: one column per (stage, budget, noise)
  // configuration, one row per dataset, filled with per-group means.
  std::map<std::tuple<std::string, int, int>, std::map<std::string, double>>
      by_config;
  for (const auto& [key, aucs] : groups) {
    const auto& [dataset, budget, noise_k, stage] = key;
    by_config[{stage, budget, noise_k}][dataset] = mean_stderr(aucs).first;
  }
  std::vector<std::string> all_datasets;
  for (const auto& [key, per_ds] : by_config) {
    for (const auto& entry : per_ds) {
      if (std::find(all_datasets.begin(), all_datasets.end(), entry.first) ==
          all_datasets.end()) {
        all_datasets.push_back(entry.first);
      }
    }
  }
  std::vector<std::tuple<std::string, int, int>> configs;
  for (const auto& [key, per_ds] : by_config) {
    if (per_ds.size() == all_datasets.size()) configs.push_back(key);
  }
  if (!configs.empty() && !all_datasets.empty()) {
    Matrix table(static_cast<Eigen::Index>(all_datasets.size()),
                 static_cast<Eigen::Index>(configs.size()));
    for (std::size_t i = 0; i < all_datasets.size(); ++i) {
      for (std::size_t j = 0; j < configs.size(); ++j) {
        table(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            by_config[configs[j]][all_datasets[i]];
      }
    }
    const std::vector<double> ranks = mean_ranks(table);
    out << "aggregates over " << all_datasets.size() << " dataset(s)\n";
    for (std::size_t j = 0; j < configs.size(); ++j) {
      const auto& [stage, budget, noise_k] = configs[j];
      out << "  stage=" << stage << " n-anomalies=" << budget
          << " noise-k=" << noise_k << ": Average "
          << detail::fmt_metric(table.col(static_cast<Eigen::Index>(j)).mean())
          << " Rank " << detail::fmt_metric(ranks[j]) << "\n";
    }
  }
  if (failures > 0) {
    out << "failures: " << failures << "\n";
    for (const BenchmarkCell& c : report.cells) {
      if (c.failed) {
        out << "  " << c.dataset << " seed=" << c.seed << " stage=" << c.stage
            << ": " << c.error << "\n";
      }
    }
  }
  return out.str();
}

}  // namespace diad
