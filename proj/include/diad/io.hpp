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

#include <cstddef>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/explain.hpp"
#include "diad/finetune.hpp"
#include "diad/model.hpp"
#include "diad/pid.hpp"

namespace diad {

// ---------------------------------------------------------------------------
// Model persistence: a single self-describing JSON document carrying the
// format tag, a version number, the full config, preprocessing stats, and
// every parameter. Doubles round-trip exactly, so a reloaded model scores
// identically.
// ---------------------------------------------------------------------------

inline constexpr const char* kModelFormatTag = "diad-model";
inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline nlohmann::json vector_to_json(const Vector& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void expect_file(bool ok, const std::string& what) {
  if (!ok) throw CorruptFileError("model file: " + what);
}

inline Vector vector_from_json(const nlohmann::json& a, Eigen::Index want,
                               const std::string& what) {
  expect_file(a.is_array(), what + " is not an array");
  expect_file(want < 0 || static_cast<Eigen::Index>(a.size()) == want,
              what + " has the wrong length");
  Vector v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    expect_file(a[i].is_number(), what + " holds a non-number");
    v[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  }
  return v;
}

inline Matrix matrix_from_json(const nlohmann::json& a, Eigen::Index rows,
                               Eigen::Index cols, const std::string& what) {
  expect_file(a.is_array(), what + " is not an array");
  expect_file(rows < 0 || static_cast<Eigen::Index>(a.size()) == rows,
              what + " has the wrong row count");
  Matrix m(static_cast<Eigen::Index>(a.size()), cols);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vector row = vector_from_json(a[i], cols, what + " row");
    m.row(static_cast<Eigen::Index>(i)) = row.transpose();
  }
  return m;
}

// Shortest-round-trip text for a double; reparses to the identical value.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << body;
  out.flush();
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace detail

inline nlohmann::json model_to_json(const ModelState& m) {
  const TrainConfig& c = m.config;
  nlohmann::json j;
  j["format"] = kModelFormatTag;
  j["version"] = kModelFormatVersion;
  j["config"] = {
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"ema_gamma", c.ema_gamma},
      {"steps", c.steps},
      {"warmup_steps", c.warmup_steps},
      {"smoothing_delta", c.smoothing_delta},
      {"dropout_rate", c.dropout_rate},
      {"layers", c.layers},
      {"trees_per_layer", c.trees_per_layer},
      {"extra_tree_dim", c.extra_tree_dim},
      {"depth", c.depth},
      {"attention_dim", c.attention_dim},
      {"column_subsample", c.column_subsample},
      {"anneal_steps", c.anneal_steps},
      {"min_temperature", c.min_temperature},
      {"normalize_sparsity", c.normalize_sparsity},
      {"seed", c.seed},
  };
  j["n_features"] = m.n_features;
  j["feature_names"] = m.feature_names;
  j["f0"] = m.f0;
  j["anneal_position"] = m.anneal_position;
  j["thresholds_initialized"] = m.thresholds_initialized;
  if (m.minmax.fitted()) {
    j["minmax"] = {{"min", detail::vector_to_json(m.minmax.min)},
                   {"max", detail::vector_to_json(m.minmax.max)}};
  } else {
    j["minmax"] = nullptr;
  }
  j["explain_sample"] = detail::matrix_to_json(m.explain_sample);

  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : m.layers) {
    nlohmann::json trees = nlohmann::json::array();
    for (const TreeParameters& tp : layer) {
      trees.push_back({
          {"sel1", detail::vector_to_json(tp.sel1)},
          {"sel2", detail::vector_to_json(tp.sel2)},
          {"thresholds", detail::vector_to_json(tp.thresholds)},
          {"log_slopes", detail::vector_to_json(tp.log_slopes)},
          {"leaf_weights", detail::matrix_to_json(tp.leaf_weights)},
          {"column_mask", tp.column_mask},
      });
    }
    layers.push_back(std::move(trees));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline ModelState model_from_json(const nlohmann::json& j) {
  detail::expect_file(j.is_object(), "root is not an object");
  detail::expect_file(j.contains("format") && j["format"].is_string() &&
                          j["format"].get<std::string>() == kModelFormatTag,
                      "missing or foreign format tag");
  detail::expect_file(j.contains("version") && j["version"].is_number_integer(),
                      "missing version");
  const int version = j["version"].get<int>();
  if (version != kModelFormatVersion) {
    throw VersionError("model file: version " + std::to_string(version) +
                       " is not supported (this build reads version " +
                       std::to_string(kModelFormatVersion) + ")");
  }

  try {
    ModelState m;
    const nlohmann::json& c = j.at("config");
    m.config.batch_size = c.at("batch_size").get<int>();
    m.config.learning_rate = c.at("learning_rate").get<double>();
    m.config.ema_gamma = c.at("ema_gamma").get<double>();
    m.config.steps = c.at("steps").get<int>();
    m.config.warmup_steps = c.at("warmup_steps").get<int>();
    m.config.smoothing_delta = c.at("smoothing_delta").get<double>();
    m.config.dropout_rate = c.at("dropout_rate").get<double>();
    m.config.layers = c.at("layers").get<int>();
    m.config.trees_per_layer = c.at("trees_per_layer").get<int>();
    m.config.extra_tree_dim = c.at("extra_tree_dim").get<int>();
    m.config.depth = c.at("depth").get<int>();
    m.config.attention_dim = c.at("attention_dim").get<int>();
    m.config.column_subsample = c.at("column_subsample").get<double>();
    m.config.anneal_steps = c.at("anneal_steps").get<int>();
    m.config.min_temperature = c.at("min_temperature").get<double>();
    m.config.normalize_sparsity = c.at("normalize_sparsity").get<bool>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.validate();

    m.n_features = j.at("n_features").get<int>();
    detail::expect_file(m.n_features >= 1, "n_features must be positive");
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    detail::expect_file(
        static_cast<int>(m.feature_names.size()) == m.n_features,
        "feature name count mismatch");
    m.f0 = j.at("f0").get<double>();
    m.anneal_position = j.at("anneal_position").get<long>();
    m.thresholds_initialized = j.at("thresholds_initialized").get<bool>();

    const nlohmann::json& mm = j.at("minmax");
    if (!mm.is_null()) {
      m.minmax.min = detail::vector_from_json(mm.at("min"), m.n_features,
                                              "minmax.min");
      m.minmax.max = detail::vector_from_json(mm.at("max"), m.n_features,
                                              "minmax.max");
    }
    m.explain_sample = detail::matrix_from_json(j.at("explain_sample"), -1,
                                                m.n_features, "explain_sample");

    const nlohmann::json& layers = j.at("layers");
    detail::expect_file(layers.is_array() &&
                            static_cast<int>(layers.size()) == m.config.layers,
                        "layer count mismatch");
    const int resp = m.config.responses();
    for (int l = 0; l < m.config.layers; ++l) {
      const nlohmann::json& trees = layers[static_cast<std::size_t>(l)];
      detail::expect_file(
          trees.is_array() &&
              static_cast<int>(trees.size()) == m.config.trees_per_layer,
          "tree count mismatch in layer " + std::to_string(l));
      const Eigen::Index cands =
          m.n_features + static_cast<Eigen::Index>(l) *
                             m.config.trees_per_layer * resp;
      std::vector<TreeParameters> row;
      for (int t = 0; t < m.config.trees_per_layer; ++t) {
        const nlohmann::json& tj = trees[static_cast<std::size_t>(t)];
        TreeParameters tp;
        tp.sel1 = detail::vector_from_json(tj.at("sel1"), cands, "sel1");
        tp.sel2 = detail::vector_from_json(tj.at("sel2"), cands, "sel2");
        tp.thresholds = detail::vector_from_json(tj.at("thresholds"),
                                                 m.config.depth, "thresholds");
        tp.log_slopes = detail::vector_from_json(tj.at("log_slopes"),
                                                 m.config.depth, "log_slopes");
        tp.leaf_weights = detail::matrix_from_json(
            tj.at("leaf_weights"), m.config.leaves(), resp, "leaf_weights");
        tp.column_mask = tj.at("column_mask").get<std::vector<int>>();
        detail::expect_file(!tp.column_mask.empty(), "empty column mask");
        for (int f : tp.column_mask) {
          detail::expect_file(f >= 0 && f < m.n_features,
                              "column mask entry out of range");
        }
        row.push_back(std::move(tp));
      }
      m.layers.push_back(std::move(row));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("model file: ") + e.what());
  } catch (const InvalidInputError& e) {
    throw CorruptFileError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const ModelState& m, const std::string& path) {
  detail::write_text_file(path, model_to_json(m).dump(2) + "\n");
}

inline ModelState load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("model file: ") + e.what());
  }
  return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Plain-text artifacts: scores CSV, training log, fine-tuning history.
// ---------------------------------------------------------------------------

inline std::string scores_csv(const Vector& scores) {
  std::ostringstream out;
  out << "row,score\n";
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    out << i << "," << detail::fmt_double(scores[i]) << "\n";
  }
  return out.str();
}

inline void write_scores_csv(const Vector& scores, const std::string& path) {
  detail::write_text_file(path, scores_csv(scores));
}

// One line per training step. Wall time is intentionally not written so two
// identically seeded runs produce byte-identical logs.
inline std::string train_log_text(const std::vector<StepLog>& history) {
  std::ostringstream out;
  for (const StepLog& s : history) {
    out << "step=" << s.step << " loss=" << detail::fmt_double(s.loss)
        << " temperature=" << detail::fmt_double(s.temperature)
        << " learning_rate=" << detail::fmt_double(s.learning_rate) << "\n";
  }
  return out.str();
}

inline void write_train_log(const std::vector<StepLog>& history,
                            const std::string& path) {
  detail::write_text_file(path, train_log_text(history));
}

inline std::string finetune_history_text(const std::vector<EpochLog>& history) {
  std::ostringstream out;
  for (const EpochLog& e : history) {
    out << "epoch=" << e.epoch
        << " train_loss=" << detail::fmt_double(e.train_loss)
        << " val_auc=" << detail::fmt_double(e.val_auc)
        << " improved=" << (e.improved ? 1 : 0) << "\n";
  }
  return out.str();
}

inline void write_finetune_history(const std::vector<EpochLog>& history,
                                   const std::string& path) {
  detail::write_text_file(path, finetune_history_text(history));
}

// ---------------------------------------------------------------------------
// Explanation files: plot-ready JSON, one document per graph.
// ---------------------------------------------------------------------------

inline nlohmann::json curve_to_json(const ShapeCurve& sc) {
  nlohmann::json j;
  j["kind"] = "main-effect";
  j["feature"] = sc.feature;
  j["name"] = sc.name;
  j["edges"] = sc.edges;
  j["values"] = sc.values;
  j["density"] = sc.density;
  j["centering_offset"] = sc.centering_offset;
  return j;
}

inline nlohmann::json surface_to_json(const ShapeSurface& ss) {
  nlohmann::json j;
  j["kind"] = "interaction";
  j["feature_a"] = ss.feature_a;
  j["feature_b"] = ss.feature_b;
  j["name_a"] = ss.name_a;
  j["name_b"] = ss.name_b;
  j["edges_a"] = ss.edges_a;
  j["edges_b"] = ss.edges_b;
  j["values"] = detail::matrix_to_json(ss.values);
  j["density"] = detail::matrix_to_json(ss.density);
  j["centering_offset"] = ss.centering_offset;
  return j;
}

inline nlohmann::json attribution_to_json(const Attribution& attr,
                                          long sample_id) {
  nlohmann::json terms = nlohmann::json::array();
  for (const AttributionTerm& t : attr.terms) {
    terms.push_back({{"name", t.name},
                     {"features", t.features},
                     {"value", t.value}});
  }
  return nlohmann::json{{"kind", "sample-explanation"},
                        {"sample", sample_id},
                        {"bias", attr.bias},
                        {"total", attr.total},
                        {"terms", std::move(terms)}};
}

// Writes main_<j>.json / pair_<a>_<b>.json per component plus an index
// document naming every file; returns the written file names.
inline std::vector<std::string> write_explanation_graph(
    const ExplanationGraph& eg, const std::string& dir) {
  std::vector<std::string> files;
  nlohmann::json index;
  index["kind"] = "explanation-index";
  index["bias"] = eg.bias;
  nlohmann::json listed = nlohmann::json::array();
  for (const ShapeCurve& sc : eg.mains) {
    const std::string name = "main_" + std::to_string(sc.feature) + ".json";
    detail::write_text_file(dir + "/" + name, curve_to_json(sc).dump(2) + "\n");
    files.push_back(name);
    listed.push_back(name);
  }
  for (const ShapeSurface& ss : eg.pairs) {
    const std::string name = "pair_" + std::to_string(ss.feature_a) + "_" +
                             std::to_string(ss.feature_b) + ".json";
    detail::write_text_file(dir + "/" + name,
                            surface_to_json(ss).dump(2) + "\n");
    files.push_back(name);
    listed.push_back(name);
  }
  index["files"] = std::move(listed);
  detail::write_text_file(dir + "/explanation_index.json",
                          index.dump(2) + "\n");
  files.push_back("explanation_index.json");
  return files;
}

}  // namespace diad
