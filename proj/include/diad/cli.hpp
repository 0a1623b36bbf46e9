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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "diad/benchmark.hpp"
#include "diad/common.hpp"
#include "diad/data.hpp"
#include "diad/explain.hpp"
#include "diad/finetune.hpp"
#include "diad/io.hpp"
#include "diad/model.hpp"
#include "diad/pid.hpp"

namespace diad {

inline constexpr const char* kCliVersion = "diad 0.1.0";

namespace detail {

// Training-side CLI configuration: one key = value document carrying both
// the training fields (bare names) and the fine-tuning fields (finetune_
// prefix), so the same file serves `train` and `finetune`.
struct RunConfig {
  TrainConfig train;
  FinetuneConfig finetune;
};

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  for (const ConfigEntry& e : parse_config_lines(text, "config")) {
    if (!apply_train_key(rc.train, e.key, e.value) &&
        !apply_finetune_key(rc.finetune, e.key, e.value)) {
      throw InvalidInputError("config line " + std::to_string(e.line_no) +
                              ": unknown key '" + e.key + "'");
    }
  }
  rc.train.validate();
  rc.finetune.validate();
  return rc;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Joins a file name to the output directory (absolute names pass through)
// and makes sure the parent directory exists. Creation errors are left for
// the subsequent open to report with the full path.
inline std::string prepare_output(const std::string& dir,
                                  const std::string& name) {
  namespace fs = std::filesystem;
  fs::path p(name);
  if (!p.is_absolute()) p = fs::path(dir) / p;
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  return p.string();
}

// Carves a validation set off a labeled dataset for early stopping. The
// draw is stratified per class and never takes a class below 2 training
// rows, so tiny labeled sets keep both classes trainable.
inline std::pair<Dataset, Dataset> carve_validation(const Dataset& ds,
                                                    double val_fraction,
                                                    std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw InvalidInputError("validation fraction must be in [0, 1)");
  }
  std::vector<int> pos, neg;
  for (int i = 0; i < static_cast<int>(ds.rows()); ++i) {
    (ds.labels[static_cast<Eigen::Index>(i)] > 0.5 ? pos : neg).push_back(i);
  }
  Rng rng = Rng(seed).fork(0xf1e57a7eULL);
  std::vector<int> train_idx, val_idx;
  for (std::vector<int>* g : {&neg, &pos}) {
    rng.shuffle(*g);
    int nv = static_cast<int>(
        std::floor(val_fraction * static_cast<double>(g->size())));
    nv = std::min(nv, std::max(0, static_cast<int>(g->size()) - 2));
    for (int k = 0; k < static_cast<int>(g->size()); ++k) {
      (k < nv ? val_idx : train_idx).push_back((*g)[static_cast<std::size_t>(k)]);
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  return {ds.select_rows(train_idx), ds.select_rows(val_idx)};
}

}  // namespace detail

// Command-line entry point, callable in-process for tests. `args` excludes
// the program name. Returns the process exit code: 0 on success, 2 for
// usage errors (unknown flags, missing input files), 1 for everything else,
// always with a one-line diagnostic on `err`.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Interpretable anomaly detection over tabular data"};
  app.name("diad");
  app.require_subcommand(1);
  app.fallthrough(true);
  app.set_version_flag("--version", std::string(kCliVersion));

  std::string output_dir = ".";
  bool quiet = false;
  std::uint64_t seed = 0;
  app.add_option("--output-dir", output_dir, "Directory for output files")
      ->capture_default_str();
  app.add_flag("--quiet", quiet, "Suppress progress output");
  CLI::Option* seed_opt =
      app.add_option("--seed", seed, "Override the configured random seed");

  // train
  std::string train_data, train_config, train_label;
  std::string train_model = "model.json", train_log = "train.log";
  int steps_override = 0;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "Train an unsupervised anomaly model on a headered CSV");
  train_cmd->add_option("data", train_data, "Training CSV file")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--config", train_config, "key = value config file")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--label-column", train_label,
                        "Column to exclude from the features");
  train_cmd->add_option("--model", train_model, "Output model file name")
      ->capture_default_str();
  train_cmd->add_option("--log", train_log, "Output training log name")
      ->capture_default_str();
  train_cmd->add_option("--steps", steps_override,
                        "Override the configured step count");

  // finetune
  std::string ft_model_in, ft_data, ft_config, ft_label = "label";
  std::string ft_model_out = "finetuned.json", ft_history = "finetune.log";
  double ft_val_fraction = 0.2;
  CLI::App* finetune_cmd = app.add_subcommand(
      "finetune", "Fine-tune a trained model on a labeled CSV");
  finetune_cmd->add_option("pretrained", ft_model_in, "Model file to start from")
      ->required()
      ->check(CLI::ExistingFile);
  finetune_cmd->add_option("data", ft_data, "Labeled CSV file")
      ->required()
      ->check(CLI::ExistingFile);
  finetune_cmd->add_option("--config", ft_config, "key = value config file")
      ->check(CLI::ExistingFile);
  finetune_cmd->add_option("--label-column", ft_label, "0/1 label column")
      ->capture_default_str();
  finetune_cmd
      ->add_option("--val-fraction", ft_val_fraction,
                   "Fraction held out for early stopping")
      ->capture_default_str();
  finetune_cmd->add_option("--model", ft_model_out, "Output model file name")
      ->capture_default_str();
  finetune_cmd->add_option("--history", ft_history, "Output history file name")
      ->capture_default_str();

  // score
  std::string score_model, score_data, score_label;
  std::string score_out = "scores.csv";
  CLI::App* score_cmd =
      app.add_subcommand("score", "Score CSV rows with a trained model");
  score_cmd->add_option("model", score_model, "Model file")
      ->required()
      ->check(CLI::ExistingFile);
  score_cmd->add_option("data", score_data, "CSV file to score")
      ->required()
      ->check(CLI::ExistingFile);
  score_cmd->add_option("--label-column", score_label,
                        "Label column: excluded from features, scored as AUC");
  score_cmd->add_option("--scores", score_out, "Output scores CSV name")
      ->capture_default_str();

  // explain
  std::string ex_model, ex_data, ex_label;
  int ex_sample = -1, ex_top_k = -1, ex_grid = 101;
  bool ex_graph = false;
  CLI::App* explain_cmd = app.add_subcommand(
      "explain", "Export shape functions or a per-sample attribution");
  explain_cmd->add_option("model", ex_model, "Model file")
      ->required()
      ->check(CLI::ExistingFile);
  CLI::Option* ex_data_opt =
      explain_cmd->add_option("data", ex_data, "CSV file (for --sample)")
          ->check(CLI::ExistingFile);
  CLI::Option* ex_sample_opt =
      explain_cmd
          ->add_option("--sample", ex_sample,
                       "Explain this row of the CSV (0-based, post-drop)")
          ->needs(ex_data_opt);
  explain_cmd->add_option("--label-column", ex_label,
                          "Column to exclude from the features");
  explain_cmd->add_option("--top-k", ex_top_k,
                          "Keep only the k largest attributions");
  CLI::Option* ex_graph_opt = explain_cmd->add_flag(
      "--graph", ex_graph, "Export every shape function as a JSON file");
  ex_graph_opt->excludes(ex_sample_opt);
  explain_cmd
      ->add_option("--grid", ex_grid, "Display grid points per shape function")
      ->capture_default_str();

  // benchmark
  std::string bm_config;
  std::string bm_report = "report.csv", bm_summary = "summary.txt";
  CLI::App* benchmark_cmd = app.add_subcommand(
      "benchmark",
      "Run an experiment sweep; dataset paths in the config resolve from "
      "the working directory");
  benchmark_cmd->add_option("config", bm_config, "Experiment config file")
      ->required()
      ->check(CLI::ExistingFile);
  benchmark_cmd->add_option("--report", bm_report, "Output report CSV name")
      ->capture_default_str();
  benchmark_cmd
      ->add_option("--summary", bm_summary, "Output summary text name")
      ->capture_default_str();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    const CLI::App* a = &app;
    while (!a->get_subcommands().empty()) a = a->get_subcommands().front();
    out << a->help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion& e) {
    out << e.what() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  const bool seed_given = seed_opt->count() > 0;

  const auto label_opt =
      [](const std::string& name) -> std::optional<std::string> {
    if (name.empty()) return std::nullopt;
    return name;
  };
  const auto warn_dropped = [&err](const Dataset& ds) {
    if (ds.dropped_rows > 0) {
      err << "warning: dropped " << ds.dropped_rows
          << " rows with non-finite values\n";
    }
  };

  try {
    if (train_cmd->parsed()) {
      detail::RunConfig rc;
      if (!train_config.empty()) {
        rc = detail::parse_run_config(detail::read_text_file(train_config));
      }
      if (steps_override > 0) rc.train.steps = steps_override;
      if (seed_given) rc.train.seed = seed;
      rc.train.validate();

      const Dataset ds = load_csv(train_data, label_opt(train_label));
      warn_dropped(ds);
      ModelState m = init_model(rc.train, static_cast<int>(ds.cols()),
                                ds.feature_names);
      const int every = std::max(1, rc.train.steps / 10);
      const UnsupervisedResult res =
          train_unsupervised(m, ds.X, [&](const StepLog& s) {
            if (quiet) return;
            if (s.step % every == 0 || s.step + 1 == rc.train.steps) {
              out << "step " << s.step << " loss " << s.loss << "\n";
            }
          });
      const std::string model_path =
          detail::prepare_output(output_dir, train_model);
      const std::string log_path = detail::prepare_output(output_dir, train_log);
      save_model(m, model_path);
      write_train_log(res.history, log_path);
      if (!quiet) out << "model: " << model_path << "\nlog: " << log_path << "\n";
      return 0;
    }

    if (finetune_cmd->parsed()) {
      detail::RunConfig rc;
      if (!ft_config.empty()) {
        rc = detail::parse_run_config(detail::read_text_file(ft_config));
      }
      if (seed_given) rc.finetune.seed = seed;

      ModelState m = load_model(ft_model_in);
      const Dataset ds = load_csv(ft_data, ft_label);
      warn_dropped(ds);
      auto [tr, val] =
          detail::carve_validation(ds, ft_val_fraction, rc.finetune.seed);
      const bool val_ok = val.rows() > 0 && val.labels.minCoeff() < 0.5 &&
                          val.labels.maxCoeff() > 0.5;
      if (!val_ok && val.rows() > 0) {
        err << "warning: validation split lacks both classes; "
               "fine-tuning without early stopping\n";
      }
      const FinetuneResult res = finetune(
          m, tr.X, tr.labels, val_ok ? val.X : Matrix(),
          val_ok ? val.labels : Vector(), rc.finetune, [&](const EpochLog& e) {
            if (quiet) return;
            out << "epoch " << e.epoch << " loss " << e.train_loss;
            if (std::isfinite(e.val_auc)) out << " val_auc " << e.val_auc;
            out << "\n";
          });
      const std::string model_path =
          detail::prepare_output(output_dir, ft_model_out);
      const std::string history_path =
          detail::prepare_output(output_dir, ft_history);
      save_model(m, model_path);
      write_finetune_history(res.history, history_path);
      if (!quiet) {
        out << "model: " << model_path << "\nhistory: " << history_path << "\n";
        if (res.used_validation) {
          out << "best epoch " << res.best_epoch << " val_auc "
              << res.best_val_auc << "\n";
        }
      }
      return 0;
    }

    if (score_cmd->parsed()) {
      const ModelState m = load_model(score_model);
      const Dataset ds = load_csv(score_data, label_opt(score_label));
      warn_dropped(ds);
      const Vector s = score_samples(m, ds.X);
      const std::string scores_path =
          detail::prepare_output(output_dir, score_out);
      write_scores_csv(s, scores_path);
      if (!quiet) {
        out << "scores: " << scores_path << " (" << s.size() << " rows)\n";
        if (ds.has_labels()) out << "auc " << auc_metric(s, ds.labels) << "\n";
      }
      return 0;
    }

    if (explain_cmd->parsed()) {
      if (!ex_graph && ex_sample_opt->count() == 0) {
        err << "error: explain: pass --graph or --sample <row>\n";
        return 2;
      }
      const ModelState m = load_model(ex_model);
      if (ex_graph) {
        const ExplanationGraph eg = build_explanation_graph(m, ex_grid);
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(output_dir, ec);
        const std::vector<std::string> files =
            write_explanation_graph(eg, output_dir);
        if (!quiet) {
          out << "wrote " << files.size() << " explanation files to "
              << output_dir << "\n";
        }
        return 0;
      }
      const Dataset ds = load_csv(ex_data, label_opt(ex_label));
      warn_dropped(ds);
      if (ex_sample < 0 || ex_sample >= static_cast<int>(ds.rows())) {
        throw InvalidInputError("sample index out of range: " +
                                std::to_string(ex_sample) + " of " +
                                std::to_string(ds.rows()) + " rows");
      }
      const Vector x = ds.X.row(ex_sample).transpose();
      const Attribution att = explain_sample(m, x, ex_top_k);
      const std::string path = detail::prepare_output(
          output_dir, "sample_" + std::to_string(ex_sample) + ".json");
      detail::write_text_file(path,
                              attribution_to_json(att, ex_sample).dump(2) + "\n");
      if (!quiet) {
        out << "sample " << ex_sample << " score " << att.total << " bias "
            << att.bias << "\n";
        for (const AttributionTerm& t : att.terms) {
          out << "  " << std::left << std::setw(24) << t.name << " " << t.value
              << "\n";
        }
        out << "attribution: " << path << "\n";
      }
      return 0;
    }

    if (benchmark_cmd->parsed()) {
      ExperimentConfig cfg = load_experiment_config(bm_config);
      if (seed_given) cfg.seeds = {seed};
      const BenchmarkReport report = run_benchmark(cfg);
      const std::string report_path =
          detail::prepare_output(output_dir, bm_report);
      const std::string summary_path =
          detail::prepare_output(output_dir, bm_summary);
      write_report_csv(report, report_path);
      const std::string summary = summarize_report(report);
      detail::write_text_file(summary_path, summary);
      if (!quiet) {
        out << summary;
        out << "report: " << report_path << "\nsummary: " << summary_path
            << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "error: no subcommand\n";
  return 2;
}

}  // namespace diad
