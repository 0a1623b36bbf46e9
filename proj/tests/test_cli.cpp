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

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diad/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = diad::run_cli(std::move(args), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

long count_lines(const std::string& text) {
  long n = 0;
  for (char c : text) {
    if (c == '\n') n += 1;
  }
  return n;
}

// Scratch tree shared by the whole binary: a labeled two-feature CSV of
// Gaussian inliers with 10% uniform anomalies, plus a small train config.
struct Scratch {
  fs::path root;
  std::string data;
  std::string config;
};

const Scratch& scratch() {
  static const Scratch s = [] {
    Scratch sc;
    sc.root = fs::temp_directory_path() / "diad_cli_test";
    fs::remove_all(sc.root);
    fs::create_directories(sc.root);

    sc.data = (sc.root / "data.csv").string();
    diad::Rng rng(11);
    std::ofstream csv(sc.data);
    csv << "alpha,beta,label\n";
    for (int i = 0; i < 400; ++i) {
      const bool anomaly = rng.uniform01() < 0.1;
      double a, b;
      if (anomaly) {
        a = rng.uniform(-1.0, 1.0);
        b = rng.uniform(-1.0, 1.0);
      } else {
        a = rng.normal(0.0, 0.25);
        b = rng.normal(0.0, 0.25);
      }
      csv << a << "," << b << "," << (anomaly ? 1 : 0) << "\n";
    }
    csv.close();

    sc.config = (sc.root / "run.cfg").string();
    std::ofstream cfg(sc.config);
    cfg << "layers = 1\n"
           "trees-per-layer = 8\n"
           "depth = 2\n"
           "steps = 25\n"
           "warmup-steps = 10\n"
           "anneal-steps = 15\n"
           "batch-size = 32\n"
           "smoothing-delta = 5\n"
           "dropout-rate = 0.5\n"
           "learning-rate = 0.01\n"
           "finetune-max-epochs = 4\n"
           "finetune-patience = 3\n"
           "finetune-batch-size = 16\n";
    cfg.close();
    return sc;
  }();
  return s;
}

std::string fresh_dir(const std::string& name) {
  const fs::path p = scratch().root / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::vector<double> read_scores(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "row,score");
  std::vector<double> out;
  while (std::getline(in, line)) {
    const std::size_t comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    out.push_back(std::stod(line.substr(comma + 1)));
  }
  return out;
}

}  // namespace

TEST_CASE("train writes a model file and a one-line-per-step log") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("train");

  const CliResult r =
      cli({"train", sc.data, "--config", sc.config, "--label-column", "label",
           "--output-dir", dir, "--seed", "3", "--quiet"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.empty());

  REQUIRE(fs::exists(dir + "/model.json"));
  REQUIRE(fs::exists(dir + "/train.log"));
  CHECK(count_lines(slurp(dir + "/train.log")) == 25);

  const diad::ModelState m = diad::load_model(dir + "/model.json");
  CHECK(m.config.steps == 25);
  CHECK(m.config.seed == 3);
  CHECK(m.n_features == 2);
  CHECK(m.feature_names == std::vector<std::string>{"alpha", "beta"});
}

TEST_CASE("identically seeded train runs are byte-identical") {
  const Scratch& sc = scratch();
  const std::string d1 = fresh_dir("det1");
  const std::string d2 = fresh_dir("det2");

  for (const std::string& d : {d1, d2}) {
    const CliResult r =
        cli({"train", sc.data, "--config", sc.config, "--label-column",
             "label", "--output-dir", d, "--seed", "9", "--quiet"});
    INFO(r.err);
    REQUIRE(r.code == 0);
  }
  CHECK(slurp(d1 + "/model.json") == slurp(d2 + "/model.json"));
  CHECK(slurp(d1 + "/train.log") == slurp(d2 + "/train.log"));
}

TEST_CASE("score on a reloaded model reproduces in-process scores") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("score");

  REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
               "label", "--output-dir", dir, "--seed", "5", "--quiet"})
              .code == 0);

  const CliResult r = cli({"score", dir + "/model.json", sc.data,
                           "--label-column", "label", "--output-dir", dir});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("auc ") != std::string::npos);

  const std::vector<double> got = read_scores(dir + "/scores.csv");
  const diad::ModelState m = diad::load_model(dir + "/model.json");
  const diad::Dataset ds = diad::load_csv(sc.data, std::string("label"));
  const diad::Vector want = diad::score_samples(m, ds.X);
  REQUIRE(static_cast<Eigen::Index>(got.size()) == want.size());
  for (Eigen::Index i = 0; i < want.size(); ++i) {
    CHECK(got[static_cast<std::size_t>(i)] == want[i]);
  }
}

TEST_CASE("finetune writes a model and an epoch history") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("finetune");

  REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
               "label", "--output-dir", dir, "--seed", "5", "--quiet"})
              .code == 0);
  const CliResult r =
      cli({"finetune", dir + "/model.json", sc.data, "--config", sc.config,
           "--val-fraction", "0.25", "--output-dir", dir, "--seed", "7"});
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("best epoch") != std::string::npos);

  REQUIRE(fs::exists(dir + "/finetuned.json"));
  REQUIRE(fs::exists(dir + "/finetune.log"));
  const long epochs = count_lines(slurp(dir + "/finetune.log"));
  CHECK(epochs >= 1);
  CHECK(epochs <= 4);

  const diad::ModelState m = diad::load_model(dir + "/finetuned.json");
  const diad::Dataset ds = diad::load_csv(sc.data, std::string("label"));
  CHECK(std::isfinite(diad::auc_metric(diad::score_samples(m, ds.X),
                                       ds.labels)));
}

TEST_CASE("explain exports descending attributions and shape files") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("explain");

  REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
               "label", "--output-dir", dir, "--seed", "5", "--quiet"})
              .code == 0);
  const std::string model = dir + "/model.json";

  SECTION("per-sample attribution with --top-k") {
    const CliResult r =
        cli({"explain", model, sc.data, "--label-column", "label", "--sample",
             "2", "--top-k", "2", "--output-dir", dir, "--quiet"});
    INFO(r.err);
    REQUIRE(r.code == 0);

    const nlohmann::json j = nlohmann::json::parse(slurp(dir + "/sample_2.json"));
    CHECK(j.at("kind") == "sample-explanation");
    CHECK(j.at("sample") == 2);
    const auto& terms = j.at("terms");
    REQUIRE(terms.size() <= 2);
    for (std::size_t i = 0; i + 1 < terms.size(); ++i) {
      CHECK(std::abs(terms[i].at("value").get<double>()) >=
            std::abs(terms[i + 1].at("value").get<double>()));
    }

    const diad::ModelState m = diad::load_model(model);
    const diad::Dataset ds = diad::load_csv(sc.data, std::string("label"));
    const double score = diad::score_samples(m, ds.X.row(2))[0];
    CHECK(j.at("total").get<double>() == Catch::Approx(score).margin(1e-9));
  }

  SECTION("full graph export lists every written file") {
    const CliResult r = cli({"explain", model, "--graph", "--grid", "21",
                             "--output-dir", dir, "--quiet"});
    INFO(r.err);
    REQUIRE(r.code == 0);

    const nlohmann::json index =
        nlohmann::json::parse(slurp(dir + "/explanation_index.json"));
    CHECK(index.at("kind") == "explanation-index");
    const auto& files = index.at("files");
    REQUIRE(files.size() >= 2);  // one curve per feature at minimum
    for (const auto& f : files) {
      CHECK(fs::exists(dir + "/" + f.get<std::string>()));
    }
    const nlohmann::json main0 =
        nlohmann::json::parse(slurp(dir + "/main_0.json"));
    CHECK(main0.at("kind") == "main-effect");
    CHECK(main0.at("name") == "alpha");
  }
}

TEST_CASE("benchmark runs a sweep and writes report plus summary") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("bench");

  const std::string exp = dir + "/exp.cfg";
  {
    std::ofstream f(exp);
    f << "datasets = " << sc.data << "\n"
      << "seeds = 1\n"
      << "label-budgets = 0,6\n"
      << slurp(sc.config);
  }
  const CliResult r = cli({"benchmark", exp, "--output-dir", dir, "--quiet"});
  INFO(r.err);
  REQUIRE(r.code == 0);

  const std::string report = slurp(dir + "/report.csv");
  CHECK(report.rfind("dataset,seed,n-anomalies,noise-k,stage,auc\n", 0) == 0);
  CHECK(count_lines(report) == 3);  // header + unsupervised + finetuned
  CHECK(slurp(dir + "/summary.txt").find("benchmark summary") !=
        std::string::npos);
}

TEST_CASE("usage errors exit 2 and runtime failures exit 1") {
  const Scratch& sc = scratch();
  const std::string dir = fresh_dir("errors");

  SECTION("missing input file") {
    const CliResult r = cli({"score", dir + "/absent.json", sc.data});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(count_lines(r.err) == 1);
  }
  SECTION("unknown flag") {
    const CliResult r = cli({"train", sc.data, "--bogus"});
    CHECK(r.code == 2);
    CHECK(r.err.rfind("error: ", 0) == 0);
  }
  SECTION("no subcommand") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"--quiet"}).code == 2);
  }
  SECTION("explain needs a mode") {
    REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
                 "label", "--output-dir", dir, "--quiet"})
                .code == 0);
    const CliResult r = cli({"explain", dir + "/model.json"});
    CHECK(r.code == 2);
    CHECK(r.err.find("--graph or --sample") != std::string::npos);
  }
  SECTION("--sample without a data file") {
    REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
                 "label", "--output-dir", dir, "--quiet"})
                .code == 0);
    CHECK(cli({"explain", dir + "/model.json", "--sample", "0"}).code == 2);
  }
  SECTION("bad config key is a runtime failure") {
    const std::string bad = dir + "/bad.cfg";
    std::ofstream(bad) << "no-such-knob = 1\n";
    const CliResult r = cli({"train", sc.data, "--config", bad});
    CHECK(r.code == 1);
    CHECK(r.err.find("no_such_knob") != std::string::npos);
  }
  SECTION("scoring with a soft model is a runtime failure") {
    const std::string soft = dir + "/soft.cfg";
    std::ofstream(soft) << "steps = 8\nanneal-steps = 15\nwarmup-steps = 4\n"
                        << "layers = 1\ntrees-per-layer = 8\ndepth = 2\n"
                        << "batch-size = 32\n";
    REQUIRE(cli({"train", sc.data, "--config", soft, "--label-column", "label",
                 "--output-dir", dir, "--quiet"})
                .code == 0);
    const CliResult r = cli({"score", dir + "/model.json", sc.data});
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: ", 0) == 0);
  }
  SECTION("sample index out of range is a runtime failure") {
    REQUIRE(cli({"train", sc.data, "--config", sc.config, "--label-column",
                 "label", "--output-dir", dir, "--quiet"})
                .code == 0);
    const CliResult r = cli({"explain", dir + "/model.json", sc.data,
                             "--label-column", "label", "--sample", "9999"});
    CHECK(r.code == 1);
    CHECK(r.err.find("out of range") != std::string::npos);
  }
}

TEST_CASE("help and version exit 0") {
  const CliResult version = cli({"--version"});
  CHECK(version.code == 0);
  CHECK(version.out.find("diad") != std::string::npos);

  const CliResult top = cli({"--help"});
  CHECK(top.code == 0);
  CHECK(top.out.find("train") != std::string::npos);

  const CliResult sub = cli({"train", "--help"});
  CHECK(sub.code == 0);
  CHECK(sub.out.find("Training CSV") != std::string::npos);
}
