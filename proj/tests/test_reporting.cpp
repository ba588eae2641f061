/**
 * Copyright 2026 The FedRDN Simulator Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "fedrdn/fedrdn.hpp"

using namespace fedrdn;
namespace fs = std::filesystem;

namespace {

Json small_config(const std::string& arm, const std::string& out) {
  return Json::parse(R"({
    "schema_version": 1,
    "dataset": {"source": "synthetic",
                "synthetic": {"num_clients": 3, "num_classes": 4, "image_shape": [3, 8, 8],
                              "noise_std": 0.5, "train_per_client": 16, "test_per_client": 12}},
    "model": {"type": "cnn", "conv_channels": [4], "kernel": 3, "pool": 2, "head_width": 8},
    "augmentation": {"arm": ")" + arm + R"("},
    "algorithm": {"name": "fedavg", "lr": 0.05, "batch_size": 8, "local_epochs": 1, "rounds": 2},
    "seeds": [0, 1],
    "output_dir": ")" + out + R"("
  })");
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("fedrdn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + FEDRDN_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

}  // namespace

TEST(Config, RoundTripIsCanonical) {
  for (const char* arm : {"basic", "norm", "fedmix", "rdn", "rdnv"}) {
    const RunConfig a = parse_run_config(small_config(arm, "out"));
    const RunConfig b = parse_run_config(to_json(a));
    EXPECT_EQ(b, canonical(a)) << arm;
    EXPECT_EQ(to_json(b), to_json(a));
  }
  Json j = small_config("rdn", "out");
  j["algorithm"] = {{"name", "fedprox"}, {"mu", 0.01}};
  const RunConfig c = parse_run_config(j);
  EXPECT_EQ(c.algorithm.mu, 0.01);
  EXPECT_EQ(parse_run_config(to_json(c)), canonical(c));
}

TEST(Config, MissingFieldIsNamed) {
  for (const auto& [path, key] : std::vector<std::pair<std::string, std::string>>{
           {"", "seeds"}, {"", "output_dir"}, {"", "augmentation"}, {"augmentation", "arm"}, {"algorithm", "name"}}) {
    Json j = small_config("rdn", "out");
    if (path.empty()) j.erase(key);
    else j[path].erase(key);
    try {
      parse_run_config(j);
      FAIL() << key;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), path.empty() ? key : path + "." + key);
    }
  }
}

TEST(Config, RejectsBadValues) {
  auto expect_field = [](Json j, const std::string& field) {
    try {
      parse_run_config(j);
      FAIL() << field;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), field);
    }
  };
  Json j = small_config("rdn", "out");
  j["augmentation"]["arm"] = "mixup";
  expect_field(j, "augmentation.arm");
  j = small_config("rdn", "out");
  j["algorithm"]["mu"] = 0.1;
  expect_field(j, "algorithm.mu");
  j = small_config("rdn", "out");
  j["seeds"] = Json::array();
  expect_field(j, "seeds");
  j = small_config("rdn", "out");
  j["extra"] = 1;
  expect_field(j, "extra");
  j = small_config("rdn", "out");
  j["augmentation"]["fedmix"] = {{"lambda", 0.1}};
  expect_field(j, "augmentation.fedmix");
  j = small_config("rdn", "out");
  j["model"]["kernel"] = 4;
  expect_field(j, "model.kernel");
  EXPECT_THROW(parse_run_config(std::string("{not json")), ConfigError);
}

TEST(Report, SeedRunsAreReproducible) {
  const RunConfig cfg = parse_run_config(small_config("rdn", "out"));
  const SeedRun a = run_seed(cfg, 3), b = run_seed(cfg, 3);
  EXPECT_EQ(summary_json(cfg, a).at("final"), summary_json(cfg, b).at("final"));
  EXPECT_EQ(rounds_csv(a), rounds_csv(b));
  EXPECT_EQ(a.result.global, b.result.global);
  const Json s = summary_json(cfg, a);
  EXPECT_EQ(s.at("rounds").size(), 2u);
  EXPECT_EQ(s.at("registry").size(), 3u);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(round_to_json(round_from_json(s.at("rounds")[t])), s.at("rounds")[t]);
    EXPECT_TRUE(round_from_json(s.at("rounds")[t]).same_metrics(a.result.rounds[t]));
  }
}

TEST(Report, ModelParametersRoundTripExactly) {
  const RunConfig cfg = parse_run_config(small_config("basic", "out"));
  const SeedRun run = run_seed(cfg, 0);
  const Json m = Json::parse(model_json(run).dump());
  EXPECT_EQ(params_from_json(m.at("global")), run.result.global);
  ASSERT_EQ(m.at("locals").size(), 3u);
  EXPECT_EQ(params_from_json(m.at("locals")[2]), run.result.locals[2]);
}

TEST(Report, MeanOffDiagonal) {
  EXPECT_DOUBLE_EQ(mean_off_diagonal({{1, 0.5}, {0.25, 1}}), 0.375);
  EXPECT_EQ(mean_off_diagonal({{1}}), 0.0);
}

class Compare : public ::testing::Test {
 protected:
  static Json fake_report(const std::string& arm, std::vector<double> acc) {
    Json r = aggregate_report(parse_run_config(small_config(arm, "out")),
                              {Json{{"seed", 0},
                                    {"final",
                                     {{"per_client_accuracy", acc},
                                      {"avg_accuracy_weighted", 0.0},
                                      {"avg_accuracy_unweighted", 0.0}}},
                                    {"cross_site_mean_off_diagonal", 0.0}}});
    double avg = 0;
    for (double v : acc) avg += v / static_cast<double>(acc.size());
    r["mean"]["avg_accuracy_unweighted"] = avg;
    return r;
  }
};

TEST_F(Compare, SelfComparisonHasZeroDeltas) {
  const Json r = fake_report("rdn", {0.5, 0.75, 0.25, 1.0});
  const auto rows = compare_reports({r, r, r});
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& row : rows) EXPECT_EQ(row.delta, 0.0);
}

TEST_F(Compare, TableShapeAndDeltas) {
  const Json a = fake_report("basic", {0.5, 0.6, 0.7, 0.8});
  const Json b = fake_report("rdn", {0.9, 0.6, 0.75, 0.85});
  const auto rows = compare_reports({a, b});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[1].delta, rows[1].average - rows[0].average);
  const std::string csv = format_compare_csv(rows);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "arm,client_0,client_1,client_2,client_3,avg,delta");
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 2u);
  for (const auto& l : lines) EXPECT_EQ(std::count(l.begin(), l.end(), ','), 6);
  EXPECT_EQ(lines[0], "basic,50.00,60.00,70.00,80.00,65.00,+0.00");
  EXPECT_EQ(lines[1], "rdn,90.00,60.00,75.00,85.00,77.50,+12.50");
}

TEST_F(Compare, IncompatibleReportsListFields) {
  Json a = fake_report("basic", {0.5, 0.6, 0.7, 0.8});
  Json b = fake_report("rdn", {0.9, 0.6, 0.75, 0.85});
  b["config"]["algorithm"]["lr"] = 0.5;
  b["seeds"] = {7};
  try {
    compare_reports({a, b});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("reports[1].algorithm"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("reports[1].seeds"), std::string::npos);
  }
  EXPECT_THROW(compare_reports({a, Json{{"kind", "other"}}}), ConfigError);
}

TEST(Features, ShapeAndDeterminism) {
  const RunConfig cfg = parse_run_config(small_config("rdn", "out"));
  const SeedRun run = run_seed(cfg, 0);
  const std::string a = export_features_csv(run.spec, run.result.global, run.federation, run.arm,
                                            FeatureLayer::Penultimate);
  const std::string b = export_features_csv(run.spec, run.result.global, run.federation, run.arm,
                                            FeatureLayer::Penultimate);
  EXPECT_EQ(a, b);
  EXPECT_EQ(count_lines(a), 1 + 3 * 12u);
  const std::string header = a.substr(0, a.find('\n'));
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 1 + 8);
  const std::string logits = export_features_csv(run.spec, run.result.global, run.federation, run.arm,
                                                 FeatureLayer::Logits);
  const std::string lh = logits.substr(0, logits.find('\n'));
  EXPECT_EQ(std::count(lh.begin(), lh.end(), ','), 1 + 4);
  EXPECT_THROW(parse_feature_layer("conv1"), ConfigError);
}

TEST(Cli, RunWritesReportsAndEchoReproduces) {
  TempDir dir;
  const fs::path cfg = dir.path() / "cfg.json";
  write(cfg, small_config("rdn", (dir.path() / "out").string()).dump(2));
  ASSERT_EQ(cli("run --config " + cfg.string()), 0);
  const Json report = read_json_file(dir.path() / "out" / "report.json");
  EXPECT_EQ(report.at("runs").size(), 2u);
  for (const char* f : {"summary.json", "rounds.jsonl", "rounds.csv", "cross_site.csv", "model.json"})
    EXPECT_TRUE(fs::exists(dir.path() / "out" / "seed_1" / f)) << f;
  const Json summary = read_json_file(dir.path() / "out" / "seed_1" / "summary.json");
  EXPECT_EQ(summary.at("rounds").size(), 2u);
  EXPECT_EQ(count_lines(slurp(dir.path() / "out" / "seed_1" / "rounds.jsonl")), 2 * 3u);
  EXPECT_EQ(count_lines(slurp(dir.path() / "out" / "seed_1" / "cross_site.csv")), 1 + 9u);

  // The echoed configuration alone reproduces the seed's metrics.
  Json echo = summary.at("config");
  echo["output_dir"] = (dir.path() / "again").string();
  write(dir.path() / "echo.json", echo.dump(2));
  ASSERT_EQ(cli("run --config " + (dir.path() / "echo.json").string()), 0);
  const Json again = read_json_file(dir.path() / "again" / "seed_1" / "summary.json");
  EXPECT_EQ(again.at("final"), summary.at("final"));
  EXPECT_EQ(again.at("cross_site"), summary.at("cross_site"));
  EXPECT_EQ(slurp(dir.path() / "again" / "seed_1" / "rounds.csv"), slurp(dir.path() / "out" / "seed_1" / "rounds.csv"));

  const fs::path feats = dir.path() / "f.csv";
  ASSERT_EQ(cli("export-features --run-dir " + (dir.path() / "out" / "seed_1").string() + " --out " + feats.string()),
            0);
  EXPECT_EQ(count_lines(slurp(feats)), 1 + 3 * 12u);
  EXPECT_EQ(cli("export-features --run-dir " + (dir.path() / "out" / "seed_1").string() +
                " --layer conv1 --out " + feats.string()),
            2);
  EXPECT_EQ(cli("export-features --run-dir " + (dir.path() / "out" / "seed_1").string() +
                " --model local:9 --out " + feats.string()),
            2);

  const fs::path table = dir.path() / "t.csv";
  const std::string report_path = (dir.path() / "out" / "report.json").string();
  ASSERT_EQ(cli("compare " + report_path + " " + report_path + " --out " + table.string()), 0);
  EXPECT_NE(slurp(table).find("+0.00"), std::string::npos);
  // The echo carries a single seed, so it cannot be tabulated against the two-seed report.
  EXPECT_EQ(cli("compare " + report_path + " " + (dir.path() / "again" / "report.json").string()), 2);
}

TEST(Cli, ExitCodes) {
  TempDir dir;
  Json j = small_config("basic", (dir.path() / "out").string());
  j.erase("seeds");
  write(dir.path() / "missing.json", j.dump());
  EXPECT_EQ(cli("run --config " + (dir.path() / "missing.json").string()), 2);
  EXPECT_EQ(cli("run --config " + (dir.path() / "nope.json").string()), 2);
  EXPECT_EQ(cli("frobnicate"), 2);
  EXPECT_EQ(cli("run"), 2);

  // A file-backed dataset whose file is corrupt fails at run time.
  Json f = small_config("basic", (dir.path() / "out").string());
  f["dataset"] = {{"source", "file"},
                  {"file", {{"path", (dir.path() / "bad.fsim").string()},
                            {"partition", {{"mode", "contiguous"}, {"counts", {{1, 1}}}}}}}};
  write(dir.path() / "bad.fsim", "FSIM1 truncated");
  write(dir.path() / "bad.json", f.dump());
  EXPECT_EQ(cli("run --config " + (dir.path() / "bad.json").string()), 1);
}

TEST(Cli, GenDataRoundTripsThroughFileSource) {
  TempDir dir;
  const Json j = small_config("rdn", (dir.path() / "out").string());
  write(dir.path() / "cfg.json", j.dump());
  const fs::path data = dir.path() / "fed.fsim";
  ASSERT_EQ(cli("gen-data --config " + (dir.path() / "cfg.json").string() + " --seed 5 --out " + data.string()), 0);
  const Json part = read_json_file(dir.path() / "fed.partition.json");
  Json f = j;
  f["dataset"] = {{"source", "file"}, {"file", {{"path", data.string()}, {"partition", part}}}};
  const RunConfig from_file = parse_run_config(f);
  const RunConfig synthetic = parse_run_config(j);
  const FederationData a = build_federation(from_file, 5), b = build_federation(synthetic, 5);
  ASSERT_EQ(a.clients.size(), b.clients.size());
  for (std::size_t k = 0; k < a.clients.size(); ++k) {
    ASSERT_EQ(a.clients[k].train.size(), b.clients[k].train.size());
    ASSERT_EQ(a.clients[k].test.size(), b.clients[k].test.size());
    EXPECT_EQ(a.clients[k].train[0].label, b.clients[k].train[0].label);
  }
}

TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(FEDRDN_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    SCOPED_TRACE(entry.path().string());
    const RunConfig cfg = load_run_config(entry.path());
    EXPECT_EQ(parse_run_config(to_json(cfg)), canonical(cfg));
    ++n;
  }
  EXPECT_GE(n, 5u);
}
