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

// fedrdn: command-line front end.
//
//   fedrdn run --config cfg.json [--output-dir DIR]
//   fedrdn compare REPORT.json... [--label NAME]... [--out table.csv]
//   fedrdn export-features --run-dir DIR/seed_S [--layer penultimate] [--model global|local:K] --out features.csv
//   fedrdn gen-data --config cfg.json --seed S --out data.fsim [--partition-out partition.json]
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedrdn/fedrdn.hpp"

namespace fs = std::filesystem;
using namespace fedrdn;

namespace {

int cmd_run(const std::string& config_path, const std::string& output_override) {
  RunConfig cfg = load_run_config(config_path);
  if (!output_override.empty()) cfg.output_dir = output_override;
  const Json report = run_and_write(cfg);
  const Json& mean = report.at("mean");
  std::printf("arm %s, %zu seed(s): mean accuracy %s%% (weighted %s%%), cross-site off-diagonal %s%%\n",
              arm_name(cfg.arm), cfg.seeds.size(), percent(mean.at("avg_accuracy_unweighted").get<double>()).c_str(),
              percent(mean.at("avg_accuracy_weighted").get<double>()).c_str(),
              percent(mean.at("cross_site_mean_off_diagonal").get<double>()).c_str());
  std::printf("wrote %s\n", (fs::path(cfg.output_dir) / "report.json").string().c_str());
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const std::vector<std::string>& labels,
                const std::string& out) {
  if (!labels.empty() && labels.size() != paths.size())
    throw ConfigError("give one --label per report or none", "label");
  std::vector<Json> reports;
  for (const auto& p : paths) reports.push_back(read_json_file(p));
  const std::string table = format_compare_csv(compare_reports(reports, labels));
  std::fputs(table.c_str(), stdout);
  if (!out.empty()) write_text_atomic(out, table);
  return 0;
}

int cmd_export(const std::string& run_dir, const std::string& layer_tag, const std::string& which,
               const std::string& out) {
  const FeatureLayer layer = parse_feature_layer(layer_tag);
  const Json summary = read_json_file(fs::path(run_dir) / "summary.json");
  const Json model = read_json_file(fs::path(run_dir) / "model.json");
  const RunConfig cfg = parse_run_config(summary.at("config"));
  const auto seed = summary.at("seed").get<std::uint64_t>();

  ParameterVector params;
  if (which == "global") {
    params = params_from_json(model.at("global"));
  } else if (which.rfind("local:", 0) == 0) {
    std::size_t k = 0;
    try {
      k = std::stoul(which.substr(6));
    } catch (const std::exception&) {
      throw ConfigError("expected global or local:K", "model");
    }
    if (k >= model.at("locals").size()) throw ConfigError("no local model " + std::to_string(k), "model");
    params = params_from_json(model.at("locals")[k]);
  } else {
    throw ConfigError("expected global or local:K", "model");
  }

  const FederationData fed = build_federation(cfg, seed);
  const ModelSpec spec = model_spec(cfg, fed);
  require_params_match(spec, params);
  const PreparedArm arm = prepare_arm(cfg.arm, fed, cfg.arm_options);
  write_text_atomic(out, export_features_csv(spec, params, fed, arm, layer));
  return 0;
}

int cmd_gen_data(const std::string& config_path, std::uint64_t seed, const std::string& out,
                 std::string partition_out) {
  const RunConfig cfg = load_run_config(config_path);
  if (!std::holds_alternative<SyntheticSource>(cfg.dataset))
    throw ConfigError("gen-data needs a synthetic dataset section", "dataset.source");
  const FederationData fed = build_federation(cfg, seed);
  auto [file, partition] = flatten_federation(fed);
  write_fsim(out, file);
  if (partition_out.empty()) partition_out = fs::path(out).replace_extension(".partition.json").string();
  Json counts = Json::array();
  for (const auto& c : partition.counts) counts.push_back({c.train, c.test});
  write_text_atomic(partition_out, Json{{"mode", "contiguous"}, {"counts", counts}}.dump(2) + "\n");
  std::printf("wrote %zu records to %s and partition to %s\n", file.records.size(), out.c_str(),
              partition_out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator with randomized data normalization"};
  app.require_subcommand(1);

  std::string config_path, output_override;
  auto* run = app.add_subcommand("run", "run every seed of a configuration and write reports");
  run->add_option("--config", config_path, "configuration file (JSON)")->required();
  run->add_option("--output-dir", output_override, "override output_dir from the configuration");

  std::vector<std::string> report_paths, labels;
  std::string compare_out;
  auto* compare = app.add_subcommand("compare", "tabulate report.json files against the first one");
  compare->add_option("reports", report_paths, "report.json files; the first is the baseline")->required();
  compare->add_option("--label", labels, "row label per report (default: arm name)");
  compare->add_option("--out", compare_out, "also write the table to this CSV file");

  std::string run_dir, layer = "penultimate", which = "global", features_out;
  auto* exp = app.add_subcommand("export-features", "write per-sample activations of a trained model");
  exp->add_option("--run-dir", run_dir, "a seed directory produced by run")->required();
  exp->add_option("--layer", layer, "penultimate or logits");
  exp->add_option("--model", which, "global or local:K");
  exp->add_option("--out", features_out, "output CSV")->required();

  std::string gen_config, gen_out, partition_out;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "synthesize a federation and store it as FSIM1");
  gen->add_option("--config", gen_config, "configuration with a synthetic dataset section")->required();
  gen->add_option("--seed", gen_seed, "run seed the dataset is derived from");
  gen->add_option("--out", gen_out, "output FSIM1 file")->required();
  gen->add_option("--partition-out", partition_out, "partition JSON (default: <out>.partition.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*run) return cmd_run(config_path, output_override);
    if (*compare) return cmd_compare(report_paths, labels, compare_out);
    if (*exp) return cmd_export(run_dir, layer, which, features_out);
    if (*gen) return cmd_gen_data(gen_config, gen_seed, gen_out, partition_out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
