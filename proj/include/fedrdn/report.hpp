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
#pragma once

// Run outputs. Per seed, under <output_dir>/seed_<s>/:
//   summary.json   config echo, every round, final accuracies, cross-site matrix, registry audit
//   rounds.jsonl   one record per (round, client)
//   rounds.csv     round,client_id,split,loss,accuracy
//   cross_site.csv source,target,accuracy
//   model.json     final global and local parameters
// plus <output_dir>/report.json aggregating the seeds. Files are written to a
// temporary name and renamed into place.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedrdn/config.hpp"
#include "fedrdn/federation.hpp"

namespace fedrdn {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kSimulatorVersion = "0.1.0";

/// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  detail::write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path.string() + "'", path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("not valid JSON: ") + e.what(), path.string());
  }
}

// ---------------------------------------------------------------------------
// Parameters

inline Json params_to_json(const ParameterVector& p) {
  Json segs = Json::array();
  for (const auto& s : p.segments())
    segs.push_back({{"name", s.name}, {"shape", s.value.shape()}, {"values", s.value.values()}});
  return segs;
}

inline ParameterVector params_from_json(const Json& j) {
  if (!j.is_array()) throw FormatError("parameter list must be an array", 0);
  std::vector<ParamSegment> segs;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const Json& s = j[i];
    if (!s.contains("name") || !s.contains("shape") || !s.contains("values"))
      throw FormatError("parameter segment lacks name, shape or values", i);
    segs.push_back({s.at("name").get<std::string>(),
                    Tensor(s.at("shape").get<Shape>(), s.at("values").get<std::vector<double>>())});
  }
  return ParameterVector(std::move(segs));
}

// ---------------------------------------------------------------------------
// One seed

struct SeedRun {
  std::uint64_t seed = 0;
  FederationData federation;
  ModelSpec spec;
  PreparedArm arm;
  ExperimentResult result;
  std::vector<std::vector<double>> cross_site;
};

/// Statistics round (if the arm needs it), T rounds, then cross-site evaluation
/// of the last round's local models.
inline SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed, const std::filesystem::path& base_dir = {}) {
  SeedRun r;
  r.seed = seed;
  r.federation = build_federation(cfg, seed, base_dir);
  r.spec = model_spec(cfg, r.federation);
  r.arm = prepare_arm(cfg.arm, r.federation, cfg.arm_options);
  r.result = run_experiment(r.federation, r.spec, r.arm, cfg.algorithm, seed, {cfg.workers, nullptr});
  const auto clients = make_clients(r.federation, r.arm, seed);
  r.cross_site = cross_site_matrix(r.spec, r.result.locals, clients);
  return r;
}

inline double mean_off_diagonal(const std::vector<std::vector<double>>& m) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j)
      if (i != j) {
        s += m[i][j];
        ++n;
      }
  return n ? s / static_cast<double>(n) : 0.0;
}

inline Json round_to_json(const RoundReport& r) {
  Json clients = Json::array();
  for (const auto& c : r.clients)
    clients.push_back({{"client_id", c.client_id},
                       {"train_loss", c.train_loss},
                       {"train_accuracy", c.train_accuracy},
                       {"test_loss", c.test_loss},
                       {"test_accuracy", c.test_accuracy}});
  return {{"round", r.round},
          {"avg_accuracy_weighted", r.avg_accuracy_weighted},
          {"avg_accuracy_unweighted", r.avg_accuracy_unweighted},
          {"wall_seconds", r.wall_seconds},
          {"clients", clients}};
}

inline RoundReport round_from_json(const Json& j) {
  RoundReport r;
  r.round = j.at("round").get<std::size_t>();
  r.avg_accuracy_weighted = j.at("avg_accuracy_weighted").get<double>();
  r.avg_accuracy_unweighted = j.at("avg_accuracy_unweighted").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  for (const auto& c : j.at("clients"))
    r.clients.push_back({c.at("client_id").get<int>(), c.at("train_loss").get<double>(),
                         c.at("train_accuracy").get<double>(), c.at("test_loss").get<double>(),
                         c.at("test_accuracy").get<double>()});
  return r;
}

inline Json summary_json(const RunConfig& cfg, const SeedRun& run) {
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  j["kind"] = "run_summary";
  j["versions"] = {{"simulator", kSimulatorVersion}, {"config_schema", kConfigSchemaVersion}};
  RunConfig echo = cfg;
  echo.seeds = {run.seed};
  j["config"] = to_json(echo);
  j["seed"] = run.seed;
  j["arm"] = arm_name(cfg.arm);
  Json counts = Json::array();
  for (const auto& c : run.federation.clients) counts.push_back(c.n_k());
  j["sample_counts"] = counts;

  Json rounds = Json::array();
  for (const auto& r : run.result.rounds) rounds.push_back(round_to_json(r));
  j["rounds"] = rounds;

  const RoundReport& last = run.result.rounds.back();
  Json per_client = Json::array();
  for (const auto& c : last.clients) per_client.push_back(c.test_accuracy);
  j["final"] = {{"per_client_accuracy", per_client},
                {"avg_accuracy_weighted", last.avg_accuracy_weighted},
                {"avg_accuracy_unweighted", last.avg_accuracy_unweighted}};
  j["cross_site"] = run.cross_site;
  j["cross_site_mean_off_diagonal"] = mean_off_diagonal(run.cross_site);

  if (run.arm.registry) {
    Json reg = Json::array();
    for (const auto& m : run.arm.stats_messages)
      reg.push_back({{"client_id", m.client_id},
                     {"sample_count", m.sample_count},
                     {"mean", m.stats.mean},
                     {"std", m.stats.std}});
    j["registry"] = reg;
  } else {
    j["registry"] = nullptr;
  }
  const auto& p = run.result.payloads;
  j["payloads"] = {{"stats_messages", p.stats_messages},
                   {"stats_bytes_per_message", p.stats_bytes_per_message},
                   {"parameter_uploads", p.parameter_uploads},
                   {"mean_image_uploads", p.mean_image_uploads}};
  return j;
}

inline std::string rounds_jsonl(const SeedRun& run) {
  std::string out;
  for (const auto& r : run.result.rounds)
    for (const auto& c : r.clients) {
      Json rec = {{"round", r.round},
                  {"client_id", c.client_id},
                  {"train_loss", c.train_loss},
                  {"train_accuracy", c.train_accuracy},
                  {"test_loss", c.test_loss},
                  {"test_accuracy", c.test_accuracy}};
      out += rec.dump() + "\n";
    }
  return out;
}

inline std::string rounds_csv(const SeedRun& run) {
  std::string out = "round,client_id,split,loss,accuracy\n";
  for (const auto& r : run.result.rounds)
    for (const auto& c : r.clients) {
      const std::string head = std::to_string(r.round) + "," + std::to_string(c.client_id) + ",";
      out += head + "train," + format_double(c.train_loss) + "," + format_double(c.train_accuracy) + "\n";
      out += head + "test," + format_double(c.test_loss) + "," + format_double(c.test_accuracy) + "\n";
    }
  return out;
}

inline std::string cross_site_csv(const std::vector<std::vector<double>>& m) {
  std::string out = "source,target,accuracy\n";
  for (std::size_t s = 0; s < m.size(); ++s)
    for (std::size_t t = 0; t < m[s].size(); ++t)
      out += std::to_string(s) + "," + std::to_string(t) + "," + format_double(m[s][t]) + "\n";
  return out;
}

inline Json model_json(const SeedRun& run) {
  Json locals = Json::array();
  for (const auto& l : run.result.locals) locals.push_back(params_to_json(l));
  return {{"schema_version", kReportSchemaVersion},
          {"kind", "model"},
          {"global", params_to_json(run.result.global)},
          {"locals", locals}};
}

inline std::filesystem::path seed_dir(const std::filesystem::path& out, std::uint64_t seed) {
  return out / ("seed_" + std::to_string(seed));
}

inline void write_seed_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const SeedRun& run) {
  std::filesystem::create_directories(dir);
  write_text_atomic(dir / "summary.json", summary_json(cfg, run).dump(2) + "\n");
  write_text_atomic(dir / "rounds.jsonl", rounds_jsonl(run));
  write_text_atomic(dir / "rounds.csv", rounds_csv(run));
  write_text_atomic(dir / "cross_site.csv", cross_site_csv(run.cross_site));
  write_text_atomic(dir / "model.json", model_json(run).dump() + "\n");
}

/// Top-level report over seeds: per-seed finals and their means.
inline Json aggregate_report(const RunConfig& cfg, const std::vector<Json>& summaries) {
  if (summaries.empty()) throw MisuseError("aggregate_report: no seed summaries");
  Json runs = Json::array();
  const std::size_t k = summaries.front().at("final").at("per_client_accuracy").size();
  std::vector<double> per_client(k, 0.0);
  double unweighted = 0.0, weighted = 0.0, off = 0.0;
  for (const auto& s : summaries) {
    const Json& f = s.at("final");
    runs.push_back({{"seed", s.at("seed")}, {"dir", "seed_" + std::to_string(s.at("seed").get<std::uint64_t>())},
                    {"final", f}, {"cross_site_mean_off_diagonal", s.at("cross_site_mean_off_diagonal")}});
    for (std::size_t i = 0; i < k; ++i) per_client[i] += f.at("per_client_accuracy")[i].get<double>();
    unweighted += f.at("avg_accuracy_unweighted").get<double>();
    weighted += f.at("avg_accuracy_weighted").get<double>();
    off += s.at("cross_site_mean_off_diagonal").get<double>();
  }
  const double n = static_cast<double>(summaries.size());
  for (double& v : per_client) v /= n;
  Json j;
  j["schema_version"] = kReportSchemaVersion;
  j["kind"] = "report";
  j["versions"] = {{"simulator", kSimulatorVersion}, {"config_schema", kConfigSchemaVersion}};
  j["config"] = to_json(cfg);
  j["arm"] = arm_name(cfg.arm);
  j["seeds"] = cfg.seeds;
  j["runs"] = runs;
  j["mean"] = {{"per_client_accuracy", per_client},
               {"avg_accuracy_unweighted", unweighted / n},
               {"avg_accuracy_weighted", weighted / n},
               {"cross_site_mean_off_diagonal", off / n}};
  return j;
}

/// Runs every seed of `cfg` and writes all outputs. Returns the aggregate report.
inline Json run_and_write(const RunConfig& cfg, const std::filesystem::path& base_dir = {}) {
  std::filesystem::path out(cfg.output_dir);
  if (out.is_relative() && !base_dir.empty()) out = base_dir / out;
  std::vector<Json> summaries;
  for (std::uint64_t seed : cfg.seeds) {
    const SeedRun run = run_seed(cfg, seed, base_dir);
    write_seed_outputs(seed_dir(out, seed), cfg, run);
    summaries.push_back(summary_json(cfg, run));
  }
  Json report = aggregate_report(cfg, summaries);
  write_text_atomic(out / "report.json", report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// Comparison

struct CompareRow {
  std::string label;
  std::vector<double> per_client;  // fractions
  double average = 0.0;
  double delta = 0.0;              // average minus the first row's average
};

/// Rows in input order. Reports must agree on dataset, model, algorithm and
/// seeds; otherwise ConfigError lists the fields that differ.
inline std::vector<CompareRow> compare_reports(const std::vector<Json>& reports,
                                               const std::vector<std::string>& labels = {}) {
  if (reports.empty()) throw ConfigError("no reports given", "reports");
  std::vector<std::string> mismatched;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const Json& r = reports[i];
    if (!r.is_object() || r.value("kind", "") != "report" || !r.contains("config") || !r.contains("mean"))
      throw ConfigError("not a run report", "reports[" + std::to_string(i) + "]");
    if (i == 0) continue;
    const Json& a = reports.front().at("config");
    const Json& b = r.at("config");
    for (const char* field : {"dataset", "model", "algorithm"})
      if (a.at(field) != b.at(field)) mismatched.push_back("reports[" + std::to_string(i) + "]." + field);
    if (reports.front().at("seeds") != r.at("seeds")) mismatched.push_back("reports[" + std::to_string(i) + "].seeds");
    if (reports.front().at("mean").at("per_client_accuracy").size() != r.at("mean").at("per_client_accuracy").size())
      mismatched.push_back("reports[" + std::to_string(i) + "].num_clients");
  }
  if (!mismatched.empty()) {
    std::string list;
    for (const auto& m : mismatched) list += (list.empty() ? "" : ", ") + m;
    throw ConfigError("incompatible reports: " + list, list);
  }
  std::vector<CompareRow> rows;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const Json& mean = reports[i].at("mean");
    CompareRow row;
    row.label = i < labels.size() ? labels[i] : reports[i].at("arm").get<std::string>();
    row.per_client = mean.at("per_client_accuracy").get<std::vector<double>>();
    row.average = mean.at("avg_accuracy_unweighted").get<double>();
    row.delta = row.average - (rows.empty() ? row.average : rows.front().average);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string percent(double fraction, bool sign = false) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), sign ? "%+.2f" : "%.2f", 100.0 * fraction);
  return buf;
}

/// CSV table in percent with two decimals: arm, client_0..client_{K-1}, avg, delta.
inline std::string format_compare_csv(const std::vector<CompareRow>& rows) {
  std::string out = "arm";
  for (std::size_t i = 0; i < rows.front().per_client.size(); ++i) out += ",client_" + std::to_string(i);
  out += ",avg,delta\n";
  for (const auto& r : rows) {
    out += r.label;
    for (double v : r.per_client) out += "," + percent(v);
    out += "," + percent(r.average) + "," + percent(r.delta, true) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature export

enum class FeatureLayer { Penultimate, Logits };

inline FeatureLayer parse_feature_layer(const std::string& tag) {
  if (tag == "penultimate") return FeatureLayer::Penultimate;
  if (tag == "logits") return FeatureLayer::Logits;
  throw ConfigError("unknown layer tag '" + tag + "' (expected penultimate or logits)", "layer");
}

/// One row per test sample: client_id, label, activations of `layer` for the
/// sample after its client's Test-mode pipeline.
inline std::string export_features_csv(const ModelSpec& spec, const ParameterVector& params,
                                       const FederationData& fed, const PreparedArm& arm, FeatureLayer layer) {
  const auto clients = make_clients(fed, arm, 0);
  const std::size_t width = layer == FeatureLayer::Penultimate ? penultimate_width(spec) : spec.num_classes;
  std::string out = "client_id,label";
  for (std::size_t i = 0; i < width; ++i) out += ",f" + std::to_string(i);
  out += "\n";
  for (const auto& c : clients) {
    const auto& test = c.data->test;
    PipelineContext ctx;
    ctx.registry = c.registry.get();
    ctx.own_stats = &c.own_stats;
    for (const auto& img : test) {
      Tensor x = apply_pipeline(c.test_pipeline, img.pixels, ctx);
      x = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
      const Tensor f = layer == FeatureLayer::Penultimate ? penultimate_features(spec, params, x)
                                                          : forward(spec, params, x);
      out += std::to_string(c.client_id()) + "," + std::to_string(img.label);
      for (double v : f.data()) out += "," + format_double(v);
      out += "\n";
    }
  }
  return out;
}

}  // namespace fedrdn
