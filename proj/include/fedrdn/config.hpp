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

// Run configuration: a JSON document (schema in docs/config.md). Parsing is
// strict: unknown keys, wrong types and out-of-range values raise ConfigError
// carrying the dotted field path.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fedrdn/augmentation.hpp"
#include "fedrdn/datasets.hpp"
#include "fedrdn/errors.hpp"
#include "fedrdn/federation.hpp"
#include "fedrdn/model.hpp"
#include "fedrdn/rng.hpp"

namespace fedrdn {

using Json = nlohmann::ordered_json;

inline constexpr int kConfigSchemaVersion = 1;

struct SyntheticSource {
  enum class SkewMode { Random, Explicit };

  std::size_t num_clients = 4;
  std::size_t num_classes = 10;
  ImageShape image_shape;
  double noise_std = 0.3;
  std::size_t train_per_client = 100;
  std::size_t test_per_client = 100;
  SkewMode skew_mode = SkewMode::Random;
  std::array<double, 2> gain_range{0.5, 2.0};
  std::array<double, 2> bias_range{-1.0, 1.0};
  std::vector<std::vector<double>> gains;   // Explicit
  std::vector<std::vector<double>> biases;  // Explicit
  std::optional<std::uint64_t> seed;        // absent: derived from each run seed

  bool operator==(const SyntheticSource&) const = default;
};

struct FileSource {
  std::string path;
  PartitionSpec partition;

  bool operator==(const FileSource&) const = default;
};

struct RunConfig {
  std::variant<SyntheticSource, FileSource> dataset = SyntheticSource{};
  std::variant<MlpArch, CnnArch> architecture = CnnArch{};
  Arm arm = Arm::Basic;
  ArmOptions arm_options;
  AlgorithmConfig algorithm;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  std::string output_dir;

  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parsing helpers

namespace detail {

inline std::string join_path(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

/// Rejects keys outside `allowed`.
inline void check_keys(const Json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("expected an object", path.empty() ? "<root>" : path);
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown field", join_path(path, key));
  }
}

inline const Json& require(const Json& obj, const std::string& path, const char* key) {
  if (!obj.contains(key)) throw ConfigError("missing required field", join_path(path, key));
  return obj.at(key);
}

inline double as_double(const Json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("expected a number", path);
  return v.get<double>();
}

inline std::uint64_t as_uint(const Json& v, const std::string& path) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ConfigError("expected a non-negative integer", path);
  return v.get<std::uint64_t>();
}

inline std::string as_string(const Json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("expected a string", path);
  return v.get<std::string>();
}

inline bool as_bool(const Json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("expected true or false", path);
  return v.get<bool>();
}

inline std::vector<double> as_doubles(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("expected an array of numbers", path);
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_double(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::vector<std::size_t> as_sizes(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("expected an array of integers", path);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_uint(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::vector<std::vector<double>> as_matrix(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("expected an array of arrays", path);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_doubles(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::array<double, 2> as_range(const Json& v, const std::string& path) {
  auto d = as_doubles(v, path);
  if (d.size() != 2) throw ConfigError("expected [lo, hi]", path);
  if (d[1] < d[0]) throw ConfigError("lo must not exceed hi", path);
  return {d[0], d[1]};
}

template <typename Enum>
Enum as_enum(const Json& v, const std::string& path, std::initializer_list<std::pair<const char*, Enum>> options) {
  const std::string s = as_string(v, path);
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError("unknown value '" + s + "' (expected one of: " + names + ")", path);
}

template <typename T, typename Fn>
void optional_field(const Json& obj, const std::string& path, const char* key, T& out, Fn&& convert) {
  if (obj.contains(key)) out = convert(obj.at(key), join_path(path, key));
}

inline ImageShape parse_image_shape(const Json& v, const std::string& path) {
  auto s = as_sizes(v, path);
  if (s.size() != 3) throw ConfigError("expected [C, H, W]", path);
  for (std::size_t e : s)
    if (e == 0) throw ConfigError("extents must be positive", path);
  return {s[0], s[1], s[2]};
}

inline SyntheticSource parse_synthetic(const Json& j, const std::string& path) {
  check_keys(j, path,
             {"num_clients", "num_classes", "image_shape", "noise_std", "train_per_client", "test_per_client", "skew",
              "seed"});
  SyntheticSource s;
  optional_field(j, path, "num_clients", s.num_clients, as_uint);
  optional_field(j, path, "num_classes", s.num_classes, as_uint);
  optional_field(j, path, "image_shape", s.image_shape, parse_image_shape);
  optional_field(j, path, "noise_std", s.noise_std, as_double);
  optional_field(j, path, "train_per_client", s.train_per_client, as_uint);
  optional_field(j, path, "test_per_client", s.test_per_client, as_uint);
  if (j.contains("seed")) s.seed = as_uint(j.at("seed"), join_path(path, "seed"));
  if (s.num_clients < 1) throw ConfigError("need at least one client", join_path(path, "num_clients"));
  if (s.num_classes < 1) throw ConfigError("need at least one class", join_path(path, "num_classes"));
  if (s.train_per_client < 1) throw ConfigError("must be >= 1", join_path(path, "train_per_client"));
  if (s.test_per_client < 1) throw ConfigError("must be >= 1", join_path(path, "test_per_client"));
  if (!(s.noise_std >= 0.0)) throw ConfigError("must be >= 0", join_path(path, "noise_std"));

  if (j.contains("skew")) {
    const std::string sp = join_path(path, "skew");
    const Json& sk = j.at("skew");
    check_keys(sk, sp, {"mode", "gain_range", "bias_range", "gains", "biases"});
    s.skew_mode = as_enum<SyntheticSource::SkewMode>(
        require(sk, sp, "mode"), join_path(sp, "mode"),
        {{"random", SyntheticSource::SkewMode::Random}, {"explicit", SyntheticSource::SkewMode::Explicit}});
    if (s.skew_mode == SyntheticSource::SkewMode::Random) {
      optional_field(sk, sp, "gain_range", s.gain_range, as_range);
      optional_field(sk, sp, "bias_range", s.bias_range, as_range);
      if (!(s.gain_range[0] > 0.0)) throw ConfigError("gains must be strictly positive", join_path(sp, "gain_range"));
      if (sk.contains("gains") || sk.contains("biases"))
        throw ConfigError("only allowed when mode is 'explicit'", join_path(sp, "gains"));
    } else {
      s.gains = as_matrix(require(sk, sp, "gains"), join_path(sp, "gains"));
      s.biases = as_matrix(require(sk, sp, "biases"), join_path(sp, "biases"));
      if (sk.contains("gain_range") || sk.contains("bias_range"))
        throw ConfigError("only allowed when mode is 'random'", join_path(sp, "gain_range"));
    }
  }
  return s;
}

inline PartitionSpec parse_partition(const Json& j, const std::string& path) {
  check_keys(j, path, {"mode", "counts", "client_of", "is_test", "test_fraction", "gains", "biases"});
  PartitionSpec p;
  p.mode = as_enum<PartitionSpec::Mode>(
      require(j, path, "mode"), join_path(path, "mode"),
      {{"contiguous", PartitionSpec::Mode::Contiguous}, {"explicit", PartitionSpec::Mode::Explicit}});
  if (p.mode == PartitionSpec::Mode::Contiguous) {
    const std::string cp = join_path(path, "counts");
    const Json& counts = require(j, path, "counts");
    if (!counts.is_array()) throw ConfigError("expected an array of [train, test] pairs", cp);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      auto pair = as_sizes(counts[i], cp + "[" + std::to_string(i) + "]");
      if (pair.size() != 2) throw ConfigError("expected [train, test]", cp + "[" + std::to_string(i) + "]");
      p.counts.push_back({pair[0], pair[1]});
    }
  } else {
    const std::string cp = join_path(path, "client_of");
    for (std::size_t id : as_sizes(require(j, path, "client_of"), cp)) p.client_of.push_back(static_cast<int>(id));
    if (j.contains("is_test")) {
      const Json& flags = j.at("is_test");
      if (!flags.is_array()) throw ConfigError("expected an array of booleans", join_path(path, "is_test"));
      for (std::size_t i = 0; i < flags.size(); ++i)
        p.is_test.push_back(as_bool(flags[i], join_path(path, "is_test") + "[" + std::to_string(i) + "]"));
    }
    optional_field(j, path, "test_fraction", p.test_fraction, as_double);
  }
  optional_field(j, path, "gains", p.gains, as_matrix);
  optional_field(j, path, "biases", p.biases, as_matrix);
  return p;
}

}  // namespace detail

/// Parses a configuration document. Throws ConfigError naming the field on any violation.
inline RunConfig parse_run_config(const Json& j) {
  using namespace detail;
  check_keys(j, "", {"schema_version", "dataset", "model", "augmentation", "algorithm", "seeds", "workers", "output_dir"});
  RunConfig cfg;
  if (j.contains("schema_version") && as_uint(j.at("schema_version"), "schema_version") != kConfigSchemaVersion)
    throw ConfigError("unsupported version (expected " + std::to_string(kConfigSchemaVersion) + ")", "schema_version");

  // dataset
  {
    const Json& d = require(j, "", "dataset");
    check_keys(d, "dataset", {"source", "synthetic", "file"});
    const std::string source = as_string(require(d, "dataset", "source"), "dataset.source");
    if (source == "synthetic") {
      if (d.contains("file")) throw ConfigError("only allowed when source is 'file'", "dataset.file");
      cfg.dataset = parse_synthetic(d.contains("synthetic") ? d.at("synthetic") : Json::object(), "dataset.synthetic");
    } else if (source == "file") {
      if (d.contains("synthetic")) throw ConfigError("only allowed when source is 'synthetic'", "dataset.synthetic");
      const Json& f = require(d, "dataset", "file");
      check_keys(f, "dataset.file", {"path", "partition"});
      FileSource fs;
      fs.path = as_string(require(f, "dataset.file", "path"), "dataset.file.path");
      fs.partition = parse_partition(require(f, "dataset.file", "partition"), "dataset.file.partition");
      cfg.dataset = fs;
    } else {
      throw ConfigError("unknown value '" + source + "' (expected one of: synthetic, file)", "dataset.source");
    }
  }

  // model
  if (j.contains("model")) {
    const Json& m = j.at("model");
    check_keys(m, "model", {"type", "conv_channels", "kernel", "pool", "head_width", "hidden", "activation"});
    const std::string type = as_string(require(m, "model", "type"), "model.type");
    if (type == "cnn") {
      for (const char* k : {"hidden", "activation"})
        if (m.contains(k)) throw ConfigError("only allowed when type is 'mlp'", std::string("model.") + k);
      CnnArch a;
      optional_field(m, "model", "conv_channels", a.conv_channels, as_sizes);
      optional_field(m, "model", "kernel", a.kernel, as_uint);
      optional_field(m, "model", "pool", a.pool, as_uint);
      optional_field(m, "model", "head_width", a.head_width, as_uint);
      if (a.kernel % 2 == 0) throw ConfigError("must be odd", "model.kernel");
      if (a.pool == 0) throw ConfigError("must be positive", "model.pool");
      if (a.head_width == 0) throw ConfigError("must be positive", "model.head_width");
      for (std::size_t c : a.conv_channels)
        if (c == 0) throw ConfigError("channel counts must be positive", "model.conv_channels");
      cfg.architecture = a;
    } else if (type == "mlp") {
      for (const char* k : {"conv_channels", "kernel", "pool", "head_width"})
        if (m.contains(k)) throw ConfigError("only allowed when type is 'cnn'", std::string("model.") + k);
      MlpArch a;
      optional_field(m, "model", "hidden", a.hidden, as_sizes);
      if (m.contains("activation"))
        a.activation = as_enum<Activation>(m.at("activation"), "model.activation",
                                           {{"relu", Activation::ReLU}, {"tanh", Activation::Tanh}});
      for (std::size_t w : a.hidden)
        if (w == 0) throw ConfigError("widths must be positive", "model.hidden");
      cfg.architecture = a;
    } else {
      throw ConfigError("unknown value '" + type + "' (expected one of: cnn, mlp)", "model.type");
    }
  }

  // augmentation
  {
    const Json& a = require(j, "", "augmentation");
    check_keys(a, "augmentation", {"arm", "flip_p", "flip_first", "norm_mean", "norm_std", "fedmix", "std_aggregation"});
    cfg.arm = as_enum<Arm>(require(a, "augmentation", "arm"), "augmentation.arm",
                           {{"basic", Arm::Basic},
                            {"norm", Arm::Norm},
                            {"fedmix", Arm::FedMix},
                            {"rdn", Arm::RDN},
                            {"rdnv", Arm::RDNV}});
    auto& o = cfg.arm_options;
    optional_field(a, "augmentation", "flip_p", o.flip_p, as_double);
    optional_field(a, "augmentation", "flip_first", o.flip_first, as_bool);
    if (!(o.flip_p >= 0.0 && o.flip_p <= 1.0)) throw ConfigError("must be in [0, 1]", "augmentation.flip_p");
    if (a.contains("norm_mean") != a.contains("norm_std"))
      throw ConfigError("norm_mean and norm_std must be given together",
                        a.contains("norm_mean") ? "augmentation.norm_std" : "augmentation.norm_mean");
    if (a.contains("norm_mean")) {
      if (cfg.arm != Arm::Norm) throw ConfigError("only allowed when arm is 'norm'", "augmentation.norm_mean");
      ChannelStats s{as_doubles(a.at("norm_mean"), "augmentation.norm_mean"),
                     as_doubles(a.at("norm_std"), "augmentation.norm_std")};
      if (s.mean.size() != s.std.size()) throw ConfigError("length differs from norm_mean", "augmentation.norm_std");
      for (double v : s.std)
        if (!(v > kStdFloor)) throw ConfigError("entries must exceed 1e-6", "augmentation.norm_std");
      o.fixed_stats = s;
    }
    if (a.contains("fedmix")) {
      if (cfg.arm != Arm::FedMix) throw ConfigError("only allowed when arm is 'fedmix'", "augmentation.fedmix");
      const Json& f = a.at("fedmix");
      check_keys(f, "augmentation.fedmix", {"lambda_mode", "lambda", "beta_alpha", "mean_batch_size"});
      if (f.contains("lambda_mode"))
        o.fedmix.lambda_mode =
            as_enum<FedMix::LambdaMode>(f.at("lambda_mode"), "augmentation.fedmix.lambda_mode",
                                        {{"fixed", FedMix::LambdaMode::Fixed}, {"beta", FedMix::LambdaMode::Beta}});
      optional_field(f, "augmentation.fedmix", "lambda", o.fedmix.lambda, as_double);
      optional_field(f, "augmentation.fedmix", "beta_alpha", o.fedmix.beta_alpha, as_double);
      optional_field(f, "augmentation.fedmix", "mean_batch_size", o.fedmix.mean_batch_size, as_uint);
      if (!(o.fedmix.lambda >= 0.0 && o.fedmix.lambda <= 1.0))
        throw ConfigError("must be in [0, 1]", "augmentation.fedmix.lambda");
      if (!(o.fedmix.beta_alpha > 0.0)) throw ConfigError("must be positive", "augmentation.fedmix.beta_alpha");
      if (o.fedmix.mean_batch_size == 0) throw ConfigError("must be positive", "augmentation.fedmix.mean_batch_size");
    }
    if (a.contains("std_aggregation"))
      o.std_aggregation = as_enum<StdAggregation>(
          a.at("std_aggregation"), "augmentation.std_aggregation",
          {{"mean_of_image_stds", StdAggregation::MeanOfImageStds}, {"pooled", StdAggregation::Pooled}});
  }

  // algorithm
  {
    const Json& a = require(j, "", "algorithm");
    check_keys(a, "algorithm", {"name", "mu", "beta", "lr", "weight_decay", "batch_size", "local_epochs", "rounds"});
    auto& g = cfg.algorithm;
    g.kind = as_enum<AlgorithmConfig::Kind>(require(a, "algorithm", "name"), "algorithm.name",
                                            {{"fedavg", AlgorithmConfig::Kind::FedAvg},
                                             {"fedprox", AlgorithmConfig::Kind::FedProx},
                                             {"fedavgm", AlgorithmConfig::Kind::FedAvgM}});
    if (a.contains("mu") && g.kind != AlgorithmConfig::Kind::FedProx)
      throw ConfigError("only allowed when name is 'fedprox'", "algorithm.mu");
    if (a.contains("beta") && g.kind != AlgorithmConfig::Kind::FedAvgM)
      throw ConfigError("only allowed when name is 'fedavgm'", "algorithm.beta");
    optional_field(a, "algorithm", "mu", g.mu, as_double);
    optional_field(a, "algorithm", "beta", g.beta, as_double);
    optional_field(a, "algorithm", "lr", g.lr, as_double);
    optional_field(a, "algorithm", "weight_decay", g.weight_decay, as_double);
    optional_field(a, "algorithm", "batch_size", g.batch_size, as_uint);
    optional_field(a, "algorithm", "local_epochs", g.local_epochs, as_uint);
    optional_field(a, "algorithm", "rounds", g.rounds, as_uint);
    validate(g);
  }

  {
    const Json& s = require(j, "", "seeds");
    if (!s.is_array() || s.empty()) throw ConfigError("expected a non-empty array of integers", "seeds");
    for (std::size_t i = 0; i < s.size(); ++i) cfg.seeds.push_back(as_uint(s[i], "seeds[" + std::to_string(i) + "]"));
  }
  optional_field(j, "", "workers", cfg.workers, as_uint);
  if (cfg.workers < 1) throw ConfigError("must be >= 1", "workers");
  cfg.output_dir = as_string(require(j, "", "output_dir"), "output_dir");
  if (cfg.output_dir.empty()) throw ConfigError("must not be empty", "output_dir");
  return cfg;
}

inline RunConfig parse_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("not valid JSON: ") + e.what(), "<document>");
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'", "<file>");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---------------------------------------------------------------------------
// Serialization: every field written explicitly, so the echo is self-contained.

inline Json to_json(const RunConfig& cfg) {
  Json j;
  j["schema_version"] = kConfigSchemaVersion;
  Json d;
  if (const auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) {
    d["source"] = "synthetic";
    Json sj;
    sj["num_clients"] = s->num_clients;
    sj["num_classes"] = s->num_classes;
    sj["image_shape"] = {s->image_shape.channels, s->image_shape.height, s->image_shape.width};
    sj["noise_std"] = s->noise_std;
    sj["train_per_client"] = s->train_per_client;
    sj["test_per_client"] = s->test_per_client;
    Json sk;
    if (s->skew_mode == SyntheticSource::SkewMode::Random) {
      sk["mode"] = "random";
      sk["gain_range"] = s->gain_range;
      sk["bias_range"] = s->bias_range;
    } else {
      sk["mode"] = "explicit";
      sk["gains"] = s->gains;
      sk["biases"] = s->biases;
    }
    sj["skew"] = sk;
    if (s->seed) sj["seed"] = *s->seed;
    d["synthetic"] = sj;
  } else {
    const auto& f = std::get<FileSource>(cfg.dataset);
    d["source"] = "file";
    Json p;
    if (f.partition.mode == PartitionSpec::Mode::Contiguous) {
      p["mode"] = "contiguous";
      Json counts = Json::array();
      for (const auto& c : f.partition.counts) counts.push_back({c.train, c.test});
      p["counts"] = counts;
    } else {
      p["mode"] = "explicit";
      p["client_of"] = f.partition.client_of;
      if (!f.partition.is_test.empty()) p["is_test"] = f.partition.is_test;
      p["test_fraction"] = f.partition.test_fraction;
    }
    if (!f.partition.gains.empty()) p["gains"] = f.partition.gains;
    if (!f.partition.biases.empty()) p["biases"] = f.partition.biases;
    d["file"] = {{"path", f.path}, {"partition", p}};
  }
  j["dataset"] = d;

  Json m;
  if (const auto* c = std::get_if<CnnArch>(&cfg.architecture)) {
    m["type"] = "cnn";
    m["conv_channels"] = c->conv_channels;
    m["kernel"] = c->kernel;
    m["pool"] = c->pool;
    m["head_width"] = c->head_width;
  } else {
    const auto& a = std::get<MlpArch>(cfg.architecture);
    m["type"] = "mlp";
    m["hidden"] = a.hidden;
    m["activation"] = a.activation == Activation::ReLU ? "relu" : "tanh";
  }
  j["model"] = m;

  Json a;
  const auto& o = cfg.arm_options;
  a["arm"] = arm_name(cfg.arm);
  a["flip_p"] = o.flip_p;
  a["flip_first"] = o.flip_first;
  if (o.fixed_stats) {
    a["norm_mean"] = o.fixed_stats->mean;
    a["norm_std"] = o.fixed_stats->std;
  }
  if (cfg.arm == Arm::FedMix)
    a["fedmix"] = {{"lambda_mode", o.fedmix.lambda_mode == FedMix::LambdaMode::Fixed ? "fixed" : "beta"},
                   {"lambda", o.fedmix.lambda},
                   {"beta_alpha", o.fedmix.beta_alpha},
                   {"mean_batch_size", o.fedmix.mean_batch_size}};
  a["std_aggregation"] = o.std_aggregation == StdAggregation::Pooled ? "pooled" : "mean_of_image_stds";
  j["augmentation"] = a;

  const auto& g = cfg.algorithm;
  Json alg;
  alg["name"] = algorithm_name(g.kind);
  if (g.kind == AlgorithmConfig::Kind::FedProx) alg["mu"] = g.mu;
  if (g.kind == AlgorithmConfig::Kind::FedAvgM) alg["beta"] = g.beta;
  alg["lr"] = g.lr;
  alg["weight_decay"] = g.weight_decay;
  alg["batch_size"] = g.batch_size;
  alg["local_epochs"] = g.local_epochs;
  alg["rounds"] = g.rounds;
  j["algorithm"] = alg;

  j["seeds"] = cfg.seeds;
  j["workers"] = cfg.workers;
  j["output_dir"] = cfg.output_dir;
  return j;
}

/// `cfg` with options that the echo omits reset to their defaults, so that
/// parse(to_json(c)) == canonical(c).
inline RunConfig canonical(RunConfig cfg) {
  // Options of other arms are never echoed, so they must not influence equality.
  if (cfg.arm != Arm::FedMix) cfg.arm_options.fedmix = FedMix{};
  if (cfg.arm != Arm::Norm) cfg.arm_options.fixed_stats.reset();
  if (cfg.algorithm.kind != AlgorithmConfig::Kind::FedProx) cfg.algorithm.mu = AlgorithmConfig{}.mu;
  if (cfg.algorithm.kind != AlgorithmConfig::Kind::FedAvgM) cfg.algorithm.beta = AlgorithmConfig{}.beta;
  return cfg;
}

// ---------------------------------------------------------------------------
// Materialization

/// The federation a run uses for `seed`.
inline FederationData build_federation(const RunConfig& cfg, std::uint64_t seed,
                                       const std::filesystem::path& base_dir = {}) {
  if (const auto* s = std::get_if<SyntheticSource>(&cfg.dataset)) {
    SkewConfig sc;
    sc.num_clients = s->num_clients;
    sc.num_classes = s->num_classes;
    sc.image_shape = s->image_shape;
    sc.noise_std = s->noise_std;
    sc.train_per_client = s->train_per_client;
    sc.test_per_client = s->test_per_client;
    sc.seed = s->seed.value_or(derive_seed(seed, "dataset"));
    if (s->skew_mode == SyntheticSource::SkewMode::Random)
      draw_skew(sc, s->gain_range[0], s->gain_range[1], s->bias_range[0], s->bias_range[1],
                derive_seed(sc.seed, "skew"));
    else {
      sc.gains = s->gains;
      sc.biases = s->biases;
    }
    return generate_synthetic(sc);
  }
  const auto& f = std::get<FileSource>(cfg.dataset);
  std::filesystem::path p(f.path);
  if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  return load_idx_partitioned(p, f.partition);
}

inline ModelSpec model_spec(const RunConfig& cfg, const FederationData& fed) {
  ModelSpec spec;
  spec.architecture = cfg.architecture;
  spec.input_shape = fed.image_shape;
  spec.num_classes = fed.num_classes;
  return spec;
}

}  // namespace fedrdn
