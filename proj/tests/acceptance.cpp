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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Every tolerance is a constant below.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "fedrdn/fedrdn.hpp"
#include "test_util.hpp"

using namespace fedrdn;
using fedrdn::testing::max_fd_error;
using fedrdn::testing::random_images;
using fedrdn::testing::random_tensor;
using fedrdn::testing::toy_cnn;
using fedrdn::testing::toy_federation;

namespace {

// Pinned tolerances and budgets.
constexpr double kFdEps = 1e-5;
constexpr double kFdTol = 1e-4;
constexpr double kFdSeconds = 30.0;
constexpr double kStatsTol = 1e-12;
constexpr double kStatsSeconds = 10.0;
constexpr double kStandardizeTol = 1e-9;
constexpr double kAggTol = 1e-12;
constexpr double kChainSeconds = 60.0;
constexpr std::size_t kMinDraws = 10000;
constexpr double kSigmas = 3.0;
constexpr std::size_t kBenchSeeds = 5;
constexpr double kSeedSeconds = 300.0;
constexpr double kRdnOverNormPoints = 3.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const Outcome& o) {
  std::printf("%s [%d] %s: %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
  failures += o.pass ? 0 : 1;
}

void run(int id, const char* name, const std::function<Outcome()>& body) {
  try {
    report(id, name, body());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

bool same_reports(const std::vector<RoundReport>& a, const std::vector<RoundReport>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_metrics(b[i])) return false;
  return true;
}

bool same_results(const ExperimentResult& a, const ExperimentResult& b) {
  return same_reports(a.rounds, b.rounds) && a.global == b.global && a.locals == b.locals;
}

// Independent statistics: two-pass population moments with long double sums.
ChannelStats brute_image_stats(const Tensor& img) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  ChannelStats s{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    long double sum = 0;
    for (std::size_t i = 0; i < hw; ++i) sum += img[ch * hw + i];
    const long double m = sum / static_cast<long double>(hw);
    long double sq = 0;
    for (std::size_t i = 0; i < hw; ++i) sq += (img[ch * hw + i] - m) * (img[ch * hw + i] - m);
    s.mean[ch] = static_cast<double>(m);
    s.std[ch] = static_cast<double>(std::sqrt(sq / static_cast<long double>(hw)));
  }
  return s;
}

ChannelStats brute_dataset_stats(const std::vector<LabeledImage>& images) {
  const std::size_t c = images.front().pixels.dim(0);
  std::vector<long double> m(c, 0), s(c, 0);
  for (const auto& img : images) {
    const ChannelStats st = brute_image_stats(img.pixels);
    for (std::size_t ch = 0; ch < c; ++ch) {
      m[ch] += st.mean[ch];
      s[ch] += st.std[ch];
    }
  }
  ChannelStats out{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    out.mean[ch] = static_cast<double>(m[ch] / static_cast<long double>(images.size()));
    out.std[ch] = static_cast<double>(s[ch] / static_cast<long double>(images.size()));
  }
  return out;
}

double stats_gap(const ChannelStats& a, const ChannelStats& b) {
  double worst = 0;
  for (std::size_t ch = 0; ch < a.channels(); ++ch)
    worst = std::max({worst, std::abs(a.mean[ch] - b.mean[ch]), std::abs(a.std[ch] - b.std[ch])});
  return worst;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(101);
  double worst = 0;
  for (int trial = 0; trial < 3; ++trial) {
    ModelSpec mlp;
    mlp.architecture = MlpArch{{12, 7}, trial % 2 ? Activation::Tanh : Activation::ReLU};
    mlp.input_shape = {3, 4, 4};
    mlp.num_classes = 5;
    ModelSpec cnn;
    cnn.architecture = CnnArch{{4, 6}, 3, 2, 10};
    cnn.input_shape = {3, 8, 8};
    cnn.num_classes = 5;
    for (const ModelSpec* spec : {&mlp, &cnn}) {
      const ParameterVector p = init_params(*spec, 200 + static_cast<std::uint64_t>(trial));
      const Tensor batch = random_tensor({4, 3, spec->input_shape.height, spec->input_shape.width}, g);
      std::vector<int> labels;
      for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(g() % 5));
      worst = std::max(worst, max_fd_error(*spec, p, batch, labels, kFdEps));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kFdTol && secs < kFdSeconds, fmt("max relative error %.3g (< %.0e), %.2f s (< %.0f s)", worst, kFdTol,
                                                   secs, kFdSeconds)};
}

Outcome statistics_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(102);
  std::uniform_int_distribution<std::size_t> count(1, 50);
  double worst = 0;
  for (int d = 0; d < 100; ++d) {
    // Each dataset is split into 2-4 clients so the registry average is exercised too.
    const auto images = random_images(count(g), {3, 16, 16}, 10, g);
    for (const auto& img : images) worst = std::max(worst, stats_gap(image_channel_stats(img.pixels),
                                                                     brute_image_stats(img.pixels)));
    worst = std::max(worst, stats_gap(dataset_channel_stats(images), brute_dataset_stats(images)));
    const std::size_t k = std::min<std::size_t>(2 + static_cast<std::size_t>(d % 3), images.size());
    StatsRegistry reg;
    std::vector<ChannelStats> brute;
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<LabeledImage> part;
      for (std::size_t i = c; i < images.size(); i += k) part.push_back(images[i]);
      reg.per_client.push_back(dataset_channel_stats(part));
      brute.push_back(brute_dataset_stats(part));
    }
    ChannelStats avg{std::vector<double>(3, 0.0), std::vector<double>(3, 0.0)};
    for (std::size_t ch = 0; ch < 3; ++ch) {
      long double m = 0, s = 0;
      for (const auto& b : brute) {
        m += b.mean[ch];
        s += b.std[ch];
      }
      avg.mean[ch] = static_cast<double>(m / static_cast<long double>(k));
      avg.std[ch] = static_cast<double>(s / static_cast<long double>(k));
    }
    worst = std::max(worst, stats_gap(rdnv_reference_stats(reg), avg));
  }
  const double secs = seconds_since(t0);
  return {worst <= kStatsTol && secs < kStatsSeconds,
          fmt("max abs deviation %.3g (<= %.0e) on 100 datasets, %.2f s (< %.0f s)", worst, kStatsTol, secs,
              kStatsSeconds)};
}

Outcome standardization_identity() {
  std::mt19937_64 g(103);
  const auto images = random_images(1000, {3, 16, 16}, 10, g);
  double worst = 0;
  for (const auto& img : images) {
    const ChannelStats after = brute_image_stats(normalize_image(img.pixels, image_channel_stats(img.pixels)));
    for (std::size_t ch = 0; ch < 3; ++ch)
      worst = std::max({worst, std::abs(after.mean[ch]), std::abs(after.std[ch] - 1.0)});
  }
  return {worst <= kStandardizeTol, fmt("max deviation from mean 0 / std 1: %.3g (<= %.0e)", worst, kStandardizeTol)};
}

Outcome aggregation_exactness() {
  std::mt19937_64 g(104);
  std::uniform_int_distribution<std::size_t> cnt(1, 500);
  double worst = 0, worst_sum = 0;
  bool fixed_point = true;
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + static_cast<std::size_t>(t % 7);
    std::vector<ParameterVector> locals;
    std::vector<std::size_t> counts;
    for (std::size_t i = 0; i < k; ++i) {
      locals.push_back(ParameterVector({{"a", random_tensor({13}, g, -5, 5)}, {"b", random_tensor({3, 4}, g, -5, 5)}}));
      counts.push_back(cnt(g));
    }
    const auto agg = aggregate_weighted(locals, counts);
    long double total = 0;
    for (auto c : counts) total += c;
    for (std::size_t i = 0; i < agg.total_len(); ++i) {
      long double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += static_cast<long double>(counts[j]) / total * locals[j].flat(i);
      worst = std::max(worst, std::abs(agg.flat(i) - static_cast<double>(s)));
    }
    double wsum = 0;
    for (double w : aggregation_weights(counts)) wsum += w;
    worst_sum = std::max(worst_sum, std::abs(wsum - 1.0));
    const std::vector<ParameterVector> same(k, locals.front());
    fixed_point = fixed_point && aggregate_weighted(same, counts) == locals.front();
  }
  return {worst <= kAggTol && worst_sum <= kAggTol && fixed_point,
          fmt("oracle deviation %.3g, weight-sum deviation %.3g (<= %.0e)", worst, worst_sum, kAggTol) +
              (fixed_point ? ", fixed point exact" : ", fixed point NOT exact")};
}

Outcome degeneracy_chain() {
  const auto t0 = Clock::now();
  const auto fed = toy_federation(3, 105);
  const auto spec = toy_cnn(fed);
  const auto arm = prepare_arm(Arm::RDN, fed);
  AlgorithmConfig avg;
  avg.lr = 0.05;
  avg.batch_size = 8;
  avg.local_epochs = 2;
  avg.rounds = 3;
  AlgorithmConfig prox = avg, mom = avg;
  prox.kind = AlgorithmConfig::Kind::FedProx;
  prox.mu = 0.0;
  mom.kind = AlgorithmConfig::Kind::FedAvgM;
  mom.beta = 0.0;
  const auto a = run_experiment(fed, spec, arm, avg, 7);
  const auto b = run_experiment(fed, spec, arm, prox, 7);
  const auto c = run_experiment(fed, spec, arm, mom, 7);
  const bool ok_prox = same_results(a, b), ok_mom = same_results(a, c);
  const double secs = seconds_since(t0);
  return {ok_prox && ok_mom && secs < kChainSeconds,
          std::string("FedProx(mu=0) ") + (ok_prox ? "identical" : "DIFFERS") + ", FedAvgM(beta=0) " +
              (ok_mom ? "identical" : "DIFFERS") + fmt(", T=3 K=3, %.2f s (< %.0f s)", secs, kChainSeconds)};
}

Outcome concurrency_determinism() {
  const auto fed = toy_federation(4, 106);
  const auto spec = toy_cnn(fed);
  AlgorithmConfig cfg;
  cfg.lr = 0.05;
  cfg.batch_size = 8;
  cfg.local_epochs = 1;
  cfg.rounds = 3;
  std::string detail;
  bool ok = true;
  for (Arm a : {Arm::Basic, Arm::FedMix, Arm::RDN, Arm::RDNV}) {
    const auto arm = prepare_arm(a, fed);
    const bool same = same_results(run_experiment(fed, spec, arm, cfg, 11, {1, nullptr}),
                                   run_experiment(fed, spec, arm, cfg, 11, {4, nullptr}));
    ok = ok && same;
    detail += std::string(detail.empty() ? "" : ", ") + arm_name(a) + (same ? " identical" : " DIFFERS");
  }
  return {ok, "1 vs 4 workers: " + detail};
}

Outcome selection_uniformity() {
  // Train-time draws collected from a full RDN run: 4 clients x 50 images x E=5 x T=10.
  const auto fed = toy_federation(4, 107, 50, 5, {3, 4, 4});
  ModelSpec spec;
  spec.architecture = MlpArch{{8}, Activation::ReLU};
  spec.input_shape = fed.image_shape;
  spec.num_classes = fed.num_classes;
  AlgorithmConfig cfg;
  cfg.lr = 0.01;
  cfg.batch_size = 25;
  cfg.local_epochs = 5;
  cfg.rounds = 10;
  std::vector<std::pair<PipelineTrace, PipelineTrace>> traces;
  run_experiment(fed, spec, prepare_arm(Arm::RDN, fed), cfg, 12, {1, &traces});
  std::vector<std::size_t> freq(4, 0);
  std::size_t n = 0;
  for (const auto& [train, test] : traces) {
    for (std::size_t j : train.selected_clients) ++freq.at(j);
    n += train.selected_clients.size();
    if (!test.selected_clients.empty()) return {false, "test-time draws recorded"};
  }
  const double expect = static_cast<double>(n) / 4.0;
  const double sigma = std::sqrt(static_cast<double>(n) * 0.25 * 0.75);
  double worst = 0;
  for (std::size_t f : freq) worst = std::max(worst, std::abs(static_cast<double>(f) - expect) / sigma);
  std::string counts;
  for (std::size_t f : freq) counts += (counts.empty() ? "" : "/") + std::to_string(f);
  return {n >= kMinDraws && worst <= kSigmas,
          std::to_string(n) + " draws, counts " + counts + fmt(", max |z| %.2f (<= %.0f)", worst, kSigmas)};
}

Outcome payload_bound() {
  std::string detail;
  std::size_t f64_c = 0, other = 0;
  for (const auto& f : kStatsWireSchema) {
    if (f.count == "C") f64_c += f.type == "f64" ? 1 : 100;
    else ++other;
  }
  if (f64_c != 2 || other != 3) return {false, "schema carries fields beyond 2*C f64 plus ids"};
  bool ok = true;
  for (std::size_t c : {1u, 3u}) {
    std::size_t size = 0;
    for (std::size_t n : {1u, 10u, 500u}) {
      SkewConfig sc;
      sc.num_clients = 1;
      sc.image_shape = {c, 4, 4};
      sc.train_per_client = n;
      sc.test_per_client = 1;
      set_identity_skew(sc);
      const auto fed = generate_synthetic(sc);
      const auto bytes = encode_stats_message(client_stats_round(fed.clients[0]));
      if (size == 0) size = bytes.size();
      ok = ok && bytes.size() == size && bytes.size() == kStatsWireIdBytes + 2 * c * sizeof(double);
      ok = ok && decode_stats_message(bytes) == client_stats_round(fed.clients[0]);
    }
    detail += (detail.empty() ? "" : ", ") + std::string("C=") + std::to_string(c) + ": " + std::to_string(size) +
              " bytes";
  }
  return {ok, detail + " for n_k in {1, 10, 500}; " + std::to_string(kStatsWireIdBytes) + " id bytes + 2*C f64"};
}

// ---------------------------------------------------------------------------
// Desk-scale benchmark shared by criteria 8-10.

const char* kBenchmarkConfig = R"({
  "dataset": {"source": "synthetic",
              "synthetic": {"num_clients": 4, "num_classes": 10, "image_shape": [3, 16, 16], "noise_std": 1.6,
                            "train_per_client": 100, "test_per_client": 100,
                            "skew": {"mode": "random", "gain_range": [0.5, 2.0], "bias_range": [-1.0, 1.0]}}},
  "model": {"type": "cnn", "conv_channels": [8, 16], "kernel": 3, "pool": 2, "head_width": 32},
  "augmentation": {"arm": "basic"},
  "algorithm": {"name": "fedavg", "lr": 0.05, "weight_decay": 1e-5, "batch_size": 32, "local_epochs": 5,
                "rounds": 30},
  "seeds": [0, 1, 2, 3, 4],
  "output_dir": "unused"
})";

struct ArmScores {
  std::vector<double> accuracy;      // final unweighted average per seed
  std::vector<double> off_diagonal;  // cross-site mean off-diagonal per seed
  double mean_accuracy() const { return mean(accuracy); }
  double mean_off_diagonal() const { return mean(off_diagonal); }
  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
};

struct Benchmark {
  std::map<Arm, ArmScores> arms;
  double slowest_seed = 0;
  std::string error;
};

Benchmark run_benchmark() {
  Benchmark b;
  try {
    const Json base = Json::parse(kBenchmarkConfig);
    for (std::uint64_t seed = 0; seed < kBenchSeeds; ++seed) {
      const auto t0 = Clock::now();
      for (const char* arm : {"basic", "norm", "rdn", "rdnv"}) {
        Json j = base;
        j["augmentation"]["arm"] = arm;
        const RunConfig cfg = parse_run_config(j);
        const SeedRun r = run_seed(cfg, seed);
        auto& s = b.arms[cfg.arm];
        s.accuracy.push_back(r.result.rounds.back().avg_accuracy_unweighted);
        s.off_diagonal.push_back(mean_off_diagonal(r.cross_site));
        std::printf("  benchmark seed %llu %-5s accuracy %6.2f%%  cross-site off-diagonal %6.2f%%\n",
                    static_cast<unsigned long long>(seed), arm, 100 * s.accuracy.back(), 100 * s.off_diagonal.back());
        std::fflush(stdout);
      }
      b.slowest_seed = std::max(b.slowest_seed, seconds_since(t0));
    }
  } catch (const std::exception& e) {
    b.error = e.what();
  }
  return b;
}

}  // namespace

int main() {
  run(1, "gradient correctness", gradient_check);
  run(2, "statistics oracles", statistics_oracles);
  run(3, "standardization identity", standardization_identity);
  run(4, "aggregation exactness", aggregation_exactness);
  run(5, "degeneracy chain", degeneracy_chain);
  run(6, "determinism under concurrency", concurrency_determinism);
  run(7, "RDN selection uniformity", selection_uniformity);

  const Benchmark bench = run_benchmark();
  auto scores = [&](Arm a) -> const ArmScores& { return bench.arms.at(a); };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& body) {
    if (!bench.error.empty()) report(id, name, {false, "benchmark failed: " + bench.error});
    else run(id, name, body);
  };
  guarded(8, "RDN beats fixed normalization and basic", [&]() -> Outcome {
    const double rdn = 100 * scores(Arm::RDN).mean_accuracy(), norm = 100 * scores(Arm::Norm).mean_accuracy(),
                 basic = 100 * scores(Arm::Basic).mean_accuracy();
    return {rdn - norm >= kRdnOverNormPoints && rdn > basic && bench.slowest_seed < kSeedSeconds,
            fmt("rdn %.2f%%, norm %.2f%% (margin %.2f >= 3 points), basic %.2f%%", rdn, norm, rdn - norm, basic) +
                fmt("; slowest seed %.1f s (< %.0f s)", bench.slowest_seed, kSeedSeconds)};
  });
  guarded(9, "RDN at least RDN-V", [&]() -> Outcome {
    const double rdn = 100 * scores(Arm::RDN).mean_accuracy(), rdnv = 100 * scores(Arm::RDNV).mean_accuracy();
    return {rdn >= rdnv, fmt("rdn %.2f%% vs rdnv %.2f%% over 5 seeds", rdn, rdnv)};
  });
  guarded(10, "cross-site generalization", [&]() -> Outcome {
    const double rdn = 100 * scores(Arm::RDN).mean_off_diagonal(),
                 basic = 100 * scores(Arm::Basic).mean_off_diagonal();
    return {rdn > basic, fmt("mean off-diagonal rdn %.2f%% vs basic %.2f%%", rdn, basic)};
  });
  run(11, "statistics payload bound", payload_bound);

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
