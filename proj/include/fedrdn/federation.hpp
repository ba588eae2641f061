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

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fedrdn/augmentation.hpp"
#include "fedrdn/datasets.hpp"
#include "fedrdn/model.hpp"
#include "fedrdn/parameters.hpp"
#include "fedrdn/rng.hpp"
#include "fedrdn/stats_protocol.hpp"

namespace fedrdn {

struct AlgorithmConfig {
  enum class Kind { FedAvg, FedProx, FedAvgM };

  Kind kind = Kind::FedAvg;
  double mu = 0.001;   // FedProx proximal weight
  double beta = 0.9;   // FedAvgM server momentum
  double lr = 0.01;
  double weight_decay = 1e-5;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 5;
  std::size_t rounds = 100;

  bool operator==(const AlgorithmConfig&) const = default;
};

inline const char* algorithm_name(AlgorithmConfig::Kind k) {
  switch (k) {
    case AlgorithmConfig::Kind::FedProx: return "fedprox";
    case AlgorithmConfig::Kind::FedAvgM: return "fedavgm";
    default: return "fedavg";
  }
}

inline void validate(const AlgorithmConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("must be finite and >= 0", "algorithm.lr");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("must be >= 0", "algorithm.weight_decay");
  if (cfg.batch_size < 1) throw ConfigError("must be >= 1", "algorithm.batch_size");
  if (cfg.local_epochs < 1) throw ConfigError("must be >= 1", "algorithm.local_epochs");
  if (cfg.rounds < 1) throw ConfigError("must be >= 1", "algorithm.rounds");
  if (cfg.kind == AlgorithmConfig::Kind::FedProx && !(cfg.mu >= 0.0)) throw ConfigError("must be >= 0", "algorithm.mu");
  if (cfg.kind == AlgorithmConfig::Kind::FedAvgM && !(cfg.beta >= 0.0 && cfg.beta < 1.0))
    throw ConfigError("must be in [0, 1)", "algorithm.beta");
}

/// Raised when a round fails; carries where it failed and nests the cause.
class ExperimentError : public Error {
 public:
  ExperimentError(std::size_t round, int client, const std::string& what)
      : Error("round " + std::to_string(round) + (client >= 0 ? ", client " + std::to_string(client) : "") + ": " +
              what),
        round_(round),
        client_(client) {}
  std::size_t round() const noexcept { return round_; }
  int client() const noexcept { return client_; }

 private:
  std::size_t round_;
  int client_;
};

// ---------------------------------------------------------------------------
// Client side

struct ClientState {
  const ClientDataset* data = nullptr;
  AugmentationPipeline train_pipeline;  // mode Train
  AugmentationPipeline test_pipeline;   // mode Test
  ChannelStats own_stats;               // local only, never transmitted
  std::shared_ptr<const StatsRegistry> registry;
  std::shared_ptr<const std::vector<Tensor>> mean_images;
  Rng rng;
  PipelineTrace* train_trace = nullptr;
  PipelineTrace* test_trace = nullptr;

  int client_id() const { return data ? data->client_id : -1; }
};

struct ProximalTerm {
  double value = 0.0;
  ParameterVector grad;
};

/// (mu/2)||w - anchor||^2 and its gradient mu (w - anchor).
inline ProximalTerm proximal_term(const ParameterVector& w, const ParameterVector& anchor, double mu) {
  require_aligned(w, anchor, "proximal_term");
  ProximalTerm out{0.0, param_axpy(-1.0, anchor, w)};
  double sq = 0.0;
  for (std::size_t s = 0; s < out.grad.num_segments(); ++s)
    for (double& d : out.grad.at(s).data()) {
      sq += d * d;
      d *= mu;
    }
  out.value = 0.5 * mu * sq;
  return out;
}

struct LocalResult {
  ParameterVector params;
  double train_loss = 0.0;      // mean over the last local epoch
  double train_accuracy = 0.0;  // on augmented batches of the last local epoch
};

namespace detail {

inline PipelineContext make_context(ClientState& client, PipelineTrace* trace) {
  PipelineContext ctx;
  ctx.registry = client.registry.get();
  ctx.own_stats = &client.own_stats;
  if (client.mean_images) ctx.mean_images = *client.mean_images;
  ctx.rng = &client.rng;
  ctx.trace = trace;
  return ctx;
}

inline MixedBatch gather(const std::vector<LabeledImage>& images, std::span<const std::size_t> idx,
                         std::size_t num_classes, std::vector<int>& labels) {
  const Shape& s = images.front().pixels.shape();
  const std::size_t per = images.front().pixels.size();
  MixedBatch b{Tensor({idx.size(), s[0], s[1], s[2]}), Tensor({idx.size(), num_classes})};
  labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& img = images[idx[i]];
    std::copy(img.pixels.data().begin(), img.pixels.data().end(), b.images.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    labels[i] = img.label;
    b.targets[i * num_classes + static_cast<std::size_t>(img.label)] = 1.0;
  }
  return b;
}

}  // namespace detail

/// E epochs of mini-batch SGD from a copy of `global`, reshuffling each epoch
/// from the client's own stream. FedProx adds mu (w - global) to every gradient.
inline LocalResult local_train(ClientState& client, const ModelSpec& spec, const ParameterVector& global,
                               const AlgorithmConfig& cfg) {
  if (!client.data || client.data->train.empty()) throw MisuseError("local_train: client has no training data");
  require_params_match(spec, global);
  const auto& train = client.data->train;
  const std::size_t n = train.size();
  const bool prox = cfg.kind == AlgorithmConfig::Kind::FedProx && cfg.mu != 0.0;
  PipelineContext ctx = detail::make_context(client, client.train_trace);

  LocalResult res{global, 0.0, 0.0};
  std::vector<std::size_t> order(n);
  std::vector<int> labels;
  for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), client.rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, n - start);
      MixedBatch batch = detail::gather(train, std::span(order).subspan(start, len), spec.num_classes, labels);
      batch = apply_pipeline(client.train_pipeline, std::move(batch), ctx);
      LossAndGrad lg = loss_and_grad(spec, res.params, batch.images, batch.targets);
      loss_sum += lg.loss * static_cast<double>(len);
      const auto pred = argmax_rows(lg.logits);
      for (std::size_t i = 0; i < len; ++i) correct += pred[i] == labels[i] ? 1 : 0;
      if (prox) lg.grad = param_axpy(1.0, proximal_term(res.params, global, cfg.mu).grad, lg.grad);
      if (cfg.lr > 0.0) res.params = sgd_step(res.params, lg.grad, cfg.lr, cfg.weight_decay);
    }
    res.train_loss = loss_sum / static_cast<double>(n);
    res.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  }
  return res;
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<int> predictions;
};

/// Top-1 accuracy and mean cross-entropy of `params` on the client's test split,
/// after the Test-mode pipeline. Deterministic; consumes no randomness.
inline EvalResult evaluate(const ClientState& client, const ModelSpec& spec, const ParameterVector& params,
                           std::size_t chunk = 128) {
  if (!client.data || client.data->test.empty()) throw MisuseError("evaluate: client has an empty test set");
  const auto& test = client.data->test;
  PipelineContext ctx;
  ctx.registry = client.registry.get();
  ctx.own_stats = &client.own_stats;
  ctx.trace = client.test_trace;
  AugmentationPipeline pipe = client.test_pipeline;
  pipe.mode = PipelineMode::Test;

  EvalResult out;
  out.predictions.reserve(test.size());
  std::vector<std::size_t> idx(test.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<int> labels;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < test.size(); start += chunk) {
    const std::size_t len = std::min(chunk, test.size() - start);
    MixedBatch batch = detail::gather(test, std::span(idx).subspan(start, len), spec.num_classes, labels);
    batch = apply_pipeline(pipe, std::move(batch), ctx);
    const Tensor logits = forward(spec, params, batch.images);
    const std::size_t k = spec.num_classes;
    for (std::size_t i = 0; i < len; ++i) {
      const double* z = &logits.data()[i * k];
      const double zmax = *std::max_element(z, z + k);
      double denom = 0.0;
      for (std::size_t c = 0; c < k; ++c) denom += std::exp(z[c] - zmax);
      loss_sum += -(z[labels[i]] - zmax - std::log(denom));
    }
    for (int p : argmax_rows(logits)) out.predictions.push_back(p);
  }
  for (std::size_t i = 0; i < test.size(); ++i) correct += out.predictions[i] == test[i].label ? 1 : 0;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  out.loss = loss_sum / static_cast<double>(test.size());
  return out;
}

/// Entry (s, t): accuracy of source model s on target client t's test split,
/// normalized the way target t normalizes its own test data.
inline std::vector<std::vector<double>> cross_site_matrix(const ModelSpec& spec,
                                                          std::span<const ParameterVector> models,
                                                          std::span<const ClientState> clients) {
  if (models.size() != clients.size())
    throw MisuseError("cross_site_matrix: " + std::to_string(models.size()) + " models for " +
                      std::to_string(clients.size()) + " clients");
  std::vector<std::vector<double>> m(models.size(), std::vector<double>(clients.size()));
  for (std::size_t s = 0; s < models.size(); ++s)
    for (std::size_t t = 0; t < clients.size(); ++t) m[s][t] = evaluate(clients[t], spec, models[s]).accuracy;
  return m;
}

// ---------------------------------------------------------------------------
// Server side

/// gamma_k = n_k / sum_i n_i
inline std::vector<double> aggregation_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw MisuseError("aggregation_weights: no clients");
  double total = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) throw MisuseError("aggregation_weights: sample counts must be positive");
    total += static_cast<double>(c);
  }
  std::vector<double> w;
  w.reserve(counts.size());
  for (std::size_t c : counts) w.push_back(static_cast<double>(c) / total);
  return w;
}

/// sum_k gamma_k w_k, evaluated as w_0 + sum_k gamma_k (w_k - w_0) in client-id
/// order. The offset form is algebraically identical (weights sum to one) and
/// returns identical inputs bit-exactly.
inline ParameterVector aggregate_weighted(std::span<const ParameterVector> locals, std::span<const std::size_t> counts) {
  if (locals.empty()) throw MisuseError("aggregate_weighted: no local models");
  if (locals.size() != counts.size())
    throw MisuseError("aggregate_weighted: " + std::to_string(locals.size()) + " models but " +
                      std::to_string(counts.size()) + " counts");
  for (const auto& l : locals) require_aligned(locals.front(), l, "aggregate_weighted");
  const auto gamma = aggregation_weights(counts);
  const ParameterVector& base = locals.front();
  ParameterVector out = base;
  for (std::size_t s = 0; s < out.num_segments(); ++s) {
    auto dst = out.at(s).data();
    const auto b = base.at(s).data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double acc = 0.0;
      for (std::size_t k = 1; k < locals.size(); ++k) acc += gamma[k] * (locals[k].at(s)[i] - b[i]);
      dst[i] = b[i] + acc;
    }
  }
  return out;
}

struct ServerState {
  ParameterVector global;
  std::optional<ParameterVector> momentum;  // present iff FedAvgM
  std::size_t round = 0;
};

inline ServerState make_server(ParameterVector global, const AlgorithmConfig& cfg) {
  ServerState s{std::move(global), std::nullopt, 0};
  if (cfg.kind == AlgorithmConfig::Kind::FedAvgM) s.momentum = zeros_like(s.global);
  return s;
}

/// FedAvg/FedProx: global <- aggregated.
/// FedAvgM: delta = global - aggregated; v <- beta v + delta; global <- global - v.
/// The new global is computed as aggregated - beta * v_prev, which is the same
/// quantity and makes beta = 0 reproduce FedAvg exactly.
inline ServerState server_update(const ServerState& server, const ParameterVector& aggregated,
                                 const AlgorithmConfig& cfg) {
  require_aligned(server.global, aggregated, "server_update");
  ServerState next;
  next.round = server.round + 1;
  if (cfg.kind != AlgorithmConfig::Kind::FedAvgM) {
    next.global = aggregated;
    return next;
  }
  if (!server.momentum) throw MisuseError("server_update: FedAvgM server has no momentum buffer");
  require_aligned(server.global, *server.momentum, "server_update");
  const ParameterVector delta = param_axpy(-1.0, aggregated, server.global);
  next.momentum = param_axpy(cfg.beta, *server.momentum, delta);
  next.global = param_axpy(-cfg.beta, *server.momentum, aggregated);
  return next;
}

// ---------------------------------------------------------------------------
// Arms and orchestration

enum class Arm { Basic, Norm, FedMix, RDN, RDNV };

inline const char* arm_name(Arm a) {
  switch (a) {
    case Arm::Norm: return "norm";
    case Arm::FedMix: return "fedmix";
    case Arm::RDN: return "rdn";
    case Arm::RDNV: return "rdnv";
    default: return "basic";
  }
}

struct ArmOptions {
  double flip_p = 0.5;
  bool flip_first = true;
  std::optional<ChannelStats> fixed_stats;  // default: mean 0.5, std 0.5 per channel
  FedMix fedmix;
  StdAggregation std_aggregation = StdAggregation::MeanOfImageStds;

  bool operator==(const ArmOptions&) const = default;
};

/// Counts of client-to-server uploads, by payload type.
struct PayloadSummary {
  std::size_t stats_messages = 0;
  std::size_t stats_bytes_per_message = 0;
  std::size_t parameter_uploads = 0;
  std::size_t mean_image_uploads = 0;
};

/// Everything an arm needs before round 0: its pipelines and, when required,
/// the results of the statistics round or the FedMix mean-image exchange.
struct PreparedArm {
  Arm arm = Arm::Basic;
  AugmentationPipeline train_pipeline;
  AugmentationPipeline test_pipeline;
  std::shared_ptr<const StatsRegistry> registry;
  std::vector<StatsMessage> stats_messages;
  std::shared_ptr<const std::vector<Tensor>> mean_images;
  PayloadSummary payloads;
};

inline PreparedArm prepare_arm(Arm arm, const FederationData& fed, const ArmOptions& opt = {}) {
  validate_federation(fed);
  PreparedArm p;
  p.arm = arm;
  const std::size_t c = fed.image_shape.channels;
  std::vector<AugmentationStep> steps;
  std::optional<AugmentationStep> norm;
  switch (arm) {
    case Arm::Basic: break;
    case Arm::Norm:
      norm = FixedNormalize{opt.fixed_stats.value_or(
          ChannelStats{std::vector<double>(c, 0.5), std::vector<double>(c, 0.5)})};
      if (std::get<FixedNormalize>(*norm).stats.channels() != c)
        throw ConfigError("fixed statistics need one entry per channel", "augmentation.norm_mean");
      break;
    case Arm::RDN: norm = RandomNormalize{}; break;
    case Arm::RDNV: norm = AverageNormalize{}; break;
    case Arm::FedMix: break;
  }
  if (norm && !opt.flip_first) steps.push_back(*norm);
  steps.push_back(HorizontalFlip{opt.flip_p});
  if (norm && opt.flip_first) steps.push_back(*norm);
  if (arm == Arm::FedMix) steps.push_back(opt.fedmix);
  p.train_pipeline = {steps, PipelineMode::Train};
  p.test_pipeline = {steps, PipelineMode::Test};
  validate(p.train_pipeline);

  if (arm == Arm::RDN || arm == Arm::RDNV) {
    p.registry = std::make_shared<const StatsRegistry>(run_stats_round(fed, &p.stats_messages, opt.std_aggregation));
    p.payloads.stats_messages = p.stats_messages.size();
    p.payloads.stats_bytes_per_message = stats_wire_size(c);
  }
  if (arm == Arm::FedMix) {
    auto pool = std::make_shared<std::vector<Tensor>>();
    for (const auto& client : fed.clients) {
      auto m = batch_mean_images(client.train, opt.fedmix.mean_batch_size);
      p.payloads.mean_image_uploads += m.size();
      for (auto& t : m) pool->push_back(std::move(t));
    }
    p.mean_images = std::move(pool);
  }
  return p;
}

struct ClientRoundMetrics {
  int client_id = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;

  bool operator==(const ClientRoundMetrics&) const = default;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<ClientRoundMetrics> clients;
  double avg_accuracy_weighted = 0.0;    // by n_k
  double avg_accuracy_unweighted = 0.0;
  double wall_seconds = 0.0;

  /// Equality of everything except wall time.
  bool same_metrics(const RoundReport& o) const {
    return round == o.round && clients == o.clients && avg_accuracy_weighted == o.avg_accuracy_weighted &&
           avg_accuracy_unweighted == o.avg_accuracy_unweighted;
  }
};

struct RunOptions {
  std::size_t workers = 1;
  /// When set, resized to K and filled with per-client (train, test) traces.
  std::vector<std::pair<PipelineTrace, PipelineTrace>>* traces = nullptr;
};

struct ExperimentResult {
  std::vector<RoundReport> rounds;
  ParameterVector initial_global;
  ParameterVector global;
  std::vector<ParameterVector> locals;  // from the last round
  PayloadSummary payloads;
};

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the failure
/// of the lowest index after all threads join.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t w, std::size_t stride) {
    for (std::size_t i = w; i < n; i += stride) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    run(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(run, w, threads);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Per-client states for an arm; streams are derived from (seed, client id).
inline std::vector<ClientState> make_clients(const FederationData& fed, const PreparedArm& arm, std::uint64_t seed) {
  std::vector<ClientState> clients;
  clients.reserve(fed.clients.size());
  for (const auto& ds : fed.clients) {
    ClientState c;
    c.data = &ds;
    c.train_pipeline = arm.train_pipeline;
    c.test_pipeline = arm.test_pipeline;
    c.registry = arm.registry;
    c.mean_images = arm.mean_images;
    c.own_stats = arm.registry ? (*arm.registry)[static_cast<std::size_t>(ds.client_id)]
                               : dataset_channel_stats(ds);
    c.rng = make_rng(seed, "client", static_cast<std::uint64_t>(ds.client_id));
    clients.push_back(std::move(c));
  }
  return clients;
}

/// T rounds of: local training on every client -> weighted aggregation ->
/// server update -> evaluation of the new global model on every client.
/// The result depends only on the inputs and `seed`, not on `opt.workers`.
inline ExperimentResult run_experiment(const FederationData& fed, const ModelSpec& spec, const PreparedArm& arm,
                                       const AlgorithmConfig& cfg, std::uint64_t seed, const RunOptions& opt = {}) {
  validate(cfg);
  validate_federation(fed);
  if (spec.input_shape != fed.image_shape || spec.num_classes != fed.num_classes)
    throw MisuseError("run_experiment: model spec does not match the federation's image shape or class count");
  if ((arm.arm == Arm::RDN || arm.arm == Arm::RDNV) &&
      (!arm.registry || arm.registry->num_clients() != fed.num_clients()))
    throw MisuseError("run_experiment: statistics round has not been run for this federation");

  const std::size_t k = fed.num_clients();
  auto clients = make_clients(fed, arm, seed);
  if (opt.traces) {
    opt.traces->assign(k, {});
    for (std::size_t i = 0; i < k; ++i) {
      clients[i].train_trace = &(*opt.traces)[i].first;
      clients[i].test_trace = &(*opt.traces)[i].second;
    }
  }
  std::vector<std::size_t> counts;
  for (const auto& ds : fed.clients) counts.push_back(ds.n_k());
  const auto gamma = aggregation_weights(counts);

  ExperimentResult result;
  result.payloads = arm.payloads;
  result.initial_global = init_params(spec, derive_seed(seed, "model-init"));
  ServerState server = make_server(result.initial_global, cfg);
  std::vector<LocalResult> locals(k);
  std::vector<EvalResult> evals(k);

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    auto guarded = [&](const char* stage, auto&& body) {
      return [&, stage](std::size_t i) {
        try {
          body(i);
        } catch (const std::exception& e) {
          throw ExperimentError(t, fed.clients[i].client_id, std::string(stage) + " failed: " + e.what());
        }
      };
    };
    detail::parallel_for(k, opt.workers, guarded("local training", [&](std::size_t i) {
                           locals[i] = local_train(clients[i], spec, server.global, cfg);
                         }));
    result.payloads.parameter_uploads += k;

    std::vector<ParameterVector> params;
    params.reserve(k);
    for (auto& l : locals) params.push_back(l.params);
    try {
      server = server_update(server, aggregate_weighted(params, counts), cfg);
    } catch (const std::exception& e) {
      throw ExperimentError(t, -1, std::string("aggregation failed: ") + e.what());
    }

    detail::parallel_for(k, opt.workers, guarded("evaluation", [&](std::size_t i) {
                           evals[i] = evaluate(clients[i], spec, server.global);
                         }));

    RoundReport rep;
    rep.round = t;
    for (std::size_t i = 0; i < k; ++i) {
      rep.clients.push_back({fed.clients[i].client_id, locals[i].train_loss, locals[i].train_accuracy, evals[i].loss,
                             evals[i].accuracy});
      rep.avg_accuracy_weighted += gamma[i] * evals[i].accuracy;
      rep.avg_accuracy_unweighted += evals[i].accuracy;
    }
    rep.avg_accuracy_unweighted /= static_cast<double>(k);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.rounds.push_back(std::move(rep));
    if (t + 1 == cfg.rounds) result.locals = std::move(params);
  }
  result.global = server.global;
  return result;
}

}  // namespace fedrdn
