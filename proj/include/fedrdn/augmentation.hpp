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

// Channel statistics and the augmentation flow.
//
// Random data normalization (RDN) normalizes each training image with the
// dataset statistics of a uniformly drawn client, redrawn per image per epoch,
// and normalizes test images with the owning client's statistics. The
// "average" variant (RDN-V) uses the element-wise mean of all client
// statistics in both phases.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "fedrdn/datasets.hpp"
#include "fedrdn/errors.hpp"
#include "fedrdn/rng.hpp"
#include "fedrdn/tensor.hpp"

namespace fedrdn {

/// Minimum standard deviation accepted by normalize_image.
inline constexpr double kStdFloor = 1e-6;

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t channels() const noexcept { return mean.size(); }
  bool operator==(const ChannelStats&) const = default;
};

/// Dataset statistics of every client, indexed by client id.
struct StatsRegistry {
  std::vector<ChannelStats> per_client;

  std::size_t num_clients() const noexcept { return per_client.size(); }
  const ChannelStats& operator[](std::size_t k) const { return per_client.at(k); }
  bool operator==(const StatsRegistry&) const = default;
};

// ---------------------------------------------------------------------------
// Statistics

/// Per-channel mean and population standard deviation over the H*W pixels.
inline ChannelStats image_channel_stats(const Tensor& img) {
  if (img.rank() != 3) throw MisuseError("image_channel_stats: expected [C,H,W], got " + shape_str(img.shape()));
  const std::size_t c = img.dim(0), plane = img.dim(1) * img.dim(2);
  ChannelStats s{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* p = &img.data()[ch * plane];
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    const double mean = sum / static_cast<double>(plane);
    double ss = 0.0;
    for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mean) * (p[i] - mean);
    s.mean[ch] = mean;
    s.std[ch] = std::sqrt(ss / static_cast<double>(plane));
  }
  return s;
}

/// How per-image standard deviations are folded into a dataset statistic.
enum class StdAggregation {
  MeanOfImageStds,  // average of per-image stds
  Pooled,           // std over every pixel of the dataset (ablation)
};

/// Dataset-level channel statistics: the mean of per-image means and, by
/// default, the mean of per-image standard deviations.
inline ChannelStats dataset_channel_stats(std::span<const LabeledImage> images,
                                          StdAggregation agg = StdAggregation::MeanOfImageStds) {
  if (images.empty()) throw MisuseError("dataset_channel_stats: empty dataset");
  const std::size_t c = images.front().pixels.dim(0);
  ChannelStats out{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double n = static_cast<double>(images.size());
  std::vector<double> image_means_sq(c, 0.0);
  std::vector<double> image_var(c, 0.0);
  for (const auto& img : images) {
    if (img.pixels.rank() != 3 || img.pixels.dim(0) != c)
      throw MisuseError("dataset_channel_stats: inconsistent image shape " + shape_str(img.pixels.shape()));
    const ChannelStats s = image_channel_stats(img.pixels);
    for (std::size_t ch = 0; ch < c; ++ch) {
      out.mean[ch] += s.mean[ch];
      out.std[ch] += s.std[ch];
      image_means_sq[ch] += s.mean[ch] * s.mean[ch];
      image_var[ch] += s.std[ch] * s.std[ch];
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    out.mean[ch] /= n;
    out.std[ch] /= n;
  }
  if (agg == StdAggregation::Pooled) {
    // All images have the same H*W, so the pooled variance is the mean within-image
    // variance plus the variance of the image means.
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double between = image_means_sq[ch] / n - out.mean[ch] * out.mean[ch];
      out.std[ch] = std::sqrt(std::max(0.0, image_var[ch] / n + between));
    }
  }
  return out;
}

/// Statistics of a client's training split.
inline ChannelStats dataset_channel_stats(const ClientDataset& ds,
                                          StdAggregation agg = StdAggregation::MeanOfImageStds) {
  return dataset_channel_stats(std::span<const LabeledImage>(ds.train), agg);
}

/// (x_c - mean_c) / std_c per channel.
inline Tensor normalize_image(const Tensor& img, const ChannelStats& stats) {
  if (img.rank() != 3 || img.dim(0) != stats.channels() || stats.std.size() != stats.channels())
    throw MisuseError("normalize_image: image " + shape_str(img.shape()) + " vs stats with " +
                      std::to_string(stats.channels()) + " channels");
  for (std::size_t ch = 0; ch < stats.channels(); ++ch)
    if (!(stats.std[ch] >= kStdFloor))
      throw DegenerateStatsError("normalize_image: std of channel " + std::to_string(ch) + " is " +
                                     std::to_string(stats.std[ch]) + ", below the floor 1e-6",
                                 ch);
  const std::size_t plane = img.dim(1) * img.dim(2);
  Tensor out = img;
  for (std::size_t ch = 0; ch < stats.channels(); ++ch) {
    const double m = stats.mean[ch], s = stats.std[ch];
    double* p = &out.data()[ch * plane];
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) / s;
  }
  return out;
}

inline void require_complete(const StatsRegistry& registry) {
  if (registry.per_client.empty()) throw MisuseError("statistics registry is empty");
  const std::size_t c = registry.per_client.front().channels();
  for (std::size_t k = 0; k < registry.num_clients(); ++k) {
    const auto& s = registry.per_client[k];
    if (s.channels() != c || s.std.size() != c)
      throw MisuseError("statistics registry entry " + std::to_string(k) + " has inconsistent channel count");
  }
}

/// Uniform client index in [0, K) for one RDN draw.
inline std::size_t rdn_select(const StatsRegistry& registry, Rng& rng) {
  return static_cast<std::size_t>(uniform_index(rng, registry.num_clients()));
}

/// Training-time RDN: normalize with the statistics of a uniformly drawn client.
inline Tensor rdn_train_transform(const Tensor& img, const StatsRegistry& registry, Rng& rng) {
  require_complete(registry);
  return normalize_image(img, registry[rdn_select(registry, rng)]);
}

/// Test-time RDN: normalize with the owning client's statistics. Consumes no randomness.
inline Tensor rdn_test_transform(const Tensor& img, const ChannelStats& own) { return normalize_image(img, own); }

/// Element-wise average of every client's mean and std (RDN-V reference statistics).
inline ChannelStats rdnv_reference_stats(const StatsRegistry& registry) {
  require_complete(registry);
  const std::size_t c = registry.per_client.front().channels();
  ChannelStats out{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (const auto& s : registry.per_client)
    for (std::size_t ch = 0; ch < c; ++ch) {
      out.mean[ch] += s.mean[ch];
      out.std[ch] += s.std[ch];
    }
  const double k = static_cast<double>(registry.num_clients());
  for (std::size_t ch = 0; ch < c; ++ch) {
    out.mean[ch] /= k;
    out.std[ch] /= k;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flips and FedMix

/// Mirror along the width axis.
inline Tensor horizontal_flip(const Tensor& img) {
  if (img.rank() != 3) throw MisuseError("horizontal_flip: expected [C,H,W], got " + shape_str(img.shape()));
  const std::size_t rows = img.dim(0) * img.dim(1), w = img.dim(2);
  Tensor out = img;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = img[r * w + (w - 1 - j)];
  return out;
}

/// Mean images over consecutive disjoint groups of `group` training images;
/// a trailing partial group is dropped unless it is the only one.
inline std::vector<Tensor> batch_mean_images(std::span<const LabeledImage> images, std::size_t group) {
  if (images.empty()) throw MisuseError("batch_mean_images: empty dataset");
  if (group == 0) throw ConfigError("mean batch size must be positive", "augmentation.fedmix.mean_batch_size");
  const std::size_t groups = std::max<std::size_t>(1, images.size() / group);
  const std::size_t per = std::min(group, images.size());
  std::vector<Tensor> out;
  for (std::size_t gi = 0; gi < groups; ++gi) {
    Tensor m(images.front().pixels.shape());
    for (std::size_t j = 0; j < per; ++j) {
      const Tensor& x = images[gi * per + j].pixels;
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += x[i];
    }
    for (double& v : m.data()) v /= static_cast<double>(per);
    out.push_back(std::move(m));
  }
  return out;
}

struct MixedBatch {
  Tensor images;   // [B, C, H, W]
  Tensor targets;  // [B, num_classes]
};

/// x' = (1-lambda) x + lambda * mean_image_j (j uniform per sample); y' = (1-lambda) y.
/// The label term of the mean image is dropped because its label is unknown.
inline MixedBatch fedmix_augment(const Tensor& batch, const Tensor& targets, std::span<const Tensor> mean_images,
                                 double lambda, Rng& rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ConfigError("lambda " + std::to_string(lambda) + " outside [0, 1]", "augmentation.fedmix.lambda");
  if (mean_images.empty()) throw MisuseError("fedmix_augment: no mean images available");
  if (batch.rank() != 4 || targets.rank() != 2 || targets.dim(0) != batch.dim(0))
    throw MisuseError("fedmix_augment: batch " + shape_str(batch.shape()) + " vs targets " +
                      shape_str(targets.shape()));
  const std::size_t n = batch.dim(0), per = batch.size() / n;
  for (const auto& m : mean_images)
    if (m.size() != per) throw MisuseError("fedmix_augment: mean image shape " + shape_str(m.shape()));
  MixedBatch out{batch, targets};
  for (std::size_t b = 0; b < n; ++b) {
    const Tensor& mean = mean_images[uniform_index(rng, mean_images.size())];
    double* x = &out.images.data()[b * per];
    for (std::size_t i = 0; i < per; ++i) x[i] = (1.0 - lambda) * x[i] + lambda * mean[i];
  }
  for (double& y : out.targets.data()) y *= (1.0 - lambda);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct HorizontalFlip {
  double p = 0.5;
  bool operator==(const HorizontalFlip&) const = default;
};

struct FixedNormalize {
  ChannelStats stats;
  bool operator==(const FixedNormalize&) const = default;
};

/// Random data normalization: registry draw in Train mode, own statistics in Test mode.
struct RandomNormalize {
  bool operator==(const RandomNormalize&) const = default;
};

/// Normalization with the cross-client average statistics, in both modes.
struct AverageNormalize {
  bool operator==(const AverageNormalize&) const = default;
};

struct FedMix {
  enum class LambdaMode { Fixed, Beta };
  LambdaMode lambda_mode = LambdaMode::Fixed;
  double lambda = 0.05;      // Fixed
  double beta_alpha = 0.2;   // Beta(alpha, alpha) draw per batch
  std::size_t mean_batch_size = 5;
  bool operator==(const FedMix&) const = default;
};

using AugmentationStep = std::variant<HorizontalFlip, FixedNormalize, RandomNormalize, AverageNormalize, FedMix>;

inline std::string step_name(const AugmentationStep& step) {
  switch (step.index()) {
    case 0: return "HorizontalFlip";
    case 1: return "FixedNormalize";
    case 2: return "RDN";
    case 3: return "RDNV";
    default: return "FedMix";
  }
}

enum class PipelineMode { Train, Test };

struct AugmentationPipeline {
  std::vector<AugmentationStep> steps;
  PipelineMode mode = PipelineMode::Train;
  bool operator==(const AugmentationPipeline&) const = default;
};

inline bool is_normalization(const AugmentationStep& s) {
  return std::holds_alternative<FixedNormalize>(s) || std::holds_alternative<RandomNormalize>(s) ||
         std::holds_alternative<AverageNormalize>(s);
}

inline void validate(const AugmentationPipeline& pipeline) {
  std::size_t norms = 0;
  for (const auto& s : pipeline.steps) {
    norms += is_normalization(s) ? 1 : 0;
    if (const auto* f = std::get_if<HorizontalFlip>(&s); f && !(f->p >= 0.0 && f->p <= 1.0))
      throw ConfigError("flip probability must be in [0, 1]", "augmentation.flip_p");
    if (const auto* m = std::get_if<FedMix>(&s)) {
      if (m->lambda_mode == FedMix::LambdaMode::Fixed && !(m->lambda >= 0.0 && m->lambda <= 1.0))
        throw ConfigError("lambda must be in [0, 1]", "augmentation.fedmix.lambda");
      if (m->lambda_mode == FedMix::LambdaMode::Beta && !(m->beta_alpha > 0.0))
        throw ConfigError("Beta parameter must be positive", "augmentation.fedmix.beta_alpha");
      if (m->mean_batch_size == 0) throw ConfigError("must be positive", "augmentation.fedmix.mean_batch_size");
    }
  }
  if (norms > 1) throw ConfigError("at most one normalization step per pipeline", "augmentation");
}

/// Counts which statistics source each normalization used; lets tests assert
/// that RDN touches the registry only in Train mode and own stats only in Test mode.
struct PipelineTrace {
  std::size_t registry_draws = 0;
  std::size_t own_stats_uses = 0;
  std::size_t fixed_uses = 0;
  std::size_t reference_uses = 0;
  std::size_t fedmix_batches = 0;
  std::vector<std::size_t> selected_clients;
};

/// Inputs a pipeline may need. Null/empty members are only an error when a step needs them.
struct PipelineContext {
  const StatsRegistry* registry = nullptr;
  const ChannelStats* own_stats = nullptr;
  std::span<const Tensor> mean_images;
  Rng* rng = nullptr;
  PipelineTrace* trace = nullptr;
};

namespace detail {

inline Rng& need_rng(const PipelineContext& ctx, const AugmentationStep& step) {
  if (!ctx.rng) throw ConfigError("step " + step_name(step) + " needs a random stream in Train mode");
  return *ctx.rng;
}

inline const StatsRegistry& need_registry(const PipelineContext& ctx, const AugmentationStep& step) {
  if (!ctx.registry) throw ConfigError("step " + step_name(step) + " needs the statistics registry");
  return *ctx.registry;
}

/// Applies one per-image step. FedMix is handled at batch level and is a no-op here.
inline Tensor apply_image_step(const AugmentationStep& step, PipelineMode mode, const Tensor& img,
                               const PipelineContext& ctx) {
  PipelineTrace* tr = ctx.trace;
  if (const auto* flip = std::get_if<HorizontalFlip>(&step)) {
    if (mode == PipelineMode::Test) return img;
    const double u = uniform01(need_rng(ctx, step));
    return u < flip->p ? horizontal_flip(img) : img;
  }
  if (const auto* fixed = std::get_if<FixedNormalize>(&step)) {
    if (tr) ++tr->fixed_uses;
    return normalize_image(img, fixed->stats);
  }
  if (std::holds_alternative<RandomNormalize>(step)) {
    if (mode == PipelineMode::Test) {
      if (!ctx.own_stats) throw ConfigError("step RDN needs the client's own statistics in Test mode");
      if (tr) ++tr->own_stats_uses;
      return rdn_test_transform(img, *ctx.own_stats);
    }
    const StatsRegistry& reg = need_registry(ctx, step);
    require_complete(reg);
    const std::size_t j = rdn_select(reg, need_rng(ctx, step));
    if (tr) {
      ++tr->registry_draws;
      tr->selected_clients.push_back(j);
    }
    return normalize_image(img, reg[j]);
  }
  if (std::holds_alternative<AverageNormalize>(step)) {
    if (tr) ++tr->reference_uses;
    return normalize_image(img, rdnv_reference_stats(need_registry(ctx, step)));
  }
  return img;
}

}  // namespace detail

/// Applies the per-image steps of `pipeline` in order. A pipeline containing
/// FedMix must go through the batch overload in Train mode.
inline Tensor apply_pipeline(const AugmentationPipeline& pipeline, const Tensor& img, const PipelineContext& ctx) {
  Tensor out = img;
  for (const auto& step : pipeline.steps) {
    if (std::holds_alternative<FedMix>(step) && pipeline.mode == PipelineMode::Train)
      throw ConfigError("step FedMix mixes whole batches; apply the pipeline to a batch");
    out = detail::apply_image_step(step, pipeline.mode, out, ctx);
  }
  return out;
}

/// Batch form. Each maximal run of per-image steps is applied image by image
/// (image-major, so the random stream is consumed exactly as the single-image
/// overload would); FedMix runs on the whole batch at its position in the
/// pipeline. Test mode skips flips and FedMix.
inline MixedBatch apply_pipeline(const AugmentationPipeline& pipeline, MixedBatch batch, const PipelineContext& ctx) {
  if (batch.images.rank() != 4) throw MisuseError("apply_pipeline: batch must be [B,C,H,W]");
  const std::size_t n = batch.images.dim(0), per = batch.images.size() / n;
  const Shape img_shape(batch.images.shape().begin() + 1, batch.images.shape().end());
  const auto& steps = pipeline.steps;
  std::size_t i = 0;
  while (i < steps.size()) {
    if (const auto* mix = std::get_if<FedMix>(&steps[i])) {
      ++i;
      if (pipeline.mode == PipelineMode::Test) continue;
      if (ctx.mean_images.empty()) throw ConfigError("step FedMix needs the shared mean images");
      Rng& rng = detail::need_rng(ctx, steps[i - 1]);
      double lambda = mix->lambda;
      if (mix->lambda_mode == FedMix::LambdaMode::Beta) {
        std::gamma_distribution<double> ga(mix->beta_alpha, 1.0);
        const double a = ga(rng), b = ga(rng);
        lambda = a + b > 0.0 ? a / (a + b) : 0.5;
      }
      if (ctx.trace) ++ctx.trace->fedmix_batches;
      batch = fedmix_augment(batch.images, batch.targets, ctx.mean_images, lambda, rng);
      continue;
    }
    std::size_t j = i;
    while (j < steps.size() && !std::holds_alternative<FedMix>(steps[j])) ++j;
    for (std::size_t b = 0; b < n; ++b) {
      auto first = batch.images.data().begin() + static_cast<std::ptrdiff_t>(b * per);
      Tensor img(img_shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(per)));
      for (std::size_t s = i; s < j; ++s) img = detail::apply_image_step(steps[s], pipeline.mode, img, ctx);
      std::copy(img.data().begin(), img.data().end(), first);
    }
    i = j;
  }
  return batch;
}

}  // namespace fedrdn
