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

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedrdn/autodiff.hpp"
#include "fedrdn/parameters.hpp"
#include "fedrdn/rng.hpp"
#include "fedrdn/tensor.hpp"

namespace fedrdn {

/// (C, H, W)
struct ImageShape {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;

  std::size_t numel() const noexcept { return channels * height * width; }
  Shape as_shape() const { return {channels, height, width}; }
  bool operator==(const ImageShape&) const = default;
};

enum class Activation { ReLU, Tanh };

struct MlpArch {
  std::vector<std::size_t> hidden;  // may be empty: a single linear layer
  Activation activation = Activation::ReLU;
  bool operator==(const MlpArch&) const = default;
};

/// conv(3x3 same) -> ReLU -> maxpool per entry of `conv_channels`, then a hidden
/// linear layer of `head_width` with ReLU, then the class head.
struct CnnArch {
  std::vector<std::size_t> conv_channels{8, 16};
  std::size_t kernel = 3;
  std::size_t pool = 2;
  std::size_t head_width = 32;
  bool operator==(const CnnArch&) const = default;
};

struct ModelSpec {
  std::variant<MlpArch, CnnArch> architecture = CnnArch{};
  ImageShape input_shape;
  std::size_t num_classes = 10;
  bool operator==(const ModelSpec&) const = default;
};

struct SegmentSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;
};

namespace detail {

inline void validate(const ModelSpec& spec) {
  if (spec.num_classes < 1) throw MisuseError("model: num_classes must be positive");
  if (spec.input_shape.numel() == 0) throw MisuseError("model: input shape has a zero extent");
  if (const auto* cnn = std::get_if<CnnArch>(&spec.architecture)) {
    if (cnn->kernel == 0 || cnn->kernel % 2 == 0) throw MisuseError("model: conv kernel must be odd");
    if (cnn->pool == 0) throw MisuseError("model: pool window must be positive");
    if (cnn->head_width == 0) throw MisuseError("model: head width must be positive");
    std::size_t h = spec.input_shape.height, w = spec.input_shape.width;
    for (std::size_t c : cnn->conv_channels) {
      if (c == 0) throw MisuseError("model: conv channel count must be positive");
      h /= cnn->pool;
      w /= cnn->pool;
      if (h == 0 || w == 0) throw MisuseError("model: too many pooling stages for the input size");
    }
  } else {
    for (std::size_t w : std::get<MlpArch>(spec.architecture).hidden)
      if (w == 0) throw MisuseError("model: hidden width must be positive");
  }
}

}  // namespace detail

/// Parameter layout implied by `spec`, in forward order.
inline std::vector<SegmentSpec> parameter_layout(const ModelSpec& spec) {
  detail::validate(spec);
  std::vector<SegmentSpec> out;
  if (const auto* cnn = std::get_if<CnnArch>(&spec.architecture)) {
    std::size_t cin = spec.input_shape.channels, h = spec.input_shape.height, w = spec.input_shape.width;
    for (std::size_t i = 0; i < cnn->conv_channels.size(); ++i) {
      const std::size_t cout = cnn->conv_channels[i];
      const std::size_t fan_in = cin * cnn->kernel * cnn->kernel;
      const std::string p = "conv" + std::to_string(i);
      out.push_back({p + ".weight", {cout, cin, cnn->kernel, cnn->kernel}, fan_in});
      out.push_back({p + ".bias", {cout}, fan_in});
      cin = cout;
      h /= cnn->pool;
      w /= cnn->pool;
    }
    const std::size_t flat = cin * h * w;
    out.push_back({"fc0.weight", {cnn->head_width, flat}, flat});
    out.push_back({"fc0.bias", {cnn->head_width}, flat});
    out.push_back({"head.weight", {spec.num_classes, cnn->head_width}, cnn->head_width});
    out.push_back({"head.bias", {spec.num_classes}, cnn->head_width});
  } else {
    const auto& mlp = std::get<MlpArch>(spec.architecture);
    std::size_t in = spec.input_shape.numel();
    for (std::size_t i = 0; i < mlp.hidden.size(); ++i) {
      const std::string p = "fc" + std::to_string(i);
      out.push_back({p + ".weight", {mlp.hidden[i], in}, in});
      out.push_back({p + ".bias", {mlp.hidden[i]}, in});
      in = mlp.hidden[i];
    }
    out.push_back({"head.weight", {spec.num_classes, in}, in});
    out.push_back({"head.bias", {spec.num_classes}, in});
  }
  return out;
}

/// Width of the activations feeding the class head.
inline std::size_t penultimate_width(const ModelSpec& spec) { return parameter_layout(spec).back().fan_in; }

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every scalar; each segment draws from its own stream.
inline ParameterVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  std::vector<ParamSegment> segs;
  for (const auto& s : parameter_layout(spec)) {
    Rng rng = make_rng(seed, "init:" + s.name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
    Tensor t(s.shape);
    for (double& v : t.data()) v = uniform(rng, -bound, bound);
    segs.push_back({s.name, std::move(t)});
  }
  return ParameterVector(std::move(segs));
}

/// Zero-valued parameters with the layout of `spec`.
inline ParameterVector zero_params(const ModelSpec& spec) {
  std::vector<ParamSegment> segs;
  for (const auto& s : parameter_layout(spec)) segs.push_back({s.name, Tensor(s.shape)});
  return ParameterVector(std::move(segs));
}

inline void require_params_match(const ModelSpec& spec, const ParameterVector& params) {
  const auto layout = parameter_layout(spec);
  if (layout.size() != params.num_segments())
    throw MisuseError("model: expected " + std::to_string(layout.size()) + " parameter segments, got " +
                      std::to_string(params.num_segments()));
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name != params.name(i) || layout[i].shape != params.at(i).shape())
      throw MisuseError("model: parameter '" + params.name(i) + "' has shape " + shape_str(params.at(i).shape()) +
                        ", expected '" + layout[i].name + "' " + shape_str(layout[i].shape));
}

inline void require_batch_match(const ModelSpec& spec, const Tensor& batch) {
  const Shape& s = batch.shape();
  const Shape want{spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width};
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != want)
    throw MisuseError("model: batch shape " + shape_str(s) + " does not match input shape [B," +
                      shape_str(want).substr(1));
}

namespace detail {

struct Traced {
  ad::Var penultimate;
  ad::Var logits;
  std::vector<ad::Var> param_vars;
};

inline Traced trace(ad::Graph& g, const ModelSpec& spec, const ParameterVector& params, const Tensor& batch,
                    bool need_grad) {
  require_params_match(spec, params);
  require_batch_match(spec, batch);
  Traced t;
  for (const auto& s : params.segments()) t.param_vars.push_back(g.leaf(s.value, need_grad));
  const std::size_t n = batch.dim(0);
  ad::Var x = g.leaf(batch);
  std::size_t p = 0;
  if (const auto* cnn = std::get_if<CnnArch>(&spec.architecture)) {
    for (std::size_t i = 0; i < cnn->conv_channels.size(); ++i) {
      x = ad::conv2d(g, x, t.param_vars[p], t.param_vars[p + 1], cnn->kernel / 2);
      p += 2;
      x = ad::relu(g, x);
      x = ad::max_pool2d(g, x, cnn->pool);
    }
    const std::size_t flat = g.value(x).size() / n;
    x = ad::reshape(g, x, {n, flat});
    x = ad::relu(g, ad::linear(g, x, t.param_vars[p], t.param_vars[p + 1]));
    p += 2;
  } else {
    const auto& mlp = std::get<MlpArch>(spec.architecture);
    x = ad::reshape(g, x, {n, spec.input_shape.numel()});
    for (std::size_t i = 0; i < mlp.hidden.size(); ++i) {
      x = ad::linear(g, x, t.param_vars[p], t.param_vars[p + 1]);
      p += 2;
      x = mlp.activation == Activation::ReLU ? ad::relu(g, x) : ad::tanh(g, x);
    }
  }
  t.penultimate = x;
  t.logits = ad::linear(g, x, t.param_vars[p], t.param_vars[p + 1]);
  return t;
}

}  // namespace detail

/// Logits [B, num_classes] for a batch [B, C, H, W].
inline Tensor forward(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch) {
  ad::Graph g;
  auto t = detail::trace(g, spec, params, batch, false);
  Tensor out = g.value(t.logits);
  require_finite(out, "forward");
  return out;
}

/// Activations feeding the class head, [B, penultimate_width(spec)].
inline Tensor penultimate_features(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch) {
  ad::Graph g;
  auto t = detail::trace(g, spec, params, batch, false);
  return g.value(t.penultimate);
}

struct LossAndGrad {
  double loss = 0.0;
  ParameterVector grad;
  Tensor logits;
};

/// Mean soft-target cross-entropy and its gradient. `targets` is [B, num_classes].
inline LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch,
                                 const Tensor& targets) {
  ad::Graph g;
  auto t = detail::trace(g, spec, params, batch, true);
  ad::Var loss = ad::softmax_cross_entropy(g, t.logits, targets);
  const double value = g.value(loss)[0];
  if (!std::isfinite(value)) throw NumericError("loss_and_grad: non-finite loss");
  g.backward(loss);
  std::vector<ParamSegment> segs;
  segs.reserve(params.num_segments());
  for (std::size_t i = 0; i < params.num_segments(); ++i) {
    Tensor gi = g.grad(t.param_vars[i]);
    require_finite(gi, "loss_and_grad");
    segs.push_back({params.name(i), std::move(gi)});
  }
  return {value, ParameterVector(std::move(segs)), g.value(t.logits)};
}

/// One-hot targets for integer labels; rejects labels outside [0, num_classes).
inline Tensor one_hot(std::span<const int> labels, std::size_t num_classes) {
  if (labels.empty()) throw MisuseError("one_hot: empty label list");
  Tensor t({labels.size(), num_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw MisuseError("label " + std::to_string(labels[i]) + " at position " + std::to_string(i) +
                        " is outside [0, " + std::to_string(num_classes) + ")");
    t[i * num_classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

inline LossAndGrad loss_and_grad(const ModelSpec& spec, const ParameterVector& params, const Tensor& batch,
                                 std::span<const int> labels) {
  if (labels.size() != batch.dim(0))
    throw MisuseError("loss_and_grad: " + std::to_string(labels.size()) + " labels for batch of " +
                      std::to_string(batch.dim(0)));
  return loss_and_grad(spec, params, batch, one_hot(labels, spec.num_classes));
}

/// Index of the largest logit per row; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (logits[i * k + c] > logits[i * k + best]) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace fedrdn
