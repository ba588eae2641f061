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

#include <cstddef>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedrdn/tensor.hpp"

namespace fedrdn {

struct ParamSegment {
  std::string name;
  Tensor value;

  bool operator==(const ParamSegment&) const = default;
};

/// Named, ordered list of parameter tensors. Two vectors are aligned when
/// names, order and shapes all match; every arithmetic helper requires it.
class ParameterVector {
 public:
  ParameterVector() = default;

  explicit ParameterVector(std::vector<ParamSegment> segments) : segments_(std::move(segments)) {
    std::unordered_set<std::string> seen;
    for (const auto& s : segments_) {
      if (!seen.insert(s.name).second) throw MisuseError("duplicate parameter segment '" + s.name + "'");
      total_len_ += s.value.size();
    }
  }

  const std::vector<ParamSegment>& segments() const noexcept { return segments_; }
  std::size_t num_segments() const noexcept { return segments_.size(); }
  std::size_t total_len() const noexcept { return total_len_; }

  const Tensor& at(std::size_t i) const { return segments_.at(i).value; }
  Tensor& at(std::size_t i) { return segments_.at(i).value; }
  const std::string& name(std::size_t i) const { return segments_.at(i).name; }

  bool aligned_with(const ParameterVector& other) const {
    if (segments_.size() != other.segments_.size()) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i)
      if (segments_[i].name != other.segments_[i].name ||
          segments_[i].value.shape() != other.segments_[i].value.shape())
        return false;
    return true;
  }

  /// Flat copy of all scalars in segment order.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_len_);
    for (const auto& s : segments_) out.insert(out.end(), s.value.data().begin(), s.value.data().end());
    return out;
  }

  /// Scalar by flat index; O(#segments).
  double flat(std::size_t i) const {
    for (const auto& s : segments_) {
      if (i < s.value.size()) return s.value[i];
      i -= s.value.size();
    }
    throw MisuseError("flat parameter index out of range");
  }

  double& flat(std::size_t i) {
    for (auto& s : segments_) {
      if (i < s.value.size()) return s.value[i];
      i -= s.value.size();
    }
    throw MisuseError("flat parameter index out of range");
  }

  bool operator==(const ParameterVector& other) const { return segments_ == other.segments_; }

 private:
  std::vector<ParamSegment> segments_;
  std::size_t total_len_ = 0;
};

inline void require_aligned(const ParameterVector& a, const ParameterVector& b, const char* op) {
  if (!a.aligned_with(b))
    throw MisuseError(std::string(op) + ": parameter vectors are not aligned (" + std::to_string(a.num_segments()) +
                      " vs " + std::to_string(b.num_segments()) + " segments)");
}

/// Same names and shapes, all zeros.
inline ParameterVector zeros_like(const ParameterVector& p) {
  std::vector<ParamSegment> segs;
  segs.reserve(p.num_segments());
  for (const auto& s : p.segments()) segs.push_back({s.name, Tensor(s.value.shape())});
  return ParameterVector(std::move(segs));
}

/// a*x + y, elementwise.
inline ParameterVector param_axpy(double a, const ParameterVector& x, const ParameterVector& y) {
  require_aligned(x, y, "param_axpy");
  ParameterVector out = y;
  for (std::size_t s = 0; s < out.num_segments(); ++s) {
    auto dst = out.at(s).data();
    auto src = x.at(s).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = a * src[i] + dst[i];
  }
  return out;
}

/// params - lr * (grad + weight_decay * params), elementwise.
inline ParameterVector sgd_step(const ParameterVector& params, const ParameterVector& grad, double lr,
                                double weight_decay) {
  require_aligned(params, grad, "sgd_step");
  if (!(lr > 0.0)) throw MisuseError("sgd_step: learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw MisuseError("sgd_step: weight decay must be non-negative");
  ParameterVector out = params;
  for (std::size_t s = 0; s < out.num_segments(); ++s) {
    auto w = out.at(s).data();
    auto g = grad.at(s).data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = w[i] - lr * (g[i] + weight_decay * w[i]);
  }
  return out;
}

}  // namespace fedrdn
