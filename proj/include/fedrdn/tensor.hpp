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

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedrdn/errors.hpp"

// Per-op finiteness checks are on in debug builds and can be forced on with
// -DFEDRDN_CHECK_FINITE=1.
#ifndef FEDRDN_CHECK_FINITE
#ifdef NDEBUG
#define FEDRDN_CHECK_FINITE 0
#else
#define FEDRDN_CHECK_FINITE 1
#endif
#endif

namespace fedrdn {

inline constexpr bool kCheckFiniteEveryOp = FEDRDN_CHECK_FINITE != 0;

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Dense row-major f64 tensor. Extents are positive and every value is finite.
class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled tensor of the given shape.
  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_numel(shape_), 0.0);
  }

  /// Takes ownership of `data`; rejects size mismatch and non-finite values.
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_numel(shape_) != data_.size())
      throw MisuseError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                        shape_str(shape_));
    if (!all_finite(data_)) throw NumericError("tensor constructed with non-finite values");
  }

  static Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    if (!std::isfinite(value)) throw NumericError("tensor filled with non-finite value");
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  /// Same data viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
      throw MisuseError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw MisuseError("tensor extents must be positive, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Throws when `t` holds NaN/Inf. Only called from the autodiff ops when per-op checks are enabled.
inline void require_finite(const Tensor& t, const char* where) {
  if (!all_finite(t.data())) throw NumericError(std::string("non-finite value produced by ") + where);
}

}  // namespace fedrdn
