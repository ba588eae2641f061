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
#include <stdexcept>
#include <string>

namespace fedrdn {

/// Base of every error raised by the simulator.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a precondition (shape mismatch, misaligned parameters, empty input).
class MisuseError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `field()` holds the dotted path when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::string field = {})
      : Error(field.empty() ? msg : field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed binary payload; `offset()` is the byte position of the failure.
class FormatError : public Error {
 public:
  FormatError(const std::string& msg, std::size_t offset)
      : Error(msg + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Statistics exchange violated its one-message-per-client contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Normalization requested with a standard deviation below the floor.
class DegenerateStatsError : public Error {
 public:
  DegenerateStatsError(const std::string& msg, std::size_t channel) : Error(msg), channel_(channel) {}
  std::size_t channel() const noexcept { return channel_; }

 private:
  std::size_t channel_;
};

/// NaN or Inf produced or supplied where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedrdn
