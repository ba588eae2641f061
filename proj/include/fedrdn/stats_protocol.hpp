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

// One-shot statistics round run before the first communication round.
// A client sends only its dataset-level channel statistics and sample count;
// StatsMessage has no field that could carry per-sample values.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedrdn/augmentation.hpp"
#include "fedrdn/datasets.hpp"
#include "fedrdn/errors.hpp"

namespace fedrdn {

struct StatsMessage {
  int client_id = 0;
  ChannelStats stats;
  std::size_t sample_count = 0;

  bool operator==(const StatsMessage&) const = default;
};

/// Client side of the round: dataset statistics of the training split plus n_k.
inline StatsMessage client_stats_round(const ClientDataset& ds,
                                       StdAggregation agg = StdAggregation::MeanOfImageStds) {
  if (ds.train.empty())
    throw MisuseError("client_stats_round: client " + std::to_string(ds.client_id) + " has no training data");
  StatsMessage m{ds.client_id, dataset_channel_stats(ds, agg), ds.train.size()};
  for (std::size_t c = 0; c < m.stats.channels(); ++c)
    if (!std::isfinite(m.stats.mean[c]) || !std::isfinite(m.stats.std[c]))
      throw NumericError("client_stats_round: non-finite statistics");
  return m;
}

/// Server side: one message per client id 0..K-1, in any arrival order.
inline StatsRegistry server_collect_and_broadcast(std::span<const StatsMessage> messages) {
  if (messages.empty()) throw ProtocolError("statistics round received no messages");
  const std::size_t k = messages.size();
  std::vector<const StatsMessage*> slot(k, nullptr);
  std::vector<int> duplicates, out_of_range;
  for (const auto& m : messages) {
    if (m.client_id < 0 || static_cast<std::size_t>(m.client_id) >= k) {
      out_of_range.push_back(m.client_id);
      continue;
    }
    auto& s = slot[static_cast<std::size_t>(m.client_id)];
    if (s) duplicates.push_back(m.client_id);
    else s = &m;
  }
  std::vector<int> missing;
  for (std::size_t i = 0; i < k; ++i)
    if (!slot[i]) missing.push_back(static_cast<int>(i));
  if (!duplicates.empty() || !missing.empty() || !out_of_range.empty()) {
    auto list = [](const std::vector<int>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    throw ProtocolError("statistics round: duplicate clients [" + list(duplicates) + "], missing clients [" +
                        list(missing) + "], unexpected ids [" + list(out_of_range) + "]");
  }
  StatsRegistry reg;
  reg.per_client.reserve(k);
  for (const auto* m : slot) {
    if (m->sample_count < 1) throw ProtocolError("client " + std::to_string(m->client_id) + " reported zero samples");
    reg.per_client.push_back(m->stats);
  }
  require_complete(reg);
  return reg;
}

/// Runs both halves of the round over a whole federation.
inline StatsRegistry run_stats_round(const FederationData& fed, std::vector<StatsMessage>* sent = nullptr,
                                     StdAggregation agg = StdAggregation::MeanOfImageStds) {
  std::vector<StatsMessage> msgs;
  msgs.reserve(fed.clients.size());
  for (const auto& c : fed.clients) msgs.push_back(client_stats_round(c, agg));
  StatsRegistry reg = server_collect_and_broadcast(msgs);
  if (sent) *sent = std::move(msgs);
  return reg;
}

// ---------------------------------------------------------------------------
// Wire encoding
//
//   u32 client_id | u64 sample_count | u32 C | f64 mean[C] | f64 std[C]   (little-endian)

struct WireField {
  std::string_view name;
  std::string_view type;
  std::string_view count;  // "1" or "C"
};

/// Every field a StatsMessage puts on the wire, in order.
inline constexpr std::array<WireField, 5> kStatsWireSchema{{
    {"client_id", "u32", "1"},
    {"sample_count", "u64", "1"},
    {"channels", "u32", "1"},
    {"mean", "f64", "C"},
    {"std", "f64", "C"},
}};

inline constexpr std::size_t kStatsWireIdBytes = 4 + 8 + 4;

inline std::size_t stats_wire_size(std::size_t channels) { return kStatsWireIdBytes + 2 * channels * 8; }

inline std::vector<std::uint8_t> encode_stats_message(const StatsMessage& m) {
  std::vector<std::uint8_t> out;
  out.reserve(stats_wire_size(m.stats.channels()));
  auto put = [&out](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  };
  put(static_cast<std::uint32_t>(m.client_id), 4);
  put(m.sample_count, 8);
  put(static_cast<std::uint32_t>(m.stats.channels()), 4);
  for (double v : m.stats.mean) put(std::bit_cast<std::uint64_t>(v), 8);
  for (double v : m.stats.std) put(std::bit_cast<std::uint64_t>(v), 8);
  return out;
}

inline StatsMessage decode_stats_message(std::span<const std::uint8_t> bytes) {
  auto get = [&bytes](std::size_t off, int n) {
    if (off + static_cast<std::size_t>(n) > bytes.size()) throw FormatError("truncated statistics message", off);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes[off + static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  };
  StatsMessage m;
  m.client_id = static_cast<int>(static_cast<std::uint32_t>(get(0, 4)));
  m.sample_count = get(4, 8);
  const std::size_t c = get(12, 4);
  if (bytes.size() != stats_wire_size(c)) throw FormatError("statistics message length mismatch", bytes.size());
  std::size_t off = kStatsWireIdBytes;
  m.stats.mean.resize(c);
  m.stats.std.resize(c);
  for (auto* v : {&m.stats.mean, &m.stats.std})
    for (std::size_t i = 0; i < c; ++i, off += 8) (*v)[i] = std::bit_cast<double>(get(off, 8));
  return m;
}

}  // namespace fedrdn
