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

// Desk-scale federations with feature distribution skew.
//
// Every client shares the same class templates (so P(y|x) is common); a client
// differs only by a per-channel affine map x = gain_k * z + bias_k applied to
// template-plus-noise samples z, which shifts its input marginal P_k(x).

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fedrdn/errors.hpp"
#include "fedrdn/model.hpp"
#include "fedrdn/rng.hpp"
#include "fedrdn/tensor.hpp"

namespace fedrdn {

struct LabeledImage {
  Tensor pixels;  // [C, H, W]
  int label = 0;

  bool operator==(const LabeledImage&) const = default;
};

struct ClientDataset {
  int client_id = 0;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;

  std::size_t n_k() const noexcept { return train.size(); }
  bool operator==(const ClientDataset&) const = default;
};

struct FederationData {
  std::vector<ClientDataset> clients;
  ImageShape image_shape;
  std::size_t num_classes = 0;

  std::size_t num_clients() const noexcept { return clients.size(); }
  bool operator==(const FederationData&) const = default;
};

/// Throws ConfigError unless ids are 0..K-1, every client has a training sample,
/// and all images share `image_shape` with labels in range.
inline void validate_federation(const FederationData& fed) {
  if (fed.clients.empty()) throw ConfigError("federation has no clients");
  const Shape want = fed.image_shape.as_shape();
  for (std::size_t k = 0; k < fed.clients.size(); ++k) {
    const auto& c = fed.clients[k];
    if (c.client_id != static_cast<int>(k))
      throw ConfigError("client at position " + std::to_string(k) + " has id " + std::to_string(c.client_id));
    if (c.train.empty()) throw ConfigError("client " + std::to_string(k) + " has no training samples (n_k >= 1)");
    for (const auto* split : {&c.train, &c.test})
      for (const auto& img : *split) {
        if (img.pixels.shape() != want)
          throw ConfigError("client " + std::to_string(k) + " image shape " + shape_str(img.pixels.shape()) +
                            " differs from " + shape_str(want));
        if (img.label < 0 || static_cast<std::size_t>(img.label) >= fed.num_classes)
          throw ConfigError("client " + std::to_string(k) + " label " + std::to_string(img.label) + " out of range");
      }
  }
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SkewConfig {
  std::size_t num_clients = 4;
  std::size_t num_classes = 10;
  ImageShape image_shape;
  std::vector<std::vector<double>> gains;   // [K][C], strictly positive
  std::vector<std::vector<double>> biases;  // [K][C]
  double noise_std = 0.3;
  std::size_t train_per_client = 100;
  std::size_t test_per_client = 100;
  std::uint64_t seed = 0;
};

inline void validate(const SkewConfig& cfg) {
  const std::size_t c = cfg.image_shape.channels;
  if (cfg.num_clients < 1) throw ConfigError("need at least one client", "dataset.synthetic.num_clients");
  if (cfg.num_classes < 1) throw ConfigError("need at least one class", "dataset.synthetic.num_classes");
  if (cfg.image_shape.numel() == 0) throw ConfigError("zero extent", "dataset.synthetic.image_shape");
  if (cfg.train_per_client < 1) throw ConfigError("must be >= 1", "dataset.synthetic.train_per_client");
  if (!(cfg.noise_std >= 0.0) || !std::isfinite(cfg.noise_std))
    throw ConfigError("must be finite and >= 0", "dataset.synthetic.noise_std");
  if (cfg.gains.size() != cfg.num_clients || cfg.biases.size() != cfg.num_clients)
    throw ConfigError("need one gain and bias vector per client", "dataset.synthetic.gains");
  for (std::size_t k = 0; k < cfg.num_clients; ++k) {
    if (cfg.gains[k].size() != c || cfg.biases[k].size() != c)
      throw ConfigError("client " + std::to_string(k) + " needs " + std::to_string(c) + " gains and biases",
                        "dataset.synthetic.gains");
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (!(cfg.gains[k][ch] > 0.0) || !std::isfinite(cfg.gains[k][ch]))
        throw ConfigError("gain of client " + std::to_string(k) + " channel " + std::to_string(ch) +
                              " must be strictly positive",
                          "dataset.synthetic.gains");
      if (!std::isfinite(cfg.biases[k][ch])) throw ConfigError("bias must be finite", "dataset.synthetic.biases");
    }
  }
}

/// Identity skew: every gain 1, every bias 0.
inline void set_identity_skew(SkewConfig& cfg) {
  cfg.gains.assign(cfg.num_clients, std::vector<double>(cfg.image_shape.channels, 1.0));
  cfg.biases.assign(cfg.num_clients, std::vector<double>(cfg.image_shape.channels, 0.0));
}

/// Per-client, per-channel gains and biases drawn uniformly from the given ranges.
inline void draw_skew(SkewConfig& cfg, double gain_lo, double gain_hi, double bias_lo, double bias_hi,
                      std::uint64_t seed) {
  if (!(gain_lo > 0.0) || gain_hi < gain_lo) throw ConfigError("invalid gain range", "dataset.synthetic.gain_range");
  if (bias_hi < bias_lo) throw ConfigError("invalid bias range", "dataset.synthetic.bias_range");
  Rng rng = make_rng(seed, "skew");
  const std::size_t c = cfg.image_shape.channels;
  cfg.gains.assign(cfg.num_clients, std::vector<double>(c));
  cfg.biases.assign(cfg.num_clients, std::vector<double>(c));
  for (std::size_t k = 0; k < cfg.num_clients; ++k)
    for (std::size_t ch = 0; ch < c; ++ch) {
      cfg.gains[k][ch] = uniform(rng, gain_lo, gain_hi);
      cfg.biases[k][ch] = uniform(rng, bias_lo, bias_hi);
    }
}

inline constexpr std::size_t kNumPatterns = 5;

/// Binary spatial pattern for `shape_id` at pixel (h, w). All patterns are
/// symmetric under horizontal flips so flips stay label-preserving.
inline double template_pattern(std::size_t shape_id, std::size_t h, std::size_t w, std::size_t height,
                               std::size_t width) {
  const double v = (static_cast<double>(h) + 0.5) / static_cast<double>(height) - 0.5;
  const double u = (static_cast<double>(w) + 0.5) / static_cast<double>(width) - 0.5;
  const double r = std::sqrt(u * u + v * v);
  switch (shape_id % kNumPatterns) {
    case 0:  // horizontal bands
      return static_cast<int>(std::floor((v + 0.5) * 4.0)) % 2 == 0 ? 1.0 : 0.0;
    case 1:  // vertical bands mirrored about the centre column
      return static_cast<int>(std::floor(std::abs(u) * 6.0)) % 2 == 0 ? 1.0 : 0.0;
    case 2:  // disk
      return r < 0.25 ? 1.0 : 0.0;
    case 3:  // ring
      return (r > 0.3 && r < 0.45) ? 1.0 : 0.0;
    default:  // diagonal cross
      return std::abs(std::abs(u) - std::abs(v)) < 0.09 ? 1.0 : 0.0;
  }
}

/// Base intensity of channel `c` for colour palette `palette`; palettes rotate the
/// channel levels so classes differ in colour balance as well as in shape.
inline double palette_level(std::size_t palette, std::size_t c, std::size_t channels) {
  if (channels == 1) return 0.25 + 0.5 * static_cast<double>(palette % 2);
  const std::size_t slot = (c + palette) % channels;
  return 0.2 + 0.6 * static_cast<double>(slot) / static_cast<double>(channels - 1);
}

inline constexpr double kPatternAmplitude = 0.6;

/// Clean class template z(y) of shape [C, H, W]; identical for every client.
inline Tensor class_template(const ImageShape& shape, std::size_t label) {
  Tensor t(shape.as_shape());
  const std::size_t shape_id = label % kNumPatterns;
  const std::size_t palette = label / kNumPatterns;
  for (std::size_t c = 0; c < shape.channels; ++c) {
    const double level = palette_level(palette, c, shape.channels);
    for (std::size_t h = 0; h < shape.height; ++h)
      for (std::size_t w = 0; w < shape.width; ++w)
        t[(c * shape.height + h) * shape.width + w] =
            level + kPatternAmplitude * template_pattern(shape_id, h, w, shape.height, shape.width);
  }
  return t;
}

/// x = gain ⊙ z + bias, per channel.
inline Tensor apply_channel_affine(const Tensor& z, const std::vector<double>& gain, const std::vector<double>& bias) {
  const std::size_t c = z.dim(0), plane = z.size() / c;
  Tensor x = z;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < plane; ++i) x[ch * plane + i] = gain[ch] * z[ch * plane + i] + bias[ch];
  return x;
}

/// Template-plus-noise samples for one client before its affine map. Labels
/// cycle 0..num_classes-1 so each split is balanced to within one sample.
inline std::vector<LabeledImage> draw_base_samples(const SkewConfig& cfg, const std::vector<Tensor>& templates,
                                                   std::size_t count, Rng& rng) {
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % cfg.num_classes);
    Tensor z = templates[static_cast<std::size_t>(label)];
    if (cfg.noise_std > 0.0)
      for (double& v : z.data()) v += noise(rng);
    out.push_back({std::move(z), label});
  }
  return out;
}

inline FederationData generate_synthetic(const SkewConfig& cfg) {
  validate(cfg);
  std::vector<Tensor> templates;
  for (std::size_t y = 0; y < cfg.num_classes; ++y) templates.push_back(class_template(cfg.image_shape, y));

  FederationData fed;
  fed.image_shape = cfg.image_shape;
  fed.num_classes = cfg.num_classes;
  for (std::size_t k = 0; k < cfg.num_clients; ++k) {
    Rng rng = make_rng(cfg.seed, "client-data", k);
    ClientDataset ds;
    ds.client_id = static_cast<int>(k);
    for (auto* split : {&ds.train, &ds.test}) {
      const std::size_t count = split == &ds.train ? cfg.train_per_client : cfg.test_per_client;
      *split = draw_base_samples(cfg, templates, count, rng);
      for (auto& img : *split) img.pixels = apply_channel_affine(img.pixels, cfg.gains[k], cfg.biases[k]);
    }
    fed.clients.push_back(std::move(ds));
  }
  return fed;
}

// ---------------------------------------------------------------------------
// FSIM1 binary format
//
//   "FSIM1" | u32 count | u32 C | u32 H | u32 W | u32 num_classes
//   count x ( u16 label | C*H*W f32 pixels )
// All integers and floats little-endian.

inline constexpr std::array<char, 5> kFsimMagic{'F', 'S', 'I', 'M', '1'};
inline constexpr std::size_t kFsimHeaderBytes = 5 + 5 * 4;

struct FsimFile {
  ImageShape image_shape;
  std::size_t num_classes = 0;
  std::vector<LabeledImage> records;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (static_cast<std::uint16_t>(p[1]) << 8));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

inline void write_bytes_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Serializes to FSIM1. Pixels are narrowed to f32.
inline std::vector<std::uint8_t> encode_fsim(const FsimFile& file) {
  if (file.num_classes > 65536) throw ConfigError("FSIM1 labels are u16; too many classes");
  std::vector<std::uint8_t> out(kFsimMagic.begin(), kFsimMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(file.records.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(file.image_shape.channels));
  detail::put_u32(out, static_cast<std::uint32_t>(file.image_shape.height));
  detail::put_u32(out, static_cast<std::uint32_t>(file.image_shape.width));
  detail::put_u32(out, static_cast<std::uint32_t>(file.num_classes));
  const Shape want = file.image_shape.as_shape();
  out.reserve(out.size() + file.records.size() * (2 + 4 * file.image_shape.numel()));
  for (const auto& r : file.records) {
    if (r.pixels.shape() != want) throw MisuseError("FSIM1 record shape " + shape_str(r.pixels.shape()));
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= file.num_classes)
      throw MisuseError("FSIM1 record label out of range");
    detail::put_u16(out, static_cast<std::uint16_t>(r.label));
    for (double v : r.pixels.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline FsimFile decode_fsim(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kFsimMagic.size()) throw FormatError("truncated magic", bytes.size());
  for (std::size_t i = 0; i < kFsimMagic.size(); ++i)
    if (bytes[i] != static_cast<std::uint8_t>(kFsimMagic[i])) throw FormatError("bad magic, expected FSIM1", i);
  if (bytes.size() < kFsimHeaderBytes) throw FormatError("truncated header", bytes.size());
  const std::uint8_t* p = bytes.data();
  FsimFile f;
  const std::size_t count = detail::get_u32(p + 5);
  f.image_shape = {detail::get_u32(p + 9), detail::get_u32(p + 13), detail::get_u32(p + 17)};
  f.num_classes = detail::get_u32(p + 21);
  if (f.image_shape.numel() == 0) throw FormatError("zero image extent in header", 9);
  if (f.num_classes == 0) throw FormatError("zero class count in header", 21);
  const std::size_t pixels = f.image_shape.numel();
  const std::size_t record_bytes = 2 + 4 * pixels;
  std::size_t off = kFsimHeaderBytes;
  f.records.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    if (bytes.size() - off < record_bytes)
      throw FormatError("truncated payload in record " + std::to_string(r) + " of " + std::to_string(count), off);
    const std::uint16_t label = detail::get_u16(p + off);
    if (label >= f.num_classes) throw FormatError("label " + std::to_string(label) + " out of range", off);
    std::vector<double> px(pixels);
    for (std::size_t i = 0; i < pixels; ++i) {
      const float v = std::bit_cast<float>(detail::get_u32(p + off + 2 + 4 * i));
      if (!std::isfinite(v)) throw FormatError("non-finite pixel", off + 2 + 4 * i);
      px[i] = static_cast<double>(v);
    }
    f.records.push_back({Tensor(f.image_shape.as_shape(), std::move(px)), static_cast<int>(label)});
    off += record_bytes;
  }
  if (off != bytes.size()) throw FormatError("trailing bytes after last record", off);
  return f;
}

inline void write_fsim(const std::filesystem::path& path, const FsimFile& file) {
  detail::write_bytes_atomic(path, encode_fsim(file));
}

inline FsimFile read_fsim(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_fsim(bytes);
}

// ---------------------------------------------------------------------------
// Partitioning

/// How records of an FSIM1 file are assigned to clients and splits.
struct PartitionSpec {
  enum class Mode { Contiguous, Explicit };
  struct Counts {
    std::size_t train = 0;
    std::size_t test = 0;
    bool operator==(const Counts&) const = default;
  };

  Mode mode = Mode::Contiguous;
  /// Contiguous: per-client (train, test) counts consumed in file order; must cover every record.
  std::vector<Counts> counts;
  /// Explicit: client id for each record, and optionally a test flag per record.
  std::vector<int> client_of;
  std::vector<bool> is_test;
  /// Explicit without flags: the last floor(fraction * records) of each client go to test.
  double test_fraction = 0.0;
  /// Optional per-client channel affine shift applied after loading ([K][C]; empty = none).
  std::vector<std::vector<double>> gains;
  std::vector<std::vector<double>> biases;

  bool operator==(const PartitionSpec&) const = default;
};

/// Splits decoded records into a federation according to `spec`.
inline FederationData partition_records(const FsimFile& file, const PartitionSpec& spec) {
  FederationData fed;
  fed.image_shape = file.image_shape;
  fed.num_classes = file.num_classes;
  const std::size_t n = file.records.size();
  if (spec.mode == PartitionSpec::Mode::Contiguous) {
    if (spec.counts.empty()) throw ConfigError("contiguous partition lists no clients", "dataset.partition.counts");
    std::size_t total = 0;
    for (const auto& c : spec.counts) total += c.train + c.test;
    if (total != n)
      throw ConfigError("partition covers " + std::to_string(total) + " records but file has " + std::to_string(n),
                        "dataset.partition.counts");
    std::size_t off = 0;
    for (std::size_t k = 0; k < spec.counts.size(); ++k) {
      if (spec.counts[k].train == 0)
        throw ConfigError("client " + std::to_string(k) + " receives no training records (n_k >= 1)",
                          "dataset.partition.counts");
      ClientDataset ds;
      ds.client_id = static_cast<int>(k);
      ds.train.assign(file.records.begin() + off, file.records.begin() + off + spec.counts[k].train);
      off += spec.counts[k].train;
      ds.test.assign(file.records.begin() + off, file.records.begin() + off + spec.counts[k].test);
      off += spec.counts[k].test;
      fed.clients.push_back(std::move(ds));
    }
  } else {
    if (spec.client_of.size() != n)
      throw ConfigError("explicit partition has " + std::to_string(spec.client_of.size()) + " entries for " +
                            std::to_string(n) + " records",
                        "dataset.partition.client_of");
    if (!spec.is_test.empty() && spec.is_test.size() != n)
      throw ConfigError("split flags must match record count", "dataset.partition.is_test");
    if (!(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0))
      throw ConfigError("must be in [0, 1)", "dataset.partition.test_fraction");
    int max_id = -1;
    for (int id : spec.client_of) {
      if (id < 0) throw ConfigError("negative client id", "dataset.partition.client_of");
      max_id = std::max(max_id, id);
    }
    const std::size_t k_count = static_cast<std::size_t>(max_id + 1);
    std::vector<std::vector<std::size_t>> members(k_count);
    for (std::size_t i = 0; i < n; ++i) members[static_cast<std::size_t>(spec.client_of[i])].push_back(i);
    for (std::size_t k = 0; k < k_count; ++k) {
      ClientDataset ds;
      ds.client_id = static_cast<int>(k);
      const auto& idx = members[k];
      const std::size_t n_test =
          spec.is_test.empty() ? static_cast<std::size_t>(std::floor(spec.test_fraction * idx.size())) : 0;
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const bool test = spec.is_test.empty() ? j >= idx.size() - n_test : static_cast<bool>(spec.is_test[idx[j]]);
        (test ? ds.test : ds.train).push_back(file.records[idx[j]]);
      }
      if (ds.train.empty())
        throw ConfigError("client " + std::to_string(k) + " receives no training records (n_k >= 1)",
                          "dataset.partition.client_of");
      fed.clients.push_back(std::move(ds));
    }
  }

  if (!spec.gains.empty() || !spec.biases.empty()) {
    const std::size_t c = fed.image_shape.channels;
    if (spec.gains.size() != fed.clients.size() || spec.biases.size() != fed.clients.size())
      throw ConfigError("shift needs one gain and bias vector per client", "dataset.partition.gains");
    for (std::size_t k = 0; k < fed.clients.size(); ++k) {
      if (spec.gains[k].size() != c || spec.biases[k].size() != c)
        throw ConfigError("shift vectors need one entry per channel", "dataset.partition.gains");
      for (double g : spec.gains[k])
        if (!(g > 0.0)) throw ConfigError("gains must be strictly positive", "dataset.partition.gains");
      for (auto* split : {&fed.clients[k].train, &fed.clients[k].test})
        for (auto& img : *split) img.pixels = apply_channel_affine(img.pixels, spec.gains[k], spec.biases[k]);
    }
  }
  validate_federation(fed);
  return fed;
}

/// Loads an FSIM1 file and partitions it into clients.
inline FederationData load_idx_partitioned(const std::filesystem::path& path, const PartitionSpec& spec) {
  return partition_records(read_fsim(path), spec);
}

/// Flattens a federation into FSIM1 records (client-major, train before test)
/// plus the contiguous partition that reproduces it.
inline std::pair<FsimFile, PartitionSpec> flatten_federation(const FederationData& fed) {
  FsimFile f;
  f.image_shape = fed.image_shape;
  f.num_classes = fed.num_classes;
  PartitionSpec p;
  p.mode = PartitionSpec::Mode::Contiguous;
  for (const auto& c : fed.clients) {
    f.records.insert(f.records.end(), c.train.begin(), c.train.end());
    f.records.insert(f.records.end(), c.test.begin(), c.test.end());
    p.counts.push_back({c.train.size(), c.test.size()});
  }
  return {std::move(f), std::move(p)};
}

/// Copy with every pixel rounded through f32, i.e. what an FSIM1 round trip yields.
inline FederationData quantize_f32(FederationData fed) {
  for (auto& c : fed.clients)
    for (auto* split : {&c.train, &c.test})
      for (auto& img : *split)
        for (double& v : img.pixels.data()) v = static_cast<double>(static_cast<float>(v));
  return fed;
}

}  // namespace fedrdn
