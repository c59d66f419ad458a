// Licensed under the Apache License, Version 2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbs/binary_io.hpp"
#include "sbs/error.hpp"

namespace sbs {

// One convolutional layer's kernels, row-major [F][C][kh][kw].
struct KernelTensor {
  std::size_t filters = 0;
  std::size_t channels = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;
  std::vector<float> values;

  KernelTensor() = default;
  KernelTensor(std::size_t f, std::size_t c, std::size_t k_h, std::size_t k_w, float fill = 0.0f)
      : filters(f), channels(c), kh(k_h), kw(k_w), values(f * c * k_h * k_w, fill) {}

  std::size_t slot_count() const { return filters * channels; }
  std::size_t kernel_size() const { return kh * kw; }
  std::size_t param_count() const { return slot_count() * kernel_size(); }

  // Flattened slot index s = f * C + c.
  std::size_t slot(std::size_t f, std::size_t c) const { return f * channels + c; }

  std::span<const float> kernel(std::size_t slot) const {
    return {values.data() + slot * kernel_size(), kernel_size()};
  }
  std::span<float> kernel(std::size_t slot) {
    return {values.data() + slot * kernel_size(), kernel_size()};
  }

  bool operator==(const KernelTensor&) const = default;
};

struct KernelCoord {
  std::size_t layer = 0;
  std::size_t filter = 0;
  std::size_t channel = 0;

  bool operator==(const KernelCoord&) const = default;
};

// CNN parameters the coordinate MLP has to represent. Non-kernel parameters
// (biases, norm statistics, dense heads) ride along as opaque blobs.
struct WeightBundle {
  std::vector<KernelTensor> layers;
  std::string model_name;
  std::optional<double> source_accuracy;
  std::vector<std::vector<std::uint8_t>> residual_blobs;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.param_count();
    return n;
  }

  std::size_t slot_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.slot_count();
    return n;
  }

  bool operator==(const WeightBundle&) const = default;
};

inline void validate(const KernelTensor& layer, std::size_t index) {
  const std::string where = "layer " + std::to_string(index) + ": ";
  if (layer.filters < 1 || layer.channels < 1) throw ValidationError(where + "F and C must be >= 1");
  if (layer.kh != layer.kw || (layer.kh != 1 && layer.kh != 3)) {
    throw ValidationError(where + "kernels must be square 1x1 or 3x3");
  }
  if (layer.filters > 0xFFFF || layer.channels > 0xFFFF) {
    throw ValidationError(where + "F and C must fit in 16 bits");
  }
  if (layer.values.size() != layer.param_count()) {
    throw ValidationError(where + "payload size does not match shape");
  }
  for (float v : layer.values) {
    if (!std::isfinite(v)) throw ValidationError(where + "non-finite kernel entry");
  }
}

inline void validate(const WeightBundle& bundle) {
  if (bundle.layers.empty()) throw ValidationError("bundle has no layers");
  if (bundle.layers.size() > 0xFFFF) throw ValidationError("too many layers");
  if (bundle.source_accuracy && (*bundle.source_accuracy < 0.0 || *bundle.source_accuracy > 1.0)) {
    throw ValidationError("source accuracy outside [0,1]");
  }
  for (std::size_t i = 0; i < bundle.layers.size(); ++i) validate(bundle.layers[i], i);
}

// ---------------------------------------------------------------------------
// Bundle file: "SBSW" u16 version, u16 layer_count, layer_count x
// {u16 F, u16 C, u8 kh, u8 kw}, all kernel payloads as f32, u32 blob count,
// then {u32 length, bytes} per blob. Everything little-endian.

inline constexpr std::uint16_t kBundleVersion = 1;

inline std::vector<std::uint8_t> encode_bundle(const WeightBundle& bundle) {
  validate(bundle);
  io::ByteWriter w;
  w.magic("SBSW");
  w.u16(kBundleVersion);
  w.u16(static_cast<std::uint16_t>(bundle.layers.size()));
  for (const auto& l : bundle.layers) {
    w.u16(static_cast<std::uint16_t>(l.filters));
    w.u16(static_cast<std::uint16_t>(l.channels));
    w.u8(static_cast<std::uint8_t>(l.kh));
    w.u8(static_cast<std::uint8_t>(l.kw));
  }
  for (const auto& l : bundle.layers) w.f32s(l.values);
  w.u32(static_cast<std::uint32_t>(bundle.residual_blobs.size()));
  for (const auto& blob : bundle.residual_blobs) {
    w.u32(static_cast<std::uint32_t>(blob.size()));
    w.raw(blob);
  }
  return w.take();
}

inline WeightBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SBSW");
  if (const auto version = r.u16(); version != kBundleVersion) {
    throw FormatError("unsupported bundle version " + std::to_string(version));
  }
  WeightBundle bundle;
  bundle.layers.resize(r.u16());
  for (auto& l : bundle.layers) {
    l.filters = r.u16();
    l.channels = r.u16();
    l.kh = r.u8();
    l.kw = r.u8();
  }
  for (auto& l : bundle.layers) l.values = r.f32s(l.param_count());
  const auto blobs = r.u32();
  for (std::uint32_t i = 0; i < blobs; ++i) {
    const auto len = r.u32();
    bundle.residual_blobs.push_back(r.raw(len));
  }
  r.expect_end();
  validate(bundle);
  return bundle;
}

inline void save_bundle(const WeightBundle& bundle, const std::filesystem::path& path) {
  io::write_file(path, encode_bundle(bundle));
}

inline WeightBundle load_bundle(const std::filesystem::path& path) {
  return decode_bundle(io::read_file(path));
}

// ---------------------------------------------------------------------------
// Coordinates

inline std::span<const float> kernel_at(const WeightBundle& bundle, const KernelCoord& coord) {
  if (coord.layer >= bundle.layers.size()) throw IndexError("layer index out of range");
  const auto& l = bundle.layers[coord.layer];
  if (coord.filter >= l.filters) throw IndexError("filter index out of range");
  if (coord.channel >= l.channels) throw IndexError("channel index out of range");
  return l.kernel(l.slot(coord.filter, coord.channel));
}

// Layer-major, then filter, then channel.
inline std::vector<KernelCoord> coordinate_grid(const WeightBundle& bundle) {
  std::vector<KernelCoord> grid;
  grid.reserve(bundle.slot_count());
  for (std::size_t l = 0; l < bundle.layers.size(); ++l)
    for (std::size_t f = 0; f < bundle.layers[l].filters; ++f)
      for (std::size_t c = 0; c < bundle.layers[l].channels; ++c) grid.push_back({l, f, c});
  return grid;
}

// ---------------------------------------------------------------------------
// Permutations

// Bijection over one layer's flattened slots. perm[i] is where input slot i
// lands; inv[j] is the input slot that ends up at output slot j.
struct LayerPermutation {
  std::vector<std::uint32_t> perm;
  std::vector<std::uint32_t> inv;

  static LayerPermutation identity(std::size_t n) {
    LayerPermutation p;
    p.perm.resize(n);
    std::iota(p.perm.begin(), p.perm.end(), 0u);
    p.inv = p.perm;
    return p;
  }

  static LayerPermutation from_perm(std::vector<std::uint32_t> perm) {
    LayerPermutation p;
    p.inv.assign(perm.size(), 0);
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      if (perm[i] >= perm.size() || seen[perm[i]]) throw ValidationError("permutation is not a bijection");
      seen[perm[i]] = true;
      p.inv[perm[i]] = static_cast<std::uint32_t>(i);
    }
    p.perm = std::move(perm);
    return p;
  }

  // order[k] is the input slot visited k-th; it becomes output slot k.
  static LayerPermutation from_order(std::span<const std::size_t> order) {
    std::vector<std::uint32_t> perm(order.size(), 0);
    std::vector<bool> seen(order.size(), false);
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (order[k] >= order.size() || seen[order[k]]) throw ValidationError("order is not a permutation");
      seen[order[k]] = true;
      perm[order[k]] = static_cast<std::uint32_t>(k);
    }
    return from_perm(std::move(perm));
  }

  std::size_t size() const { return perm.size(); }

  bool is_identity() const {
    for (std::size_t i = 0; i < perm.size(); ++i)
      if (perm[i] != i) return false;
    return true;
  }

  bool operator==(const LayerPermutation&) const = default;
};

struct PermutationTable {
  std::vector<LayerPermutation> layers;

  static PermutationTable identity(const WeightBundle& bundle) {
    PermutationTable t;
    for (const auto& l : bundle.layers) t.layers.push_back(LayerPermutation::identity(l.slot_count()));
    return t;
  }

  bool is_identity() const {
    for (const auto& l : layers)
      if (!l.is_identity()) return false;
    return true;
  }

  std::size_t index_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  bool operator==(const PermutationTable&) const = default;
};

inline void validate(const PermutationTable& table) {
  for (const auto& l : table.layers) {
    if (l.inv.size() != l.perm.size()) throw ValidationError("permutation and inverse differ in length");
    for (std::size_t i = 0; i < l.perm.size(); ++i) {
      if (l.perm[i] >= l.inv.size() || l.inv[l.perm[i]] != i) {
        throw ValidationError("permutation is not a bijection");
      }
    }
  }
}

inline PermutationTable invert_permutation(const PermutationTable& table) {
  validate(table);
  PermutationTable out;
  for (const auto& l : table.layers) out.layers.push_back({l.inv, l.perm});
  return out;
}

// Output slot i of each layer receives the input kernel at slot inv[i].
inline WeightBundle apply_permutation(const WeightBundle& bundle, const PermutationTable& table) {
  if (table.layers.size() != bundle.layers.size()) {
    throw ValidationError("permutation table layer count does not match bundle");
  }
  validate(table);
  WeightBundle out = bundle;
  for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
    const auto& src = bundle.layers[l];
    const auto& p = table.layers[l];
    if (p.size() != src.slot_count()) {
      throw ValidationError("permutation slot count does not match layer " + std::to_string(l));
    }
    auto& dst = out.layers[l];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto k = src.kernel(p.inv[i]);
      std::copy(k.begin(), k.end(), dst.kernel(i).begin());
    }
  }
  return out;
}

// Permutation file: "SBSP" u16 version, u16 layer_count, then per layer
// u32 slot_count and slot_count u32 indices (perm only).
inline constexpr std::uint16_t kTableVersion = 1;

inline std::vector<std::uint8_t> encode_table(const PermutationTable& table) {
  validate(table);
  if (table.layers.size() > 0xFFFF) throw ValidationError("too many layers");
  io::ByteWriter w;
  w.magic("SBSP");
  w.u16(kTableVersion);
  w.u16(static_cast<std::uint16_t>(table.layers.size()));
  for (const auto& l : table.layers) {
    w.u32(static_cast<std::uint32_t>(l.size()));
    for (auto v : l.perm) w.u32(v);
  }
  return w.take();
}

inline PermutationTable decode_table(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SBSP");
  if (const auto version = r.u16(); version != kTableVersion) {
    throw FormatError("unsupported permutation table version " + std::to_string(version));
  }
  PermutationTable table;
  const auto layers = r.u16();
  for (std::uint16_t l = 0; l < layers; ++l) {
    const auto n = r.u32();
    if (r.remaining() / 4 < n) throw CorruptionError("truncated payload");
    std::vector<std::uint32_t> perm(n);
    for (auto& v : perm) v = r.u32();
    table.layers.push_back(LayerPermutation::from_perm(std::move(perm)));
  }
  r.expect_end();
  return table;
}

inline void save_table(const PermutationTable& table, const std::filesystem::path& path) {
  io::write_file(path, encode_table(table));
}

inline PermutationTable load_table(const std::filesystem::path& path) {
  return decode_table(io::read_file(path));
}

// Serialized table size relative to the serialized bundle.
inline double table_overhead(const PermutationTable& table, const WeightBundle& bundle) {
  return static_cast<double>(encode_table(table).size()) /
         static_cast<double>(encode_bundle(bundle).size());
}

}  // namespace sbs
