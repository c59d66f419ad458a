// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbs/binary_io.hpp"
#include "sbs/error.hpp"
#include "sbs/matrix.hpp"
#include "sbs/weight_store.hpp"

namespace sbs {

// ---------------------------------------------------------------------------
// Positional encoding: sin/cos of b^l * pi * x for l = 0..L-1.

struct PeConfig {
  std::size_t levels = 6;
  double base = 2.0;

  std::size_t output_dim(std::size_t input_dim) const { return 2 * levels * input_dim; }

  bool operator==(const PeConfig&) const = default;
};

inline void validate(const PeConfig& cfg) {
  if (cfg.levels < 1) throw ValidationError("pe.levels must be >= 1");
  if (!(cfg.base > 1.0)) throw ValidationError("pe.base must be > 1");
}

// Level-major per input dimension: [sin(b^0 pi x0), cos(b^0 pi x0), sin(b^1 pi x0), ...].
inline void pe_encode_into(std::span<const double> coord, const PeConfig& cfg, std::span<double> out) {
  std::size_t k = 0;
  for (const double x : coord) {
    double freq = std::numbers::pi;
    for (std::size_t l = 0; l < cfg.levels; ++l) {
      out[k++] = std::sin(freq * x);
      out[k++] = std::cos(freq * x);
      freq *= cfg.base;
    }
  }
}

inline std::vector<double> pe_encode(std::span<const double> coord, const PeConfig& cfg) {
  validate(cfg);
  std::vector<double> out(cfg.output_dim(coord.size()));
  pe_encode_into(coord, cfg, out);
  return out;
}

// ---------------------------------------------------------------------------
// Random Fourier features: [cos(pi B x), sin(pi B x)], B ~ N(0, sigma^2).

struct RffMap {
  std::size_t input_dim = 0;
  std::size_t features = 0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  Matrix<float> frequencies;  // features x input_dim

  std::size_t output_dim() const { return 2 * features; }

  bool operator==(const RffMap&) const = default;
};

inline RffMap rff_init(std::size_t input_dim, std::size_t features, double sigma, std::uint64_t seed) {
  if (features < 1 || input_dim < 1) throw ValidationError("rff needs input_dim >= 1 and features >= 1");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ValidationError("rff sigma must be > 0");
  RffMap map{input_dim, features, sigma, seed, Matrix<float>(features, input_dim)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  for (auto& v : map.frequencies.data()) v = static_cast<float>(normal(rng));
  return map;
}

// `scale` multiplies every frequency, i.e. encodes with bandwidth scale*sigma.
inline void rff_encode_into(const RffMap& map, std::span<const double> coord, double scale, std::span<double> out) {
  for (std::size_t k = 0; k < map.features; ++k) {
    double proj = 0.0;
    const auto b = map.frequencies.row(k);
    for (std::size_t j = 0; j < map.input_dim; ++j) proj += static_cast<double>(b[j]) * coord[j];
    const double phase = std::numbers::pi * scale * proj;
    out[k] = std::cos(phase);
    out[map.features + k] = std::sin(phase);
  }
}

inline std::vector<double> rff_encode(const RffMap& map, std::span<const double> coord) {
  if (coord.size() != map.input_dim) throw ValidationError("rff_encode: coordinate dimension mismatch");
  std::vector<double> out(map.output_dim());
  rff_encode_into(map, coord, 1.0, out);
  return out;
}

// E[cos(pi b . delta)] for b ~ N(0, sigma^2 I): exp(-pi^2 sigma^2 |delta|^2 / 2).
inline double gaussian_kernel_expect(double sigma, double dist) {
  const double a = std::numbers::pi * sigma * dist;
  return std::exp(-0.5 * a * a);
}

// ---------------------------------------------------------------------------
// Bandwidth schedule

enum class SigmaMode { global_fixed, per_layer_adaptive };

struct SigmaSchedule {
  SigmaMode mode = SigmaMode::global_fixed;
  double sigma_base = 400.0;
  // 0 means "largest layer of the bundle" when resolved by the trainer.
  std::size_t reference_params = 0;
  double clamp_min = 10.0;
  double clamp_max = 1000.0;
};

inline void validate(const SigmaSchedule& s) {
  if (!(s.sigma_base > 0.0)) throw ValidationError("sigma.base must be > 0");
  if (!(s.clamp_min > 0.0) || s.clamp_min > s.clamp_max) throw ValidationError("invalid sigma clamp range");
  if (s.mode == SigmaMode::global_fixed && (s.sigma_base < s.clamp_min || s.sigma_base > s.clamp_max)) {
    throw ValidationError("sigma.base outside clamp range");
  }
}

// Adaptive mode keeps sigma^2 * P constant: sigma_l = sigma_base * sqrt(P_ref / P_l).
inline double sigma_for_layer(const SigmaSchedule& s, std::size_t layer_param_count) {
  if (layer_param_count < 1) throw ValidationError("layer parameter count must be >= 1");
  if (s.mode == SigmaMode::global_fixed) return s.sigma_base;
  const double ref = static_cast<double>(s.reference_params == 0 ? layer_param_count : s.reference_params);
  const double sigma = s.sigma_base * std::sqrt(ref / static_cast<double>(layer_param_count));
  return std::clamp(sigma, s.clamp_min, s.clamp_max);
}

// ---------------------------------------------------------------------------
// Coordinate normalisation for (layer, filter, channel)

struct CoordinateScale {
  std::size_t layers = 1;
  std::size_t max_filters = 1;
  std::size_t max_channels = 1;

  static CoordinateScale of(const WeightBundle& bundle) {
    CoordinateScale s;
    s.layers = bundle.layers.size();
    for (const auto& l : bundle.layers) {
      s.max_filters = std::max(s.max_filters, l.filters);
      s.max_channels = std::max(s.max_channels, l.channels);
    }
    return s;
  }

  // Maps each index into [0,1]; a degenerate axis maps to 0.
  std::array<double, 3> normalize(const KernelCoord& c) const {
    auto axis = [](std::size_t i, std::size_t n) { return n <= 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1); };
    return {axis(c.layer, layers), axis(c.filter, max_filters), axis(c.channel, max_channels)};
  }

  bool operator==(const CoordinateScale&) const = default;
};

// ---------------------------------------------------------------------------
// Encoder used by the trainer. RFF keeps one draw B ~ N(0, sigma_base^2) and
// rescales it per layer so that layer l sees bandwidth sigma_l.

enum class EncoderKind : std::uint8_t { pe = 0, rff = 1 };

struct CoordinateEncoder {
  EncoderKind kind = EncoderKind::pe;
  PeConfig pe;
  RffMap rff;
  std::vector<double> layer_sigmas;  // rff only

  std::size_t output_dim() const { return kind == EncoderKind::pe ? pe.output_dim(3) : rff.output_dim(); }

  std::vector<double> encode(const std::array<double, 3>& coord, std::size_t layer) const {
    std::vector<double> out(output_dim());
    if (kind == EncoderKind::pe) {
      pe_encode_into(coord, pe, out);
    } else {
      if (layer >= layer_sigmas.size()) throw IndexError("no bandwidth for layer " + std::to_string(layer));
      rff_encode_into(rff, coord, layer_sigmas[layer] / rff.sigma, out);
    }
    return out;
  }

  bool operator==(const CoordinateEncoder&) const = default;
};

struct EncoderConfig {
  EncoderKind kind = EncoderKind::rff;
  PeConfig pe;
  std::size_t rff_features = 0;  // 0: half the MLP hidden width
  std::uint64_t rff_seed = 0;
  SigmaSchedule sigma;
};

inline EncoderKind parse_encoder(std::string_view name) {
  if (name == "pe") return EncoderKind::pe;
  if (name == "rff") return EncoderKind::rff;
  throw ValidationError("unknown encoder \"" + std::string(name) + "\"");
}

inline std::string_view encoder_name(EncoderKind k) { return k == EncoderKind::pe ? "pe" : "rff"; }

inline CoordinateEncoder make_encoder(const EncoderConfig& cfg, const WeightBundle& bundle, std::size_t hidden_width) {
  CoordinateEncoder enc;
  enc.kind = cfg.kind;
  if (cfg.kind == EncoderKind::pe) {
    validate(cfg.pe);
    enc.pe = cfg.pe;
    return enc;
  }
  validate(cfg.sigma);
  SigmaSchedule schedule = cfg.sigma;
  if (schedule.reference_params == 0) {
    for (const auto& l : bundle.layers) schedule.reference_params = std::max(schedule.reference_params, l.param_count());
  }
  const std::size_t features = cfg.rff_features != 0 ? cfg.rff_features : std::max<std::size_t>(1, hidden_width / 2);
  enc.rff = rff_init(3, features, schedule.sigma_base, cfg.rff_seed);
  for (const auto& l : bundle.layers) enc.layer_sigmas.push_back(sigma_for_layer(schedule, l.param_count()));
  return enc;
}

// Checkpoint block: u8 tag (0 = PE, 1 = RFF), then
//   PE:  u16 levels, f64 base
//   RFF: u32 features, u32 input_dim, f64 sigma, u64 seed,
//        u16 layer count, f64 per-layer sigma, B as row-major f32.
inline void write_encoder(io::ByteWriter& w, const CoordinateEncoder& enc) {
  w.u8(static_cast<std::uint8_t>(enc.kind));
  if (enc.kind == EncoderKind::pe) {
    w.u16(static_cast<std::uint16_t>(enc.pe.levels));
    w.f64(enc.pe.base);
    return;
  }
  w.u32(static_cast<std::uint32_t>(enc.rff.features));
  w.u32(static_cast<std::uint32_t>(enc.rff.input_dim));
  w.f64(enc.rff.sigma);
  w.u64(enc.rff.seed);
  w.u16(static_cast<std::uint16_t>(enc.layer_sigmas.size()));
  for (double s : enc.layer_sigmas) w.f64(s);
  w.f32s(enc.rff.frequencies.data());
}

inline CoordinateEncoder read_encoder(io::ByteReader& r) {
  CoordinateEncoder enc;
  const auto tag = r.u8();
  if (tag > 1) throw FormatError("unknown encoder tag " + std::to_string(tag));
  enc.kind = static_cast<EncoderKind>(tag);
  if (enc.kind == EncoderKind::pe) {
    enc.pe.levels = r.u16();
    enc.pe.base = r.f64();
    validate(enc.pe);
    return enc;
  }
  enc.rff.features = r.u32();
  enc.rff.input_dim = r.u32();
  enc.rff.sigma = r.f64();
  enc.rff.seed = r.u64();
  enc.layer_sigmas.resize(r.u16());
  for (auto& s : enc.layer_sigmas) s = r.f64();
  enc.rff.frequencies = Matrix<float>(enc.rff.features, enc.rff.input_dim,
                                      r.f32s(enc.rff.features * enc.rff.input_dim));
  if (!(enc.rff.sigma > 0.0)) throw ValidationError("encoder sigma must be > 0");
  return enc;
}

}  // namespace sbs
