// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sbs/binary_io.hpp"
#include "sbs/encoders.hpp"
#include "sbs/error.hpp"
#include "sbs/matrix.hpp"
#include "sbs/mlp.hpp"
#include "sbs/weight_store.hpp"

namespace sbs {

// Reconstruction-only objective: L = L_recon + alpha * L_atten + beta * L_kd
// with alpha = beta = 0. The two coefficients are kept so configs can spell
// out the full objective, but anything non-zero is rejected.
struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 256;  // clamped to the coordinate count
  std::uint64_t seed = 0;
  std::size_t hidden = 64;
  EncoderConfig encoder;
  AdamConfig optimizer;
  double lr_final_fraction = 0.1;  // cosine decay floor
  std::size_t eval_every = 100;
  double alpha = 0.0;
  double beta = 0.0;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.steps < 1) throw ValidationError("train.steps must be >= 1");
  if (cfg.batch < 1) throw ValidationError("train.batch must be >= 1");
  if (cfg.hidden < 1) throw ValidationError("mlp.hidden must be >= 1");
  if (cfg.eval_every < 1) throw ValidationError("train.eval_every must be >= 1");
  if (!(cfg.optimizer.lr > 0.0)) throw ValidationError("train.lr must be > 0");
  if (cfg.lr_final_fraction < 0.0 || cfg.lr_final_fraction > 1.0) throw ValidationError("lr floor must lie in [0,1]");
  if (cfg.alpha != 0.0 || cfg.beta != 0.0) {
    throw ValidationError("attention / distillation terms are not supported (alpha and beta must be 0)");
  }
}

struct EvalRecord {
  std::size_t step = 0;
  double recon_loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainHistory {
  std::vector<EvalRecord> records;
  double final_mse = 0.0;
};

// Everything needed to regenerate the kernels: network, encoder and the
// per-layer target normalisation.
struct InrCheckpoint {
  InrModel model;
  CoordinateEncoder encoder;
  CoordinateScale scale;
  std::size_t kernel_extent = 3;  // predicted patch is kernel_extent^2
  std::vector<double> layer_mean;
  std::vector<double> layer_std;
  std::optional<AdamState> optimizer;

  bool operator==(const InrCheckpoint&) const = default;
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, TrainHistory history) : NumericError(what), history_(std::move(history)) {}
  const TrainHistory& history() const { return history_; }

 private:
  TrainHistory history_;
};

namespace detail {

inline std::size_t kernel_extent(const WeightBundle& bundle) {
  std::size_t k = 1;
  for (const auto& l : bundle.layers) k = std::max(k, l.kh);
  return k;
}

inline Matrix<float> encode_grid(const CoordinateEncoder& enc, const CoordinateScale& scale,
                                 std::span<const KernelCoord> grid) {
  Matrix<float> x(grid.size(), enc.output_dim());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto e = enc.encode(scale.normalize(grid[i]), grid[i].layer);
    std::transform(e.begin(), e.end(), x.row(i).begin(), [](double v) { return static_cast<float>(v); });
  }
  return x;
}

// Kernel placed at the centre of an extent x extent patch.
inline void pad_center(std::span<const float> kernel, std::size_t k, std::size_t extent, std::span<float> patch,
                       double mean, double stddev) {
  std::fill(patch.begin(), patch.end(), 0.0f);
  const std::size_t off = (extent - k) / 2;
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < k; ++c)
      patch[(r + off) * extent + (c + off)] = static_cast<float>((kernel[r * k + c] - mean) / stddev);
}

inline double cosine_lr(const TrainConfig& cfg, std::size_t step) {
  const double progress = cfg.steps <= 1 ? 1.0 : static_cast<double>(step - 1) / static_cast<double>(cfg.steps - 1);
  const double f = cfg.lr_final_fraction;
  return cfg.optimizer.lr * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace detail

// Evaluates the network on every coordinate of `meta`, undoes the target
// normalisation, crops each layer's kernel size out of the predicted patch
// and finally applies `inverse_table` so kernels land in their original slots.
inline WeightBundle reconstruct(const InrCheckpoint& ckpt, const WeightBundle& meta,
                                const PermutationTable& inverse_table) {
  validate(meta);
  if (ckpt.layer_mean.size() != meta.layers.size() || ckpt.layer_std.size() != meta.layers.size()) {
    throw ValidationError("checkpoint layer count does not match bundle");
  }
  if (ckpt.kernel_extent != detail::kernel_extent(meta) ||
      ckpt.model.output_dim() != ckpt.kernel_extent * ckpt.kernel_extent) {
    throw ValidationError("checkpoint output size does not match bundle kernels");
  }
  if (ckpt.scale != CoordinateScale::of(meta)) throw ValidationError("checkpoint coordinate grid does not match bundle");
  if (ckpt.model.input_dim() != ckpt.encoder.output_dim()) throw ValidationError("checkpoint encoder does not match model");

  const auto grid = coordinate_grid(meta);
  const auto pred = forward(ckpt.model, detail::encode_grid(ckpt.encoder, ckpt.scale, grid));
  WeightBundle out = meta;
  const std::size_t extent = ckpt.kernel_extent;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid[i];
    auto& layer = out.layers[c.layer];
    auto dst = layer.kernel(layer.slot(c.filter, c.channel));
    const std::size_t k = layer.kh;
    const std::size_t off = (extent - k) / 2;
    const auto row = pred.row(i);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t col = 0; col < k; ++col) {
        const double v = row[(r + off) * extent + (col + off)];
        dst[r * k + col] = static_cast<float>(v * ckpt.layer_std[c.layer] + ckpt.layer_mean[c.layer]);
      }
  }
  return apply_permutation(out, inverse_table);
}

inline double recon_mse(const WeightBundle& original, const WeightBundle& reconstructed) {
  if (original.layers.size() != reconstructed.layers.size()) throw ValidationError("recon_mse: layer count mismatch");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < original.layers.size(); ++l) {
    const auto& a = original.layers[l];
    const auto& b = reconstructed.layers[l];
    if (a.filters != b.filters || a.channels != b.channels || a.kh != b.kh || a.kw != b.kw) {
      throw ValidationError("recon_mse: shape mismatch in layer " + std::to_string(l));
    }
    for (std::size_t i = 0; i < a.values.size(); ++i) {
      const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
      s += d * d;
    }
    n += a.values.size();
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

struct TrainResult {
  InrCheckpoint checkpoint;
  TrainHistory history;
};

// Regresses the kernels of apply_permutation(bundle, table) at their encoded
// coordinates. Deterministic for a fixed config (the wall-clock column aside).
inline TrainResult train(const WeightBundle& bundle, const PermutationTable& table, const TrainConfig& cfg) {
  validate(cfg);
  validate(bundle);
  const auto permuted = apply_permutation(bundle, table);
  const auto grid = coordinate_grid(permuted);
  const std::size_t n = grid.size();
  const std::size_t extent = detail::kernel_extent(bundle);
  const std::size_t out_dim = extent * extent;

  InrCheckpoint ckpt;
  ckpt.scale = CoordinateScale::of(bundle);
  ckpt.kernel_extent = extent;
  for (const auto& l : permuted.layers) {
    double mean = 0.0;
    for (float v : l.values) mean += v;
    mean /= static_cast<double>(l.values.size());
    double var = 0.0;
    for (float v : l.values) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(l.values.size()));
    ckpt.layer_mean.push_back(mean);
    ckpt.layer_std.push_back(sd > 0.0 ? sd : 1.0);
  }

  EncoderConfig enc_cfg = cfg.encoder;
  if (enc_cfg.rff_seed == 0) enc_cfg.rff_seed = cfg.seed * 0x9E3779B97F4A7C15ULL + 1;
  ckpt.encoder = make_encoder(enc_cfg, bundle, cfg.hidden);
  const auto x_all = detail::encode_grid(ckpt.encoder, ckpt.scale, grid);
  Matrix<float> y_all(n, out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = grid[i];
    const auto& layer = permuted.layers[c.layer];
    detail::pad_center(layer.kernel(layer.slot(c.filter, c.channel)), layer.kh, extent, y_all.row(i),
                       ckpt.layer_mean[c.layer], ckpt.layer_std[c.layer]);
  }

  const std::size_t h = cfg.hidden;
  ckpt.model = mlp_init({x_all.cols(), h, h, h, h, out_dim}, cfg.seed);
  AdamState adam = AdamState::for_params(ckpt.model.param_count(), cfg.optimizer);

  const std::size_t batch = std::min(cfg.batch, n);
  std::vector<std::size_t> epoch(n);
  std::iota(epoch.begin(), epoch.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed ^ 0x5B5B5B5BULL);
  std::size_t cursor = n;  // forces a shuffle on the first step
  Matrix<float> xb(batch, x_all.cols());
  Matrix<float> yb(batch, out_dim);

  TrainHistory history;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cursor >= n) {
      std::shuffle(epoch.begin(), epoch.end(), rng);
      cursor = 0;
    }
    const std::size_t rows = std::min(batch, n - cursor);
    if (xb.rows() != rows) {
      xb = Matrix<float>(rows, x_all.cols());
      yb = Matrix<float>(rows, out_dim);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      const auto src = epoch[cursor + r];
      std::copy_n(x_all.row(src).begin(), x_all.cols(), xb.row(r).begin());
      std::copy_n(y_all.row(src).begin(), out_dim, yb.row(r).begin());
    }
    cursor += rows;

    MseResult<float> res;
    try {
      res = backward_mse(ckpt.model, xb, yb);
    } catch (const NumericError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what(), history);
    }
    if (!std::isfinite(res.loss)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step), history);
    }
    adam_step(ckpt.model, adam, std::span<const float>(res.grads), detail::cosine_lr(cfg, step));

    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      const double loss = mse(forward(ckpt.model, x_all), y_all);
      if (!std::isfinite(loss)) throw TrainingError("non-finite eval loss at step " + std::to_string(step), history);
      const auto elapsed = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      history.records.push_back({step, loss, elapsed});
    }
  }
  ckpt.optimizer = std::move(adam);
  history.final_mse = recon_mse(bundle, reconstruct(ckpt, bundle, invert_permutation(table)));
  return {std::move(ckpt), std::move(history)};
}

// (MLP bytes [+ permutation table bytes]) / kernel bytes.
inline double compression_ratio(const InrModel& model, const WeightBundle& bundle,
                                const PermutationTable* table = nullptr) {
  double numerator = 4.0 * static_cast<double>(model.param_count());
  if (table && !table->is_identity()) numerator += static_cast<double>(encode_table(*table).size());
  return numerator / (4.0 * static_cast<double>(bundle.param_count()));
}

// Stored permutation indices as a fraction of the represented parameters.
inline double permutation_index_overhead(const PermutationTable& table, const WeightBundle& bundle) {
  return static_cast<double>(table.index_count()) / static_cast<double>(bundle.param_count());
}

// ---------------------------------------------------------------------------
// Checkpoint file: "SBSM" u16 version, u16 width count, u32 widths,
// encoder block, u8 kernel extent, u32 x3 coordinate scale, u16 layer count
// with f64 (mean, std) per layer, u32 parameter count + f32 parameters,
// u8 optimizer flag, then optionally u64 step, f64 x4 hyperparameters and
// f64 first/second moments.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const InrCheckpoint& ckpt) {
  io::ByteWriter w;
  w.magic("SBSM");
  w.u16(kCheckpointVersion);
  const auto& widths = ckpt.model.widths();
  w.u16(static_cast<std::uint16_t>(widths.size()));
  for (auto v : widths) w.u32(static_cast<std::uint32_t>(v));
  write_encoder(w, ckpt.encoder);
  w.u8(static_cast<std::uint8_t>(ckpt.kernel_extent));
  w.u32(static_cast<std::uint32_t>(ckpt.scale.layers));
  w.u32(static_cast<std::uint32_t>(ckpt.scale.max_filters));
  w.u32(static_cast<std::uint32_t>(ckpt.scale.max_channels));
  w.u16(static_cast<std::uint16_t>(ckpt.layer_mean.size()));
  for (std::size_t i = 0; i < ckpt.layer_mean.size(); ++i) {
    w.f64(ckpt.layer_mean[i]);
    w.f64(ckpt.layer_std[i]);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.model.param_count()));
  w.f32s(ckpt.model.params());
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& a = *ckpt.optimizer;
    w.u64(a.step);
    w.f64(a.config.lr);
    w.f64(a.config.beta1);
    w.f64(a.config.beta2);
    w.f64(a.config.eps);
    for (double v : a.m) w.f64(v);
    for (double v : a.v) w.f64(v);
  }
  return w.take();
}

inline InrCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SBSM");
  if (const auto version = r.u16(); version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<std::size_t> widths(r.u16());
  for (auto& v : widths) v = r.u32();
  if (widths.size() != 6) throw ValidationError("checkpoint is not a 5-layer model");
  InrCheckpoint ckpt;
  ckpt.model = InrModel(widths);
  ckpt.encoder = read_encoder(r);
  ckpt.kernel_extent = r.u8();
  ckpt.scale.layers = r.u32();
  ckpt.scale.max_filters = r.u32();
  ckpt.scale.max_channels = r.u32();
  const auto layers = r.u16();
  for (std::uint16_t i = 0; i < layers; ++i) {
    ckpt.layer_mean.push_back(r.f64());
    ckpt.layer_std.push_back(r.f64());
  }
  const auto count = r.u32();
  if (count != ckpt.model.param_count()) throw CorruptionError("checkpoint parameter count does not match widths");
  ckpt.model.params() = r.f32s(count);
  if (r.u8() != 0) {
    AdamState a;
    a.step = r.u64();
    a.config.lr = r.f64();
    a.config.beta1 = r.f64();
    a.config.beta2 = r.f64();
    a.config.eps = r.f64();
    if (r.remaining() / 16 < count) throw CorruptionError("truncated payload");
    a.m.resize(count);
    a.v.resize(count);
    for (auto& v : a.m) v = r.f64();
    for (auto& v : a.v) v = r.f64();
    ckpt.optimizer = std::move(a);
  }
  r.expect_end();
  return ckpt;
}

inline void save_checkpoint(const InrCheckpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

inline InrCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace sbs
