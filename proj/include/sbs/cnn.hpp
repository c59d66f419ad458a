// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "sbs/binary_io.hpp"
#include "sbs/error.hpp"
#include "sbs/weight_store.hpp"

namespace sbs {

// C x H x W activations, row-major.
template <typename T>
struct Tensor3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Tensor3() = default;
  Tensor3(std::size_t c, std::size_t h, std::size_t w, T fill = T{}) : channels(c), height(h), width(w), values(c * h * w, fill) {}

  T& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }

  bool operator==(const Tensor3&) const = default;
};

struct ConvShape {
  std::size_t filters = 0;
  std::size_t channels = 0;
  std::size_t k = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

inline std::size_t conv_output_extent(std::size_t in, const ConvShape& s) {
  if (s.stride < 1) throw ValidationError("conv stride must be >= 1");
  const std::size_t padded = in + 2 * s.pad;
  if (padded < s.k || (padded - s.k) % s.stride != 0) {
    throw ValidationError("conv output size is not integral for input extent " + std::to_string(in));
  }
  return (padded - s.k) / s.stride + 1;
}

// Zero-padded cross-correlation. Accumulation order per output is
// channel, kernel row, kernel column.
template <typename T>
Tensor3<T> conv2d_forward(const Tensor3<T>& input, std::span<const T> kernels, const ConvShape& s) {
  if (input.channels != s.channels) throw ValidationError("conv input channels do not match kernels");
  if (kernels.size() != s.filters * s.channels * s.k * s.k) throw ValidationError("conv kernel payload size mismatch");
  const std::size_t oh = conv_output_extent(input.height, s);
  const std::size_t ow = conv_output_extent(input.width, s);
  Tensor3<T> out(s.filters, oh, ow);
  const auto pad = static_cast<std::ptrdiff_t>(s.pad);
  const auto ih = static_cast<std::ptrdiff_t>(input.height);
  const auto iw = static_cast<std::ptrdiff_t>(input.width);
  for (std::size_t f = 0; f < s.filters; ++f) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc{};
        for (std::size_t c = 0; c < s.channels; ++c) {
          const T* w = kernels.data() + (f * s.channels + c) * s.k * s.k;
          for (std::size_t ky = 0; ky < s.k; ++ky) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * s.stride + ky) - pad;
            if (y < 0 || y >= ih) continue;
            for (std::size_t kx = 0; kx < s.k; ++kx) {
              const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * s.stride + kx) - pad;
              if (x < 0 || x >= iw) continue;
              acc += input.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) * w[ky * s.k + kx];
            }
          }
        }
        out.at(f, oy, ox) = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network description

struct ConvLayer {
  ConvShape shape;
  std::size_t bundle_layer = 0;
};
struct ReluLayer {};
struct GlobalAvgPool {};
// Weights come from a residual blob: out x in f32 row-major, then out f32 biases.
struct LinearLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t blob = 0;
};

using NetLayer = std::variant<ConvLayer, ReluLayer, GlobalAvgPool, LinearLayer>;

struct NetSpec {
  std::size_t input_channels = 3;
  std::size_t input_height = 0;
  std::size_t input_width = 0;
  std::vector<NetLayer> layers;

  std::size_t classes() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (const auto* l = std::get_if<LinearLayer>(&*it)) return l->out;
    return 0;
  }
};

inline std::vector<std::uint8_t> encode_linear_blob(std::span<const float> weights, std::span<const float> bias) {
  io::ByteWriter w;
  w.f32s(weights);
  w.f32s(bias);
  return w.take();
}

// Checks that consecutive shapes line up and that every bundle layer is
// bound to exactly one conv whose shape matches.
inline void bind(const NetSpec& spec, const WeightBundle& bundle) {
  std::vector<int> bound(bundle.layers.size(), 0);
  std::size_t c = spec.input_channels, h = spec.input_height, w = spec.input_width;
  bool flat = false;
  for (const auto& layer : spec.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      if (flat) throw ValidationError("conv after flattening");
      if (conv->bundle_layer >= bundle.layers.size()) throw ValidationError("conv bound to a missing bundle layer");
      const auto& k = bundle.layers[conv->bundle_layer];
      if (k.filters != conv->shape.filters || k.channels != conv->shape.channels || k.kh != conv->shape.k) {
        throw ValidationError("conv shape does not match bundle layer " + std::to_string(conv->bundle_layer));
      }
      if (conv->shape.channels != c) throw ValidationError("conv input channels do not match previous layer");
      ++bound[conv->bundle_layer];
      h = conv_output_extent(h, conv->shape);
      w = conv_output_extent(w, conv->shape);
      c = conv->shape.filters;
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      h = w = 1;
      flat = true;
    } else if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      if (lin->in != c * h * w) throw ValidationError("linear input size does not match previous layer");
      if (lin->blob >= bundle.residual_blobs.size() ||
          bundle.residual_blobs[lin->blob].size() != 4 * (lin->in * lin->out + lin->out)) {
        throw ValidationError("linear layer blob missing or mis-sized");
      }
      c = lin->out;
      h = w = 1;
      flat = true;
    }
  }
  for (std::size_t i = 0; i < bound.size(); ++i) {
    if (bound[i] != 1) throw ValidationError("bundle layer " + std::to_string(i) + " must be bound exactly once");
  }
}

inline std::vector<double> forward_net(const NetSpec& spec, const WeightBundle& bundle, const Tensor3<double>& image) {
  bind(spec, bundle);
  if (image.channels != spec.input_channels || image.height != spec.input_height || image.width != spec.input_width) {
    throw ValidationError("image shape does not match network input");
  }
  Tensor3<double> x = image;
  for (const auto& layer : spec.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      const auto& src = bundle.layers[conv->bundle_layer].values;
      const std::vector<double> k(src.begin(), src.end());
      x = conv2d_forward<double>(x, k, conv->shape);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      for (auto& v : x.values) v = v > 0.0 ? v : 0.0;
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      Tensor3<double> pooled(x.channels, 1, 1);
      const double area = static_cast<double>(x.height * x.width);
      for (std::size_t c = 0; c < x.channels; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.height * x.width; ++i) s += x.values[c * x.height * x.width + i];
        pooled.values[c] = s / area;
      }
      x = std::move(pooled);
    } else if (const auto* lin = std::get_if<LinearLayer>(&layer)) {
      io::ByteReader r(bundle.residual_blobs[lin->blob]);
      const auto w = r.f32s(lin->in * lin->out);
      const auto b = r.f32s(lin->out);
      Tensor3<double> y(lin->out, 1, 1);
      for (std::size_t o = 0; o < lin->out; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < lin->in; ++i) s += static_cast<double>(w[o * lin->in + i]) * x.values[i];
        y.values[o] = s;
      }
      x = std::move(y);
    }
  }
  return x.values;
}

// Text format, one layer per line, '#' starts a comment:
//   input C H W
//   conv F C k stride pad layer=<bundle layer>
//   relu | gap
//   linear in out blob=<residual blob>
inline NetSpec parse_netspec(std::istream& in) {
  NetSpec spec;
  std::string line;
  std::size_t lineno = 0;
  auto keyed = [&](const std::string& tok, const std::string& key) -> std::size_t {
    if (tok.rfind(key + "=", 0) != 0) throw ValidationError("netspec line " + std::to_string(lineno) + ": expected " + key + "=");
    return std::stoul(tok.substr(key.size() + 1));
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string op;
    if (!(ls >> op)) continue;
    try {
      if (op == "input") {
        ls >> spec.input_channels >> spec.input_height >> spec.input_width;
      } else if (op == "conv") {
        ConvLayer c;
        std::string tok;
        ls >> c.shape.filters >> c.shape.channels >> c.shape.k >> c.shape.stride >> c.shape.pad >> tok;
        c.bundle_layer = keyed(tok, "layer");
        spec.layers.emplace_back(c);
      } else if (op == "relu") {
        spec.layers.emplace_back(ReluLayer{});
      } else if (op == "gap") {
        spec.layers.emplace_back(GlobalAvgPool{});
      } else if (op == "linear") {
        LinearLayer l;
        std::string tok;
        ls >> l.in >> l.out >> tok;
        l.blob = keyed(tok, "blob");
        spec.layers.emplace_back(l);
      } else {
        throw ValidationError("unknown layer \"" + op + "\"");
      }
    } catch (const std::logic_error&) {
      throw ValidationError("netspec line " + std::to_string(lineno) + ": malformed");
    }
    if (ls.fail()) throw ValidationError("netspec line " + std::to_string(lineno) + ": malformed");
  }
  if (spec.input_height == 0 || spec.input_width == 0) throw ValidationError("netspec needs an input line");
  return spec;
}

inline std::string format_netspec(const NetSpec& spec) {
  std::ostringstream out;
  out << "input " << spec.input_channels << ' ' << spec.input_height << ' ' << spec.input_width << '\n';
  for (const auto& layer : spec.layers) {
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      out << "conv " << c->shape.filters << ' ' << c->shape.channels << ' ' << c->shape.k << ' ' << c->shape.stride << ' '
          << c->shape.pad << " layer=" << c->bundle_layer << '\n';
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      out << "relu\n";
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      out << "gap\n";
    } else if (const auto* l = std::get_if<LinearLayer>(&layer)) {
      out << "linear " << l->in << ' ' << l->out << " blob=" << l->blob << '\n';
    }
  }
  return out.str();
}

inline NetSpec load_netspec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_netspec(in);
}

// ---------------------------------------------------------------------------
// Datasets

struct LabeledDataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<float> pixels;  // n x C x H x W
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }

  Tensor3<double> image(std::size_t i) const {
    Tensor3<double> t(channels, height, width);
    const std::size_t stride = channels * height * width;
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(i * stride), stride, t.values.begin());
    return t;
  }

  bool operator==(const LabeledDataset&) const = default;
};

inline void validate(const LabeledDataset& d) {
  if (d.size() < 1) throw ValidationError("dataset is empty");
  if (d.pixels.size() != d.size() * d.channels * d.height * d.width) throw ValidationError("dataset pixel count mismatch");
  for (float v : d.pixels)
    if (!std::isfinite(v)) throw ValidationError("non-finite pixel");
  for (auto l : d.labels)
    if (l >= d.classes) throw ValidationError("label outside [0, classes)");
}

// "SBSD" u16 version, u32 n, u16 C, u16 H, u16 W, u16 classes, f32 pixels, u16 labels.
inline std::vector<std::uint8_t> encode_dataset(const LabeledDataset& d) {
  validate(d);
  io::ByteWriter w;
  w.magic("SBSD");
  w.u16(1);
  w.u32(static_cast<std::uint32_t>(d.size()));
  w.u16(static_cast<std::uint16_t>(d.channels));
  w.u16(static_cast<std::uint16_t>(d.height));
  w.u16(static_cast<std::uint16_t>(d.width));
  w.u16(static_cast<std::uint16_t>(d.classes));
  w.f32s(d.pixels);
  for (auto l : d.labels) w.u16(l);
  return w.take();
}

inline LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SBSD");
  if (const auto version = r.u16(); version != 1) throw FormatError("unsupported dataset version " + std::to_string(version));
  LabeledDataset d;
  const auto n = r.u32();
  d.channels = r.u16();
  d.height = r.u16();
  d.width = r.u16();
  d.classes = r.u16();
  const std::size_t count = std::size_t{n} * d.channels * d.height * d.width;
  if (r.remaining() / 4 < count) throw CorruptionError("truncated payload");
  d.pixels = r.f32s(count);
  d.labels.resize(n);
  for (auto& l : d.labels) l = r.u16();
  r.expect_end();
  validate(d);
  return d;
}

inline void save_dataset(const LabeledDataset& d, const std::filesystem::path& path) { io::write_file(path, encode_dataset(d)); }
inline LabeledDataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

inline std::size_t argmax(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

// Top-1 accuracy; argmax ties go to the lowest class index.
inline double evaluate_accuracy(const NetSpec& spec, const WeightBundle& bundle, const LabeledDataset& data) {
  validate(data);
  if (spec.classes() != data.classes) throw ValidationError("dataset classes do not match the network head");
  bind(spec, bundle);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (argmax(forward_net(spec, bundle, data.image(i))) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Two-class images of a Gaussian blob at a random position; the class sets
// which colour channel the blob lights up, plus pixel noise.
inline LabeledDataset make_blob_dataset(std::size_t n, std::uint64_t seed, std::size_t extent = 12, double noise = 0.3) {
  LabeledDataset d;
  d.channels = 3;
  d.height = d.width = extent;
  d.classes = 2;
  d.pixels.resize(n * 3 * extent * extent);
  d.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(2.0, static_cast<double>(extent) - 3.0);
  std::uniform_real_distribution<double> amp(0.6, 1.4);
  std::normal_distribution<double> jitter(0.0, noise);
  const double tint[2][3] = {{1.0, 0.45, 0.2}, {0.2, 0.45, 1.0}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    d.labels[i] = static_cast<std::uint16_t>(label);
    const double cy = pos(rng), cx = pos(rng), a = amp(rng);
    float* px = d.pixels.data() + i * 3 * extent * extent;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < extent; ++y)
        for (std::size_t x = 0; x < extent; ++x) {
          const double r2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                            (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
          px[(c * extent + y) * extent + x] = static_cast<float>(a * tint[label][c] * std::exp(-r2 / 8.0) + jitter(rng));
        }
  }
  return d;
}

}  // namespace sbs
