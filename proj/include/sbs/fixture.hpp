// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "sbs/cnn.hpp"
#include "sbs/weight_store.hpp"

namespace sbs {

// The desk-scale target network: conv(8,3,3)-relu-conv(8,8,3)-relu-
// conv(8,8,3)-relu-gap-linear(8,2) on 3x12x12 blob images.
struct TinyFixture {
  NetSpec spec;
  WeightBundle bundle;
  LabeledDataset train;
  LabeledDataset test;
};

inline constexpr std::uint64_t kTinyFixtureSeed = 20250101;

namespace detail {

inline std::vector<double> pooled_features(const NetSpec& spec, const WeightBundle& bundle, const Tensor3<double>& image) {
  // Run everything but the final linear layer.
  NetSpec trunk = spec;
  trunk.layers.pop_back();
  Tensor3<double> x = image;
  for (const auto& layer : trunk.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&layer)) {
      const auto& src = bundle.layers[conv->bundle_layer].values;
      const std::vector<double> k(src.begin(), src.end());
      x = conv2d_forward<double>(x, k, conv->shape);
    } else if (std::holds_alternative<ReluLayer>(layer)) {
      for (auto& v : x.values) v = v > 0.0 ? v : 0.0;
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      std::vector<double> pooled(x.channels, 0.0);
      const std::size_t area = x.height * x.width;
      for (std::size_t c = 0; c < x.channels; ++c) {
        for (std::size_t i = 0; i < area; ++i) pooled[c] += x.values[c * area + i];
        pooled[c] /= static_cast<double>(area);
      }
      return pooled;
    }
  }
  return x.values;
}

// Softmax regression on pooled features by plain gradient descent.
inline void fit_head(const NetSpec& spec, WeightBundle& bundle, const LabeledDataset& data, std::size_t features,
                     std::size_t classes) {
  std::vector<std::vector<double>> feats;
  for (std::size_t i = 0; i < data.size(); ++i) feats.push_back(pooled_features(spec, bundle, data.image(i)));
  std::vector<double> mean(features, 0.0), scale(features, 0.0);
  for (const auto& f : feats)
    for (std::size_t j = 0; j < features; ++j) mean[j] += f[j] / static_cast<double>(feats.size());
  for (const auto& f : feats)
    for (std::size_t j = 0; j < features; ++j) scale[j] += (f[j] - mean[j]) * (f[j] - mean[j]) / static_cast<double>(feats.size());
  for (auto& s : scale) s = s > 0.0 ? 1.0 / std::sqrt(s) : 1.0;

  // Trained in standardised feature space, folded back afterwards.
  std::vector<double> w(classes * features, 0.0), b(classes, 0.0);
  for (int it = 0; it < 400; ++it) {
    std::vector<double> gw(w.size(), 0.0), gb(classes, 0.0);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      std::vector<double> logits(classes);
      double mx = -1e300;
      for (std::size_t o = 0; o < classes; ++o) {
        logits[o] = b[o];
        for (std::size_t j = 0; j < features; ++j) logits[o] += w[o * features + j] * (feats[i][j] - mean[j]) * scale[j];
        mx = std::max(mx, logits[o]);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t o = 0; o < classes; ++o) {
        const double g = logits[o] / z - (o == data.labels[i] ? 1.0 : 0.0);
        gb[o] += g;
        for (std::size_t j = 0; j < features; ++j) gw[o * features + j] += g * (feats[i][j] - mean[j]) * scale[j];
      }
    }
    const double lr = 0.5 / static_cast<double>(feats.size());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * gw[k];
    for (std::size_t o = 0; o < classes; ++o) b[o] -= lr * gb[o];
  }
  std::vector<float> wf(w.size()), bf(classes);
  for (std::size_t o = 0; o < classes; ++o) {
    double bias = b[o];
    for (std::size_t j = 0; j < features; ++j) {
      const double wj = w[o * features + j] * scale[j];
      wf[o * features + j] = static_cast<float>(wj);
      bias -= wj * mean[j];
    }
    bf[o] = static_cast<float>(bias);
  }
  bundle.residual_blobs = {encode_linear_blob(wf, bf)};
}

}  // namespace detail

inline TinyFixture make_tiny_fixture(std::uint64_t seed = kTinyFixtureSeed, std::size_t width = 8) {
  TinyFixture fx;
  fx.spec.input_channels = 3;
  fx.spec.input_height = fx.spec.input_width = 12;
  const std::size_t channels[3] = {3, width, width};
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < 3; ++l) {
    KernelTensor k(width, channels[l], 3, 3);
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(channels[l] * 9)));
    for (auto& v : k.values) v = static_cast<float>(normal(rng));
    fx.bundle.layers.push_back(std::move(k));
    fx.spec.layers.emplace_back(ConvLayer{{width, channels[l], 3, 1, 1}, l});
    fx.spec.layers.emplace_back(ReluLayer{});
  }
  fx.spec.layers.emplace_back(GlobalAvgPool{});
  fx.spec.layers.emplace_back(LinearLayer{width, 2, 0});
  fx.bundle.model_name = "tiny-cnn";

  fx.train = make_blob_dataset(400, seed + 1);
  fx.test = make_blob_dataset(1000, seed + 2);
  detail::fit_head(fx.spec, fx.bundle, fx.train, width, 2);
  fx.bundle.source_accuracy = evaluate_accuracy(fx.spec, fx.bundle, fx.test);
  return fx;
}

}  // namespace sbs
