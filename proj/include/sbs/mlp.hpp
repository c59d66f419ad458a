// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sbs/error.hpp"
#include "sbs/matrix.hpp"

namespace sbs {

enum class Activation { relu, identity };

enum class InitScheme {
  // N(0, 2/fan_in) weights, zero biases.
  he_normal,
  // Hidden weights N(0, 1), output weights N(0, 1/fan_in): the NTK
  // parameterisation under which the infinite-width kernel is the arc-cosine form.
  ntk_standard,
};

// Fully connected network with ReLU (or identity) hidden activations and a
// linear head. Parameters live in one flat buffer; layer k stores its weight
// as an in x out row-major block followed by its out biases.
template <typename T>
class Mlp {
 public:
  Mlp() = default;

  Mlp(std::vector<std::size_t> widths, Activation hidden = Activation::relu)
      : widths_(std::move(widths)), hidden_(hidden) {
    if (widths_.size() < 2) throw ValidationError("mlp needs at least an input and an output width");
    for (auto w : widths_)
      if (w < 1) throw ValidationError("mlp widths must be >= 1");
    std::size_t off = 0;
    for (std::size_t k = 0; k + 1 < widths_.size(); ++k) {
      weight_off_.push_back(off);
      off += widths_[k] * widths_[k + 1];
      bias_off_.push_back(off);
      off += widths_[k + 1];
    }
    params_.assign(off, T{});
  }

  static Mlp create(std::vector<std::size_t> widths, std::uint64_t seed, InitScheme scheme = InitScheme::he_normal,
                    Activation hidden = Activation::relu) {
    Mlp m(std::move(widths), hidden);
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < m.layer_count(); ++k) {
      const double fan_in = static_cast<double>(m.in_width(k));
      double stddev = std::sqrt(2.0 / fan_in);
      if (scheme == InitScheme::ntk_standard) stddev = (k + 1 == m.layer_count()) ? std::sqrt(1.0 / fan_in) : 1.0;
      std::normal_distribution<double> normal(0.0, stddev);
      for (auto& w : m.weight(k)) w = static_cast<T>(normal(rng));
    }
    return m;
  }

  std::size_t layer_count() const { return weight_off_.size(); }
  std::size_t in_width(std::size_t k) const { return widths_[k]; }
  std::size_t out_width(std::size_t k) const { return widths_[k + 1]; }
  std::size_t input_dim() const { return widths_.front(); }
  std::size_t output_dim() const { return widths_.back(); }
  const std::vector<std::size_t>& widths() const { return widths_; }
  Activation hidden_activation() const { return hidden_; }

  std::size_t param_count() const { return params_.size(); }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }

  // Flat-buffer offsets, useful for reporting which layer a parameter belongs to.
  std::size_t layer_of_param(std::size_t index) const {
    for (std::size_t k = layer_count(); k-- > 0;)
      if (index >= weight_off_[k]) return k;
    return 0;
  }

  std::size_t weight_offset(std::size_t k) const { return weight_off_[k]; }
  std::size_t bias_offset(std::size_t k) const { return bias_off_[k]; }

  std::span<T> weight(std::size_t k) { return {params_.data() + weight_off_[k], in_width(k) * out_width(k)}; }
  std::span<const T> weight(std::size_t k) const {
    return {params_.data() + weight_off_[k], in_width(k) * out_width(k)};
  }
  std::span<T> bias(std::size_t k) { return {params_.data() + bias_off_[k], out_width(k)}; }
  std::span<const T> bias(std::size_t k) const { return {params_.data() + bias_off_[k], out_width(k)}; }

  template <typename U>
  Mlp<U> cast() const {
    Mlp<U> out(widths_, hidden_);
    std::transform(params_.begin(), params_.end(), out.params().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Mlp&) const = default;

 private:
  std::vector<std::size_t> widths_;
  Activation hidden_ = Activation::relu;
  std::vector<std::size_t> weight_off_;
  std::vector<std::size_t> bias_off_;
  std::vector<T> params_;
};

using InrModel = Mlp<float>;

// The coordinate predictor: exactly five weight layers [in, h, h, h, h, out].
inline InrModel mlp_init(const std::vector<std::size_t>& widths, std::uint64_t seed) {
  if (widths.size() != 6) throw ValidationError("INR model needs 6 widths (5 weight layers)");
  return InrModel::create(widths, seed);
}

// Layer inputs kept for the backward pass; inputs[k] feeds weight layer k and
// inputs.back() is the network output.
template <typename T>
struct ForwardCache {
  std::vector<Matrix<T>> inputs;

  const Matrix<T>& output() const { return inputs.back(); }
};

template <typename T>
ForwardCache<T> forward_cached(const Mlp<T>& model, const Matrix<T>& batch) {
  if (batch.cols() != model.input_dim()) throw ValidationError("forward: input width mismatch");
  ForwardCache<T> cache;
  cache.inputs.reserve(model.layer_count() + 1);
  cache.inputs.push_back(batch);
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    const auto& x = cache.inputs.back();
    const std::size_t in = model.in_width(k);
    const std::size_t out = model.out_width(k);
    const auto w = model.weight(k);
    const auto b = model.bias(k);
    Matrix<T> y(x.rows(), out);
    const bool rectify = k + 1 < model.layer_count() && model.hidden_activation() == Activation::relu;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto dst = y.row(i);
      std::copy(b.begin(), b.end(), dst.begin());
      const auto src = x.row(i);
      for (std::size_t j = 0; j < in; ++j) {
        const T xj = src[j];
        if (xj == T{}) continue;
        const T* wr = w.data() + j * out;
        for (std::size_t o = 0; o < out; ++o) dst[o] += xj * wr[o];
      }
      if (rectify)
        for (auto& v : dst) v = v > T{} ? v : T{};
    }
    cache.inputs.push_back(std::move(y));
  }
  return cache;
}

template <typename T>
Matrix<T> forward(const Mlp<T>& model, const Matrix<T>& batch) {
  return std::move(forward_cached(model, batch).inputs.back());
}

// Backpropagates dL/d(output) through a cached forward pass. Returns the
// flat gradient; when `deltas` is given it also receives dL/d(pre-activation)
// of every layer.
template <typename T>
std::vector<T> backprop(const Mlp<T>& model, const ForwardCache<T>& cache, Matrix<T> grad_out,
                        std::vector<Matrix<T>>* deltas = nullptr) {
  std::vector<T> grads(model.param_count(), T{});
  if (deltas) deltas->assign(model.layer_count(), {});
  Matrix<T> delta = std::move(grad_out);
  for (std::size_t k = model.layer_count(); k-- > 0;) {
    const auto& x = cache.inputs[k];
    const std::size_t in = model.in_width(k);
    const std::size_t out = model.out_width(k);
    T* gw = grads.data() + model.weight_offset(k);
    T* gb = grads.data() + model.bias_offset(k);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto d = delta.row(i);
      const auto src = x.row(i);
      for (std::size_t o = 0; o < out; ++o) gb[o] += d[o];
      for (std::size_t j = 0; j < in; ++j) {
        const T xj = src[j];
        if (xj == T{}) continue;
        T* gr = gw + j * out;
        for (std::size_t o = 0; o < out; ++o) gr[o] += xj * d[o];
      }
    }
    if (deltas) (*deltas)[k] = delta;
    if (k == 0) break;
    const auto w = model.weight(k);
    Matrix<T> prev(x.rows(), in);
    const bool rectify = model.hidden_activation() == Activation::relu;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      const auto d = delta.row(i);
      const auto src = x.row(i);
      auto dst = prev.row(i);
      for (std::size_t j = 0; j < in; ++j) {
        if (rectify && !(src[j] > T{})) continue;
        const T* wr = w.data() + j * out;
        T s{};
        for (std::size_t o = 0; o < out; ++o) s += wr[o] * d[o];
        dst[j] = s;
      }
    }
    delta = std::move(prev);
  }
  return grads;
}

template <typename T>
struct MseResult {
  double loss = 0.0;
  std::vector<T> grads;
};

template <typename T>
double mse(const Matrix<T>& prediction, const Matrix<T>& targets) {
  if (prediction.rows() != targets.rows() || prediction.cols() != targets.cols()) {
    throw ValidationError("mse: shape mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction.data()[i]) - static_cast<double>(targets.data()[i]);
    s += d * d;
  }
  return prediction.size() == 0 ? 0.0 : s / static_cast<double>(prediction.size());
}

// Mean over batch and output dims of the squared error, with its gradient.
template <typename T>
MseResult<T> backward_mse(const Mlp<T>& model, const Matrix<T>& batch, const Matrix<T>& targets) {
  if (targets.rows() != batch.rows() || targets.cols() != model.output_dim()) {
    throw ValidationError("backward_mse: target shape mismatch");
  }
  auto cache = forward_cached(model, batch);
  const auto& y = cache.output();
  for (const T v : y.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite network output");
  }
  MseResult<T> r;
  r.loss = mse(y, targets);
  Matrix<T> grad_out(y.rows(), y.cols());
  const T scale = static_cast<T>(2.0 / static_cast<double>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) grad_out.data()[i] = scale * (y.data()[i] - targets.data()[i]);
  r.grads = backprop(model, cache, std::move(grad_out));
  return r;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamConfig&) const = default;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  static AdamState for_params(std::size_t n, AdamConfig cfg = {}) { return {cfg, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0}; }

  bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update; `lr` overrides the configured rate (used by
// the schedule).
template <typename T>
void adam_step(Mlp<T>& model, AdamState& state, std::span<const T> grads, double lr) {
  auto& p = model.params();
  if (grads.size() != p.size() || state.m.size() != p.size() || state.v.size() != p.size()) {
    throw ValidationError("adam_step: shape mismatch");
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double g = static_cast<double>(grads[i]);
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + c.eps));
  }
}

template <typename T>
void adam_step(Mlp<T>& model, AdamState& state, std::span<const T> grads) {
  adam_step(model, state, grads, state.config.lr);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification (64-bit)

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_layer = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

namespace detail {

inline std::vector<bool> activation_pattern(const ForwardCache<double>& cache, Activation act) {
  std::vector<bool> signs;
  if (act != Activation::relu) return signs;
  for (std::size_t k = 1; k + 1 < cache.inputs.size(); ++k)
    for (double v : cache.inputs[k].data()) signs.push_back(v > 0.0);
  return signs;
}

}  // namespace detail

// Central differences on a random subset of parameters (all of them when
// there are fewer than `samples`). A perturbation that flips any ReLU is a
// kink crossing and is skipped. Relative error uses max(|a|, |n|, 1e-4) as
// the denominator.
template <typename T>
GradCheckResult grad_check(const Mlp<T>& model_in, const Matrix<T>& batch_in, const Matrix<T>& targets_in, double eps,
                           std::size_t samples = 256, std::uint64_t seed = 0) {
  if (eps < 1e-7 || eps > 1e-3) throw ValidationError("grad_check eps must lie in [1e-7, 1e-3]");
  auto model = model_in.template cast<double>();
  const auto batch = batch_in.template cast<double>();
  const auto targets = targets_in.template cast<double>();
  const auto analytic = backward_mse(model, batch, targets).grads;
  const auto base_pattern = detail::activation_pattern(forward_cached(model, batch), model.hidden_activation());

  std::vector<std::size_t> idx(model.param_count());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (idx.size() > samples) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(samples);
    std::sort(idx.begin(), idx.end());
  }

  GradCheckResult r;
  auto& p = model.params();
  auto eval = [&](double& loss) {
    auto cache = forward_cached(model, batch);
    loss = mse(cache.output(), targets);
    return detail::activation_pattern(cache, model.hidden_activation()) == base_pattern;
  };
  for (const auto i : idx) {
    const double orig = p[i];
    double lp = 0.0, lm = 0.0;
    p[i] = orig + eps;
    const bool same_p = eval(lp);
    p[i] = orig - eps;
    const bool same_m = eval(lm);
    p[i] = orig;
    if (!same_p || !same_m) {
      ++r.skipped_kinks;
      continue;
    }
    const double numeric = (lp - lm) / (2.0 * eps);
    const double a = analytic[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
    ++r.checked;
    if (rel >= r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_param = i;
      r.worst_layer = model.layer_of_param(i);
    }
  }
  return r;
}

}  // namespace sbs
