// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sbs/error.hpp"
#include "sbs/matrix.hpp"
#include "sbs/weight_store.hpp"

namespace sbs {

using Kernel = std::vector<float>;

enum class OrderingStrategy { identity, uos, mos, cosine_baseline };
enum class StartRule { slot_zero, max_norm };

struct OrderingConfig {
  OrderingStrategy strategy = OrderingStrategy::uos;
  StartRule start_rule = StartRule::slot_zero;
  // Ties always resolve to the lowest original index.
  bool two_opt = false;
  std::size_t two_opt_max_passes = 50;
};

inline OrderingStrategy parse_strategy(std::string_view name) {
  if (name == "identity" || name == "none") return OrderingStrategy::identity;
  if (name == "uos") return OrderingStrategy::uos;
  if (name == "mos") return OrderingStrategy::mos;
  if (name == "cosine" || name == "cosine_baseline") return OrderingStrategy::cosine_baseline;
  throw ValidationError("unknown smoothing strategy \"" + std::string(name) + "\"");
}

inline std::string_view strategy_name(OrderingStrategy s) {
  switch (s) {
    case OrderingStrategy::identity: return "identity";
    case OrderingStrategy::uos: return "uos";
    case OrderingStrategy::mos: return "mos";
    case OrderingStrategy::cosine_baseline: return "cosine";
  }
  return "?";
}

struct SmoothnessReport {
  double euclidean_energy = 0.0;
  double cosine_objective = 0.0;
  std::vector<double> per_layer_path_cost;
};

namespace detail {

inline double euclidean(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

inline double norm(std::span<const float> a) {
  double s = 0.0;
  for (float v : a) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

// 1 - cos(a, b); zero kernels make the pair contribute nothing.
inline double cosine_distance(std::span<const float> a, std::span<const float> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  return 1.0 - dot / (na * nb);
}

inline void check_equal_shapes(std::span<const Kernel> kernels) {
  for (const auto& k : kernels) {
    if (k.size() != kernels.front().size()) throw ValidationError("kernels differ in shape");
  }
}

inline void check_order(std::span<const std::size_t> order, std::size_t n) {
  if (order.size() != n) throw ValidationError("order length does not match kernel count");
  std::vector<bool> seen(n, false);
  for (auto i : order) {
    if (i >= n || seen[i]) throw ValidationError("order is not a permutation");
    seen[i] = true;
  }
}

}  // namespace detail

inline std::vector<Kernel> layer_kernels(const KernelTensor& layer) {
  std::vector<Kernel> out;
  out.reserve(layer.slot_count());
  for (std::size_t s = 0; s < layer.slot_count(); ++s) {
    const auto k = layer.kernel(s);
    out.emplace_back(k.begin(), k.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

// Sum of Euclidean forward differences along layer, filter and channel.
// Cross-layer pairs only count when both layers have identical shape.
inline double smoothness_energy(const WeightBundle& bundle) {
  double total = 0.0;
  for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
    const auto& cur = bundle.layers[l];
    const KernelTensor* next = nullptr;
    if (l + 1 < bundle.layers.size()) {
      const auto& n = bundle.layers[l + 1];
      if (n.filters == cur.filters && n.channels == cur.channels && n.kh == cur.kh && n.kw == cur.kw) next = &n;
    }
    for (std::size_t f = 0; f < cur.filters; ++f) {
      for (std::size_t c = 0; c < cur.channels; ++c) {
        const auto k = cur.kernel(cur.slot(f, c));
        if (next) total += detail::euclidean(next->kernel(next->slot(f, c)), k);
        if (f + 1 < cur.filters) total += detail::euclidean(cur.kernel(cur.slot(f + 1, c)), k);
        if (c + 1 < cur.channels) total += detail::euclidean(cur.kernel(cur.slot(f, c + 1)), k);
      }
    }
  }
  return total;
}

// Sum of cosine distances between filter- and channel-adjacent kernels.
inline double cosine_objective(const WeightBundle& bundle) {
  double total = 0.0;
  for (const auto& layer : bundle.layers) {
    for (std::size_t f = 0; f < layer.filters; ++f) {
      for (std::size_t c = 0; c < layer.channels; ++c) {
        const auto k = layer.kernel(layer.slot(f, c));
        if (f + 1 < layer.filters) total += detail::cosine_distance(layer.kernel(layer.slot(f + 1, c)), k);
        if (c + 1 < layer.channels) total += detail::cosine_distance(layer.kernel(layer.slot(f, c + 1)), k);
      }
    }
  }
  return total;
}

inline double path_cost(std::span<const Kernel> kernels, std::span<const std::size_t> order) {
  detail::check_order(order, kernels.size());
  detail::check_equal_shapes(kernels);
  double cost = 0.0;
  for (std::size_t i = 0; i + 1 < order.size(); ++i) {
    cost += detail::euclidean(kernels[order[i + 1]], kernels[order[i]]);
  }
  return cost;
}

// Path cost of a layer in its stored slot order.
inline double layer_path_cost(const KernelTensor& layer) {
  double cost = 0.0;
  for (std::size_t s = 0; s + 1 < layer.slot_count(); ++s) {
    cost += detail::euclidean(layer.kernel(s + 1), layer.kernel(s));
  }
  return cost;
}

inline SmoothnessReport smoothness_report(const WeightBundle& bundle) {
  SmoothnessReport r;
  r.euclidean_energy = smoothness_energy(bundle);
  r.cosine_objective = cosine_objective(bundle);
  for (const auto& l : bundle.layers) r.per_layer_path_cost.push_back(layer_path_cost(l));
  return r;
}

// Multi-direction objective of kernels placed row-major on an F x C grid:
// Euclidean distance to the right and lower neighbour of every cell.
inline double grid_objective(std::span<const Kernel> kernels, std::span<const std::size_t> order,
                             std::size_t filters, std::size_t channels) {
  detail::check_order(order, kernels.size());
  if (filters * channels != kernels.size()) throw ValidationError("grid shape does not match kernel count");
  double cost = 0.0;
  for (std::size_t f = 0; f < filters; ++f) {
    for (std::size_t c = 0; c < channels; ++c) {
      const auto& k = kernels[order[f * channels + c]];
      if (c + 1 < channels) cost += detail::euclidean(kernels[order[f * channels + c + 1]], k);
      if (f + 1 < filters) cost += detail::euclidean(kernels[order[(f + 1) * channels + c]], k);
    }
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Orderings

namespace detail {

inline std::size_t start_index(std::span<const Kernel> kernels, StartRule rule) {
  if (rule == StartRule::slot_zero) return 0;
  std::size_t best = 0;
  double best_norm = -1.0;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    const double n = norm(kernels[i]);
    if (n > best_norm) {
      best_norm = n;
      best = i;
    }
  }
  return best;
}

template <typename Distance>
std::vector<std::size_t> greedy_path(std::span<const Kernel> kernels, StartRule rule, Distance&& dist) {
  const std::size_t n = kernels.size();
  std::vector<std::size_t> order;
  order.reserve(n);
  std::vector<bool> used(n, false);
  std::size_t cur = start_index(kernels, rule);
  order.push_back(cur);
  used[cur] = true;
  while (order.size() < n) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      const double d = dist(kernels[cur], kernels[j]);
      // strict < keeps the lowest index on ties
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    cur = best;
    used[cur] = true;
    order.push_back(cur);
  }
  return order;
}

// Segment-reversal improvement of an open path.
inline void two_opt(std::span<const Kernel> kernels, std::vector<std::size_t>& order, std::size_t max_passes) {
  const std::size_t n = order.size();
  if (n < 3) return;
  auto d = [&](std::size_t a, std::size_t b) { return euclidean(kernels[order[a]], kernels[order[b]]); };
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool improved = false;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double before = 0.0, after = 0.0;
        if (i > 0) {
          before += d(i - 1, i);
          after += d(i - 1, j);
        }
        if (j + 1 < n) {
          before += d(j, j + 1);
          after += d(i, j + 1);
        }
        if (after < before - 1e-12) {
          std::reverse(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(j) + 1);
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
}

inline std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return order;
}

}  // namespace detail

// Greedy nearest-neighbour path over the kernels (Euclidean). Never returns
// a path more expensive than the identity order.
inline std::vector<std::size_t> uos_order(std::span<const Kernel> kernels, const OrderingConfig& config = {}) {
  if (kernels.empty()) throw ValidationError("uos_order needs at least one kernel");
  detail::check_equal_shapes(kernels);
  auto order = detail::greedy_path(kernels, config.start_rule, detail::euclidean);
  if (config.two_opt) detail::two_opt(kernels, order, config.two_opt_max_passes);
  const auto identity = detail::identity_order(kernels.size());
  if (path_cost(kernels, order) > path_cost(kernels, identity)) return identity;
  return order;
}

// Same greedy walk with cosine distance; the baseline ordering used by
// earlier weight-representation work.
inline std::vector<std::size_t> cosine_order(std::span<const Kernel> kernels, const OrderingConfig& config = {}) {
  if (kernels.empty()) throw ValidationError("cosine_order needs at least one kernel");
  detail::check_equal_shapes(kernels);
  return detail::greedy_path(kernels, config.start_rule, detail::cosine_distance);
}

// Fills an F x C grid row-major, each cell taking the unused kernel closest
// (summed Euclidean distance) to its already-placed upper and left neighbours.
// Falls back to the identity order if that scores better on the grid.
inline std::vector<std::size_t> mos_order(std::span<const Kernel> kernels, std::size_t filters, std::size_t channels,
                                          const OrderingConfig& config = {}) {
  if (kernels.empty()) throw ValidationError("mos_order needs at least one kernel");
  if (filters * channels != kernels.size()) throw ValidationError("grid shape does not match kernel count");
  detail::check_equal_shapes(kernels);
  const std::size_t n = kernels.size();
  std::vector<std::size_t> order(n, n);
  std::vector<bool> used(n, false);
  const std::size_t first = detail::start_index(kernels, config.start_rule);
  order[0] = first;
  used[first] = true;
  for (std::size_t pos = 1; pos < n; ++pos) {
    const std::size_t f = pos / channels;
    const std::size_t c = pos % channels;
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      double d = 0.0;
      if (c > 0) d += detail::euclidean(kernels[order[pos - 1]], kernels[j]);
      if (f > 0) d += detail::euclidean(kernels[order[pos - channels]], kernels[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    order[pos] = best;
    used[best] = true;
  }
  const auto identity = detail::identity_order(n);
  if (grid_objective(kernels, order, filters, channels) > grid_objective(kernels, identity, filters, channels)) return identity;
  return order;
}

// Exact minimiser of path_cost by enumeration; first lexicographic order
// among ties.
inline std::vector<std::size_t> brute_force_order(std::span<const Kernel> kernels) {
  if (kernels.size() > 9) throw RefusalError("brute_force_order refuses n > 9");
  if (kernels.empty()) return {};
  detail::check_equal_shapes(kernels);
  auto order = detail::identity_order(kernels.size());
  auto best = order;
  double best_cost = path_cost(kernels, order);
  while (std::next_permutation(order.begin(), order.end())) {
    const double c = path_cost(kernels, order);
    if (c < best_cost) {
      best_cost = c;
      best = order;
    }
  }
  return best;
}

inline std::vector<std::size_t> order_layer(const KernelTensor& layer, const OrderingConfig& config) {
  const auto kernels = layer_kernels(layer);
  switch (config.strategy) {
    case OrderingStrategy::identity: return detail::identity_order(kernels.size());
    case OrderingStrategy::uos: return uos_order(kernels, config);
    case OrderingStrategy::mos: return mos_order(kernels, layer.filters, layer.channels, config);
    case OrderingStrategy::cosine_baseline: return cosine_order(kernels, config);
  }
  throw ValidationError("unknown strategy");
}

// Per-layer table for the configured strategy; never crosses layers.
inline PermutationTable build_permutation(const WeightBundle& bundle, const OrderingConfig& config) {
  validate(bundle);
  PermutationTable table;
  for (const auto& layer : bundle.layers) {
    const auto order = order_layer(layer, config);
    table.layers.push_back(LayerPermutation::from_order(order));
  }
  return table;
}

// Flatten row-major, reorder the scalars along a UOS path and reshape.
template <typename T>
std::pair<Matrix<T>, std::vector<std::size_t>> smooth_matrix(const Matrix<T>& m, const OrderingConfig& config = {}) {
  if (m.size() == 0) throw ValidationError("smooth_matrix needs a non-empty matrix");
  std::vector<Kernel> scalars;
  scalars.reserve(m.size());
  for (const T v : m.data()) scalars.push_back({static_cast<float>(v)});
  auto order = uos_order(scalars, config);
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.data()[i] = m.data()[order[i]];
  return {std::move(out), std::move(order)};
}

}  // namespace sbs
