// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sbs/encoders.hpp"
#include "sbs/error.hpp"
#include "sbs/matrix.hpp"
#include "sbs/mlp.hpp"

namespace sbs {

// ---------------------------------------------------------------------------
// Kernels

struct NtkOptions {
  // Weight layers whose parameters enter the kernel; empty selects all.
  std::vector<std::size_t> layers;
  bool include_bias = true;
};

// H_ij = <grad_theta f(x_i), grad_theta f(x_j)> for a scalar-output network.
// For a dense layer the per-sample gradient is the outer product of its input
// and its back-propagated delta, so each layer contributes
// (a_i . a_j)(d_i . d_j) + (d_i . d_j) without materialising the Jacobian.
inline Matrix<double> empirical_ntk(const Mlp<double>& model, const Matrix<double>& inputs, const NtkOptions& opt = {}) {
  if (model.output_dim() != 1) throw ValidationError("empirical_ntk needs a scalar-output model");
  if (inputs.rows() < 1) throw ValidationError("empirical_ntk needs at least one input");
  const auto cache = forward_cached(model, inputs);
  std::vector<Matrix<double>> deltas;
  backprop(model, cache, Matrix<double>(inputs.rows(), 1, 1.0), &deltas);

  std::vector<bool> use(model.layer_count(), opt.layers.empty());
  for (auto k : opt.layers) {
    if (k >= model.layer_count()) throw IndexError("ntk layer index out of range");
    use[k] = true;
  }
  const std::size_t n = inputs.rows();
  Matrix<double> h(n, n);
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    if (!use[k]) continue;
    const auto& a = cache.inputs[k];
    const auto& d = deltas[k];
    for (const double v : d.data())
      if (!std::isfinite(v)) throw NumericError("non-finite gradient in empirical_ntk");
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        double dd = 0.0, aa = 0.0;
        for (std::size_t o = 0; o < d.cols(); ++o) dd += d(i, o) * d(j, o);
        for (std::size_t c = 0; c < a.cols(); ++c) aa += a(i, c) * a(j, c);
        const double v = dd * aa + (opt.include_bias ? dd : 0.0);
        h(i, j) += v;
        if (i != j) h(j, i) += v;
      }
    }
  }
  return h;
}

// Infinite-width ReLU kernel on the unit sphere: cos(t) (pi - t) / (2 pi).
inline double arccos_kernel(double cosine) {
  const double c = std::clamp(cosine, -1.0, 1.0);
  return c * (std::numbers::pi - std::acos(c)) / (2.0 * std::numbers::pi);
}

inline Matrix<double> arccos_ntk(const Matrix<double>& unit_inputs) {
  const std::size_t n = unit_inputs.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : unit_inputs.row(i)) s += v * v;
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) throw ValidationError("arccos_ntk needs unit-norm rows");
  }
  Matrix<double> h(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < unit_inputs.cols(); ++c) dot += unit_inputs(i, c) * unit_inputs(j, c);
      h(i, j) = h(j, i) = arccos_kernel(dot);
    }
  }
  return h;
}

// Same kernel evaluated on precomputed cosine similarities of encoded inputs.
inline Matrix<double> rff_ntk(const Matrix<double>& phi) {
  Matrix<double> h(phi.rows(), phi.cols());
  for (std::size_t i = 0; i < phi.size(); ++i) {
    const double v = phi.data()[i];
    if (!(v >= -1.0 - 1e-9 && v <= 1.0 + 1e-9)) throw ValidationError("rff_ntk entries must lie in [-1, 1]");
    h.data()[i] = arccos_kernel(v);
  }
  return h;
}

// Cosine similarity of every pair of rows.
inline Matrix<double> cosine_similarity(const Matrix<double>& x) {
  const std::size_t n = x.rows();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : x.row(i)) s += v * v;
    norms[i] = std::sqrt(s);
  }
  Matrix<double> out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) dot += x(i, c) * x(j, c);
      const double denom = norms[i] * norms[j];
      out(i, j) = out(j, i) = denom > 0.0 ? std::clamp(dot / denom, -1.0, 1.0) : 0.0;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition by cyclic Jacobi rotations.

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Matrix<double> vectors;      // column i pairs with values[i]
  std::size_t sweeps = 0;
};

inline double frobenius(const Matrix<double>& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline EigenDecomposition eig_sym(Matrix<double> a, std::size_t max_sweeps = 100) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw ValidationError("eig_sym needs a square matrix");
  const double scale = frobenius(a);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a(i, j) - a(j, i)) > 1e-8 * std::max(1.0, scale)) throw ValidationError("eig_sym needs a symmetric matrix");

  Matrix<double> v = Matrix<double>::identity(n);
  const double threshold = 1e-12 * scale;
  std::size_t sweep = 0;
  for (;; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
    if (std::sqrt(off) <= threshold) break;
    if (sweep == max_sweeps) throw NumericError("eig_sym did not converge");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
  EigenDecomposition out{std::vector<double>(n), Matrix<double>(n, n), sweep};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = a(idx[c], idx[c]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = v(r, idx[c]);
  }
  return out;
}

// Q^T y
inline std::vector<double> project(const Matrix<double>& q, std::span<const double> y) {
  if (q.rows() != y.size()) throw ValidationError("project: shape mismatch");
  std::vector<double> out(q.cols(), 0.0);
  for (std::size_t r = 0; r < q.rows(); ++r) {
    const double yr = y[r];
    for (std::size_t c = 0; c < q.cols(); ++c) out[c] += q(r, c) * yr;
  }
  return out;
}

// Linearised-dynamics residual norm sqrt(sum_i c_i^2 exp(-2 eta lambda_i t)).
inline std::vector<double> residual_curve(std::span<const double> eigenvalues, std::span<const double> coefficients,
                                          double eta, std::span<const double> times) {
  if (!(eta > 0.0)) throw ValidationError("residual_curve needs eta > 0");
  if (eigenvalues.size() != coefficients.size()) throw ValidationError("residual_curve: shape mismatch");
  std::vector<double> out;
  out.reserve(times.size());
  for (const double t : times) {
    double s = 0.0;
    for (std::size_t i = 0; i < eigenvalues.size(); ++i)
      s += coefficients[i] * coefficients[i] * std::exp(-2.0 * eta * eigenvalues[i] * t);
    out.push_back(std::sqrt(s));
  }
  return out;
}

// Number of leading eigenvalues needed to reach `fraction` of the total mass.
inline std::size_t eigenmass_index(std::span<const double> eigenvalues_desc, double fraction) {
  double total = 0.0;
  for (double v : eigenvalues_desc) total += std::max(v, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < eigenvalues_desc.size(); ++i) {
    acc += std::max(eigenvalues_desc[i], 0.0);
    if (acc >= fraction * total) return i + 1;
  }
  return eigenvalues_desc.size();
}

// Share of sum(c^2) carried by the leading ceil(fraction * n) directions.
inline double top_coefficient_mass(std::span<const double> coefficients, double fraction) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(coefficients.size())));
  double top = 0.0, total = 0.0;
  for (std::size_t i = 0; i < coefficients.size(); ++i) {
    const double e = coefficients[i] * coefficients[i];
    total += e;
    if (i < k) top += e;
  }
  return total > 0.0 ? top / total : 0.0;
}

// ---------------------------------------------------------------------------
// 2-D spectra

struct SpectrumReport {
  std::size_t n = 0;
  Matrix<double> magnitude;  // centred: DC at (n/2, n/2)
  double signal_energy = 0.0;
  double spectral_energy = 0.0;  // sum |X|^2 / n^2
};

// Direct (non-fast) DFT evaluated separably: rows, then columns.
inline SpectrumReport dft2_magnitude(const Matrix<double>& m) {
  const std::size_t n = m.rows();
  if (m.cols() != n || n < 1) throw ValidationError("dft2_magnitude needs a square matrix");
  if (n > 64) throw ValidationError("dft2_magnitude supports n <= 64");
  std::vector<std::complex<double>> twiddle(n);
  for (std::size_t k = 0; k < n; ++k) twiddle[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));

  std::vector<std::complex<double>> rows(n * n);
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t v = 0; v < n; ++v) {
      std::complex<double> s{};
      for (std::size_t y = 0; y < n; ++y) s += m(x, y) * twiddle[(v * y) % n];
      rows[x * n + v] = s;
    }
  SpectrumReport r;
  r.n = n;
  r.magnitude = Matrix<double>(n, n);
  const std::size_t half = n / 2;
  auto centred = [&](std::size_t k) {
    const std::ptrdiff_t f = k < (n + 1) / 2 ? static_cast<std::ptrdiff_t>(k) : static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(f + static_cast<std::ptrdiff_t>(half));
  };
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v) {
      std::complex<double> s{};
      for (std::size_t x = 0; x < n; ++x) s += rows[x * n + v] * twiddle[(u * x) % n];
      const double mag = std::abs(s);
      r.magnitude(centred(u), centred(v)) = mag;
      r.spectral_energy += mag * mag;
    }
  r.spectral_energy /= static_cast<double>(n * n);
  for (double v : m.data()) r.signal_energy += v * v;
  return r;
}

// Energy in the centred square window |f_u|, |f_v| <= cutoff * (n/2),
// divided by the total.
inline double low_freq_energy_fraction(const SpectrumReport& s, double cutoff) {
  if (!(cutoff > 0.0 && cutoff <= 1.0)) throw ValidationError("cutoff must lie in (0, 1]");
  const double nyquist = static_cast<double>(s.n) / 2.0;
  const auto half = static_cast<double>(s.n / 2);
  double inside = 0.0, total = 0.0;
  for (std::size_t i = 0; i < s.n; ++i)
    for (std::size_t j = 0; j < s.n; ++j) {
      const double e = s.magnitude(i, j) * s.magnitude(i, j);
      total += e;
      const double fu = std::abs(static_cast<double>(i) - half) / nyquist;
      const double fv = std::abs(static_cast<double>(j) - half) / nyquist;
      if (fu <= cutoff + 1e-12 && fv <= cutoff + 1e-12) inside += e;
    }
  return total > 0.0 ? inside / total : 1.0;
}

// ---------------------------------------------------------------------------
// Spectral-bias experiments on a 2-D grid of coordinates

enum class InputEncoding { none, pe, rff };

inline InputEncoding parse_input_encoding(std::string_view name) {
  if (name == "none") return InputEncoding::none;
  if (name == "pe") return InputEncoding::pe;
  if (name == "rff") return InputEncoding::rff;
  throw ValidationError("unknown encoder \"" + std::string(name) + "\"");
}

inline std::string_view input_encoding_name(InputEncoding e) {
  switch (e) {
    case InputEncoding::none: return "none";
    case InputEncoding::pe: return "pe";
    case InputEncoding::rff: return "rff";
  }
  return "?";
}

struct NtkLabConfig {
  std::size_t depth = 4;  // hidden layers
  std::size_t hidden = 256;
  std::size_t pe_levels = 4;
  std::size_t rff_features = 128;
  double rff_sigma = 4.0;
};

// Row-major grid of [0,1]^2 coordinates.
inline Matrix<double> grid_coordinates(std::size_t rows, std::size_t cols) {
  Matrix<double> x(rows * cols, 2);
  auto axis = [](std::size_t i, std::size_t n) { return n <= 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1); };
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      x(r * cols + c, 0) = axis(r, rows);
      x(r * cols + c, 1) = axis(c, cols);
    }
  return x;
}

inline Matrix<double> encode_inputs(const Matrix<double>& coords, InputEncoding enc, const NtkLabConfig& cfg,
                                    std::uint64_t seed) {
  if (enc == InputEncoding::none) return coords;
  if (enc == InputEncoding::pe) {
    const PeConfig pe{cfg.pe_levels, 2.0};
    Matrix<double> out(coords.rows(), pe.output_dim(coords.cols()));
    for (std::size_t i = 0; i < coords.rows(); ++i) pe_encode_into(coords.row(i), pe, out.row(i));
    return out;
  }
  const auto map = rff_init(coords.cols(), cfg.rff_features, cfg.rff_sigma, seed);
  Matrix<double> out(coords.rows(), map.output_dim());
  for (std::size_t i = 0; i < coords.rows(); ++i) rff_encode_into(map, coords.row(i), 1.0, out.row(i));
  return out;
}

struct NtkReport {
  std::vector<double> eigenvalues;
  Matrix<double> eigenvectors;
  std::vector<double> coefficients;
  std::string encoder_tag;
  std::string target_tag;
};

// Eigen-analysis of the empirical NTK of a freshly initialised scalar MLP on
// the given inputs, with the target projected onto its eigenvectors.
inline EigenDecomposition ntk_eigen(const Matrix<double>& inputs, const NtkLabConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> widths{inputs.cols()};
  for (std::size_t i = 0; i < cfg.depth; ++i) widths.push_back(cfg.hidden);
  widths.push_back(1);
  const auto model = Mlp<double>::create(widths, seed);
  return eig_sym(empirical_ntk(model, inputs));
}

inline NtkReport make_ntk_report(const EigenDecomposition& eig, std::span<const double> target, std::string encoder_tag,
                                 std::string target_tag) {
  return {eig.values, eig.vectors, project(eig.vectors, target), std::move(encoder_tag), std::move(target_tag)};
}

}  // namespace sbs
