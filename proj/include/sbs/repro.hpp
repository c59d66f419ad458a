// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sbs/config.hpp"
#include "sbs/fixture.hpp"
#include "sbs/ntk.hpp"
#include "sbs/smoothing.hpp"
#include "sbs/trainer.hpp"

namespace sbs {

// Desk-scale training setup shared by every cell of the grid. Hidden width 16
// cannot memorise the tiny fixture. sigma_base was picked on seeds 101-105
// (flat optimum between 2 and 16); coordinates live in [0,1].
inline PipelineConfig desk_pipeline_config() {
  PipelineConfig cfg;
  auto& t = cfg.train;
  t.steps = 2000;
  t.batch = 64;
  t.hidden = 16;
  t.eval_every = 100;
  t.optimizer.lr = 5e-3;
  t.encoder.pe.levels = 6;
  t.encoder.sigma.mode = SigmaMode::per_layer_adaptive;
  t.encoder.sigma.sigma_base = 16.0;
  t.encoder.sigma.clamp_min = 0.01;
  t.encoder.sigma.clamp_max = 1000.0;
  return cfg;
}

inline constexpr OrderingStrategy kGridStrategies[] = {OrderingStrategy::identity, OrderingStrategy::uos,
                                                       OrderingStrategy::mos};
inline constexpr EncoderKind kGridEncoders[] = {EncoderKind::pe, EncoderKind::rff};

struct GridCell {
  OrderingStrategy strategy = OrderingStrategy::identity;
  EncoderKind encoder = EncoderKind::pe;
  std::uint64_t seed = 0;
  bool ok = false;
  double recon_mse = 0.0;
  double first_loss = 0.0;
  double last_loss = 0.0;
  std::string error;
};

struct GridResult {
  std::vector<std::uint64_t> seeds;
  std::vector<GridCell> cells;  // strategy-major, then encoder, then seed

  const GridCell& at(OrderingStrategy s, EncoderKind e, std::uint64_t seed) const {
    for (const auto& c : cells)
      if (c.strategy == s && c.encoder == e && c.seed == seed) return c;
    throw IndexError("no grid cell for the requested combination");
  }
  bool all_ok() const {
    return std::all_of(cells.begin(), cells.end(), [](const GridCell& c) { return c.ok; });
  }
};

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested != 0) return requested;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

// Every (strategy, encoder, seed) cell trains independently; results are
// stored by index so the output order never depends on scheduling.
inline GridResult run_training_grid(const WeightBundle& bundle, const PipelineConfig& base,
                                    const std::vector<std::uint64_t>& seeds, std::size_t threads = 1) {
  GridResult out;
  out.seeds = seeds;
  std::vector<PermutationTable> tables;
  for (auto s : kGridStrategies) {
    OrderingConfig oc = base.ordering;
    oc.strategy = s;
    tables.push_back(build_permutation(bundle, oc));
  }
  for (std::size_t si = 0; si < std::size(kGridStrategies); ++si)
    for (auto e : kGridEncoders)
      for (auto seed : seeds) out.cells.push_back({kGridStrategies[si], e, seed, false, 0.0, 0.0, 0.0, {}});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < out.cells.size(); i = next++) {
      auto& cell = out.cells[i];
      TrainConfig cfg = base.train;
      cfg.encoder.kind = cell.encoder;
      cfg.seed = cell.seed;
      const auto si = static_cast<std::size_t>(
          std::find(std::begin(kGridStrategies), std::end(kGridStrategies), cell.strategy) - std::begin(kGridStrategies));
      try {
        const auto r = train(bundle, tables[si], cfg);
        cell.ok = true;
        cell.recon_mse = r.history.final_mse;
        cell.first_loss = r.history.records.front().recon_loss;
        cell.last_loss = r.history.records.back().recon_loss;
      } catch (const std::exception& ex) {
        cell.error = ex.what();
      }
    }
  };
  const std::size_t n = std::min(resolve_threads(threads), out.cells.size());
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  return out;
}

// Passes when the comparison holds on at least 4 of every 5 trials.
struct TrendCheck {
  std::string name;
  std::size_t wins = 0;
  std::size_t trials = 0;
  bool pass() const { return trials > 0 && wins * 5 >= trials * 4; }
};

inline TrendCheck ordering_trend(const GridResult& g, EncoderKind enc) {
  TrendCheck c{"uos_beats_mos_and_identity_" + std::string(encoder_name(enc)), 0, g.seeds.size()};
  for (auto seed : g.seeds) {
    const double u = g.at(OrderingStrategy::uos, enc, seed).recon_mse;
    if (u < g.at(OrderingStrategy::mos, enc, seed).recon_mse && u < g.at(OrderingStrategy::identity, enc, seed).recon_mse)
      ++c.wins;
  }
  return c;
}

inline TrendCheck encoder_trend(const GridResult& g, OrderingStrategy strategy) {
  TrendCheck c{"rff_beats_pe_" + std::string(strategy_name(strategy)), 0, g.seeds.size()};
  for (auto seed : g.seeds)
    if (g.at(strategy, EncoderKind::rff, seed).recon_mse < g.at(strategy, EncoderKind::pe, seed).recon_mse) ++c.wins;
  return c;
}

inline TrendCheck suppression_trend(const GridResult& g) {
  TrendCheck c{"uos_rff_beats_identity_pe", 0, g.seeds.size()};
  for (auto seed : g.seeds)
    if (g.at(OrderingStrategy::uos, EncoderKind::rff, seed).recon_mse <
        g.at(OrderingStrategy::identity, EncoderKind::pe, seed).recon_mse)
      ++c.wins;
  return c;
}

// Every run must end below where it started.
inline TrendCheck loss_decrease(const GridResult& g) {
  TrendCheck c{"final_loss_below_first", 0, g.cells.size()};
  for (const auto& cell : g.cells)
    if (cell.ok && cell.last_loss < cell.first_loss) ++c.wins;
  return c;
}

inline std::vector<TrendCheck> grid_checks(const GridResult& g) {
  return {ordering_trend(g, EncoderKind::pe), ordering_trend(g, EncoderKind::rff),
          encoder_trend(g, OrderingStrategy::uos), suppression_trend(g), loss_decrease(g)};
}

// ---------------------------------------------------------------------------
// Spectral experiments on a seeded square Gaussian matrix

inline Matrix<double> gaussian_matrix(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<double> m(n, n);
  for (auto& v : m.data()) v = normal(rng);
  return m;
}

struct SmoothingSpectrum {
  double before = 0.0;
  double after = 0.0;
  double relative_gain() const { return before > 0.0 ? after / before - 1.0 : 0.0; }
};

inline SmoothingSpectrum smoothing_spectrum(const Matrix<double>& m, double cutoff) {
  const auto [smoothed, order] = smooth_matrix(m);
  return {low_freq_energy_fraction(dft2_magnitude(m), cutoff), low_freq_energy_fraction(dft2_magnitude(smoothed), cutoff)};
}

// NTK eigen-analysis of one matrix as a regression target over its grid.
struct EncoderSpectrum {
  InputEncoding encoding = InputEncoding::none;
  std::size_t mass_index = 0;  // eigen-index reaching 95% of the eigenvalue mass
  double top_mass_original = 0.0;
  double top_mass_smoothed = 0.0;
  NtkReport original;
  NtkReport smoothed;
};

inline EncoderSpectrum encoder_spectrum(const Matrix<double>& target, InputEncoding enc, const NtkLabConfig& cfg,
                                        std::uint64_t seed) {
  const auto [smoothed, order] = smooth_matrix(target);
  const auto inputs = encode_inputs(grid_coordinates(target.rows(), target.cols()), enc, cfg, seed);
  const auto eig = ntk_eigen(inputs, cfg, seed);
  EncoderSpectrum out;
  out.encoding = enc;
  out.mass_index = eigenmass_index(eig.values, 0.95);
  const std::string tag(input_encoding_name(enc));
  out.original = make_ntk_report(eig, target.data(), tag, "original");
  out.smoothed = make_ntk_report(eig, smoothed.data(), tag, "smoothed");
  out.top_mass_original = top_coefficient_mass(out.original.coefficients, 0.1);
  out.top_mass_smoothed = top_coefficient_mass(out.smoothed.coefficients, 0.1);
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline void write_grid_csv(const GridResult& g, std::ostream& out) {
  out.precision(9);
  out << "strategy,encoder,seed,recon_mse,status\n";
  for (const auto& c : g.cells) {
    out << strategy_name(c.strategy) << ',' << encoder_name(c.encoder) << ',' << c.seed << ',';
    if (c.ok) out << c.recon_mse << ",ok\n";
    else out << ",failed\n";
  }
}

inline void write_checks_csv(const std::vector<TrendCheck>& checks, std::ostream& out) {
  out << "check,wins,trials,result\n";
  for (const auto& c : checks) out << c.name << ',' << c.wins << ',' << c.trials << ',' << (c.pass() ? "PASS" : "FAIL") << '\n';
}

inline void write_report_csv(const std::vector<NtkReport>& reports, std::ostream& out) {
  out.precision(12);
  out << "encoder,target,index,eigenvalue,abs_coefficient\n";
  for (const auto& r : reports)
    for (std::size_t i = 0; i < r.eigenvalues.size(); ++i)
      out << r.encoder_tag << ',' << r.target_tag << ',' << i << ',' << r.eigenvalues[i] << ','
          << std::abs(r.coefficients[i]) << '\n';
}

}  // namespace sbs
