// Licensed under the Apache License, Version 2.0
//
// One PASS/FAIL line per acceptance criterion. The exit code is 0 once every
// check has run; the verdicts live in the printed lines.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sbs/sbs.hpp"

namespace {

using namespace sbs;

struct Verdict {
  bool pass;
  std::string detail;
};

int g_pass = 0, g_fail = 0;

void report(const char* name, const std::function<Verdict()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Verdict v{false, {}};
  try {
    v = check();
  } catch (const std::exception& e) {
    v = {false, std::string("threw: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s %s: %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", name, v.detail.c_str(), s);
  std::fflush(stdout);
  (v.pass ? g_pass : g_fail)++;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string mse_row(const GridResult& g, OrderingStrategy s, EncoderKind e) {
  std::string out;
  for (auto seed : g.seeds) out += fmt(" %.3g", g.at(s, e, seed).recon_mse);
  return out;
}

const GridResult& desk_grid() {
  static const GridResult g = [] {
    const auto fx = make_tiny_fixture();
    return run_training_grid(fx.bundle, desk_pipeline_config(), {1, 2, 3, 4, 5}, 0);
  }();
  return g;
}

Verdict ordering_trend_check() {
  const auto& g = desk_grid();
  if (!g.all_ok()) return {false, "a grid cell failed to train"};
  const auto pe = ordering_trend(g, EncoderKind::pe), rff = ordering_trend(g, EncoderKind::rff);
  std::string d = fmt("pe %zu/5, rff %zu/5;", pe.wins, rff.wins);
  for (auto e : kGridEncoders)
    for (auto s : kGridStrategies)
      d += fmt(" %s/%s:", std::string(strategy_name(s)).c_str(), std::string(encoder_name(e)).c_str()) + mse_row(g, s, e);
  return {pe.pass() && rff.pass(), d};
}

Verdict encoder_trend_check() {
  const auto& g = desk_grid();
  if (!g.all_ok()) return {false, "a grid cell failed to train"};
  const auto c = encoder_trend(g, OrderingStrategy::uos);
  const auto id = encoder_trend(g, OrderingStrategy::identity), mos = encoder_trend(g, OrderingStrategy::mos);
  return {c.pass(), fmt("uos ordering: rff < pe on %zu/5 seeds (identity %zu/5, mos %zu/5)", c.wins, id.wins, mos.wins)};
}

Verdict low_freq_gain_check() {
  double gain = 0.0;
  bool all_increase = true;
  std::string d;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = smoothing_spectrum(gaussian_matrix(16, seed), 0.25);
    all_increase = all_increase && s.after > s.before;
    gain += s.relative_gain() / 5.0;
    d += fmt(" %.4f->%.4f", s.before, s.after);
  }
  return {all_increase && gain >= 0.10, fmt("mean relative gain %.1f%%;", 100.0 * gain) + d};
}

// One NTK eigen-analysis per (seed, encoder), shared by the two spectral checks.
const std::vector<std::vector<EncoderSpectrum>>& spectra() {
  static const auto s = [] {
    std::vector<std::vector<EncoderSpectrum>> out;
    const NtkLabConfig cfg;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto m = gaussian_matrix(16, seed);
      std::vector<EncoderSpectrum> row;
      for (auto enc : {InputEncoding::none, InputEncoding::pe, InputEncoding::rff})
        row.push_back(encoder_spectrum(m, enc, cfg, seed));
      out.push_back(std::move(row));
    }
    return out;
  }();
  return s;
}

Verdict eigenmass_ordering_check() {
  int wins = 0;
  std::string d;
  for (const auto& row : spectra()) {
    if (row[0].mass_index < row[1].mass_index && row[1].mass_index < row[2].mass_index) ++wins;
    d += fmt(" (%zu,%zu,%zu)", row[0].mass_index, row[1].mass_index, row[2].mass_index);
  }
  return {wins >= 3, fmt("none < pe < rff on %d/5 seeds; indices", wins) + d};
}

Verdict top_mass_check() {
  int wins[3] = {0, 0, 0};
  for (const auto& row : spectra())
    for (int e = 0; e < 3; ++e)
      if (row[e].top_mass_smoothed > row[e].top_mass_original) ++wins[e];
  const auto& r = spectra()[0];
  return {wins[0] >= 3 && wins[1] >= 3 && wins[2] >= 3,
          fmt("smoothed > original: none %d/5, pe %d/5, rff %d/5; seed 1 none %.3f->%.3f pe %.3f->%.3f rff %.3f->%.3f",
              wins[0], wins[1], wins[2], r[0].top_mass_original, r[0].top_mass_smoothed, r[1].top_mass_original,
              r[1].top_mass_smoothed, r[2].top_mass_original, r[2].top_mass_smoothed)};
}

Verdict rff_kernel_check() {
  const std::size_t features = 4096;
  const double sigma = 1.0;
  const auto map = rff_init(3, features, sigma, 21);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int within = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::vector<double> x{u(rng), u(rng), u(rng)}, y{u(rng), u(rng), u(rng)};
    const auto px = rff_encode(map, x), py = rff_encode(map, y);
    double dot = 0.0;
    for (std::size_t k = 0; k < px.size(); ++k) dot += px[k] * py[k];
    const double d = std::hypot(x[0] - y[0], x[1] - y[1], x[2] - y[2]);
    const double err = std::abs(dot / double(features) - gaussian_kernel_expect(sigma, d));
    worst = std::max(worst, err);
    if (err < 0.05) ++within;
  }
  return {within >= 95, fmt("%d/100 pairs within 0.05 (worst %.4f)", within, worst)};
}

Verdict closed_form_check() {
  const auto a = arccos_ntk(Matrix<double>(1, 2, std::vector<double>{0.6, 0.8}));
  const auto r = rff_ntk(Matrix<double>(1, 1, 1.0));
  const double ea = std::abs(a(0, 0) - 0.5), er = std::abs(r(0, 0) - 0.5);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  Matrix<double> x(8, 3);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0.0;
    for (auto& v : x.row(i)) {
      v = normal(rng);
      s += v * v;
    }
    for (auto& v : x.row(i)) v /= std::sqrt(s);
  }
  const auto closed = arccos_ntk(x);
  NtkOptions opt;
  opt.layers = {0};
  opt.include_bias = false;
  std::vector<double> dev;
  for (std::size_t width : {256, 512, 1024}) {
    double avg = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto model = Mlp<double>::create({3, width, 1}, seed, InitScheme::ntk_standard);
      avg += oracle::max_abs_diff(empirical_ntk(model, x, opt), closed) / 5.0;
    }
    dev.push_back(avg);
  }
  const bool monotone = dev[0] > dev[1] && dev[1] > dev[2];
  return {ea <= 1e-12 && er <= 1e-12 && monotone,
          fmt("|arccos-0.5|=%.1e |rff-0.5|=%.1e; max deviation at 256/512/1024: %.4f %.4f %.4f", ea, er, dev[0], dev[1],
              dev[2])};
}

Verdict grad_check_check() {
  const auto model = Mlp<double>::create({3, 24, 24, 24, 24, 9}, 7);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  Matrix<double> x(16, 3), y(16, 9);
  for (auto& v : x.data()) v = normal(rng);
  for (auto& v : y.data()) v = normal(rng);
  const auto r = grad_check(model, x, y, 1e-5, 300, 9);
  return {r.max_rel_error < 1e-4 && r.checked >= 200,
          fmt("max relative error %.2e over %zu parameters (%zu kink crossings skipped)", r.max_rel_error, r.checked,
              r.skipped_kinks)};
}

Verdict greedy_vs_exact_check() {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> size(2, 8);
  std::normal_distribution<float> normal;
  int never_worse = 0;
  double ratio = 0.0, worst = 1.0;
  for (int i = 0; i < 50; ++i) {
    std::vector<Kernel> ks(size(rng), Kernel(9));
    for (auto& k : ks)
      for (auto& v : k) v = normal(rng);
    const double greedy = path_cost(ks, uos_order(ks));
    const double exact = path_cost(ks, brute_force_order(ks));
    if (greedy <= path_cost(ks, detail::identity_order(ks.size()))) ++never_worse;
    const double q = exact > 0.0 ? greedy / exact : 1.0;
    ratio += q / 50.0;
    worst = std::max(worst, q);
  }
  return {never_worse == 50, fmt("uos <= identity on %d/50; mean uos/optimal %.4f (worst %.4f)", never_worse, ratio, worst)};
}

Verdict conv_oracle_check() {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<std::size_t> ch(1, 4), ext(3, 10), coin(0, 1);
  std::normal_distribution<double> normal;
  int cases = 0, equal = 0;
  while (cases < 100) {
    const std::size_t k = coin(rng) ? 3 : 1, stride = coin(rng) ? 2 : 1, pad = k == 3 ? coin(rng) : 0;
    const std::size_t c = ch(rng), f = ch(rng), h = ext(rng), w = ext(rng);
    if ((h + 2 * pad - k) % stride || (w + 2 * pad - k) % stride) continue;
    Tensor3<double> in(c, h, w);
    for (auto& v : in.values) v = normal(rng);
    std::vector<double> kern(f * c * k * k);
    for (auto& v : kern) v = normal(rng);
    const auto got = conv2d_forward<double>(in, kern, ConvShape{f, c, k, stride, pad});
    const auto want = oracle::conv_quad_loop(in, kern, f, k, stride, pad);
    ++cases;
    if (got.values.size() == want.values.size() &&
        std::memcmp(got.values.data(), want.values.data(), got.values.size() * sizeof(double)) == 0)
      ++equal;
  }
  return {equal == 100, fmt("%d/100 cases bit-equal", equal)};
}

Verdict round_trip_check() {
  std::mt19937_64 rng(14);
  int saved = 0, restored = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto b = oracle::random_bundle(rng);
    if (decode_bundle(encode_bundle(b)) == b) ++saved;
    const auto t = oracle::random_table(b, rng);
    if (apply_permutation(apply_permutation(b, t), invert_permutation(t)) == b &&
        decode_table(encode_table(t)) == t)
      ++restored;
  }
  return {saved == 1000 && restored == 1000,
          fmt("%d/1000 bundles encode->decode exact, %d/1000 apply->inverse exact", saved, restored)};
}

Verdict end_to_end_check() {
  const auto fx = make_tiny_fixture();
  auto cfg = desk_pipeline_config();
  cfg.train.hidden = 32;
  cfg.train.steps = 4000;
  cfg.train.encoder.kind = EncoderKind::rff;
  const auto table = build_permutation(fx.bundle, cfg.ordering);
  const auto r = train(fx.bundle, table, cfg.train);
  const auto rebuilt = reconstruct(r.checkpoint, fx.bundle, invert_permutation(table));
  const double mse = recon_mse(fx.bundle, rebuilt);
  const double a0 = evaluate_accuracy(fx.spec, fx.bundle, fx.test);
  const double a1 = evaluate_accuracy(fx.spec, rebuilt, fx.test);
  const double drop = 100.0 * std::abs(a0 - a1);
  return {mse < 1e-4 && drop <= 1.0,
          fmt("recon_mse %.3e, accuracy %.3f -> %.3f (%.2f points), compression ratio %.3f", mse, a0, a1, drop,
              compression_ratio(r.checkpoint.model, fx.bundle, &table))};
}

}  // namespace

int main() {
  report("ordering trend uos < mos, identity (pe and rff, >=4/5 seeds)", ordering_trend_check);
  report("encoder trend rff < pe (>=4/5 seeds)", encoder_trend_check);
  report("smoothing raises low-frequency energy (cutoff 0.25, >=10% mean, 5 seeds)", low_freq_gain_check);
  report("95% eigenmass index none < pe < rff (5-seed majority)", eigenmass_ordering_check);
  report("top-10% coefficient mass higher after smoothing (all encoders, 5-seed majority)", top_mass_check);
  report("rff inner product matches gaussian kernel (D=4096, >=95/100)", rff_kernel_check);
  report("closed-form kernels and wide-network ntk convergence", closed_form_check);
  report("finite-difference gradient agreement (<1e-4, >=200 parameters)", grad_check_check);
  report("greedy vs exact ordering (50 instances, n<=8)", greedy_vs_exact_check);
  report("convolution matches quadruple loop bit-exactly (100 cases)", conv_oracle_check);
  report("bundle and permutation round trips (1000 bundles)", round_trip_check);
  report("end to end: recon_mse < 1e-4 and accuracy within 1 point", end_to_end_check);
  std::printf("SUMMARY %d passed, %d failed\n", g_pass, g_fail);
  return 0;
}
