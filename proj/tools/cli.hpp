// Licensed under the Apache License, Version 2.0

#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sbs/sbs.hpp"

#ifndef SBS_VERSION
#define SBS_VERSION "unknown"
#endif

namespace sbs::cli {

enum ExitCode : int { kOk = 0, kOther = 1, kUsage = 2, kValidation = 3, kNumeric = 4 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// What a command touched, for the manifest.
struct RunRecord {
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::vector<std::uint64_t> seeds;
  std::string config_hash;
};

namespace detail {

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

inline std::size_t threads_from_env() {
  const char* v = std::getenv("SBS_THREADS");
  if (!v || !*v) return 0;
  char* end = nullptr;
  const auto n = std::strtoull(v, &end, 10);
  if (*end != '\0') throw UsageError(std::string("SBS_THREADS must be a non-negative integer, got \"") + v + "\"");
  return static_cast<std::size_t>(n);
}

// `file.sbsw:L` selects layer L of a bundle as an F x C matrix of per-kernel
// means; anything else is read as a text matrix.
inline Matrix<double> load_target(const std::string& target, RunRecord& rec) {
  const auto colon = target.rfind(':');
  if (colon != std::string::npos && colon + 1 < target.size() &&
      target.find_first_not_of("0123456789", colon + 1) == std::string::npos) {
    const std::string path = target.substr(0, colon);
    const auto layer_index = std::stoull(target.substr(colon + 1));
    rec.inputs.push_back(path);
    const auto bundle = load_bundle(path);
    if (layer_index >= bundle.layers.size()) throw IndexError("bundle has no layer " + std::to_string(layer_index));
    const auto& layer = bundle.layers[layer_index];
    Matrix<double> m(layer.filters, layer.channels);
    for (std::size_t f = 0; f < layer.filters; ++f)
      for (std::size_t c = 0; c < layer.channels; ++c) {
        double s = 0.0;
        for (float v : layer.kernel(layer.slot(f, c))) s += v;
        m(f, c) = s / static_cast<double>(layer.kh * layer.kw);
      }
    return m;
  }
  rec.inputs.push_back(target);
  return load_matrix_text(target);
}

inline std::string hash_args(const std::vector<std::string>& args) {
  std::string joined;
  for (const auto& a : args) joined += a + '\n';
  return hex64(fnv1a(joined));
}

}  // namespace detail

// Runs one command line (args excludes the program name). Output and
// diagnostics go to the given streams; the return value is the exit code.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  CLI::App app{"Spectral-bias-suppressed neural representations of CNN kernels", "sbs"};
  app.set_version_flag("--version", std::string(SBS_VERSION));
  app.require_subcommand(1);
  app.fallthrough();
  std::string manifest_path;
  app.add_option("--manifest", manifest_path, "Write the run manifest (JSON) here instead of stderr");

  RunRecord rec;
  std::function<int()> action;
  std::string command;

  // permute
  auto* permute = app.add_subcommand("permute", "Compute a kernel ordering table for a bundle");
  std::string p_bundle, p_table, p_out_bundle, p_report, p_config, p_strategy, p_start;
  bool p_two_opt = false;
  permute->add_option("--bundle", p_bundle, "Input weight bundle")->required();
  permute->add_option("--out-table", p_table, "Output permutation table")->required();
  permute->add_option("--strategy", p_strategy, "identity | uos | mos | cosine_baseline");
  permute->add_option("--start", p_start, "slot_zero | max_norm");
  permute->add_flag("--two-opt", p_two_opt, "Refine UOS paths with 2-opt");
  permute->add_option("--config", p_config, "key = value config file");
  permute->add_option("--out-bundle", p_out_bundle, "Also write the permuted bundle");
  permute->add_option("--report", p_report, "Per-layer smoothness CSV");
  permute->callback([&] {
    command = "permute";
    action = [&] {
      auto cfg = desk_pipeline_config();
      if (!p_config.empty()) {
        apply_config(load_config(p_config), cfg);
        rec.inputs.push_back(p_config);
      }
      if (!p_strategy.empty()) cfg.ordering.strategy = parse_strategy(p_strategy);
      if (!p_start.empty()) cfg.ordering.start_rule = parse_start_rule(p_start);
      if (p_two_opt) cfg.ordering.two_opt = true;
      rec.config_hash = config_hash(cfg);
      rec.inputs.push_back(p_bundle);
      const auto bundle = load_bundle(p_bundle);
      const auto table = build_permutation(bundle, cfg.ordering);
      const auto permuted = apply_permutation(bundle, table);
      save_table(table, p_table);
      rec.outputs.push_back(p_table);
      if (!p_out_bundle.empty()) {
        save_bundle(permuted, p_out_bundle);
        rec.outputs.push_back(p_out_bundle);
      }
      if (!p_report.empty()) {
        auto csv = detail::open_out(p_report);
        csv.precision(12);
        csv << "layer,strategy,path_cost_before,path_cost_after,smoothness_energy_before,smoothness_energy_after\n";
        for (std::size_t l = 0; l < bundle.layers.size(); ++l) {
          WeightBundle before, after;
          before.layers = {bundle.layers[l]};
          after.layers = {permuted.layers[l]};
          csv << l << ',' << strategy_name(cfg.ordering.strategy) << ',' << layer_path_cost(bundle.layers[l]) << ','
              << layer_path_cost(permuted.layers[l]) << ',' << smoothness_energy(before) << ','
              << smoothness_energy(after) << '\n';
        }
        rec.outputs.push_back(p_report);
      }
      out << "index_overhead=" << table_overhead(table, bundle) << '\n';
      return kOk;
    };
  });

  // train
  auto* trn = app.add_subcommand("train", "Fit the coordinate MLP to a (permuted) bundle");
  std::string t_bundle, t_table = "none", t_config, t_model, t_history, t_encoder;
  std::optional<std::size_t> t_steps, t_hidden, t_batch;
  std::optional<std::uint64_t> t_seed;
  std::optional<double> t_lr, t_sigma;
  trn->add_option("--bundle", t_bundle, "Input weight bundle")->required();
  trn->add_option("--table", t_table, "Permutation table, or none");
  trn->add_option("--config", t_config, "key = value config file");
  trn->add_option("--out-model", t_model, "Output checkpoint")->required();
  trn->add_option("--history", t_history, "History CSV (step, recon_loss, wall_ms)");
  trn->add_option("--encoder", t_encoder, "pe | rff");
  trn->add_option("--steps", t_steps);
  trn->add_option("--hidden", t_hidden);
  trn->add_option("--batch", t_batch);
  trn->add_option("--seed", t_seed);
  trn->add_option("--lr", t_lr);
  trn->add_option("--sigma", t_sigma, "RFF base bandwidth");
  trn->callback([&] {
    command = "train";
    action = [&] {
      auto cfg = desk_pipeline_config();
      if (!t_config.empty()) {
        apply_config(load_config(t_config), cfg);
        rec.inputs.push_back(t_config);
      }
      auto& tc = cfg.train;
      if (!t_encoder.empty()) tc.encoder.kind = parse_encoder(t_encoder);
      if (t_steps) tc.steps = *t_steps;
      if (t_hidden) tc.hidden = *t_hidden;
      if (t_batch) tc.batch = *t_batch;
      if (t_seed) tc.seed = *t_seed;
      if (t_lr) tc.optimizer.lr = *t_lr;
      if (t_sigma) tc.encoder.sigma.sigma_base = *t_sigma;
      rec.config_hash = config_hash(cfg);
      rec.seeds = {tc.seed};
      rec.inputs.push_back(t_bundle);
      const auto bundle = load_bundle(t_bundle);
      PermutationTable table = PermutationTable::identity(bundle);
      if (t_table != "none") {
        rec.inputs.push_back(t_table);
        table = load_table(t_table);
      }
      const auto result = train(bundle, table, tc);
      save_checkpoint(result.checkpoint, t_model);
      rec.outputs.push_back(t_model);
      if (!t_history.empty()) {
        auto csv = detail::open_out(t_history);
        csv.precision(12);
        csv << "step,recon_loss,wall_ms\n";
        for (const auto& r : result.history.records) csv << r.step << ',' << r.recon_loss << ',' << r.wall_ms << '\n';
        rec.outputs.push_back(t_history);
      }
      out.precision(9);
      out << "recon_mse=" << result.history.final_mse << '\n'
          << "compression_ratio=" << compression_ratio(result.checkpoint.model, bundle, &table) << '\n';
      return kOk;
    };
  });

  // reconstruct
  auto* rec_cmd = app.add_subcommand("reconstruct", "Rebuild a bundle from a trained checkpoint");
  std::string r_model, r_meta, r_out, r_table = "none";
  rec_cmd->add_option("--model", r_model, "Checkpoint from train")->required();
  rec_cmd->add_option("--bundle-meta", r_meta, "Original bundle (shapes and residual blobs)")->required();
  rec_cmd->add_option("--table", r_table, "Table the model was trained with, or none");
  rec_cmd->add_option("--out", r_out, "Output bundle")->required();
  rec_cmd->callback([&] {
    command = "reconstruct";
    action = [&] {
      rec.inputs = {r_model, r_meta};
      const auto ckpt = load_checkpoint(r_model);
      const auto meta = load_bundle(r_meta);
      PermutationTable table = PermutationTable::identity(meta);
      if (r_table != "none") {
        rec.inputs.push_back(r_table);
        table = load_table(r_table);
      }
      const auto rebuilt = reconstruct(ckpt, meta, invert_permutation(table));
      save_bundle(rebuilt, r_out);
      rec.outputs.push_back(r_out);
      out.precision(9);
      out << "recon_mse=" << recon_mse(meta, rebuilt) << '\n';
      return kOk;
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Classification accuracy of a bundle on a dataset");
  std::string e_net, e_bundle, e_data;
  ev->add_option("--spec,--net", e_net, "Network description")->required();
  ev->add_option("--bundle", e_bundle, "Weight bundle")->required();
  ev->add_option("--data", e_data, "Labelled dataset")->required();
  ev->callback([&] {
    command = "eval";
    action = [&] {
      rec.inputs = {e_net, e_bundle, e_data};
      const auto acc = evaluate_accuracy(load_netspec(e_net), load_bundle(e_bundle), load_dataset(e_data));
      out.precision(9);
      out << "accuracy=" << acc << '\n';
      return kOk;
    };
  });

  // ntk-report
  auto* ntk = app.add_subcommand("ntk-report", "NTK eigen-spectrum and target projections");
  std::string n_target, n_encoder = "all", n_out;
  NtkLabConfig n_cfg;
  std::uint64_t n_seed = 0;
  ntk->add_option("--target", n_target, "Matrix file, or bundle.sbsw:LAYER")->required();
  ntk->add_option("--encoder", n_encoder, "none | pe | rff | all");
  ntk->add_option("--out", n_out, "Output CSV")->required();
  ntk->add_option("--depth", n_cfg.depth);
  ntk->add_option("--hidden", n_cfg.hidden);
  ntk->add_option("--pe-levels", n_cfg.pe_levels);
  ntk->add_option("--rff-features", n_cfg.rff_features);
  ntk->add_option("--rff-sigma", n_cfg.rff_sigma);
  ntk->add_option("--seed", n_seed);
  ntk->callback([&] {
    command = "ntk-report";
    action = [&] {
      rec.seeds = {n_seed};
      const auto target = detail::load_target(n_target, rec);
      std::vector<InputEncoding> encs;
      if (n_encoder == "all") encs = {InputEncoding::none, InputEncoding::pe, InputEncoding::rff};
      else encs = {parse_input_encoding(n_encoder)};
      if (target.rows() != target.cols()) throw ValidationError("ntk-report target must be square");
      std::vector<NtkReport> reports;
      for (auto enc : encs) {
        auto s = encoder_spectrum(target, enc, n_cfg, n_seed);
        out << input_encoding_name(enc) << ": eigenmass_index_95=" << s.mass_index
            << " top10_mass_original=" << s.top_mass_original << " top10_mass_smoothed=" << s.top_mass_smoothed << '\n';
        reports.push_back(std::move(s.original));
        reports.push_back(std::move(s.smoothed));
      }
      auto csv = detail::open_out(n_out);
      write_report_csv(reports, csv);
      rec.outputs.push_back(n_out);
      return kOk;
    };
  });

  // spectrum
  auto* spec = app.add_subcommand("spectrum", "Centred 2-D magnitude spectrum before and after smoothing");
  std::string s_matrix, s_out;
  double s_cutoff = 0.25;
  spec->add_option("--matrix", s_matrix, "Matrix file, or bundle.sbsw:LAYER")->required();
  spec->add_option("--cutoff", s_cutoff, "Low-frequency window as a fraction of Nyquist");
  spec->add_option("--out", s_out, "Output CSV")->required();
  spec->callback([&] {
    command = "spectrum";
    action = [&] {
      const auto m = detail::load_target(s_matrix, rec);
      if (m.rows() != m.cols()) throw ValidationError("spectrum needs a square matrix");
      const auto [smoothed, order] = smooth_matrix(m);
      const auto a = dft2_magnitude(m);
      const auto b = dft2_magnitude(smoothed);
      auto csv = detail::open_out(s_out);
      csv.precision(12);
      csv << "target,u,v,magnitude\n";
      const auto half = static_cast<long>(m.rows() / 2);
      for (auto [tag, rep] : {std::pair{"original", &a}, std::pair{"smoothed", &b}})
        for (std::size_t i = 0; i < rep->n; ++i)
          for (std::size_t j = 0; j < rep->n; ++j)
            csv << tag << ',' << static_cast<long>(i) - half << ',' << static_cast<long>(j) - half << ','
                << rep->magnitude(i, j) << '\n';
      rec.outputs.push_back(s_out);
      out.precision(9);
      out << "low_freq_original=" << low_freq_energy_fraction(a, s_cutoff) << '\n'
          << "low_freq_smoothed=" << low_freq_energy_fraction(b, s_cutoff) << '\n';
      return kOk;
    };
  });

  // make-fixture
  auto* fix = app.add_subcommand("make-fixture", "Write the tiny CNN fixture (bundle, net, datasets)");
  std::string f_dir;
  std::uint64_t f_seed = kTinyFixtureSeed;
  fix->add_option("--out-dir", f_dir, "Output directory")->required();
  fix->add_option("--seed", f_seed);
  fix->callback([&] {
    command = "make-fixture";
    action = [&] {
      rec.seeds = {f_seed};
      const auto fx = make_tiny_fixture(f_seed);
      const std::filesystem::path dir(f_dir);
      std::filesystem::create_directories(dir);
      save_bundle(fx.bundle, dir / "bundle.sbsw");
      auto net = detail::open_out((dir / "net.txt").string());
      net << format_netspec(fx.spec);
      net.close();
      save_dataset(fx.train, dir / "train.sbsd");
      save_dataset(fx.test, dir / "test.sbsd");
      for (const char* f : {"bundle.sbsw", "net.txt", "train.sbsd", "test.sbsd"}) rec.outputs.push_back((dir / f).string());
      out.precision(9);
      out << "accuracy=" << fx.bundle.source_accuracy.value_or(0.0) << '\n';
      return kOk;
    };
  });

  // repro
  auto* rep = app.add_subcommand("repro", "Run the desk-scale ordering x encoder grid");
  std::string x_fixture = "tiny", x_dir, x_config;
  std::size_t x_seeds = 5;
  rep->add_option("--fixture", x_fixture, "Fixture name (tiny)");
  rep->add_option("--seeds", x_seeds, "Number of seeds, starting at 1");
  rep->add_option("--out-dir", x_dir, "Directory for mse.csv and checks.csv")->required();
  rep->add_option("--config", x_config, "Overrides on top of the desk defaults");
  rep->callback([&] {
    command = "repro";
    action = [&] {
      if (x_fixture != "tiny") throw ValidationError("unknown fixture \"" + x_fixture + "\"");
      if (x_seeds < 1) throw ValidationError("--seeds must be >= 1");
      auto cfg = desk_pipeline_config();
      if (!x_config.empty()) {
        apply_config(load_config(x_config), cfg);
        rec.inputs.push_back(x_config);
      }
      rec.config_hash = config_hash(cfg);
      for (std::uint64_t s = 1; s <= x_seeds; ++s) rec.seeds.push_back(s);
      const auto threads = detail::threads_from_env();
      const auto fx = make_tiny_fixture();
      const auto grid = run_training_grid(fx.bundle, cfg, rec.seeds, threads);
      const auto checks = grid_checks(grid);
      const std::filesystem::path dir(x_dir);
      std::filesystem::create_directories(dir);
      {
        auto csv = detail::open_out((dir / "mse.csv").string());
        write_grid_csv(grid, csv);
      }
      {
        auto csv = detail::open_out((dir / "checks.csv").string());
        write_checks_csv(checks, csv);
      }
      rec.outputs = {(dir / "mse.csv").string(), (dir / "checks.csv").string()};
      for (const auto& c : checks)
        out << (c.pass() ? "PASS " : "FAIL ") << c.name << " (" << c.wins << '/' << c.trials << ")\n";
      for (const auto& c : grid.cells)
        if (!c.ok)
          err << "cell " << strategy_name(c.strategy) << '/' << encoder_name(c.encoder) << '/' << c.seed
              << " failed: " << c.error << '\n';
      return grid.all_ok() ? kOk : kNumeric;
    };
  });

  // replay
  auto* rpl = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  std::string m_path;
  rpl->add_option("manifest", m_path, "Manifest JSON")->required();
  rpl->callback([&] {
    command = "replay";
    action = [&] {
      std::ifstream in(m_path);
      if (!in) throw IoError("cannot open manifest " + m_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest: ") + e.what());
      }
      if (!j.contains("argv") || !j["argv"].is_array()) throw FormatError("manifest has no argv array");
      const auto argv = j["argv"].get<std::vector<std::string>>();
      if (!argv.empty() && argv.front() == "replay") throw ValidationError("refusing to replay a replay");
      return dispatch(argv, out, err);
    };
  });

  auto finish = [&](int code) {
    if (command.empty() || command == "replay") return code;
    nlohmann::json m;
    m["command"] = command;
    std::vector<std::string> recorded;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--manifest") {
        ++i;
        continue;
      }
      if (args[i].rfind("--manifest=", 0) == 0) continue;
      recorded.push_back(args[i]);
    }
    m["argv"] = recorded;
    m["config_hash"] = rec.config_hash.empty() ? detail::hash_args(recorded) : rec.config_hash;
    m["seeds"] = rec.seeds;
    m["inputs"] = rec.inputs;
    m["outputs"] = rec.outputs;
    m["version"] = SBS_VERSION;
    m["exit_code"] = code;
    m["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (manifest_path.empty()) {
      err << m.dump() << '\n';
    } else {
      std::ofstream f(manifest_path);
      if (!f) {
        err << "error[io]: cannot write manifest " << manifest_path << '\n';
        return code == kOk ? static_cast<int>(kValidation) : code;
      }
      f << m.dump(2) << '\n';
    }
    return code;
  };

  std::vector<const char*> argv{"sbs"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    return finish(action());
  } catch (const UsageError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return finish(kUsage);
  } catch (const TrainingError& e) {
    err << "error[numeric]: " << e.what() << " (after " << e.history().records.size() << " eval records)\n";
    return finish(kNumeric);
  } catch (const NumericError& e) {
    err << "error[numeric]: " << e.what() << '\n';
    return finish(kNumeric);
  } catch (const ValidationError& e) {
    err << "error[validation]: " << e.what() << '\n';
    return finish(kValidation);
  } catch (const IoError& e) {
    err << "error[io]: " << e.what() << '\n';
    return finish(kValidation);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return finish(kOther);
  }
}

}  // namespace sbs::cli
