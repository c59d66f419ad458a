// Licensed under the Apache License, Version 2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "sbs/encoders.hpp"
#include "sbs/error.hpp"
#include "sbs/smoothing.hpp"
#include "sbs/trainer.hpp"

namespace sbs {

// Flat `key = value` text. Blank lines and everything after '#' are ignored.
using ConfigMap = std::map<std::string, std::string>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ValidationError("bad value for " + key + ": \"" + text + "\"");
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ValidationError("bad boolean for " + key + ": \"" + text + "\"");
}

}  // namespace detail

inline ConfigMap parse_config(std::string_view text) {
  ConfigMap out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw FormatError("config line " + std::to_string(line_no) + ": empty key");
    out[std::string(key)] = std::string(value);
  }
  return out;
}

inline ConfigMap load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Everything one `train` invocation needs.
struct PipelineConfig {
  TrainConfig train;
  OrderingConfig ordering;
};

inline SigmaMode parse_sigma_mode(std::string_view s) {
  if (s == "global" || s == "global_fixed") return SigmaMode::global_fixed;
  if (s == "adaptive" || s == "per_layer_adaptive") return SigmaMode::per_layer_adaptive;
  throw ValidationError("unknown sigma.mode \"" + std::string(s) + "\"");
}

inline std::string_view sigma_mode_name(SigmaMode m) { return m == SigmaMode::global_fixed ? "global" : "adaptive"; }

inline StartRule parse_start_rule(std::string_view s) {
  if (s == "slot_zero") return StartRule::slot_zero;
  if (s == "max_norm") return StartRule::max_norm;
  throw ValidationError("unknown smoothing.start \"" + std::string(s) + "\"");
}

inline std::string_view start_rule_name(StartRule r) { return r == StartRule::slot_zero ? "slot_zero" : "max_norm"; }

// Unknown keys are rejected. `rff.sigma` and `sigma.base` name the same value.
inline void apply_config(const ConfigMap& kv, PipelineConfig& cfg) {
  using detail::parse_number;
  auto& t = cfg.train;
  auto& e = t.encoder;
  if (kv.contains("rff.sigma") && kv.contains("sigma.base") && kv.at("rff.sigma") != kv.at("sigma.base")) {
    throw ValidationError("rff.sigma and sigma.base disagree");
  }
  for (const auto& [key, value] : kv) {
    if (key == "encoder") e.kind = parse_encoder(value);
    else if (key == "rff.sigma" || key == "sigma.base") e.sigma.sigma_base = parse_number<double>(key, value);
    else if (key == "rff.features") e.rff_features = parse_number<std::size_t>(key, value);
    else if (key == "rff.seed") e.rff_seed = parse_number<std::uint64_t>(key, value);
    else if (key == "pe.levels") e.pe.levels = parse_number<std::size_t>(key, value);
    else if (key == "pe.base") e.pe.base = parse_number<double>(key, value);
    else if (key == "sigma.mode") e.sigma.mode = parse_sigma_mode(value);
    else if (key == "sigma.reference") e.sigma.reference_params = parse_number<std::size_t>(key, value);
    else if (key == "sigma.clamp_min") e.sigma.clamp_min = parse_number<double>(key, value);
    else if (key == "sigma.clamp_max") e.sigma.clamp_max = parse_number<double>(key, value);
    else if (key == "train.steps") t.steps = parse_number<std::size_t>(key, value);
    else if (key == "train.batch") t.batch = parse_number<std::size_t>(key, value);
    else if (key == "train.seed") t.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "train.eval_every") t.eval_every = parse_number<std::size_t>(key, value);
    else if (key == "train.lr") t.optimizer.lr = parse_number<double>(key, value);
    else if (key == "train.lr_final_fraction") t.lr_final_fraction = parse_number<double>(key, value);
    else if (key == "train.beta1") t.optimizer.beta1 = parse_number<double>(key, value);
    else if (key == "train.beta2") t.optimizer.beta2 = parse_number<double>(key, value);
    else if (key == "train.eps") t.optimizer.eps = parse_number<double>(key, value);
    else if (key == "train.alpha") t.alpha = parse_number<double>(key, value);
    else if (key == "train.beta") t.beta = parse_number<double>(key, value);
    else if (key == "mlp.hidden") t.hidden = parse_number<std::size_t>(key, value);
    else if (key == "smoothing.strategy") cfg.ordering.strategy = parse_strategy(value);
    else if (key == "smoothing.start") cfg.ordering.start_rule = parse_start_rule(value);
    else if (key == "smoothing.two_opt") cfg.ordering.two_opt = detail::parse_bool(key, value);
    else throw ValidationError("unknown config key \"" + key + "\"");
  }
}

// Every effective setting, one `key = value` per line in a fixed order.
inline std::string canonical_text(const PipelineConfig& cfg) {
  const auto& t = cfg.train;
  const auto& e = t.encoder;
  std::ostringstream o;
  o.precision(17);
  o << "encoder = " << encoder_name(e.kind) << '\n'
    << "mlp.hidden = " << t.hidden << '\n'
    << "pe.base = " << e.pe.base << '\n'
    << "pe.levels = " << e.pe.levels << '\n'
    << "rff.features = " << e.rff_features << '\n'
    << "rff.seed = " << e.rff_seed << '\n'
    << "sigma.base = " << e.sigma.sigma_base << '\n'
    << "sigma.clamp_max = " << e.sigma.clamp_max << '\n'
    << "sigma.clamp_min = " << e.sigma.clamp_min << '\n'
    << "sigma.mode = " << sigma_mode_name(e.sigma.mode) << '\n'
    << "sigma.reference = " << e.sigma.reference_params << '\n'
    << "smoothing.start = " << start_rule_name(cfg.ordering.start_rule) << '\n'
    << "smoothing.strategy = " << strategy_name(cfg.ordering.strategy) << '\n'
    << "smoothing.two_opt = " << (cfg.ordering.two_opt ? "true" : "false") << '\n'
    << "train.alpha = " << t.alpha << '\n'
    << "train.batch = " << t.batch << '\n'
    << "train.beta = " << t.beta << '\n'
    << "train.beta1 = " << t.optimizer.beta1 << '\n'
    << "train.beta2 = " << t.optimizer.beta2 << '\n'
    << "train.eps = " << t.optimizer.eps << '\n'
    << "train.eval_every = " << t.eval_every << '\n'
    << "train.lr = " << t.optimizer.lr << '\n'
    << "train.lr_final_fraction = " << t.lr_final_fraction << '\n'
    << "train.seed = " << t.seed << '\n'
    << "train.steps = " << t.steps << '\n';
  return o.str();
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string config_hash(const PipelineConfig& cfg) { return hex64(fnv1a(canonical_text(cfg))); }

}  // namespace sbs
