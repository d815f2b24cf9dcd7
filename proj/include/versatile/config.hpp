// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. The on-disk form is a flat `key = value` text file with
// `#` comments; unknown keys and out-of-range values are rejected with the
// offending key named in the error.
#pragma once

#include <zlib.h>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "versatile/tensor.hpp"

namespace versatile {

enum class Precision { f64, f32 };

/// Where inference takes the fusion coefficient from: the executed loop
/// count (`hard`) or the noise-free expected count (`soft`).
enum class LambdaSource { hard, soft };

struct ModelConfig {
  std::size_t vocab = 257;  // 256 byte values + one boundary token
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t d_hidden = 0;  // 0 -> 4 * d_model
  std::size_t max_seq = 64;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t d_expert = 0;  // 0 -> d_hidden / num_experts
  std::size_t max_loops = 4;
  bool shared_expert = false;
  bool soft_mode = false;  // train with sum_l p_l H^(l) instead of the straight-through selection
  bool tie_embeddings = false;
  double lambda_threshold = 0.0;
  LambdaSource infer_lambda = LambdaSource::hard;
  double init_std = 0.02;

  std::size_t hidden() const { return d_hidden ? d_hidden : 4 * d_model; }
  std::size_t expert_width() const { return d_expert ? d_expert : hidden() / num_experts; }
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  double peak_lr = 3e-3;
  double warmup_frac = 0.05;
  double lr_floor_frac = 0.10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double aux_coef = 1e-5;
  double tau_init = 5.0;
  double tau_min = 0.1;
  double tau_decay_frac = 0.8;
  std::uint64_t seed = 1234;
  Precision precision = Precision::f64;
  std::size_t checkpoint_every = 0;  // 0 -> only at the end
  double eval_frac = 0.1;
  std::size_t eval_batches = 16;
  bool record_throughput = false;
};

struct PathConfig {
  std::string corpus;  // empty -> synthetic corpus generated in memory
  std::string labels;
  std::string out_dir = "run";
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PathConfig paths;

  /// Throws ConfigError naming the first violated field.
  void validate() const {
    const auto& m = model;
    auto fail = [](const std::string& key, const std::string& why) { throw ConfigError(key + ": " + why); };
    if (m.vocab < 2) fail("vocab", "must be at least 2");
    if (m.d_model == 0) fail("d_model", "must be positive");
    if (m.heads == 0 || m.d_model % m.heads != 0) fail("heads", "must divide d_model");
    if (m.layers == 0) fail("layers", "must be positive");
    if (m.max_seq < 2) fail("max_seq", "must be at least 2");
    if (m.num_experts == 0) fail("num_experts", "must be positive");
    if (m.top_k == 0 || m.top_k > m.num_experts) fail("top_k", "must lie in [1, num_experts]");
    if (m.max_loops == 0) fail("max_loops", "must be positive");
    if (m.expert_width() == 0) fail("d_expert", "must be positive");
    if (m.expert_width() >= m.hidden()) fail("d_expert", "must be smaller than d_hidden");
    if (!(m.init_std > 0)) fail("init_std", "must be positive");
    const auto& t = train;
    if (t.steps == 0) fail("steps", "must be positive");
    if (t.batch_size == 0) fail("batch_size", "must be positive");
    if (t.seq_len < 2 || t.seq_len > m.max_seq) fail("seq_len", "must lie in [2, max_seq]");
    if (!(t.peak_lr >= 0)) fail("peak_lr", "must be non-negative");
    if (!(t.warmup_frac >= 0 && t.warmup_frac < 1)) fail("warmup_frac", "must lie in [0, 1)");
    if (!(t.lr_floor_frac >= 0 && t.lr_floor_frac <= 1)) fail("lr_floor_frac", "must lie in [0, 1]");
    if (!(t.adam_beta1 >= 0 && t.adam_beta1 < 1)) fail("adam_beta1", "must lie in [0, 1)");
    if (!(t.adam_beta2 >= 0 && t.adam_beta2 < 1)) fail("adam_beta2", "must lie in [0, 1)");
    if (!(t.adam_eps > 0)) fail("adam_eps", "must be positive");
    if (!(t.weight_decay >= 0)) fail("weight_decay", "must be non-negative");
    if (!(t.clip_norm > 0)) fail("clip_norm", "must be positive");
    if (!(t.aux_coef >= 0)) fail("aux_coef", "must be non-negative");
    if (!(t.tau_min > 0)) fail("tau_min", "must be positive");
    if (!(t.tau_init >= t.tau_min)) fail("tau_init", "must be at least tau_min");
    if (!(t.tau_decay_frac > 0 && t.tau_decay_frac <= 1)) fail("tau_decay_frac", "must lie in (0, 1]");
    if (!(t.eval_frac > 0 && t.eval_frac < 1)) fail("eval_frac", "must lie in (0, 1)");
    if (t.eval_batches == 0) fail("eval_batches", "must be positive");
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": cannot parse '" + std::string(text) + "'");
  return value;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + std::string(text) + "'");
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
  bool architecture;  // part of the checkpoint compatibility digest
};

#define VERSATILE_SIZE_FIELD(key, member, arch)                                                         \
  {                                                                                                     \
    key, {[](RunConfig& c, std::string_view v) { c.member = parse_number<std::size_t>(key, v); },       \
          [](const RunConfig& c) { return std::to_string(c.member); }, arch}                           \
  }
#define VERSATILE_DOUBLE_FIELD(key, member, arch)                                                  \
  {                                                                                                \
    key, {[](RunConfig& c, std::string_view v) { c.member = parse_number<double>(key, v); },       \
          [](const RunConfig& c) { return format_double(c.member); }, arch}                        \
  }
#define VERSATILE_BOOL_FIELD(key, member, arch)                                             \
  {                                                                                         \
    key, {[](RunConfig& c, std::string_view v) { c.member = parse_bool(key, v); },          \
          [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, arch} \
  }
#define VERSATILE_STRING_FIELD(key, member)                                             \
  {                                                                                     \
    key, {[](RunConfig& c, std::string_view v) { c.member = std::string(v); },          \
          [](const RunConfig& c) { return c.member; }, false}                           \
  }

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      VERSATILE_SIZE_FIELD("vocab", model.vocab, true),
      VERSATILE_SIZE_FIELD("d_model", model.d_model, true),
      VERSATILE_SIZE_FIELD("heads", model.heads, true),
      VERSATILE_SIZE_FIELD("layers", model.layers, true),
      VERSATILE_SIZE_FIELD("d_hidden", model.d_hidden, false),
      VERSATILE_SIZE_FIELD("max_seq", model.max_seq, true),
      VERSATILE_SIZE_FIELD("num_experts", model.num_experts, true),
      VERSATILE_SIZE_FIELD("top_k", model.top_k, true),
      VERSATILE_SIZE_FIELD("d_expert", model.d_expert, false),
      VERSATILE_SIZE_FIELD("max_loops", model.max_loops, true),
      VERSATILE_BOOL_FIELD("shared_expert", model.shared_expert, true),
      VERSATILE_BOOL_FIELD("soft_mode", model.soft_mode, false),
      VERSATILE_BOOL_FIELD("tie_embeddings", model.tie_embeddings, true),
      VERSATILE_DOUBLE_FIELD("lambda_threshold", model.lambda_threshold, false),
      {"infer_lambda",
       {[](RunConfig& c, std::string_view v) {
          if (v == "hard") {
            c.model.infer_lambda = LambdaSource::hard;
          } else if (v == "soft") {
            c.model.infer_lambda = LambdaSource::soft;
          } else {
            throw ConfigError("infer_lambda: expected hard or soft, got '" + std::string(v) + "'");
          }
        },
        [](const RunConfig& c) { return std::string(c.model.infer_lambda == LambdaSource::hard ? "hard" : "soft"); },
        false}},
      VERSATILE_DOUBLE_FIELD("init_std", model.init_std, false),
      VERSATILE_SIZE_FIELD("steps", train.steps, false),
      VERSATILE_SIZE_FIELD("batch_size", train.batch_size, false),
      VERSATILE_SIZE_FIELD("seq_len", train.seq_len, false),
      VERSATILE_DOUBLE_FIELD("peak_lr", train.peak_lr, false),
      VERSATILE_DOUBLE_FIELD("warmup_frac", train.warmup_frac, false),
      VERSATILE_DOUBLE_FIELD("lr_floor_frac", train.lr_floor_frac, false),
      VERSATILE_DOUBLE_FIELD("adam_beta1", train.adam_beta1, false),
      VERSATILE_DOUBLE_FIELD("adam_beta2", train.adam_beta2, false),
      VERSATILE_DOUBLE_FIELD("adam_eps", train.adam_eps, false),
      VERSATILE_DOUBLE_FIELD("weight_decay", train.weight_decay, false),
      VERSATILE_DOUBLE_FIELD("clip_norm", train.clip_norm, false),
      VERSATILE_DOUBLE_FIELD("aux_coef", train.aux_coef, false),
      VERSATILE_DOUBLE_FIELD("tau_init", train.tau_init, false),
      VERSATILE_DOUBLE_FIELD("tau_min", train.tau_min, false),
      VERSATILE_DOUBLE_FIELD("tau_decay_frac", train.tau_decay_frac, false),
      {"seed",
       {[](RunConfig& c, std::string_view v) { c.train.seed = parse_number<std::uint64_t>("seed", v); },
        [](const RunConfig& c) { return std::to_string(c.train.seed); }, false}},
      {"precision",
       {[](RunConfig& c, std::string_view v) {
          if (v == "f64") {
            c.train.precision = Precision::f64;
          } else if (v == "f32") {
            c.train.precision = Precision::f32;
          } else {
            throw ConfigError("precision: expected f64 or f32, got '" + std::string(v) + "'");
          }
        },
        [](const RunConfig& c) { return std::string(c.train.precision == Precision::f64 ? "f64" : "f32"); }, true}},
      VERSATILE_SIZE_FIELD("checkpoint_every", train.checkpoint_every, false),
      VERSATILE_DOUBLE_FIELD("eval_frac", train.eval_frac, false),
      VERSATILE_SIZE_FIELD("eval_batches", train.eval_batches, false),
      VERSATILE_BOOL_FIELD("record_throughput", train.record_throughput, false),
      VERSATILE_STRING_FIELD("corpus", paths.corpus),
      VERSATILE_STRING_FIELD("labels", paths.labels),
      VERSATILE_STRING_FIELD("out_dir", paths.out_dir),
  };
  return table;
}

#undef VERSATILE_SIZE_FIELD
#undef VERSATILE_DOUBLE_FIELD
#undef VERSATILE_BOOL_FIELD
#undef VERSATILE_STRING_FIELD

}  // namespace detail

/// Applies one `key = value` assignment.
inline void set_config_value(RunConfig& cfg, const std::string& key, std::string_view value) {
  const auto& table = detail::fields();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key + ": unknown configuration key");
  it->second.set(cfg, value);
}

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view = line;
    if (const auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    view = detail::trim(view);
    if (view.empty()) continue;
    const auto eq = view.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key(detail::trim(view.substr(0, eq)));
    set_config_value(cfg, key, detail::trim(view.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  return parse_config(in);
}

/// Every key in canonical order, one `key = value` per line.
inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

/// CRC-32 of the architecture keys; checkpoints refuse to load into a model
/// with a different digest.
inline std::uint32_t architecture_digest(const RunConfig& cfg) {
  std::string canon;
  for (const auto& [key, field] : detail::fields()) {
    if (field.architecture) canon += key + "=" + field.get(cfg) + ";";
  }
  // resolved widths
  canon += "hidden=" + std::to_string(cfg.model.hidden()) + ";expert=" + std::to_string(cfg.model.expert_width());
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(canon.data()), static_cast<uInt>(canon.size())));
}

}  // namespace versatile
