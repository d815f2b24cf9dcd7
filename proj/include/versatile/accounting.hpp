// SPDX-License-Identifier: Apache-2.0
//
// Parameter and FFN-FLOPs budgets for dense, MoE, k-loop and versatile
// variants of one architecture.
//
// FLOPs convention: forward pass, one token, FFN weight matrices only, two
// FLOPs per multiply-accumulate. A gated FFN has three d x d_hidden matrices,
// so a dense layer costs 6 * d * d_hidden. Values are reported in millions.
#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "versatile/config.hpp"
#include "versatile/fusion.hpp"

namespace versatile::accounting {

struct ArchSpec {
  std::size_t layers = 0;
  std::size_t d = 0;
  std::size_t d_hidden = 0;
  std::size_t vocab = 0;
  double base_params = 0;  // millions, supplied externally
  std::size_t experts = 8;
  std::size_t top_k = 2;
  std::size_t d_expert = 0;
  std::size_t max_loops = 4;

  void validate() const {
    if (layers == 0 || d == 0 || d_hidden == 0) throw ConfigError("ArchSpec: layers, d and d_hidden must be positive");
    if (d_expert > d_hidden) throw ConfigError("ArchSpec: d_expert exceeds d_hidden");
    if (!(base_params >= 0)) throw ConfigError("ArchSpec: base_params must be non-negative");
  }
};

/// 15 layers, d = 1024, d_hidden = 4096; 354.71M base parameters.
inline ArchSpec spec_354m() { return {15, 1024, 4096, 50280, 354.71, 8, 2, 512, 4}; }

/// 15 layers, d = 1536, d_hidden = 6144; 720.81M base parameters.
inline ArchSpec spec_720m() { return {15, 1536, 6144, 50280, 720.81, 8, 2, 768, 4}; }

struct BudgetReport {
  std::string variant;
  double params = 0;     // millions
  double ffn_flops = 0;  // millions per token
};

inline double millions(double v) { return v / 1e6; }

inline double ffn_flops_dense(const ArchSpec& s) {
  return millions(6.0 * static_cast<double>(s.d) * static_cast<double>(s.d_hidden) * static_cast<double>(s.layers));
}

inline double ffn_flops_kloop(const ArchSpec& s, std::size_t k) {
  if (k < 1) throw ContractError("ffn_flops_kloop: k must be at least 1");
  return static_cast<double>(k) * ffn_flops_dense(s);
}

/// Dense path kept always on, plus top_k small experts of width d_expert.
inline double ffn_flops_moe(const ArchSpec& s) {
  return ffn_flops_dense(s) + millions(6.0 * static_cast<double>(s.d) * static_cast<double>(s.d_expert) *
                                       static_cast<double>(s.top_k) * static_cast<double>(s.layers));
}

/// Physical experts (three d x d_expert matrices each) plus a d x N router per layer.
inline double moe_extra_params(const ArchSpec& s) {
  const double per_layer = 3.0 * static_cast<double>(s.d) * static_cast<double>(s.d_expert) *
                               static_cast<double>(s.experts) +
                           static_cast<double>(s.d) * static_cast<double>(s.experts);
  return millions(per_layer * static_cast<double>(s.layers));
}

/// Router (d x N) and loop head (d x L_max) per layer; experts reuse the FFN.
inline double versatile_extra_params(const ArchSpec& s) {
  const double per_layer = static_cast<double>(s.d) * static_cast<double>(s.experts) +
                           static_cast<double>(s.d) * static_cast<double>(s.max_loops);
  return millions(per_layer * static_cast<double>(s.layers));
}

/// Base * n_mean + (MoE - Base) * p_frac.
inline double versatile_runtime_flops(double base_flops, double moe_flops, double n_mean, double p_frac,
                                      std::size_t max_loops = 0) {
  if (!(n_mean >= 1.0) || (max_loops != 0 && n_mean > static_cast<double>(max_loops))) {
    throw ContractError("versatile_runtime_flops: n_mean outside [1, L_max]");
  }
  if (!(p_frac >= 0.0 && p_frac <= 1.0)) throw ContractError("versatile_runtime_flops: p_frac outside [0, 1]");
  return base_flops * n_mean + (moe_flops - base_flops) * p_frac;
}

struct RuntimeStats {
  double n_mean = 0;  // mean predicted loop count over (token, layer)
  double p_frac = 0;  // share of (token, layer) pairs with loops != L_max
  std::size_t samples = 0;
};

inline RuntimeStats collect_runtime_stats(const std::vector<LayerTrace>& traces, std::size_t max_loops) {
  RuntimeStats st;
  double total = 0;
  std::size_t below = 0;
  for (const auto& t : traces) {
    for (auto l : t.loops) {
      total += static_cast<double>(l);
      if (l != max_loops) ++below;
      ++st.samples;
    }
  }
  if (st.samples == 0) throw ContractError("collect_runtime_stats: no traced tokens");
  st.n_mean = total / static_cast<double>(st.samples);
  st.p_frac = static_cast<double>(below) / static_cast<double>(st.samples);
  return st;
}

/// Base, MoE, 2/4/6-loop and (when stats are given) versatile rows.
inline std::vector<BudgetReport> budget_table(const ArchSpec& s, const RuntimeStats* stats = nullptr) {
  s.validate();
  const double base = ffn_flops_dense(s), moe = ffn_flops_moe(s);
  std::vector<BudgetReport> rows;
  rows.push_back({"Base", s.base_params, base});
  rows.push_back({"MoE", s.base_params + moe_extra_params(s), moe});
  for (std::size_t k : {2, 4, 6}) rows.push_back({std::to_string(k) + "-Loop", s.base_params, ffn_flops_kloop(s, k)});
  BudgetReport v{"VersatileFFN", s.base_params + versatile_extra_params(s), 0.0};
  if (stats) v.ffn_flops = versatile_runtime_flops(base, moe, stats->n_mean, stats->p_frac, s.max_loops);
  rows.push_back(v);
  return rows;
}

inline std::string format_table(const std::vector<BudgetReport>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "variant" << std::right << std::setw(14) << "params(M)" << std::setw(16)
     << "ffn_flops(M)" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(14) << r.variant << std::right << std::setw(14) << r.params << std::setw(16);
    if (r.ffn_flops > 0) {
      os << r.ffn_flops;
    } else {
      os << "-";
    }
    os << '\n';
  }
  return os.str();
}

inline std::string format_csv(const std::vector<BudgetReport>& rows) {
  std::ostringstream os;
  os << "variant,params_millions,ffn_flops_millions\n";
  os << std::setprecision(10);
  for (const auto& r : rows) os << r.variant << ',' << r.params << ',' << r.ffn_flops << '\n';
  return os.str();
}

// ------------------------------------------------- exact integer census

struct ParamCensus {
  std::uint64_t embeddings = 0;
  std::uint64_t attention = 0;
  std::uint64_t ffn = 0;
  std::uint64_t router = 0;
  std::uint64_t loop_head = 0;
  std::uint64_t norms = 0;
  std::uint64_t unembedding = 0;

  std::uint64_t total() const { return embeddings + attention + ffn + router + loop_head + norms + unembedding; }
  /// The same model without router and loop head.
  std::uint64_t base() const { return total() - router - loop_head; }
};

/// Trainable scalars of the model built from `m`, computed from the
/// architecture alone.
inline ParamCensus count_params(const ModelConfig& m) {
  const std::uint64_t d = m.d_model, L = m.layers;
  ParamCensus c;
  c.embeddings = static_cast<std::uint64_t>(m.vocab) * d + static_cast<std::uint64_t>(m.max_seq) * d;
  c.attention = L * 4 * d * d;
  c.ffn = L * 3 * d * static_cast<std::uint64_t>(m.hidden());
  c.router = L * d * m.num_experts;
  c.loop_head = L * d * m.max_loops;
  c.norms = L * 2 * d + d;
  c.unembedding = m.tie_embeddings ? 0 : d * m.vocab;
  return c;
}

/// ArchSpec for a desk model, with the base count taken from the census.
inline ArchSpec arch_from_config(const ModelConfig& m) {
  ArchSpec s;
  s.layers = m.layers;
  s.d = m.d_model;
  s.d_hidden = m.hidden();
  s.vocab = m.vocab;
  s.base_params = millions(static_cast<double>(count_params(m).base()));
  s.experts = m.num_experts;
  s.top_k = m.top_k;
  s.d_expert = m.expert_width();
  s.max_loops = m.max_loops;
  return s;
}

}  // namespace versatile::accounting
