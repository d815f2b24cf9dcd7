// SPDX-License-Identifier: Apache-2.0
//
// One versatile transformer layer: attention, then a width pathway and a
// depth pathway over the same FFN weights, fused per token by
// lambda = (L_max - E[L]) / L_max.
#pragma once

#include <future>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "versatile/config.hpp"
#include "versatile/depth.hpp"
#include "versatile/width.hpp"

namespace versatile {

/// (L_max - E[L]) / L_max.
inline double gating_lambda(double expected_loops, std::size_t max_loops) {
  const double L = static_cast<double>(max_loops);
  if (max_loops == 0 || !(expected_loops >= 1.0 && expected_loops <= L)) {
    throw ContractError("gating_lambda: expected loops " + std::to_string(expected_loops) + " outside [1, " +
                        std::to_string(max_loops) + "]");
  }
  return (L - expected_loops) / L;
}

/// Per-token lambda from E[L] [M, 1], differentiable.
template <typename Real>
Tensor<Real> gating_lambda(const Tensor<Real>& expected, std::size_t max_loops) {
  const Real L = static_cast<Real>(max_loops);
  return unary(
      expected, [L](Real e) { return (L - e) / L; }, [L](Real, Real) { return Real{-1} / L; });
}

struct LayerOptions {
  std::size_t top_k = 2;
  bool shared_expert = false;
  bool soft_mode = false;
  double lambda_threshold = 0.0;
  LambdaSource infer_lambda = LambdaSource::hard;
  double tau_min = 0.1;
  bool parallel_pathways = false;
};

template <typename Real = double>
struct VersatileLayer {
  AttentionWeights<Real> attention;
  FfnWeights<Real> ffn;  // the only copy; both pathways read it
  RouterWeights<Real> router;
  LoopPredictorWeights<Real> loop_head;
  std::vector<ExpertView> views;
  LayerOptions options;

  std::size_t max_loops() const { return loop_head.max_loops(); }
};

template <typename Real>
VersatileLayer<Real> make_layer(Rng& rng, const ModelConfig& m, const LayerOptions& opts) {
  VersatileLayer<Real> layer;
  const std::size_t d = m.d_model;
  layer.attention = make_attention<Real>(rng, d, m.heads, m.init_std);
  layer.ffn = make_ffn<Real>(rng, d, m.hidden(), m.init_std);
  layer.router.w_g = init::normal<Real>(rng, {d, m.num_experts}, m.init_std);
  layer.loop_head.w_loop = init::normal<Real>(rng, {d, m.max_loops}, m.init_std);
  layer.views = build_expert_views(m.hidden(), m.expert_width(), m.num_experts);
  layer.options = opts;
  return layer;
}

struct LayerTrace {
  std::vector<double> lambda;             // per token
  std::vector<std::uint32_t> loops;       // predicted loop count per token
  std::vector<double> expected_loops;     // E[L] per token
  std::vector<std::uint64_t> expert_counts;
  std::vector<std::uint32_t> ffn_applications;  // infer: executed FFN applications per token
  std::size_t width_evaluated_tokens = 0;
  std::size_t width_pruned_tokens = 0;
  double aux_loss = 0.0;
  FfnCounters counters;

  static double mean_of(const auto& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (auto x : v) s += static_cast<double>(x);
    return s / static_cast<double>(v.size());
  }
  double mean_loops() const { return mean_of(loops); }
  double mean_expected_loops() const { return mean_of(expected_loops); }
  double mean_lambda() const { return mean_of(lambda); }
};

template <typename Real = double>
struct LayerOutput {
  Tensor<Real> y;
  LayerTrace trace;
  Tensor<Real> aux;  // load-balance loss, training only
};

/// Both pathways plus fusion for a given post-attention H and loop decision.
template <typename Real>
LayerOutput<Real> versatile_ffn_train(const Tensor<Real>& h, const VersatileLayer<Real>& layer,
                                      const LoopDecision<Real>& decision) {
  LayerOutput<Real> out;
  auto& tr = out.trace;
  const auto& o = layer.options;
  auto width = width_forward(h, layer.ffn, layer.views, layer.router, o.top_k, o.shared_expert, &tr.counters);
  const auto y_depth = depth_forward_train(h, layer.ffn, decision, o.soft_mode, &tr.counters);
  const auto lam = gating_lambda(decision.expected, decision.max_loops);
  out.y = blend_rows(lam, width.y, y_depth);
  out.aux = load_balance_loss(width.outcome);

  tr.aux_loss = static_cast<double>(out.aux.item());
  tr.lambda.assign(lam.values().begin(), lam.values().end());
  tr.expected_loops.assign(decision.expected.values().begin(), decision.expected.values().end());
  tr.loops.assign(decision.choice.begin(), decision.choice.end());
  tr.expert_counts = width.outcome.counts;
  tr.width_evaluated_tokens = h.rows();
  return out;
}

/// Training forward: H = x + Attn(norm x), p from Gumbel-Softmax at `tau`,
/// Y = lambda * Y_width + (1 - lambda) * Y_depth.
template <typename Real>
LayerOutput<Real> layer_forward_train(const Tensor<Real>& x, const VersatileLayer<Real>& layer, double tau, Rng& rng) {
  const auto h = attention_block(x, layer.attention);
  const auto decision = predict_loops(h, layer.loop_head, tau, rng, Mode::train);
  return versatile_ffn_train(h, layer, decision);
}

/// Inference forward with early exit and width pruning for tokens whose
/// lambda is at or below `lambda_threshold`.
template <typename Real>
LayerOutput<Real> layer_forward_infer(const Tensor<Real>& x, const VersatileLayer<Real>& layer,
                                      double lambda_threshold) {
  NoGradScope<Real> no_grad;
  LayerOutput<Real> out;
  auto& tr = out.trace;
  const auto& o = layer.options;
  const auto h = attention_block(x, layer.attention);
  Rng unused(0);
  const auto decision = predict_loops(h, layer.loop_head, o.tau_min, unused, Mode::infer);
  const std::size_t M = h.rows(), D = h.last_dim(), L = decision.max_loops;

  tr.loops.assign(decision.choice.begin(), decision.choice.end());
  tr.expected_loops.assign(decision.expected.values().begin(), decision.expected.values().end());
  tr.lambda.resize(M);
  std::vector<std::size_t> width_rows;
  for (std::size_t r = 0; r < M; ++r) {
    tr.lambda[r] = o.infer_lambda == LambdaSource::hard
                       ? gating_lambda(static_cast<double>(decision.choice[r]), L)
                       : gating_lambda(tr.expected_loops[r], L);
    if (tr.lambda[r] > lambda_threshold) width_rows.push_back(r);
  }
  tr.width_evaluated_tokens = width_rows.size();
  tr.width_pruned_tokens = M - width_rows.size();

  FfnCounters width_counters, depth_counters;
  auto run_width = [&]() -> std::optional<WidthResult<Real>> {
    NoGradScope<Real> inner;
    if (width_rows.empty()) return std::nullopt;
    const auto hw = gather_rows(reshape(h, {M, D}), width_rows);
    return width_forward(hw, layer.ffn, layer.views, layer.router, o.top_k, o.shared_expert, &width_counters);
  };
  auto run_depth = [&] { return depth_forward_infer(h, layer.ffn, decision, &depth_counters); };

  std::optional<WidthResult<Real>> width;
  DepthInferResult<Real> depth;
  if (o.parallel_pathways) {
    auto pending = std::async(std::launch::async, run_width);
    depth = run_depth();
    width = pending.get();
  } else {
    width = run_width();
    depth = run_depth();
  }

  std::vector<Real> y(depth.y.values().begin(), depth.y.values().end());
  if (width) {
    auto wv = width->y.values();
    for (std::size_t i = 0; i < width_rows.size(); ++i) {
      const std::size_t r = width_rows[i];
      const Real lam = static_cast<Real>(tr.lambda[r]), rest = Real{1} - lam;
      for (std::size_t j = 0; j < D; ++j) y[r * D + j] = lam * wv[i * D + j] + rest * y[r * D + j];
    }
    tr.expert_counts = width->outcome.counts;
  } else {
    tr.expert_counts.assign(layer.views.size(), 0);
  }
  tr.ffn_applications = std::move(depth.applications);
  tr.counters += width_counters;
  tr.counters += depth_counters;
  out.y = Tensor<Real>(x.shape(), std::move(y));
  return out;
}

}  // namespace versatile
