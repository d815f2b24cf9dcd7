// SPDX-License-Identifier: Apache-2.0
//
// Width-versatile pathway: N virtual experts carved out of the shared FFN's
// hidden axis by strided contiguous index ranges, mixed by top-K routing.
// No expert owns weights; expert k reads columns [kS, kS + d_expert) of
// w_gate and w_up and the same rows of w_down.
#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "versatile/nn.hpp"

namespace versatile {

struct ExpertView {
  std::size_t index = 0;
  std::size_t begin = 0;  // floor(k * S)
  std::size_t width = 0;  // d_expert

  std::size_t end() const { return begin + width; }
  bool contains(std::size_t j) const { return j >= begin && j < end(); }
  bool operator==(const ExpertView&) const = default;
};

/// S = floor((d_hidden - d_expert) / (N - 1)); 0 when N == 1.
inline std::size_t compute_stride(std::size_t d_hidden, std::size_t d_expert, std::size_t experts) {
  if (experts == 0) throw ConfigError("num_experts must be at least 1");
  if (d_expert == 0) throw ConfigError("d_expert must be positive");
  if (d_expert >= d_hidden) {
    throw ConfigError("d_expert (" + std::to_string(d_expert) + ") must be smaller than d_hidden (" +
                      std::to_string(d_hidden) + ")");
  }
  if (experts == 1) return 0;
  return (d_hidden - d_expert) / (experts - 1);
}

inline std::vector<ExpertView> build_expert_views(std::size_t d_hidden, std::size_t d_expert, std::size_t experts) {
  const std::size_t stride = compute_stride(d_hidden, d_expert, experts);
  std::vector<ExpertView> views;
  views.reserve(experts);
  for (std::size_t k = 0; k < experts; ++k) {
    ExpertView v{k, k * stride, d_expert};
    if (v.end() > d_hidden) throw std::logic_error("expert view " + std::to_string(k) + " leaves the hidden axis");
    views.push_back(v);
  }
  return views;
}

inline bool views_pairwise_disjoint(const std::vector<ExpertView>& views) {
  for (std::size_t a = 0; a < views.size(); ++a) {
    for (std::size_t b = a + 1; b < views.size(); ++b) {
      if (views[a].begin < views[b].end() && views[b].begin < views[a].end()) return false;
    }
  }
  return true;
}

template <typename Real = double>
struct RouterWeights {
  Tensor<Real> w_g;  // [d, N]
  std::size_t experts() const { return w_g.dim(1); }
};

template <typename Real = double>
struct RoutingOutcome {
  Tensor<Real> probs;  // [M, N] softmax over all experts
  Tensor<Real> gates;  // [M, N] selected probabilities renormalized, zeros elsewhere
  std::size_t tokens = 0, experts = 0, top_k = 0;
  std::vector<std::size_t> selected;       // [M * K], highest logit first
  std::vector<std::uint64_t> counts;       // assignments per expert
  std::vector<double> load_fraction;       // f_i = counts_i / (M * K)
  std::vector<double> mean_probability;    // P_i

  /// Rows routed to expert e, ascending.
  std::vector<std::size_t> rows_for(std::size_t e) const {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < tokens; ++r) {
      for (std::size_t j = 0; j < top_k; ++j) {
        if (selected[r * top_k + j] == e) {
          rows.push_back(r);
          break;
        }
      }
    }
    return rows;
  }
};

/// Indices of the k largest values of row, ties to the lower index.
template <typename Real>
std::vector<std::size_t> top_k_indices(std::span<const Real> row, std::size_t k) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  order.resize(k);
  return order;
}

template <typename Real>
RoutingOutcome<Real> route_topk(const Tensor<Real>& h, const RouterWeights<Real>& router, std::size_t top_k) {
  const std::size_t N = router.experts();
  if (top_k < 1 || top_k > N) {
    throw ConfigError("top_k=" + std::to_string(top_k) + " must lie in [1, " + std::to_string(N) + "]");
  }
  RoutingOutcome<Real> out;
  const auto logits = matmul(reshape(h, {h.rows(), h.last_dim()}), router.w_g);
  out.tokens = logits.rows();
  out.experts = N;
  out.top_k = top_k;
  out.probs = softmax(logits, 1);
  out.selected.reserve(out.tokens * top_k);
  out.counts.assign(N, 0);
  std::vector<std::uint8_t> mask(out.tokens * N, 0);
  auto lv = logits.values();
  for (std::size_t r = 0; r < out.tokens; ++r) {
    for (std::size_t e : top_k_indices(lv.subspan(r * N, N), top_k)) {
      out.selected.push_back(e);
      mask[r * N + e] = 1;
      ++out.counts[e];
    }
  }
  out.gates = renormalize_selected(out.probs, std::move(mask));
  out.load_fraction.resize(N);
  out.mean_probability.assign(N, 0.0);
  auto pv = out.probs.values();
  for (std::size_t r = 0; r < out.tokens; ++r) {
    for (std::size_t e = 0; e < N; ++e) out.mean_probability[e] += static_cast<double>(pv[r * N + e]);
  }
  for (std::size_t e = 0; e < N; ++e) {
    out.load_fraction[e] = static_cast<double>(out.counts[e]) / static_cast<double>(out.tokens * top_k);
    out.mean_probability[e] /= static_cast<double>(out.tokens);
  }
  return out;
}

/// How an expert view reaches the shared weights. Both give identical bits.
enum class ViewKernel { fused, materialized };

/// Y_k = h + W_down[I_k, :] (silu(W_gate[:, I_k] n) * (W_up[:, I_k] n)).
template <typename Real>
Tensor<Real> expert_forward(const Tensor<Real>& h, const FfnWeights<Real>& w, const ExpertView& view,
                            ViewKernel kernel = ViewKernel::fused, FfnCounters* counters = nullptr) {
  if (view.width == 0 || view.end() > w.hidden()) throw DimensionError("expert view outside the hidden axis");
  const auto n = rms_norm(h, w.norm_gain, Real(kNormEps));
  if (counters) counters->add_expert(h.rows(), w.d(), view.width);
  if (kernel == ViewKernel::fused) return add(h, ffn_branch(n, w, view.begin, view.width));
  const auto gate = slice_cols(w.w_gate, view.begin, view.width);
  const auto up = slice_cols(w.w_up, view.begin, view.width);
  const auto down = slice_rows(w.w_down, view.begin, view.width);
  return add(h, matmul(mul(silu(matmul(n, gate)), matmul(n, up)), down));
}

template <typename Real = double>
struct WidthResult {
  Tensor<Real> y;
  RoutingOutcome<Real> outcome;
};

/// Y_width = sum over selected k of g_k * Y_k, accumulated per token in
/// ascending expert order. With `shared_expert`, the full FFN branch is
/// added ungated on top.
template <typename Real>
WidthResult<Real> width_forward(const Tensor<Real>& h, const FfnWeights<Real>& w, const std::vector<ExpertView>& views,
                                const RouterWeights<Real>& router, std::size_t top_k, bool shared_expert = false,
                                FfnCounters* counters = nullptr) {
  if (views.size() != router.experts()) {
    throw DimensionError("width_forward: " + std::to_string(views.size()) + " views for " +
                         std::to_string(router.experts()) + " router columns");
  }
  WidthResult<Real> res;
  res.outcome = route_topk(h, router, top_k);
  const std::size_t M = h.rows(), D = h.last_dim();
  const auto h2 = reshape(h, {M, D});
  const auto n = rms_norm(h2, w.norm_gain, Real(kNormEps));
  Tensor<Real> acc({M, D});
  for (std::size_t e = 0; e < views.size(); ++e) {
    auto rows = res.outcome.rows_for(e);
    if (rows.empty()) continue;
    const auto& v = views[e];
    if (counters) counters->add_expert(rows.size(), D, v.width);
    const auto y_e = add(gather_rows(h2, rows), ffn_branch(gather_rows(n, rows), w, v.begin, v.width));
    const auto g_e = select_column(res.outcome.gates, rows, e);
    acc = scatter_add_rows(acc, mul_rows(y_e, g_e), std::move(rows));
  }
  if (shared_expert) {
    if (counters) counters->add_full(M, D, w.hidden());
    acc = add(acc, ffn_branch(n, w, 0, w.hidden()));
  }
  res.y = reshape(acc, h.shape());
  return res;
}

/// N * sum_i f_i * P_i; f_i is a constant count ratio, P_i carries gradient.
template <typename Real>
Tensor<Real> load_balance_loss(const RoutingOutcome<Real>& outcome) {
  std::vector<Real> f(outcome.experts);
  for (std::size_t e = 0; e < outcome.experts; ++e) f[e] = static_cast<Real>(outcome.load_fraction[e]);
  return scale(dot_constant(column_mean(outcome.probs), std::move(f)), static_cast<Real>(outcome.experts));
}

}  // namespace versatile
