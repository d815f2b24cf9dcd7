// SPDX-License-Identifier: Apache-2.0
//
// Depth-versatile pathway: the full shared FFN applied recursively, with a
// per-token loop count predicted once from the pathway input.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "versatile/nn.hpp"

namespace versatile {

template <typename Real = double>
struct LoopPredictorWeights {
  Tensor<Real> w_loop;  // [d, L_max]
  std::size_t max_loops() const { return w_loop.dim(1); }
};

enum class Mode { train, infer };

template <typename Real = double>
struct LoopDecision {
  Tensor<Real> probs;               // [M, L_max] on the simplex
  std::vector<std::size_t> choice;  // argmax(p) + 1, lowest count on ties
  Tensor<Real> expected;            // [M, 1], sum_l l * p_l
  double temperature = 1.0;
  std::size_t max_loops = 1;

  std::size_t rows() const { return choice.size(); }
};

struct TemperatureSchedule {
  double initial = 5.0;
  double minimum = 0.1;
  double decay_fraction = 0.8;  // share of training over which tau reaches `minimum`
};

/// Exponential interpolation from `initial` to `minimum`, held at `minimum`
/// once step reaches decay_fraction * total_steps.
inline double temperature_at(const TemperatureSchedule& s, std::size_t step, std::size_t total_steps) {
  if (step > total_steps) {
    throw ContractError("temperature_at: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  if (!(s.initial > 0) || !(s.minimum > 0) || s.minimum > s.initial || !(s.decay_fraction > 0)) {
    throw ConfigError("temperature schedule needs 0 < tau_min <= tau_init and a positive decay fraction");
  }
  const double horizon = s.decay_fraction * static_cast<double>(total_steps);
  if (horizon <= 0) return s.initial;
  const double progress = static_cast<double>(step) / horizon;
  if (progress >= 1.0) return s.minimum;
  return std::max(s.minimum, s.initial * std::pow(s.minimum / s.initial, progress));
}

/// Index of the row maximum, lowest index on ties.
template <typename Real>
std::size_t argmax_row(std::span<const Real> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

/// Train mode: p = softmax((W_loop h + g) / tau) with fresh Gumbel noise g.
/// Infer mode: p = softmax(W_loop h / tau), no noise; pass the schedule's
/// minimum temperature.
template <typename Real>
LoopDecision<Real> predict_loops(const Tensor<Real>& h, const LoopPredictorWeights<Real>& w, double temperature,
                                 Rng& rng, Mode mode) {
  if (!(temperature > 0)) throw ContractError("predict_loops: temperature must be positive");
  const std::size_t L = w.max_loops();
  const auto logits = matmul(reshape(h, {h.rows(), h.last_dim()}), w.w_loop);
  const Real tau = static_cast<Real>(temperature);
  Tensor<Real> z = logits;
  if (mode == Mode::train) z = add(logits, gumbel_noise<Real>(rng, logits.shape()));
  z = unary(z, [tau](Real v) { return v / tau; }, [tau](Real, Real) { return Real{1} / tau; });

  LoopDecision<Real> d;
  d.probs = softmax(z, 1);
  d.temperature = temperature;
  d.max_loops = L;
  d.choice.resize(d.probs.rows());
  auto pv = d.probs.values();
  for (std::size_t r = 0; r < d.choice.size(); ++r) d.choice[r] = argmax_row(pv.subspan(r * L, L)) + 1;
  d.expected = expected_count(d.probs);
  return d;
}

/// H^(1..L_max), H^(l) = F(H^(l-1)) with the full shared weights.
template <typename Real>
std::vector<Tensor<Real>> recurse(const Tensor<Real>& h0, const FfnWeights<Real>& w, std::size_t max_loops,
                                  FfnCounters* counters = nullptr) {
  if (max_loops < 1) throw ConfigError("max_loops must be at least 1");
  std::vector<Tensor<Real>> states;
  states.reserve(max_loops);
  Tensor<Real> cur = h0;
  for (std::size_t l = 0; l < max_loops; ++l) {
    cur = ffn_forward(cur, w, counters);
    states.push_back(cur);
  }
  return states;
}

/// Training output. Straight-through (default): forward value is exactly
/// H^(choice), backward is that of sum_l p_l H^(l). Soft mode returns the
/// soft sum itself.
template <typename Real>
Tensor<Real> depth_forward_train(const Tensor<Real>& h0, const FfnWeights<Real>& w, const LoopDecision<Real>& decision,
                                 bool soft_mode = false, FfnCounters* counters = nullptr) {
  const auto states = recurse(h0, w, decision.max_loops, counters);
  if (soft_mode) return soft_mix(decision.probs, states);
  std::vector<std::size_t> pick(decision.choice.size());
  for (std::size_t r = 0; r < pick.size(); ++r) pick[r] = decision.choice[r] - 1;
  return straight_through_select(decision.probs, states, std::move(pick));
}

template <typename Real = double>
struct DepthInferResult {
  Tensor<Real> y;
  std::vector<std::uint32_t> applications;  // FFN applications per row
};

/// Early exit: row r receives exactly choice[r] FFN applications. Each
/// iteration only touches rows still active.
template <typename Real>
DepthInferResult<Real> depth_forward_infer(const Tensor<Real>& h0, const FfnWeights<Real>& w,
                                           const LoopDecision<Real>& decision, FfnCounters* counters = nullptr) {
  NoGradScope<Real> no_grad;
  const std::size_t M = h0.rows(), D = h0.last_dim();
  if (decision.choice.size() != M) throw DimensionError("depth_forward_infer: decision rows do not match input");
  std::vector<Real> cur(h0.values().begin(), h0.values().end());
  DepthInferResult<Real> res;
  res.applications.assign(M, 0);
  for (std::size_t l = 1; l <= decision.max_loops; ++l) {
    std::vector<std::size_t> active;
    for (std::size_t r = 0; r < M; ++r) {
      if (decision.choice[r] >= l) active.push_back(r);
    }
    if (active.empty()) break;
    Tensor<Real> sub({active.size(), D});
    auto sv = sub.mutable_values();
    for (std::size_t i = 0; i < active.size(); ++i) std::copy_n(cur.data() + active[i] * D, D, sv.data() + i * D);
    const auto next = ffn_forward(sub, w, counters);
    auto nv = next.values();
    for (std::size_t i = 0; i < active.size(); ++i) {
      std::copy_n(nv.data() + i * D, D, cur.data() + active[i] * D);
      ++res.applications[active[i]];
    }
  }
  res.y = Tensor<Real>(h0.shape(), std::move(cur));
  return res;
}

}  // namespace versatile
