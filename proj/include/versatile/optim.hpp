// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "versatile/model.hpp"

namespace versatile {

/// Linear warmup to `peak`, then cosine decay to floor_frac * peak.
struct LrSchedule {
  double peak = 3e-3;
  double warmup_frac = 0.05;
  double floor_frac = 0.10;
  std::size_t total_steps = 1;
};

inline double lr_at(const LrSchedule& s, std::size_t step) {
  if (step > s.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
  }
  const double total = static_cast<double>(s.total_steps);
  const double warm = s.warmup_frac * total;
  const double t = static_cast<double>(step);
  if (t < warm) return s.peak * t / warm;
  const double span = total - warm;
  const double progress = span > 0 ? (t - warm) / span : 1.0;
  const double floor = s.floor_frac * s.peak;
  return floor + (s.peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
};

template <typename Real = double>
struct OptimState {
  AdamWConfig hp;
  std::vector<std::vector<Real>> m, v;  // parallel to the parameter list
  std::size_t step = 0;                 // completed updates

  void init(const std::vector<NamedParameter<Real>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.tensor.numel(), Real{0});
      v.emplace_back(p.tensor.numel(), Real{0});
    }
    step = 0;
  }
};

/// sqrt of the sum of squared gradients over all parameters, in double.
template <typename Real>
double global_grad_norm(const std::vector<NamedParameter<Real>>& params) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (auto g : p.tensor.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

/// Scales all gradients so the global norm is at most `max_norm`. Returns the
/// pre-clip norm.
template <typename Real>
double clip_grad_norm(std::vector<NamedParameter<Real>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

/// One AdamW update with decoupled weight decay scaled by lr.
template <typename Real>
void adamw_step(std::vector<NamedParameter<Real>>& params, OptimState<Real>& st, double lr) {
  if (st.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  ++st.step;
  const auto& hp = st.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (st.m[i].size() != p.tensor.numel()) throw ContractError("adamw_step: moment shape mismatch for " + p.name);
    auto w = p.tensor.mutable_values();
    const bool has = p.tensor.has_grad();
    std::span<const Real> g;
    if (has) g = p.tensor.grad();
    auto& m = st.m[i];
    auto& v = st.v[i];
    const double decay = p.decay ? lr * hp.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? static_cast<double>(g[j]) : 0.0;
      const double mj = hp.beta1 * static_cast<double>(m[j]) + (1.0 - hp.beta1) * gj;
      const double vj = hp.beta2 * static_cast<double>(v[j]) + (1.0 - hp.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      const double mhat = mj / bc1, vhat = vj / bc2;
      double wj = static_cast<double>(w[j]);
      wj -= decay * wj;
      wj -= lr * mhat / (std::sqrt(vhat) + hp.eps);
      w[j] = static_cast<Real>(wj);
    }
  }
}

}  // namespace versatile
