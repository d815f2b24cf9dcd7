// SPDX-License-Identifier: Apache-2.0
//
// Transformer pieces that the versatile layer leaves unchanged: pre-norm
// causal self-attention, the SwiGLU feed-forward transform with its residual,
// and the next-token loss.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "versatile/instrument.hpp"
#include "versatile/ops.hpp"

namespace versatile {

inline constexpr double kNormEps = 1e-5;

/// Gated FFN weights. w_gate and w_up play the projection role, w_down the
/// output role; all three share the hidden extent.
template <typename Real = double>
struct FfnWeights {
  Tensor<Real> w_gate;     // [d, d_hidden]
  Tensor<Real> w_up;       // [d, d_hidden]
  Tensor<Real> w_down;     // [d_hidden, d]
  Tensor<Real> norm_gain;  // [d]

  std::size_t d() const { return w_gate.dim(0); }
  std::size_t hidden() const { return w_gate.dim(1); }

  void validate() const {
    if (w_gate.shape() != w_up.shape() || w_down.rank() != 2 || w_down.dim(0) != hidden() ||
        w_down.dim(1) != d() || norm_gain.numel() != d()) {
      throw DimensionError("FfnWeights: inconsistent shapes gate " + to_string(w_gate.shape()) + " up " +
                           to_string(w_up.shape()) + " down " + to_string(w_down.shape()));
    }
  }
};

template <typename Real = double>
struct AttentionWeights {
  Tensor<Real> wq, wk, wv, wo;  // [d, d] each; heads split the columns of wq/wk/wv
  Tensor<Real> norm_gain;       // [d]
  std::size_t heads = 1;

  std::size_t d() const { return wq.dim(0); }
};

namespace init {

template <typename Real>
Tensor<Real> normal(Rng& rng, Shape shape, double stddev) {
  std::vector<Real> values(numel(shape));
  for (auto& v : values) v = static_cast<Real>(stddev * rng.normal());
  return Tensor<Real>::parameter(std::move(shape), std::move(values));
}

template <typename Real>
Tensor<Real> ones(std::size_t n) {
  return Tensor<Real>::parameter({n}, Real{1});
}

}  // namespace init

template <typename Real>
FfnWeights<Real> make_ffn(Rng& rng, std::size_t d, std::size_t d_hidden, double stddev = 0.02) {
  FfnWeights<Real> w{init::normal<Real>(rng, {d, d_hidden}, stddev), init::normal<Real>(rng, {d, d_hidden}, stddev),
                     init::normal<Real>(rng, {d_hidden, d}, stddev), init::ones<Real>(d)};
  return w;
}

template <typename Real>
AttentionWeights<Real> make_attention(Rng& rng, std::size_t d, std::size_t heads, double stddev = 0.02) {
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide d=" + std::to_string(d));
  }
  AttentionWeights<Real> w;
  w.wq = init::normal<Real>(rng, {d, d}, stddev);
  w.wk = init::normal<Real>(rng, {d, d}, stddev);
  w.wv = init::normal<Real>(rng, {d, d}, stddev);
  w.wo = init::normal<Real>(rng, {d, d}, stddev);
  w.norm_gain = init::ones<Real>(d);
  w.heads = heads;
  return w;
}

/// H = x + Attention(RMSNorm(x)) with a causal mask.
template <typename Real>
Tensor<Real> attention_block(const Tensor<Real>& x, const AttentionWeights<Real>& w) {
  if (x.rank() != 3) throw DimensionError("attention_block expects [B,T,d], got " + to_string(x.shape()));
  const auto n = rms_norm(x, w.norm_gain, Real(kNormEps));
  const auto ctx = causal_attention(matmul(n, w.wq), matmul(n, w.wk), matmul(n, w.wv), w.heads);
  return add(x, matmul(ctx, w.wo));
}

/// Non-residual part of the FFN on already-normalized rows, restricted to the
/// hidden units [begin, begin + width). The full range uses plain matmuls.
template <typename Real>
Tensor<Real> ffn_branch(const Tensor<Real>& normed, const FfnWeights<Real>& w, std::size_t begin, std::size_t width) {
  if (begin == 0 && width == w.hidden()) {
    const auto act = mul(silu(matmul(normed, w.w_gate)), matmul(normed, w.w_up));
    return matmul(act, w.w_down);
  }
  const auto act = mul(silu(matmul_cols(normed, w.w_gate, begin, width)), matmul_cols(normed, w.w_up, begin, width));
  return matmul_rows(act, w.w_down, begin, width);
}

/// F(h) = h + W_down (silu(W_gate n) * (W_up n)), n = RMSNorm(h).
template <typename Real>
Tensor<Real> ffn_forward(const Tensor<Real>& h, const FfnWeights<Real>& w, FfnCounters* counters = nullptr) {
  if (h.last_dim() != w.d()) {
    throw DimensionError("ffn_forward: input " + to_string(h.shape()) + " for d=" + std::to_string(w.d()));
  }
  const auto n = rms_norm(h, w.norm_gain, Real(kNormEps));
  if (counters) counters->add_full(h.rows(), w.d(), w.hidden());
  return add(h, ffn_branch(n, w, 0, w.hidden()));
}

/// Mean next-token cross entropy; position T-1 has no target and is skipped.
template <typename Real>
Tensor<Real> lm_loss(const Tensor<Real>& logits, std::span<const std::int32_t> tokens) {
  return next_token_cross_entropy(logits, tokens);
}

}  // namespace versatile
