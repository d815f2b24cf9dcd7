// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "versatile/fusion.hpp"

namespace versatile {

template <typename Real = double>
struct NamedParameter {
  std::string name;
  Tensor<Real> tensor;
  bool decay;  // matrices decay; norm gains do not
};

/// Token embedding -> stacked versatile layers -> final RMSNorm -> unembedding.
template <typename Real = double>
struct Model {
  ModelConfig config;
  Tensor<Real> token_embedding;     // [V, d]
  Tensor<Real> position_embedding;  // [max_seq, d]
  std::vector<VersatileLayer<Real>> layers;
  Tensor<Real> final_norm;  // [d]
  Tensor<Real> unembedding;  // [d, V]; undefined when tied

  /// Every trainable tensor, in a fixed order.
  std::vector<NamedParameter<Real>> parameters() const {
    std::vector<NamedParameter<Real>> out;
    out.push_back({"tok_emb", token_embedding, true});
    out.push_back({"pos_emb", position_embedding, true});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.push_back({p + "attn.wq", l.attention.wq, true});
      out.push_back({p + "attn.wk", l.attention.wk, true});
      out.push_back({p + "attn.wv", l.attention.wv, true});
      out.push_back({p + "attn.wo", l.attention.wo, true});
      out.push_back({p + "attn.norm", l.attention.norm_gain, false});
      out.push_back({p + "ffn.w_gate", l.ffn.w_gate, true});
      out.push_back({p + "ffn.w_up", l.ffn.w_up, true});
      out.push_back({p + "ffn.w_down", l.ffn.w_down, true});
      out.push_back({p + "ffn.norm", l.ffn.norm_gain, false});
      out.push_back({p + "router.w_g", l.router.w_g, true});
      out.push_back({p + "loop.w_loop", l.loop_head.w_loop, true});
    }
    out.push_back({"final_norm", final_norm, false});
    if (!config.tie_embeddings) out.push_back({"unembed", unembedding, true});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

inline LayerOptions layer_options(const ModelConfig& m, double tau_min) {
  LayerOptions o;
  o.top_k = m.top_k;
  o.shared_expert = m.shared_expert;
  o.soft_mode = m.soft_mode;
  o.lambda_threshold = m.lambda_threshold;
  o.infer_lambda = m.infer_lambda;
  o.tau_min = tau_min;
  return o;
}

template <typename Real>
Model<Real> make_model(const ModelConfig& m, std::uint64_t seed, double tau_min = 0.1) {
  Rng rng(seed);
  Model<Real> model;
  model.config = m;
  model.token_embedding = init::normal<Real>(rng, {m.vocab, m.d_model}, m.init_std);
  model.position_embedding = init::normal<Real>(rng, {m.max_seq, m.d_model}, m.init_std);
  const auto opts = layer_options(m, tau_min);
  for (std::size_t i = 0; i < m.layers; ++i) model.layers.push_back(make_layer<Real>(rng, m, opts));
  model.final_norm = init::ones<Real>(m.d_model);
  if (!m.tie_embeddings) model.unembedding = init::normal<Real>(rng, {m.d_model, m.vocab}, m.init_std);
  return model;
}

/// Token ids laid out [batch, seq].
struct TokenBatch {
  std::size_t batch = 0, seq = 0;
  std::vector<std::int32_t> ids;
};

template <typename Real = double>
struct ModelOutput {
  Tensor<Real> logits;  // [B, T, V]
  std::vector<LayerTrace> traces;
  Tensor<Real> aux_total;  // sum of per-layer load-balance losses (training)
};

namespace detail {

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& w) {
  const std::size_t R = w.dim(0), C = w.dim(1);
  Tensor<Real> out({C, R});
  auto o = out.mutable_values();
  auto v = w.values();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) o[c * R + r] = v[r * C + c];
  }
  detail::record(out, {&w}, [wn = w.node(), on = out.node(), R, C] {
    auto& g = wn->ensure_grad();
    for (std::size_t r = 0; r < R; ++r) {
      for (std::size_t c = 0; c < C; ++c) g[r * C + c] += on->grad[c * R + r];
    }
  });
  return out;
}

template <typename Real>
Tensor<Real> embed(const Model<Real>& model, const TokenBatch& batch) {
  if (batch.seq == 0 || batch.batch == 0) throw ContractError("model_forward: empty sequence");
  if (batch.seq > model.config.max_seq) {
    throw ContractError("model_forward: sequence length " + std::to_string(batch.seq) + " exceeds max_seq");
  }
  const auto tok = embedding(model.token_embedding, std::span<const std::int32_t>(batch.ids), {batch.batch, batch.seq});
  return add_positions(tok, model.position_embedding);
}

template <typename Real>
Tensor<Real> head(const Model<Real>& model, const Tensor<Real>& x) {
  const auto n = rms_norm(x, model.final_norm, Real(kNormEps));
  return matmul(n, model.config.tie_embeddings ? transpose(model.token_embedding) : model.unembedding);
}

}  // namespace detail

/// Training forward; records onto the active tape when one is set.
template <typename Real>
ModelOutput<Real> model_forward_train(const Model<Real>& model, const TokenBatch& batch, double tau, Rng& rng) {
  ModelOutput<Real> out;
  auto x = detail::embed(model, batch);
  for (const auto& layer : model.layers) {
    auto lo = layer_forward_train(x, layer, tau, rng);
    x = lo.y;
    out.aux_total = out.aux_total.defined() ? add(out.aux_total, lo.aux) : lo.aux;
    out.traces.push_back(std::move(lo.trace));
  }
  out.logits = detail::head(model, x);
  return out;
}

/// Inference forward with early exit and width pruning.
template <typename Real>
ModelOutput<Real> model_forward_infer(const Model<Real>& model, const TokenBatch& batch) {
  NoGradScope<Real> no_grad;
  ModelOutput<Real> out;
  auto x = detail::embed(model, batch);
  for (const auto& layer : model.layers) {
    auto lo = layer_forward_infer(x, layer, layer.options.lambda_threshold);
    x = lo.y;
    out.traces.push_back(std::move(lo.trace));
  }
  out.logits = detail::head(model, x);
  out.aux_total = Tensor<Real>({1});
  return out;
}

template <typename Real>
ModelOutput<Real> model_forward(const Model<Real>& model, const TokenBatch& batch, Mode mode, double tau, Rng& rng) {
  return mode == Mode::train ? model_forward_train(model, batch, tau, rng) : model_forward_infer(model, batch);
}

}  // namespace versatile
