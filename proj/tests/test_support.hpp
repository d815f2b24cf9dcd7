// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "versatile/versatile.hpp"

namespace testing_support {

using versatile::Rng;
using versatile::Shape;
using T = versatile::Tensor<double>;

inline std::vector<double> normals(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

inline T random_param(Rng& rng, Shape shape, double scale = 1.0) {
  const auto n = versatile::numel(shape);
  return T::parameter(std::move(shape), normals(rng, n, scale));
}

inline T random_const(Rng& rng, Shape shape, double scale = 1.0) {
  const auto n = versatile::numel(shape);
  return T(std::move(shape), normals(rng, n, scale));
}

/// Projects a tensor to a scalar with fixed random weights, so every output
/// element contributes to the checked gradient.
inline T project(const T& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return versatile::dot_constant(y, normals(rng, y.numel()));
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct GradReport {
  double max_rel = 0;
  std::string worst;
};

/// Central differences against the tape gradient for every element of every
/// input. `loss` must rebuild the graph from the inputs' current values.
inline GradReport gradcheck(std::vector<T> inputs, const std::function<T()>& loss, double h = 1e-6,
                            double floor = 1e-4) {
  for (auto& x : inputs) x.zero_grad();
  {
    versatile::Tape<double> tape;
    versatile::TapeScope<double> scope(tape);
    tape.backward(loss());
  }
  GradReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& x = inputs[i];
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    auto v = x.mutable_values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double keep = v[j];
      double fp, fm;
      {
        versatile::NoGradScope<double> ng;
        v[j] = keep + h;
        fp = loss().item();
        v[j] = keep - h;
        fm = loss().item();
      }
      v[j] = keep;
      const double numeric = (fp - fm) / (2 * h);
      const double rel = std::abs(analytic[j] - numeric) / std::max({std::abs(analytic[j]), std::abs(numeric), floor});
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst = "input " + std::to_string(i) + " element " + std::to_string(j) + ": analytic " +
                    std::to_string(analytic[j]) + " numeric " + std::to_string(numeric);
      }
    }
    x.zero_grad();
  }
  return rep;
}

/// Small VersatileLayer with random weights of unit-ish scale.
inline versatile::VersatileLayer<double> small_layer(std::uint64_t seed, std::size_t d, std::size_t d_hidden,
                                                     std::size_t experts, std::size_t top_k, std::size_t max_loops,
                                                     std::size_t d_expert = 0, double scale = 0.5) {
  Rng rng(seed);
  versatile::VersatileLayer<double> l;
  l.attention.wq = random_param(rng, {d, d}, scale);
  l.attention.wk = random_param(rng, {d, d}, scale);
  l.attention.wv = random_param(rng, {d, d}, scale);
  l.attention.wo = random_param(rng, {d, d}, scale);
  l.attention.norm_gain = T::parameter({d}, 1.0);
  l.attention.heads = 1;
  l.ffn.w_gate = random_param(rng, {d, d_hidden}, scale);
  l.ffn.w_up = random_param(rng, {d, d_hidden}, scale);
  l.ffn.w_down = random_param(rng, {d_hidden, d}, scale);
  l.ffn.norm_gain = T::parameter({d}, 1.0);
  l.router.w_g = random_param(rng, {d, experts}, scale);
  l.loop_head.w_loop = random_param(rng, {d, max_loops}, scale);
  l.views = versatile::build_expert_views(d_hidden, d_expert ? d_expert : d_hidden / experts, experts);
  l.options.top_k = top_k;
  return l;
}

/// Tiny run on a short synthetic corpus; a few steps take milliseconds.
inline versatile::RunConfig tiny_run(std::size_t steps = 12) {
  versatile::RunConfig c;
  c.model.vocab = 128;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.layers = 2;
  c.model.max_seq = 16;
  c.model.num_experts = 4;
  c.model.top_k = 2;
  c.model.max_loops = 3;
  c.train.steps = steps;
  c.train.batch_size = 2;
  c.train.seq_len = 16;
  c.train.seed = 99;
  c.train.eval_batches = 2;
  return c;
}

inline versatile::Corpus tiny_corpus() {
  versatile::SyntheticSpec s;
  s.length = 4000;
  return versatile::generate_synthetic(s);
}

}  // namespace testing_support
