// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <set>

#include "test_support.hpp"

using namespace versatile;
using namespace testing_support;

namespace {

FfnWeights<double> random_ffn(Rng& rng, std::size_t d, std::size_t dh, double scale = 0.5) {
  FfnWeights<double> w;
  w.w_gate = random_param(rng, {d, dh}, scale);
  w.w_up = random_param(rng, {d, dh}, scale);
  w.w_down = random_param(rng, {dh, d}, scale);
  w.norm_gain = random_param(rng, {d}, 1.0);
  return w;
}

RouterWeights<double> router_with_logit_rows(std::size_t d, std::size_t n, const std::vector<double>& col0) {
  // h = e_0, so logits equal row 0 of w_g
  std::vector<double> w(d * n, 0.0);
  for (std::size_t e = 0; e < n; ++e) w[e] = col0[e];
  return {T::parameter({d, n}, w)};
}

}  // namespace

TEST(Stride, ReferenceGeometry) {
  EXPECT_EQ(compute_stride(4096, 512, 8), 512u);
  EXPECT_EQ(compute_stride(10, 3, 4), 2u);
  EXPECT_EQ(compute_stride(64, 16, 1), 0u);
  EXPECT_THROW(compute_stride(8, 8, 2), ConfigError);
  EXPECT_THROW(compute_stride(8, 4, 0), ConfigError);
  EXPECT_THROW(compute_stride(8, 0, 2), ConfigError);
}

TEST(Views, ReferenceGeometryIsADisjointCover) {
  const auto v = build_expert_views(4096, 512, 8);
  ASSERT_EQ(v.size(), 8u);
  EXPECT_EQ(v[3].begin, 1536u);
  EXPECT_EQ(v[3].end(), 2048u);
  std::vector<int> hits(4096, 0);
  for (const auto& e : v) {
    for (std::size_t j = e.begin; j < e.end(); ++j) ++hits[j];
  }
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_TRUE(views_pairwise_disjoint(v));
}

TEST(Views, OverlapWhenExpertWiderThanStride) {
  const auto v = build_expert_views(10, 3, 4);
  const std::vector<std::size_t> begins{0, 2, 4, 6};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(v[k].begin, begins[k]);
    EXPECT_EQ(v[k].width, 3u);
  }
  EXPECT_FALSE(views_pairwise_disjoint(v));
  const auto two = build_expert_views(8, 4, 2);
  EXPECT_EQ(two[0].begin, 0u);
  EXPECT_EQ(two[1].begin, 4u);
  const auto one = build_expert_views(64, 16, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].begin, 0u);
}

TEST(Views, DisjointWheneverExpertFitsInStrideRandomized) {
  Rng rng(21);
  for (int i = 0; i < 500; ++i) {
    const std::size_t n = 1 + rng.below(8), dh = 2 + rng.below(64), de = 1 + rng.below(dh - 1);
    const auto v = build_expert_views(dh, de, n);
    const auto s = compute_stride(dh, de, n);
    for (const auto& e : v) EXPECT_LE(e.end(), dh);
    if (n > 1 && de <= s) {
      std::set<std::size_t> seen;
      for (const auto& e : v) {
        for (std::size_t j = e.begin; j < e.end(); ++j) EXPECT_TRUE(seen.insert(j).second);
      }
    }
  }
}

TEST(Expert, FullViewEqualsFfnForward) {
  Rng rng(22);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {2, 3, 4});
  const auto y = expert_forward(h, w, ExpertView{0, 0, 8});
  EXPECT_TRUE(bit_equal(y.values(), ffn_forward(h, w).values()));
}

TEST(Expert, ViewEqualsMaterializedSlice) {
  Rng rng(23);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {3, 4});
  const ExpertView v{0, 2, 4};
  EXPECT_TRUE(bit_equal(expert_forward(h, w, v, ViewKernel::fused).values(),
                        expert_forward(h, w, v, ViewKernel::materialized).values()));
}

TEST(Expert, GradientTouchesOnlyTheViewAndPassesFiniteDifferences) {
  Rng rng(24);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_param(rng, {3, 4});
  const ExpertView v{0, 2, 4};
  const auto r = gradcheck({h, w.w_gate, w.w_up, w.w_down, w.norm_gain},
                           [&] { return project(expert_forward(h, w, v)); });
  EXPECT_LT(r.max_rel, 1e-5) << r.worst;

  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(project(expert_forward(h, w, v)));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const bool inside = j >= 2 && j < 6;
      if (!inside) {
        EXPECT_EQ(w.w_gate.grad()[i * 8 + j], 0.0);
        EXPECT_EQ(w.w_up.grad()[i * 8 + j], 0.0);
        EXPECT_EQ(w.w_down.grad()[j * 4 + i], 0.0);
      } else {
        EXPECT_NE(w.w_gate.grad()[i * 8 + j], 0.0);
      }
    }
  }
}

TEST(Routing, TopKSelectionAndRenormalization) {
  T h({1, 4}, std::vector<double>{1, 0, 0, 0});
  const auto out = route_topk(h, router_with_logit_rows(4, 4, {3, 1, 1, 1}), 1);
  EXPECT_EQ(out.selected, (std::vector<std::size_t>{0}));
  EXPECT_EQ(out.gates[0], 1.0);
  const auto tie = route_topk(h, router_with_logit_rows(4, 4, {2, 2, 0, 0}), 1);
  EXPECT_EQ(tie.selected, (std::vector<std::size_t>{0}));
  EXPECT_THROW(route_topk(h, router_with_logit_rows(4, 4, {0, 0, 0, 0}), 5), ConfigError);
  EXPECT_THROW(route_topk(h, router_with_logit_rows(4, 4, {0, 0, 0, 0}), 0), ConfigError);
}

TEST(Routing, KEqualsNKeepsFullSoftmax) {
  Rng rng(25);
  auto h = random_const(rng, {5, 3});
  RouterWeights<double> r{random_param(rng, {3, 2})};
  const auto out = route_topk(h, r, 2);
  for (std::size_t i = 0; i < out.probs.numel(); ++i) EXPECT_NEAR(out.gates[i], out.probs[i], 1e-15);
}

TEST(Routing, SelectedGatesSumToOneAndAreLargestLogits) {
  Rng rng(26);
  auto h = random_const(rng, {20, 6});
  RouterWeights<double> r{random_param(rng, {6, 5})};
  const auto out = route_topk(h, r, 2);
  const auto logits = matmul(h, r.w_g);
  for (std::size_t t = 0; t < 20; ++t) {
    double s = 0;
    for (std::size_t e = 0; e < 5; ++e) {
      EXPECT_GE(out.gates[t * 5 + e], 0.0);
      s += out.gates[t * 5 + e];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    const auto a = out.selected[t * 2], b = out.selected[t * 2 + 1];
    for (std::size_t e = 0; e < 5; ++e) {
      if (e != a && e != b) {
        EXPECT_GE(logits[t * 5 + b], logits[t * 5 + e]);
      }
    }
    EXPECT_GE(logits[t * 5 + a], logits[t * 5 + b]);
  }
}

TEST(WidthForward, ZeroDownProjectionIsIdentity) {
  Rng rng(27);
  auto w = random_ffn(rng, 4, 8);
  std::fill(w.w_down.mutable_values().begin(), w.w_down.mutable_values().end(), 0.0);
  auto h = random_const(rng, {2, 3, 4});
  RouterWeights<double> r{random_param(rng, {4, 4})};
  const auto res = width_forward(h, w, build_expert_views(8, 2, 4), r, 2);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(res.y[i], h[i], 1e-15);
}

TEST(WidthForward, SingleExpertEqualsThatExpertExactly) {
  Rng rng(28);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {6, 4});
  RouterWeights<double> r{random_param(rng, {4, 4})};
  const auto views = build_expert_views(8, 2, 4);
  const auto res = width_forward(h, w, views, r, 1);
  for (std::size_t t = 0; t < 6; ++t) {
    const auto e = res.outcome.selected[t];
    const auto y = expert_forward(gather_rows(h, {t}), w, views[e]);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(res.y[t * 4 + j], y[j]);
  }
}

TEST(WidthForward, EqualsBruteForceSumOverMaterializedExperts) {
  Rng rng(29);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {7, 4});
  RouterWeights<double> r{random_param(rng, {4, 4})};
  const auto views = build_expert_views(8, 2, 4);
  const auto res = width_forward(h, w, views, r, 2);
  for (std::size_t t = 0; t < 7; ++t) {
    const auto row = gather_rows(h, {t});
    std::vector<double> acc(4, 0.0);
    for (std::size_t e = 0; e < 4; ++e) {
      const double g = res.outcome.gates[t * 4 + e];
      if (g == 0.0) continue;
      const auto y = expert_forward(row, w, views[e], ViewKernel::materialized);
      for (std::size_t j = 0; j < 4; ++j) acc[j] += g * y[j];
    }
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(res.y[t * 4 + j], acc[j]);
  }
}

TEST(WidthForward, GradientMatchesFiniteDifferences) {
  Rng rng(30);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_param(rng, {5, 4});
  RouterWeights<double> r{random_param(rng, {4, 4})};
  const auto views = build_expert_views(8, 2, 4);
  const auto rep = gradcheck({h, w.w_gate, w.w_up, w.w_down, w.norm_gain, r.w_g},
                             [&] { return project(width_forward(h, w, views, r, 2).y); });
  EXPECT_LT(rep.max_rel, 1e-5) << rep.worst;
}

TEST(WidthForward, SharedExpertAddsUngatedFullBranch) {
  Rng rng(31);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {3, 4});
  RouterWeights<double> r{random_param(rng, {4, 4})};
  const auto views = build_expert_views(8, 2, 4);
  const auto plain = width_forward(h, w, views, r, 2);
  const auto shared = width_forward(h, w, views, r, 2, true);
  const auto full = ffn_forward(h, w);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_NEAR(shared.y[i] - plain.y[i], full[i] - h[i], 1e-12);
}

TEST(LoadBalance, UniformRoutingGivesOne) {
  RoutingOutcome<double> o;
  o.experts = 4;
  o.tokens = 4;
  o.top_k = 1;
  o.probs = T::parameter({4, 4}, 0.25);
  o.load_fraction.assign(4, 0.25);
  EXPECT_NEAR(load_balance_loss(o).item(), 1.0, 1e-15);
}

TEST(LoadBalance, CollapseExceedsUniform) {
  RoutingOutcome<double> o;
  o.experts = 4;
  o.tokens = 2;
  o.top_k = 1;
  o.probs = T::parameter({2, 4}, std::vector<double>{0.7, 0.1, 0.1, 0.1, 0.9, 0.05, 0.03, 0.02});
  o.load_fraction = {1.0, 0, 0, 0};
  EXPECT_NEAR(load_balance_loss(o).item(), 4 * 0.8, 1e-15);
  EXPECT_GT(load_balance_loss(o).item(), 1.0);
}

TEST(LoadBalance, MatchesDirectSummation) {
  Rng rng(32);
  auto h = random_const(rng, {9, 5});
  RouterWeights<double> r{random_param(rng, {5, 4})};
  const auto out = route_topk(h, r, 2);
  double expect = 0;
  for (std::size_t e = 0; e < 4; ++e) {
    std::size_t hits = 0;
    for (auto s : out.selected) hits += s == e;
    double p = 0;
    for (std::size_t t = 0; t < 9; ++t) p += out.probs[t * 4 + e];
    expect += (static_cast<double>(hits) / 18.0) * (p / 9.0);
  }
  EXPECT_NEAR(load_balance_loss(out).item(), 4 * expect, 1e-12);
  EXPECT_GE(load_balance_loss(out).item(), 0.0);
}

TEST(Census, VirtualExpertsAddOnlyTheRouter) {
  ModelConfig m;
  m.vocab = 11;
  m.d_model = 8;
  m.heads = 2;
  m.layers = 2;
  m.max_seq = 6;
  m.num_experts = 4;
  m.max_loops = 3;
  auto with = make_model<double>(m, 1);
  std::size_t ffn = 0, router = 0, loop = 0;
  for (const auto& l : with.layers) {
    ffn += l.ffn.w_gate.numel() + l.ffn.w_up.numel() + l.ffn.w_down.numel();
    router += l.router.w_g.numel();
    loop += l.loop_head.w_loop.numel();
  }
  EXPECT_EQ(ffn, 2u * 3 * 8 * 32);
  EXPECT_EQ(router, 2u * 8 * 4);
  EXPECT_EQ(loop, 2u * 8 * 3);
}
