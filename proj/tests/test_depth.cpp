// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

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

/// Decision with given probabilities; choice and E[L] derived from them.
LoopDecision<double> decision_from(const T& p) {
  LoopDecision<double> d;
  d.probs = p;
  d.max_loops = p.last_dim();
  d.choice.resize(p.rows());
  for (std::size_t r = 0; r < p.rows(); ++r) d.choice[r] = argmax_row(p.values().subspan(r * d.max_loops, d.max_loops)) + 1;
  d.expected = expected_count(p);
  return d;
}

}  // namespace

TEST(Temperature, EndpointsMidpointAndMonotone) {
  const TemperatureSchedule s;
  EXPECT_EQ(temperature_at(s, 0, 1000), 5.0);
  EXPECT_EQ(temperature_at(s, 800, 1000), 0.1);
  EXPECT_EQ(temperature_at(s, 1000, 1000), 0.1);
  EXPECT_NEAR(temperature_at(s, 400, 1000), std::sqrt(0.5), 1e-12);
  double prev = temperature_at(s, 0, 1000);
  for (std::size_t t = 1; t <= 1000; ++t) {
    const double cur = temperature_at(s, t, 1000);
    EXPECT_LE(cur, prev);
    EXPECT_GE(cur, 0.1);
    prev = cur;
  }
  EXPECT_THROW(temperature_at(s, 1001, 1000), ContractError);
  EXPECT_THROW(temperature_at({0.05, 0.1, 0.8}, 0, 10), ConfigError);
}

TEST(PredictLoops, UniformLogitsInInferMode) {
  LoopPredictorWeights<double> w{T::parameter({3, 4}, 0.0)};
  Rng rng(1);
  auto h = T({2, 3}, 1.0);
  const auto d = predict_loops(h, w, 0.1, rng, Mode::infer);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(d.probs[i], 0.25, 1e-15);
  EXPECT_NEAR(d.expected[0], 2.5, 1e-15);
  EXPECT_EQ(d.choice[0], 1u);
}

TEST(PredictLoops, SaturatesAtMaximum) {
  std::vector<double> wv(3 * 4, 0.0);
  wv[3] = 10.0;  // row 0, column L_max - 1
  LoopPredictorWeights<double> w{T::parameter({3, 4}, wv)};
  Rng rng(2);
  const auto d = predict_loops(T({1, 3}, std::vector<double>{1, 0, 0}), w, 0.1, rng, Mode::infer);
  EXPECT_EQ(d.choice[0], 4u);
  EXPECT_NEAR(d.expected[0], 4.0, 1e-12);
}

TEST(PredictLoops, TrainModeSimplexAndExpectedCount) {
  Rng wr(3);
  LoopPredictorWeights<double> w{random_param(wr, {5, 4})};
  auto h = random_const(wr, {2, 6, 5});
  Rng rng(4);
  const auto d = predict_loops(h, w, 1.3, rng, Mode::train);
  ASSERT_EQ(d.rows(), 12u);
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0, e = 0;
    for (std::size_t l = 0; l < 4; ++l) {
      const double p = d.probs[r * 4 + l];
      EXPECT_GE(p, 0.0);
      s += p;
      e += static_cast<double>(l + 1) * p;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_NEAR(d.expected[r], e, 1e-12);
    EXPECT_GE(d.expected[r], 1.0);
    EXPECT_LE(d.expected[r], 4.0);
  }
}

TEST(PredictLoops, TrainNoiseIsGumbelOnLogits) {
  Rng wr(5);
  LoopPredictorWeights<double> w{random_param(wr, {3, 4})};
  auto h = random_const(wr, {1, 3});
  Rng rng(6), replay(6);
  const double tau = 0.7;
  const auto d = predict_loops(h, w, tau, rng, Mode::train);
  const auto logits = matmul(h, w.w_loop);
  std::vector<double> z(4);
  double mx = -1e300, total = 0;
  for (std::size_t l = 0; l < 4; ++l) {
    z[l] = (logits[l] + replay.gumbel()) / tau;
    mx = std::max(mx, z[l]);
  }
  for (auto& v : z) total += std::exp(v - mx);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_NEAR(d.probs[l], std::exp(z[l] - mx) / total, 1e-14);
}

TEST(PredictLoops, GumbelArgmaxSamplesTheSoftmax) {
  std::vector<double> wv{0.5, -0.2, 1.0};
  LoopPredictorWeights<double> w{T::parameter({1, 3}, wv)};
  Rng rng(7);
  const std::size_t n = 60000;
  std::vector<double> counts(3, 0);
  auto h = T({n, 1}, 1.0);
  const auto d = predict_loops(h, w, 1.0, rng, Mode::train);
  for (auto c : d.choice) counts[c - 1] += 1;
  const double z = std::exp(0.5) + std::exp(-0.2) + std::exp(1.0);
  EXPECT_NEAR(counts[0] / n, std::exp(0.5) / z, 0.01);
  EXPECT_NEAR(counts[1] / n, std::exp(-0.2) / z, 0.01);
  EXPECT_NEAR(counts[2] / n, std::exp(1.0) / z, 0.01);
}

TEST(Recurse, ZeroDownIsFixedPoint) {
  Rng rng(8);
  auto w = random_ffn(rng, 4, 8);
  std::fill(w.w_down.mutable_values().begin(), w.w_down.mutable_values().end(), 0.0);
  auto h = random_const(rng, {3, 4});
  for (const auto& s : recurse(h, w, 3)) EXPECT_TRUE(bit_equal(s.values(), h.values()));
}

TEST(Recurse, ComposesIndependentCalls) {
  Rng rng(9);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {3, 4});
  const auto states = recurse(h, w, 3);
  const auto f1 = ffn_forward(h, w), f2 = ffn_forward(f1, w), f3 = ffn_forward(f2, w);
  EXPECT_TRUE(bit_equal(states[0].values(), f1.values()));
  EXPECT_TRUE(bit_equal(states[2].values(), f3.values()));
  EXPECT_EQ(recurse(h, w, 1).size(), 1u);
  EXPECT_THROW(recurse(h, w, 0), ConfigError);
}

TEST(DepthTrain, ForwardIsHardSelection) {
  Rng rng(10);
  auto w = random_ffn(rng, 4, 8);
  for (int trial = 0; trial < 20; ++trial) {
    auto h = random_const(rng, {5, 4});
    const auto d = decision_from(softmax(random_const(rng, {5, 3}, 2.0), 1));
    const auto y = depth_forward_train(h, w, d);
    const auto states = recurse(h, w, 3);
    for (std::size_t r = 0; r < 5; ++r) {
      const auto& s = states[d.choice[r] - 1];
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y[r * 4 + j], s[r * 4 + j]);
    }
  }
}

TEST(DepthTrain, OneHotCollapsesBothModes) {
  Rng rng(11);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {2, 4});
  const auto d = decision_from(T({2, 3}, std::vector<double>{0, 1, 0, 0, 1, 0}));
  const auto hard = depth_forward_train(h, w, d, false);
  const auto states = recurse(h, w, 3);
  EXPECT_TRUE(bit_equal(hard.values(), states[1].values()));
  EXPECT_EQ(d.expected[0], 2.0);
}

TEST(DepthTrain, StraightThroughBackwardEqualsSoftBackward) {
  Rng rng(12);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_param(rng, {4, 4});
  auto z = random_param(rng, {4, 3});
  auto run = [&](bool soft) {
    for (auto* t : {&h, &z, &w.w_gate, &w.w_up, &w.w_down, &w.norm_gain}) t->zero_grad();
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto d = decision_from(softmax(z, 1));
    tape.backward(project(depth_forward_train(h, w, d, soft)));
    std::vector<std::vector<double>> g;
    for (auto* t : {&h, &z, &w.w_gate, &w.w_up, &w.w_down, &w.norm_gain}) g.emplace_back(t->grad().begin(), t->grad().end());
    return g;
  };
  const auto ste = run(false), soft = run(true);
  for (std::size_t i = 0; i < ste.size(); ++i) {
    for (std::size_t j = 0; j < ste[i].size(); ++j) EXPECT_NEAR(ste[i][j], soft[i][j], 1e-12);
  }
}

TEST(DepthTrain, SoftModeGradientMatchesFiniteDifferences) {
  Rng rng(13);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_param(rng, {3, 4});
  auto z = random_param(rng, {3, 3});
  const auto rep = gradcheck({h, z, w.w_gate, w.w_up, w.w_down, w.norm_gain}, [&] {
    return project(depth_forward_train(h, w, decision_from(softmax(z, 1)), true));
  });
  EXPECT_LT(rep.max_rel, 1e-5) << rep.worst;
}

TEST(DepthInfer, AppliesExactlyChosenLoopsAndMatchesTrain) {
  Rng rng(14);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {6, 4});
  const auto d = decision_from(T({6, 3}, std::vector<double>{.8, .1, .1, .1, .8, .1, .1, .1, .8, .6, .3, .1, .2, .2, .6, .1, .7, .2}));
  FfnCounters c;
  const auto inf = depth_forward_infer(h, w, d, &c);
  const auto tr = depth_forward_train(h, w, d);
  EXPECT_TRUE(bit_equal(inf.y.values(), tr.values()));
  std::uint64_t total = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_EQ(inf.applications[r], d.choice[r]);
    total += d.choice[r];
  }
  EXPECT_EQ(c.full_ffn_rows, total);
}

TEST(DepthInfer, MixedBatchTokensMatchSoloRuns) {
  Rng rng(15);
  auto w = random_ffn(rng, 4, 8);
  auto h = random_const(rng, {4, 4});
  const auto d = decision_from(T({4, 3}, std::vector<double>{.9, .05, .05, .05, .05, .9, .9, .05, .05, .05, .05, .9}));
  const auto mixed = depth_forward_infer(h, w, d);
  for (std::size_t r : {0u, 2u}) {
    auto solo_d = decision_from(T({1, 3}, std::vector<double>{.9, .05, .05}));
    const auto solo = depth_forward_infer(gather_rows(h, {r}), w, solo_d);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(mixed.y[r * 4 + j], solo.y[j]);
  }
}
