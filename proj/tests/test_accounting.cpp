// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace versatile;
using namespace versatile::accounting;
using namespace testing_support;

namespace {

const BudgetReport& row(const std::vector<BudgetReport>& rows, const std::string& name) {
  for (const auto& r : rows)
    if (r.variant == name) return r;
  throw std::out_of_range(name);
}

struct TableCell {
  const char* variant;
  double params, flops;
};

// Efficiency table, 354M and 720M blocks.
const TableCell kTable354[] = {{"Base", 354.71, 377.49},   {"MoE", 543.59, 471.86},     {"2-Loop", 354.71, 754.98},
                               {"4-Loop", 354.71, 1509.96}, {"6-Loop", 354.71, 2264.96}};
const TableCell kTable720[] = {{"Base", 720.81, 849.35},   {"MoE", 1145.69, 1061.69},   {"2-Loop", 720.81, 1698.70},
                               {"4-Loop", 720.81, 3397.40}, {"6-Loop", 720.81, 5096.10}};

LayerTrace trace_with_loops(std::vector<std::uint32_t> loops) {
  LayerTrace t;
  t.loops = std::move(loops);
  return t;
}

}  // namespace

TEST(Accounting, ReproducesPublishedTable354) {
  const auto rows = budget_table(spec_354m());
  for (const auto& c : kTable354) {
    EXPECT_NEAR(row(rows, c.variant).params, c.params, 0.05) << c.variant;
    EXPECT_NEAR(row(rows, c.variant).ffn_flops, c.flops, 0.05) << c.variant;
  }
  EXPECT_NEAR(row(rows, "VersatileFFN").params, 354.90, 0.05);
}

TEST(Accounting, ReproducesPublishedTable720) {
  const auto rows = budget_table(spec_720m());
  for (const auto& c : kTable720) {
    EXPECT_NEAR(row(rows, c.variant).params, c.params, 0.05) << c.variant;
    EXPECT_NEAR(row(rows, c.variant).ffn_flops, c.flops, 0.05) << c.variant;
  }
  EXPECT_NEAR(row(rows, "VersatileFFN").params, 721.09, 0.05);
}

TEST(Accounting, DenseFlopsMatchIndependentArithmetic) {
  // 2 FLOPs per MAC, three d x d_hidden matrices per layer.
  const double macs = 3.0 * 1024 * 4096 * 15;
  EXPECT_DOUBLE_EQ(ffn_flops_dense(spec_354m()) * 1e6, 2 * macs);
  EXPECT_DOUBLE_EQ(ffn_flops_kloop(spec_354m(), 6) * 1e6, 6 * 377487360.0);
  ArchSpec unit{1, 1, 1, 1, 0, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(ffn_flops_dense(unit), 6e-6);
  EXPECT_THROW(ffn_flops_kloop(unit, 0), ContractError);
}

TEST(Accounting, DegenerateMoeAndVersatileCases) {
  auto s = spec_354m();
  s.top_k = 0;
  EXPECT_EQ(ffn_flops_moe(s), ffn_flops_dense(s));
  auto z = spec_354m();
  z.experts = 0;
  EXPECT_EQ(moe_extra_params(z), 0.0);
  z.max_loops = 0;
  EXPECT_EQ(versatile_extra_params(z), 0.0);
}

TEST(Accounting, RuntimeFormula) {
  EXPECT_NEAR(versatile_runtime_flops(377.49, 471.86, 1.0, 0.0), 377.49, 1e-12);
  EXPECT_NEAR(versatile_runtime_flops(377.49, 471.86, 3.0, 0.5), 1179.655, 1e-9);
  EXPECT_THROW(versatile_runtime_flops(377.49, 471.86, 0.5, 0.0), ContractError);
  EXPECT_THROW(versatile_runtime_flops(377.49, 471.86, 2.0, 1.5), ContractError);
  EXPECT_THROW(versatile_runtime_flops(377.49, 471.86, 5.0, 0.0, 4), ContractError);
}

TEST(Accounting, RuntimeStatsCounting) {
  auto all_max = collect_runtime_stats({trace_with_loops({4, 4, 4})}, 4);
  EXPECT_EQ(all_max.n_mean, 4.0);
  EXPECT_EQ(all_max.p_frac, 0.0);
  auto all_one = collect_runtime_stats({trace_with_loops({1, 1}), trace_with_loops({1})}, 4);
  EXPECT_EQ(all_one.n_mean, 1.0);
  EXPECT_EQ(all_one.p_frac, 1.0);
  EXPECT_EQ(all_one.samples, 3u);
  auto uniform = collect_runtime_stats({trace_with_loops({1, 2}), trace_with_loops({3, 4})}, 4);
  EXPECT_EQ(uniform.n_mean, 2.5);
  EXPECT_EQ(uniform.p_frac, 0.75);
  EXPECT_THROW(collect_runtime_stats({}, 4), ContractError);
  EXPECT_THROW(collect_runtime_stats({LayerTrace{}}, 4), ContractError);
}

TEST(Accounting, SpecValidation) {
  auto s = spec_354m();
  s.d_expert = s.d_hidden + 1;
  EXPECT_THROW(budget_table(s), ConfigError);
  s = spec_354m();
  s.layers = 0;
  EXPECT_THROW(budget_table(s), ConfigError);
}

TEST(Accounting, TableAndCsvFormats) {
  const auto rows = budget_table(spec_354m());
  const auto table = format_table(rows);
  EXPECT_NE(table.find("377.49"), std::string::npos);
  EXPECT_NE(table.find("2264.92"), std::string::npos);
  const auto csv = format_csv(rows);
  EXPECT_EQ(csv.rfind("variant,params_millions,ffn_flops_millions\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST(Accounting, CensusMatchesInstantiatedModel) {
  for (std::size_t layers : {1u, 2u, 3u}) {
    for (bool tied : {false, true}) {
      ModelConfig m;
      m.vocab = 11;
      m.d_model = 8;
      m.heads = 2;
      m.layers = layers;
      m.max_seq = 5;
      m.num_experts = 3;
      m.top_k = 2;
      m.max_loops = 3;
      m.tie_embeddings = tied;
      const auto census = count_params(m);
      std::size_t scalars = 0;
      const auto model = make_model<double>(m, 1);
      for (const auto& p : model.parameters()) scalars += p.tensor.numel();
      EXPECT_EQ(census.total(), scalars);
      EXPECT_EQ(census.total() - census.base(), layers * 8 * (3 + 3));
    }
  }
}

TEST(Accounting, InstrumentedFlopsMatchFormulaOnRandomLayers) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto l = small_layer(seed, 8, 16, 4, 2, 4, 0, 1.5);
    Rng rng(seed + 100);
    auto x = random_const(rng, {3, 7, 8});
    const auto out = layer_forward_infer(x, l, 0.0);
    ArchSpec s{1, 8, 16, 1, 0, 4, 2, l.views.front().width, 4};
    const auto st = collect_runtime_stats({out.trace}, 4);
    const double tokens = 21.0;
    const double formula = versatile_runtime_flops(ffn_flops_dense(s), ffn_flops_moe(s), st.n_mean, st.p_frac, 4);
    EXPECT_NEAR(out.trace.counters.ffn_flops / tokens / 1e6, formula, 1e-12 * formula) << seed;
  }
}
