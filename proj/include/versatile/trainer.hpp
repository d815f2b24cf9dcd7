// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "versatile/accounting.hpp"
#include "versatile/checkpoint.hpp"
#include "versatile/data.hpp"
#include "versatile/metrics.hpp"
#include "versatile/optim.hpp"
#include "versatile/stats.hpp"

namespace versatile {

/// Non-finite loss or gradient; `snapshot` holds the step's state.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, nlohmann::ordered_json snapshot)
      : std::runtime_error(what), snapshot(std::move(snapshot)) {}
  nlohmann::ordered_json snapshot;
};

struct Schedules {
  LrSchedule lr;
  TemperatureSchedule tau;
  double aux_coef = 1e-5;
};

inline constexpr std::size_t kLambdaBins = 10;
using LambdaHistogram = std::array<std::uint64_t, kLambdaBins>;

inline void add_to_histogram(LambdaHistogram& h, double lambda) {
  auto bin = static_cast<std::size_t>(lambda * static_cast<double>(kLambdaBins));
  h[std::min(bin, kLambdaBins - 1)] += 1;
}

struct StepMetrics {
  MetricsRecord record;
  double lm_loss = 0;
  double clipped_grad_norm = 0;
  LambdaHistogram lambda_histogram{};
  double lambda_min = 0, lambda_max = 0;
};

inline Schedules make_schedules(const TrainConfig& t) {
  Schedules s;
  s.lr = {t.peak_lr, t.warmup_frac, t.lr_floor_frac, t.steps};
  s.tau = {t.tau_init, t.tau_min, t.tau_decay_frac};
  s.aux_coef = t.aux_coef;
  return s;
}

inline AdamWConfig adamw_config(const TrainConfig& t) {
  return {t.adam_beta1, t.adam_beta2, t.adam_eps, t.weight_decay, t.clip_norm};
}

/// One optimizer update. The schedules are evaluated at optim.step, the
/// number of updates already taken.
template <typename Real>
StepMetrics train_step(Model<Real>& model, const TokenBatch& batch, OptimState<Real>& optim, const Schedules& s,
                       Rng& rng) {
  const std::size_t step = std::min(optim.step, s.lr.total_steps);
  const double lr = lr_at(s.lr, step);
  const double tau = temperature_at(s.tau, step, s.lr.total_steps);

  StepMetrics sm;
  auto& rec = sm.record;
  auto params = model.parameters();
  for (auto& p : params) p.tensor.zero_grad();
  {
    Tape<Real> tape;
    TapeScope<Real> scope(tape);
    const auto out = model_forward_train(model, batch, tau, rng);
    const auto lm = lm_loss(out.logits, std::span<const std::int32_t>(batch.ids));
    const auto total = add(lm, scale(out.aux_total, static_cast<Real>(s.aux_coef)));
    sm.lm_loss = static_cast<double>(lm.item());
    rec.loss = static_cast<double>(total.item());
    rec.aux_loss = static_cast<double>(out.aux_total.item());
    rec.lr = lr;
    rec.tau = tau;
    sm.lambda_min = 1.0;
    sm.lambda_max = 0.0;
    for (const auto& tr : out.traces) {
      rec.mean_expected_loops.push_back(tr.mean_expected_loops());
      rec.mean_lambda.push_back(tr.mean_lambda());
      rec.expert_load.push_back(tr.expert_counts);
      for (auto l : tr.lambda) {
        add_to_histogram(sm.lambda_histogram, l);
        sm.lambda_min = std::min(sm.lambda_min, l);
        sm.lambda_max = std::max(sm.lambda_max, l);
      }
    }
    if (!std::isfinite(rec.loss)) {
      throw NumericError("non-finite loss at step " + std::to_string(optim.step + 1),
                         {{"step", optim.step + 1}, {"loss", std::to_string(rec.loss)},
                          {"lm_loss", std::to_string(sm.lm_loss)}, {"aux_loss", std::to_string(rec.aux_loss)},
                          {"lr", lr}, {"tau", tau}});
    }
    tape.backward(total);
  }
  rec.grad_norm = clip_grad_norm(params, optim.hp.clip_norm);
  if (!std::isfinite(rec.grad_norm)) {
    throw NumericError("non-finite gradient at step " + std::to_string(optim.step + 1),
                       {{"step", optim.step + 1}, {"loss", rec.loss}, {"lr", lr}, {"tau", tau}});
  }
  sm.clipped_grad_norm = global_grad_norm(params);
  adamw_step(params, optim, lr);
  for (auto& p : params) p.tensor.zero_grad();
  rec.step = optim.step;
  return sm;
}

// ----------------------------------------------------------------- eval

struct EvalReport {
  double loss = 0;
  std::size_t tokens = 0;
  std::vector<double> mean_loops;           // per layer, executed loop count
  std::vector<double> mean_expected_loops;  // per layer
  std::vector<double> mean_lambda;          // per layer
  LambdaHistogram lambda_histogram{};
  std::vector<std::vector<std::uint64_t>> expert_load;
  accounting::RuntimeStats runtime;
  double runtime_flops = 0;       // millions per token, from (n_mean, p_frac)
  double instrumented_flops = 0;  // millions per token, from the counters
  std::uint64_t early_exit_mismatches = 0;
  std::uint64_t width_evaluated = 0, width_pruned = 0;
  std::optional<double> spearman;  // hard label of the predicted byte vs mean loops

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["loss"] = loss;
    j["tokens"] = tokens;
    j["mean_loops_per_layer"] = mean_loops;
    j["mean_expected_loops_per_layer"] = mean_expected_loops;
    j["mean_lambda_per_layer"] = mean_lambda;
    j["lambda_histogram"] = lambda_histogram;
    j["expert_load"] = expert_load;
    j["n_mean"] = runtime.n_mean;
    j["p_frac"] = runtime.p_frac;
    j["runtime_flops_millions"] = runtime_flops;
    j["instrumented_flops_millions"] = instrumented_flops;
    j["early_exit_mismatches"] = early_exit_mismatches;
    j["width_evaluated_tokens"] = width_evaluated;
    j["width_pruned_tokens"] = width_pruned;
    if (spearman) j["spearman_hard_vs_loops"] = *spearman;
    return j;
  }
};

/// Infer-mode pass over tiled windows of [begin, end).
template <typename Real>
EvalReport evaluate(const Model<Real>& model, const Corpus& corpus, std::size_t begin, std::size_t end,
                    std::size_t seq, std::size_t batch_size, std::size_t max_batches) {
  auto starts = tile_windows(begin, end, seq);
  if (starts.size() > batch_size * max_batches) starts.resize(batch_size * max_batches);
  if (starts.empty()) throw DataError("evaluate: eval split shorter than one sequence");
  const std::size_t layers = model.layers.size(), L = model.config.max_loops;

  EvalReport rep;
  rep.mean_loops.assign(layers, 0.0);
  rep.mean_expected_loops.assign(layers, 0.0);
  rep.mean_lambda.assign(layers, 0.0);
  rep.expert_load.assign(layers, std::vector<std::uint64_t>(model.config.num_experts, 0));
  double loss_sum = 0, flops = 0;
  std::size_t targets = 0, rows = 0;
  std::vector<LayerTrace> all;
  std::vector<double> labels, loops_of_token;

  for (std::size_t b0 = 0; b0 < starts.size(); b0 += batch_size) {
    const std::vector<std::size_t> chunk(starts.begin() + static_cast<std::ptrdiff_t>(b0),
                                         starts.begin() + static_cast<std::ptrdiff_t>(std::min(starts.size(), b0 + batch_size)));
    const auto batch = batch_at(corpus, chunk, seq);
    const auto out = model_forward_infer(model, batch);
    const std::size_t n_targets = batch.batch * (seq - 1);
    loss_sum += static_cast<double>(lm_loss(out.logits, std::span<const std::int32_t>(batch.ids)).item()) *
                static_cast<double>(n_targets);
    targets += n_targets;
    const std::size_t M = batch.batch * seq;
    rows += M;
    std::vector<double> token_loops(M, 0.0);
    for (std::size_t li = 0; li < layers; ++li) {
      const auto& tr = out.traces[li];
      for (std::size_t r = 0; r < M; ++r) {
        rep.mean_loops[li] += tr.loops[r];
        rep.mean_expected_loops[li] += tr.expected_loops[r];
        rep.mean_lambda[li] += tr.lambda[r];
        add_to_histogram(rep.lambda_histogram, tr.lambda[r]);
        if (tr.ffn_applications[r] != tr.loops[r]) ++rep.early_exit_mismatches;
        token_loops[r] += static_cast<double>(tr.loops[r]) / static_cast<double>(layers);
      }
      for (std::size_t e = 0; e < tr.expert_counts.size(); ++e) rep.expert_load[li][e] += tr.expert_counts[e];
      rep.width_evaluated += tr.width_evaluated_tokens;
      rep.width_pruned += tr.width_pruned_tokens;
      flops += tr.counters.ffn_flops;
    }
    if (!corpus.labels.empty()) {
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        for (std::size_t t = 0; t + 1 < seq; ++t) {
          labels.push_back(corpus.labels[chunk[i] + t + 1]);
          loops_of_token.push_back(token_loops[i * seq + t]);
        }
      }
    }
    all.insert(all.end(), out.traces.begin(), out.traces.end());
  }
  for (std::size_t li = 0; li < layers; ++li) {
    rep.mean_loops[li] /= static_cast<double>(rows);
    rep.mean_expected_loops[li] /= static_cast<double>(rows);
    rep.mean_lambda[li] /= static_cast<double>(rows);
  }
  rep.loss = loss_sum / static_cast<double>(targets);
  rep.tokens = rows;
  rep.runtime = accounting::collect_runtime_stats(all, L);
  const auto arch = accounting::arch_from_config(model.config);
  rep.runtime_flops = accounting::versatile_runtime_flops(accounting::ffn_flops_dense(arch),
                                                          accounting::ffn_flops_moe(arch), rep.runtime.n_mean,
                                                          rep.runtime.p_frac, L);
  rep.instrumented_flops = flops / static_cast<double>(rows) / 1e6;
  if (!labels.empty()) rep.spearman = stats::spearman(labels, loops_of_token);
  return rep;
}

// -------------------------------------------------------------- trainer

/// Model, optimizer, data and step counter for one run. Batch sampling and
/// Gumbel noise for step s come from streams forked off `rng` by s, so the
/// run can resume from a checkpoint at any step.
template <typename Real = double>
class Trainer {
 public:
  Trainer(RunConfig cfg, Corpus corpus)
      : cfg_(std::move(cfg)),
        corpus_(std::move(corpus)),
        split_(split_corpus(corpus_, cfg_.train.eval_frac, cfg_.train.seq_len)),
        model_(make_model<Real>(cfg_.model, cfg_.train.seed, cfg_.train.tau_min)),
        rng_(cfg_.train.seed ^ 0x5EEDF00DULL),
        schedules_(make_schedules(cfg_.train)) {
    for (const auto b : corpus_.bytes) {
      if (b >= cfg_.model.vocab) throw DataError("corpus byte " + std::to_string(b) + " outside vocab");
    }
    optim_.hp = adamw_config(cfg_.train);
    optim_.init(model_.parameters());
  }

  StepMetrics step() {
    const std::uint64_t s = optim_.step;
    Rng data_rng = rng_.fork(2 * s), noise_rng = rng_.fork(2 * s + 1);
    const auto batch =
        sample_batch(corpus_, 0, split_.train_end, cfg_.train.batch_size, cfg_.train.seq_len, data_rng);
    return train_step(model_, batch, optim_, schedules_, noise_rng);
  }

  EvalReport evaluate() const {
    return versatile::evaluate(model_, corpus_, split_.train_end, corpus_.bytes.size(), cfg_.train.seq_len,
                               cfg_.train.batch_size, cfg_.train.eval_batches);
  }

  void save(const std::string& path) const { save_checkpoint(path, cfg_, model_, optim_, rng_); }
  void load(const std::string& path) { load_checkpoint(path, cfg_, model_, optim_, rng_); }

  std::size_t steps_done() const { return optim_.step; }
  bool done() const { return optim_.step >= cfg_.train.steps; }
  const RunConfig& config() const { return cfg_; }
  const Corpus& corpus() const { return corpus_; }
  const Split& split() const { return split_; }
  Model<Real>& model() { return model_; }
  const Model<Real>& model() const { return model_; }
  const OptimState<Real>& optim() const { return optim_; }

 private:
  RunConfig cfg_;
  Corpus corpus_;
  Split split_;
  Model<Real> model_;
  OptimState<Real> optim_;
  Rng rng_;
  Schedules schedules_;
};

struct RunSummary {
  std::size_t steps = 0;
  double first_loss = 0;
  double step10_loss = 0;
  double final_loss = 0;
  double final_loss_avg10 = 0;  // mean of the last ten steps
  std::vector<double> final_mean_expected_loops;
  double lambda_min = 1, lambda_max = 0;
  double max_clipped_grad_norm = 0;

  nlohmann::ordered_json to_json() const {
    return {{"steps", steps},
            {"first_loss", first_loss},
            {"step10_loss", step10_loss},
            {"final_loss", final_loss},
            {"final_loss_avg10", final_loss_avg10},
            {"final_mean_expected_loops", final_mean_expected_loops},
            {"lambda_min", lambda_min},
            {"lambda_max", lambda_max},
            {"max_clipped_grad_norm", max_clipped_grad_norm}};
  }
};

/// Runs until `stop_step` (or the configured total), writing one metrics
/// record per step and a checkpoint every `checkpoint_every` steps.
template <typename Real>
RunSummary train_loop(Trainer<Real>& tr, MetricsWriter* metrics, const std::string& checkpoint_path,
                      std::size_t stop_step = 0) {
  const auto& t = tr.config().train;
  const std::size_t stop = stop_step ? std::min(stop_step, t.steps) : t.steps;
  RunSummary sum;
  std::vector<double> recent;
  while (tr.steps_done() < stop) {
    const auto started = std::chrono::steady_clock::now();
    auto sm = tr.step();
    if (t.record_throughput) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      sm.record.tokens_per_sec = static_cast<double>(t.batch_size * t.seq_len) / std::max(secs, 1e-9);
    }
    if (metrics) metrics->write(sm.record);
    const auto& r = sm.record;
    if (sum.steps == 0) sum.first_loss = r.loss;
    if (r.step == 10) sum.step10_loss = r.loss;
    ++sum.steps;
    sum.final_loss = r.loss;
    sum.final_mean_expected_loops = r.mean_expected_loops;
    sum.lambda_min = std::min(sum.lambda_min, sm.lambda_min);
    sum.lambda_max = std::max(sum.lambda_max, sm.lambda_max);
    sum.max_clipped_grad_norm = std::max(sum.max_clipped_grad_norm, sm.clipped_grad_norm);
    recent.push_back(r.loss);
    if (recent.size() > 10) recent.erase(recent.begin());
    if (!checkpoint_path.empty() && t.checkpoint_every && tr.steps_done() % t.checkpoint_every == 0) {
      tr.save(checkpoint_path);
    }
  }
  double acc = 0;
  for (auto v : recent) acc += v;
  sum.final_loss_avg10 = recent.empty() ? 0 : acc / static_cast<double>(recent.size());
  if (!checkpoint_path.empty()) tr.save(checkpoint_path);
  return sum;
}

}  // namespace versatile
