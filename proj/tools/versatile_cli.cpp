// SPDX-License-Identifier: Apache-2.0
//
// versatile: train / eval / account / gen-data / chart.
//
// Exit status: 0 ok, 1 usage, 2 config, 3 data, 4 numeric, 5 checkpoint,
// 6 I/O. Errors go to stderr as one JSON object on one line.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "versatile/versatile.hpp"

namespace fs = std::filesystem;
using namespace versatile;

namespace {

enum Status { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kNumeric = 4, kCheckpoint = 5, kIo = 6 };

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int fail(Status status, const std::string& kind, const std::string& message,
         const nlohmann::ordered_json& extra = nullptr) {
  nlohmann::ordered_json j{{"error", kind}, {"status", static_cast<int>(status)}, {"message", message}};
  if (!extra.is_null()) j["detail"] = extra;
  std::cerr << j.dump() << std::endl;
  return status;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t stop_at = 0;
  std::string preset = "all";
  bool csv = false;
  std::size_t length = 200000;
  std::string metrics;
  std::string eval_report;
};

RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) cfg.train.seed = *o.seed;
  if (!o.out.empty()) cfg.paths.out_dir = o.out;
  cfg.validate();
  return cfg;
}

Corpus corpus_for(const RunConfig& cfg) {
  if (cfg.paths.corpus.empty()) return generate_synthetic(SyntheticSpec{});
  return load_corpus(cfg.paths.corpus, cfg.paths.labels);
}

template <typename Real>
int train(const RunConfig& cfg, const Options& o) {
  Trainer<Real> tr(cfg, corpus_for(cfg));
  const fs::path dir = cfg.paths.out_dir;
  fs::create_directories(dir);
  const bool resume = !o.checkpoint.empty();
  if (resume) tr.load(o.checkpoint);
  MetricsWriter metrics((dir / "metrics.jsonl").string(), resume);
  const auto sum = train_loop(tr, &metrics, (dir / "checkpoint.bin").string(), o.stop_at);
  auto j = sum.to_json();
  j["steps_done"] = tr.steps_done();
  j["config_digest"] = architecture_digest(cfg);
  write_text(dir / "summary.json", j.dump(2) + "\n");
  std::cout << j.dump() << std::endl;
  return kOk;
}

template <typename Real>
int eval(const RunConfig& cfg, const Options& o) {
  Trainer<Real> tr(cfg, corpus_for(cfg));
  if (!o.checkpoint.empty()) tr.load(o.checkpoint);
  auto j = tr.evaluate().to_json();
  j["step"] = tr.steps_done();
  if (!o.out.empty()) {
    fs::create_directories(cfg.paths.out_dir);
    write_text(fs::path(cfg.paths.out_dir) / "eval.json", j.dump(2) + "\n");
  }
  std::cout << j.dump() << std::endl;
  return kOk;
}

int account(const Options& o) {
  std::string text;
  auto emit = [&](const std::string& title, const std::vector<accounting::BudgetReport>& rows) {
    if (o.csv) {
      text += accounting::format_csv(rows);
    } else {
      text += title + "\n" + accounting::format_table(rows) + "\n";
    }
  };
  if (!o.config.empty()) {
    const auto cfg = resolve_config(o);
    const auto census = accounting::count_params(cfg.model);
    const auto model = make_model<double>(cfg.model, cfg.train.seed);
    if (model.parameter_count() != census.total()) {
      return fail(kConfig, "config", "parameter census " + std::to_string(census.total()) +
                                         " disagrees with instantiated model " +
                                         std::to_string(model.parameter_count()));
    }
    emit("desk (" + std::to_string(census.total()) + " trainable scalars)",
         accounting::budget_table(accounting::arch_from_config(cfg.model)));
  } else {
    if (o.preset != "354m" && o.preset != "720m" && o.preset != "all") {
      return fail(kUsage, "usage", "--preset must be 354m, 720m or all");
    }
    if (o.preset != "720m") emit("354M", accounting::budget_table(accounting::spec_354m()));
    if (o.preset != "354m") emit("720M", accounting::budget_table(accounting::spec_720m()));
  }
  std::cout << text;
  return kOk;
}

int gen_data(const Options& o) {
  if (o.out.empty()) return fail(kUsage, "usage", "gen-data needs --out PREFIX");
  SyntheticSpec spec;
  spec.length = o.length;
  if (o.seed) spec.seed = *o.seed;
  const auto corpus = generate_synthetic(spec);
  save_corpus(corpus, o.out + ".bin", o.out + ".labels");
  std::size_t hard = 0;
  for (auto l : corpus.labels) hard += l;
  std::cout << nlohmann::ordered_json{{"corpus", o.out + ".bin"},
                                      {"labels", o.out + ".labels"},
                                      {"bytes", corpus.bytes.size()},
                                      {"hard_bytes", hard}}
                   .dump()
            << std::endl;
  return kOk;
}

int render_charts(const Options& o) {
  if (o.metrics.empty() || o.out.empty()) return fail(kUsage, "usage", "chart needs --metrics FILE and --out DIR");
  const auto records = read_metrics(o.metrics);
  fs::create_directories(o.out);
  write_text(fs::path(o.out) / "loss.svg", chart::loss_curve(records));
  std::vector<double> loops;
  std::size_t max_loops = 4;
  if (!o.eval_report.empty()) {
    std::ifstream in(o.eval_report);
    if (!in) throw IoError("cannot open " + o.eval_report);
    const auto j = nlohmann::json::parse(in);
    loops = j.at("mean_loops_per_layer").get<std::vector<double>>();
  } else if (!records.empty()) {
    loops = records.back().mean_expected_loops;
  }
  if (!o.config.empty()) max_loops = load_config(o.config).model.max_loops;
  write_text(fs::path(o.out) / "loops.svg", chart::loops_per_layer(loops, max_loops));
  return kOk;
}

template <typename Fn>
int dispatch_precision(const RunConfig& cfg, Fn&& fn) {
  return cfg.train.precision == Precision::f32 ? fn(float{}) : fn(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VersatileFFN desk-scale trainer"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "train a model and write metrics, checkpoint and summary");
  train_cmd->add_option("--config", o.config, "run configuration file");
  train_cmd->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");
  train_cmd->add_option("--seed", o.seed, "override the configured seed");
  train_cmd->add_option("--out", o.out, "output directory");
  train_cmd->add_option("--stop-at", o.stop_at, "stop after this many total steps");

  auto* eval_cmd = app.add_subcommand("eval", "infer-mode evaluation on the held-out split");
  eval_cmd->add_option("--config", o.config, "run configuration file");
  eval_cmd->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate");
  eval_cmd->add_option("--seed", o.seed, "override the configured seed");
  eval_cmd->add_option("--out", o.out, "also write eval.json here");

  auto* account_cmd = app.add_subcommand("account", "parameter and FFN FLOPs budget table");
  account_cmd->add_option("--config", o.config, "desk configuration instead of a preset");
  account_cmd->add_option("--preset", o.preset, "354m, 720m or all");
  account_cmd->add_flag("--csv", o.csv, "CSV instead of an aligned table");

  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic corpus and its label sidecar");
  gen_cmd->add_option("--out", o.out, "output prefix; writes PREFIX.bin and PREFIX.labels");
  gen_cmd->add_option("--seed", o.seed, "generator seed");
  gen_cmd->add_option("--length", o.length, "corpus length in bytes");

  auto* chart_cmd = app.add_subcommand("chart", "render loss and loops-per-layer SVG charts");
  chart_cmd->add_option("--metrics", o.metrics, "metrics.jsonl from a training run");
  chart_cmd->add_option("--eval", o.eval_report, "eval.json for the loops chart");
  chart_cmd->add_option("--config", o.config, "configuration, for max_loops");
  chart_cmd->add_option("--out", o.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    if (*train_cmd) {
      const auto cfg = resolve_config(o);
      return dispatch_precision(cfg, [&](auto tag) { return train<decltype(tag)>(cfg, o); });
    }
    if (*eval_cmd) {
      const auto cfg = resolve_config(o);
      return dispatch_precision(cfg, [&](auto tag) { return eval<decltype(tag)>(cfg, o); });
    }
    if (*account_cmd) return account(o);
    if (*gen_cmd) return gen_data(o);
    if (*chart_cmd) return render_charts(o);
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const DataError& e) {
    return fail(kData, "data", e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric", e.what(), e.snapshot);
  } catch (const CheckpointError& e) {
    return fail(kCheckpoint, "checkpoint", e.what());
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kIo, "io", e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(kIo, "io", e.what());
  } catch (const std::runtime_error& e) {
    return fail(kIo, "io", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kConfig, "config", e.what());
  }
  return fail(kUsage, "usage", "no subcommand");
}
