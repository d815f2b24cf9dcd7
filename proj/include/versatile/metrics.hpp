// SPDX-License-Identifier: Apache-2.0
//
// One JSON object per line per training step.
#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace versatile {

struct MetricsRecord {
  std::size_t step = 0;
  double loss = 0;
  double aux_loss = 0;
  double lr = 0;
  double tau = 0;
  double grad_norm = 0;
  std::vector<double> mean_expected_loops;  // per layer
  std::vector<double> mean_lambda;          // per layer
  std::vector<std::vector<std::uint64_t>> expert_load;  // per layer, per expert
  double tokens_per_sec = -1;  // omitted when negative

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["loss"] = loss;
    j["aux_loss"] = aux_loss;
    j["lr"] = lr;
    j["tau"] = tau;
    j["grad_norm"] = grad_norm;
    j["mean_expected_loops"] = mean_expected_loops;
    j["mean_lambda"] = mean_lambda;
    j["expert_load"] = expert_load;
    if (tokens_per_sec >= 0) j["tokens_per_sec"] = tokens_per_sec;
    return j;
  }

  static MetricsRecord from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<std::size_t>();
    r.loss = j.at("loss").get<double>();
    r.aux_loss = j.at("aux_loss").get<double>();
    r.lr = j.at("lr").get<double>();
    r.tau = j.at("tau").get<double>();
    r.grad_norm = j.at("grad_norm").get<double>();
    r.mean_expected_loops = j.at("mean_expected_loops").get<std::vector<double>>();
    r.mean_lambda = j.at("mean_lambda").get<std::vector<double>>();
    r.expert_load = j.at("expert_load").get<std::vector<std::vector<std::uint64_t>>>();
    if (j.contains("tokens_per_sec")) r.tokens_per_sec = j["tokens_per_sec"].get<double>();
    return r;
  }

  std::string to_line() const { return to_json().dump(); }
};

/// Appends one line per record and flushes, so a reader never sees half a record.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, bool append) : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open metrics file " + path);
  }
  void write(const MetricsRecord& r) {
    out_ << r.to_line() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace versatile
