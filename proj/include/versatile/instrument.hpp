// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>

namespace versatile {

/// Work counters filled in by the forward pass when a sink is supplied.
/// FLOPs follow the accounting convention: 2 per multiply-accumulate,
/// FFN weight matrices only.
struct FfnCounters {
  std::uint64_t full_ffn_rows = 0;      // rows pushed through the unsliced FFN
  std::uint64_t expert_rows = 0;        // (row, virtual expert) evaluations
  double ffn_flops = 0;

  void add_full(std::size_t rows, std::size_t d, std::size_t d_hidden) {
    full_ffn_rows += rows;
    ffn_flops += 6.0 * static_cast<double>(rows) * static_cast<double>(d) * static_cast<double>(d_hidden);
  }
  void add_expert(std::size_t rows, std::size_t d, std::size_t d_expert) {
    expert_rows += rows;
    ffn_flops += 6.0 * static_cast<double>(rows) * static_cast<double>(d) * static_cast<double>(d_expert);
  }
  FfnCounters& operator+=(const FfnCounters& o) {
    full_ffn_rows += o.full_ffn_rows;
    expert_rows += o.expert_rows;
    ffn_flops += o.ffn_flops;
    return *this;
  }
};

}  // namespace versatile
