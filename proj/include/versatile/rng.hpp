// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace versatile {

/// Counter-based generator: sample i is a SplitMix64 hash of (seed, i).
/// The whole state is two words, so checkpoints restore it exactly.
class Rng {
 public:
  struct State {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;
    bool operator==(const State&) const = default;
  };

  /// Uniform samples used for Gumbel noise never leave [kUniformEps, 1 - kUniformEps].
  static constexpr double kUniformEps = 1e-12;

  explicit Rng(std::uint64_t seed = 0) : state_{seed, 0} {}

  std::uint64_t next_u64() {
    std::uint64_t z = state_.seed + 0x9E3779B97F4A7C15ULL * (++state_.counter);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on [kUniformEps, 1 - kUniformEps].
  double open_uniform() { return std::clamp(uniform(), kUniformEps, 1.0 - kUniformEps); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  /// Standard normal by Box-Muller; consumes exactly two draws.
  double normal() {
    const double u1 = open_uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Gumbel(0, 1) sample.
  double gumbel() { return -std::log(-std::log(open_uniform())); }

  /// Independent child stream; does not advance this one.
  Rng fork(std::uint64_t salt) const {
    Rng child(state_.seed ^ (0xD1B54A32D192ED03ULL * (salt + 1)));
    return child;
  }

  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  State state_;
};

}  // namespace versatile
