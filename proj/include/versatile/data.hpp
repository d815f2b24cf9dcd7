// SPDX-License-Identifier: Apache-2.0
//
// Byte-level corpora. The synthetic generator interleaves easy spans
// (ascending cyclic alphabet runs) with hard spans (two-digit modular sums
// and random bracket sequences) and labels every byte 0 (easy) or 1 (hard).
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "versatile/model.hpp"
#include "versatile/rng.hpp"

namespace versatile {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::vector<std::uint8_t> labels;  // 1 = hard; empty when unknown
};

struct SyntheticSpec {
  std::size_t length = 200000;
  std::uint64_t seed = 7;
  std::size_t easy_min = 20, easy_max = 40;
  double hard_share = 0.5;  // probability that the next span is hard
};

namespace detail {

inline void push(Corpus& c, char ch, std::uint8_t label) {
  c.bytes.push_back(static_cast<std::uint8_t>(ch));
  c.labels.push_back(label);
}

inline void easy_span(Corpus& c, Rng& rng, const SyntheticSpec& s) {
  const std::size_t n = s.easy_min + rng.below(s.easy_max - s.easy_min + 1);
  std::size_t letter = rng.below(26);
  for (std::size_t i = 0; i < n; ++i, letter = (letter + 1) % 26) push(c, static_cast<char>('a' + letter), 0);
}

inline void arithmetic_span(Corpus& c, Rng& rng) {
  const std::size_t problems = 2 + rng.below(3);
  for (std::size_t p = 0; p < problems; ++p) {
    const auto a = rng.below(100), b = rng.below(100), r = (a + b) % 100;
    for (auto [v, sep] : std::array<std::pair<std::uint64_t, char>, 3>{{{a, '+'}, {b, '='}, {r, ';'}}}) {
      push(c, static_cast<char>('0' + v / 10), 1);
      push(c, static_cast<char>('0' + v % 10), 1);
      push(c, sep, 1);
    }
  }
}

inline void bracket_span(Corpus& c, Rng& rng) {
  static constexpr char open[] = "([{", close[] = ")]}";
  const std::size_t pairs = 6 + rng.below(10);
  std::vector<std::size_t> stack;
  std::size_t opened = 0;
  while (opened < pairs || !stack.empty()) {
    const bool can_open = opened < pairs;
    if (can_open && (stack.empty() || rng.below(2) == 0)) {
      const auto k = rng.below(3);
      stack.push_back(k);
      push(c, open[k], 1);
      ++opened;
    } else {
      push(c, close[stack.back()], 1);
      stack.pop_back();
    }
  }
}

}  // namespace detail

/// Deterministic in `spec.seed`; the result is exactly `spec.length` bytes.
inline Corpus generate_synthetic(const SyntheticSpec& spec) {
  if (spec.length == 0) throw DataError("gen-data: length must be positive");
  if (spec.easy_min == 0 || spec.easy_max < spec.easy_min) throw DataError("gen-data: bad easy span bounds");
  Rng rng(spec.seed);
  Corpus c;
  c.bytes.reserve(spec.length + 64);
  c.labels.reserve(spec.length + 64);
  while (c.bytes.size() < spec.length) {
    if (rng.uniform() < spec.hard_share) {
      if (rng.below(2) == 0) {
        detail::arithmetic_span(c, rng);
      } else {
        detail::bracket_span(c, rng);
      }
    } else {
      detail::easy_span(c, rng, spec);
    }
  }
  c.bytes.resize(spec.length);
  c.labels.resize(spec.length);
  return c;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path);
}

/// Labels are stored one byte per corpus byte, '0' or '1'.
inline Corpus load_corpus(const std::string& path, const std::string& labels_path = {}) {
  Corpus c;
  c.bytes = read_bytes(path);
  if (!labels_path.empty()) {
    auto raw = read_bytes(labels_path);
    if (raw.size() != c.bytes.size()) {
      throw DataError("label sidecar has " + std::to_string(raw.size()) + " entries for " +
                      std::to_string(c.bytes.size()) + " corpus bytes");
    }
    c.labels.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (raw[i] != '0' && raw[i] != '1') throw DataError("label sidecar: byte " + std::to_string(i) + " is not 0/1");
      c.labels[i] = raw[i] == '1';
    }
  }
  return c;
}

inline void save_corpus(const Corpus& c, const std::string& path, const std::string& labels_path) {
  write_bytes(path, c.bytes);
  std::vector<std::uint8_t> raw(c.labels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = c.labels[i] ? '1' : '0';
  write_bytes(labels_path, raw);
}

/// Contiguous train/eval halves of one corpus.
struct Split {
  std::size_t train_end = 0;  // bytes [0, train_end) train, [train_end, size) eval
};

inline Split split_corpus(const Corpus& c, double eval_frac, std::size_t seq_len) {
  const auto n = c.bytes.size();
  const auto eval = static_cast<std::size_t>(static_cast<double>(n) * eval_frac);
  if (n < 2 * seq_len || eval < seq_len || n - eval < seq_len) {
    throw DataError("corpus of " + std::to_string(n) + " bytes is too small for seq_len " + std::to_string(seq_len));
  }
  return {n - eval};
}

/// Random windows from [begin, end); which windows depends only on `rng`.
inline TokenBatch sample_batch(const Corpus& c, std::size_t begin, std::size_t end, std::size_t batch,
                               std::size_t seq, Rng& rng) {
  if (end - begin < seq) throw DataError("sample_batch: region shorter than one sequence");
  TokenBatch b{batch, seq, {}};
  b.ids.reserve(batch * seq);
  const std::size_t starts = end - begin - seq + 1;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = begin + rng.below(starts);
    for (std::size_t j = 0; j < seq; ++j) b.ids.push_back(c.bytes[s + j]);
  }
  return b;
}

/// Non-overlapping windows tiling [begin, end), in order; the tail is dropped.
inline std::vector<std::size_t> tile_windows(std::size_t begin, std::size_t end, std::size_t seq) {
  std::vector<std::size_t> starts;
  for (std::size_t s = begin; s + seq <= end; s += seq) starts.push_back(s);
  return starts;
}

inline TokenBatch batch_at(const Corpus& c, const std::vector<std::size_t>& starts, std::size_t seq) {
  TokenBatch b{starts.size(), seq, {}};
  b.ids.reserve(starts.size() * seq);
  for (auto s : starts) {
    for (std::size_t j = 0; j < seq; ++j) b.ids.push_back(c.bytes[s + j]);
  }
  return b;
}

}  // namespace versatile
