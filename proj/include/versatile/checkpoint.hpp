// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container, all integers little-endian:
//
//   magic "VFFNCKPT" | u32 version | u64 file size | u32 config digest
//   u8 dtype | u64 optimizer step | u64 rng seed | u64 rng counter
//   u64 config text length | config text
//   u32 tensor count | per tensor: u32 name length, name, u8 dtype,
//                      u32 rank, u64 dims[rank], u64 offset, u64 count
//   tensor data (offsets relative to the start of this section)
//   u32 CRC-32 of every preceding byte
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "versatile/config.hpp"
#include "versatile/optim.hpp"

namespace versatile {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, format, version, truncated, checksum, digest, layout };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kCheckpointMagic[8] = {'V', 'F', 'F', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

template <typename Real>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Real, double> || std::is_same_v<Real, float>);
  return std::is_same_v<Real, double> ? DType::f64 : DType::f32;
}

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    const U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> buf;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(data_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    if (p > size_) throw CheckpointError(CheckpointError::Kind::layout, "checkpoint: offset out of range");
    pos_ = p;
  }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) throw CheckpointError(CheckpointError::Kind::layout, "checkpoint: record runs past its section");
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

// Byte offset of the file-size field, patched after the body is built.
inline constexpr std::size_t kSizeFieldOffset = 8 + 4;

}  // namespace detail

struct CheckpointInfo {
  std::uint32_t version = 0;
  std::uint32_t digest = 0;
  DType dtype = DType::f64;
  std::uint64_t step = 0;
  Rng::State rng;
  std::string config_text;
};

/// Named tensors as stored: model parameters, then "adam.m.<name>" and
/// "adam.v.<name>" for each of them.
template <typename Real>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const Model<Real>& model,
                     const OptimState<Real>& optim, const Rng& rng) {
  const auto params = model.parameters();
  if (optim.m.size() != params.size()) throw ContractError("save_checkpoint: optimizer state does not match model");

  struct Entry {
    std::string name;
    Shape shape;
    std::span<const Real> data;
  };
  std::vector<Entry> entries;
  for (const auto& p : params) entries.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  for (std::size_t i = 0; i < params.size(); ++i) {
    entries.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), optim.m[i]});
    entries.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), optim.v[i]});
  }

  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(0);
  w.put<std::uint32_t>(architecture_digest(cfg));
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<Real>()));
  w.put<std::uint64_t>(optim.step);
  w.put<std::uint64_t>(rng.state().seed);
  w.put<std::uint64_t>(rng.state().counter);
  const std::string text = to_text(cfg);
  w.put<std::uint64_t>(text.size());
  w.put_bytes(text.data(), text.size());

  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    w.put_string(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of<Real>()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(d);
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(e.data.size());
    offset += e.data.size() * sizeof(Real);
  }
  for (const auto& e : entries) {
    for (auto v : e.data) w.put<Real>(v);
  }

  const std::uint64_t total = w.buf.size() + 4;
  for (std::size_t i = 0; i < 8; ++i) w.buf[detail::kSizeFieldOffset + i] = static_cast<std::uint8_t>(total >> (8 * i));
  w.put<std::uint32_t>(detail::crc32_of(w.buf.data(), w.buf.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(w.buf.data()), static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot move checkpoint into place: " + ec.message());
}

namespace detail {

struct ParsedCheckpoint {
  CheckpointInfo info;
  struct Entry {
    DType dtype;
    Shape shape;
    std::uint64_t offset, count;
  };
  std::map<std::string, Entry> entries;
  std::vector<std::uint8_t> bytes;
  std::size_t data_begin = 0;
};

inline ParsedCheckpoint parse_checkpoint(const std::string& path) {
  using K = CheckpointError::Kind;
  ParsedCheckpoint pc;
  {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(K::io, "cannot open checkpoint " + path);
    pc.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const auto& b = pc.bytes;
  constexpr std::size_t fixed = 8 + 4 + 8;
  if (b.size() < fixed) throw CheckpointError(K::truncated, "checkpoint truncated: " + std::to_string(b.size()) + " bytes");
  if (std::memcmp(b.data(), kCheckpointMagic, 8) != 0) throw CheckpointError(K::format, "not a checkpoint file: " + path);
  ByteReader head(b.data(), b.size());
  head.seek(8);
  const auto version = head.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(K::version, "checkpoint version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  }
  const auto declared = head.get<std::uint64_t>();
  if (b.size() < declared) {
    throw CheckpointError(K::truncated, "checkpoint truncated: " + std::to_string(b.size()) + " of " +
                                            std::to_string(declared) + " bytes");
  }
  if (b.size() != declared) throw CheckpointError(K::layout, "checkpoint has trailing bytes");
  const std::size_t body = b.size() - 4;
  ByteReader tail(b.data() + body, 4);
  if (tail.get<std::uint32_t>() != crc32_of(b.data(), body)) {
    throw CheckpointError(K::checksum, "checkpoint checksum mismatch: " + path);
  }

  ByteReader r(b.data(), body);
  r.seek(fixed);
  auto& info = pc.info;
  info.version = version;
  info.digest = r.get<std::uint32_t>();
  info.dtype = static_cast<DType>(r.get<std::uint8_t>());
  info.step = r.get<std::uint64_t>();
  info.rng.seed = r.get<std::uint64_t>();
  info.rng.counter = r.get<std::uint64_t>();
  info.config_text = r.get_string(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint32_t>());
    ParsedCheckpoint::Entry e;
    e.dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    e.count = r.get<std::uint64_t>();
    pc.entries.emplace(name, std::move(e));
  }
  pc.data_begin = r.pos();
  return pc;
}

template <typename Real>
void read_entry(const ParsedCheckpoint& pc, const std::string& name, const Shape& shape, std::span<Real> dst) {
  using K = CheckpointError::Kind;
  const auto it = pc.entries.find(name);
  if (it == pc.entries.end()) throw CheckpointError(K::layout, "checkpoint lacks tensor " + name);
  const auto& e = it->second;
  if (e.dtype != dtype_of<Real>()) throw CheckpointError(K::layout, "checkpoint tensor " + name + " has another dtype");
  if (e.shape != shape || e.count != dst.size()) {
    throw CheckpointError(K::layout, "checkpoint tensor " + name + " has shape " + to_string(e.shape) + ", expected " +
                                         to_string(shape));
  }
  ByteReader r(pc.bytes.data(), pc.bytes.size() - 4);
  r.seek(pc.data_begin + e.offset);
  for (auto& v : dst) v = r.get<Real>();
}

}  // namespace detail

inline CheckpointInfo peek_checkpoint(const std::string& path) { return detail::parse_checkpoint(path).info; }

/// Restores parameters, optimizer moments, step and RNG state in place.
/// The checkpoint must have been written for a config with the same
/// architecture digest.
template <typename Real>
void load_checkpoint(const std::string& path, const RunConfig& cfg, Model<Real>& model, OptimState<Real>& optim,
                     Rng& rng) {
  using K = CheckpointError::Kind;
  const auto pc = detail::parse_checkpoint(path);
  const auto expected = architecture_digest(cfg);
  if (pc.info.digest != expected) {
    throw CheckpointError(K::digest, "checkpoint config digest " + std::to_string(pc.info.digest) +
                                         " does not match config digest " + std::to_string(expected));
  }
  if (pc.info.dtype != dtype_of<Real>()) throw CheckpointError(K::layout, "checkpoint precision differs from config");
  auto params = model.parameters();
  if (optim.m.size() != params.size()) optim.init(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    detail::read_entry<Real>(pc, params[i].name, t.shape(), t.mutable_values());
    detail::read_entry<Real>(pc, "adam.m." + params[i].name, t.shape(), std::span<Real>(optim.m[i]));
    detail::read_entry<Real>(pc, "adam.v." + params[i].name, t.shape(), std::span<Real>(optim.v[i]));
  }
  optim.step = pc.info.step;
  rng.set_state(pc.info.rng);
}

}  // namespace versatile
