#pragma once

// Checkpoint layout (all integers u32 little-endian):
//   "TFMW" | version | config block (7 u32, dropout rate as f64) | parameter count |
//   per parameter: name length, name bytes, rank, dims..., float32 LE data |
//   CRC-32 of every preceding byte.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <zlib.h>

#include "tfm/error.hpp"
#include "tfm/frameset.hpp"
#include "tfm/model.hpp"

namespace tfm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) {
    const auto u = std::bit_cast<std::uint64_t>(v);
    u32(static_cast<std::uint32_t>(u));
    u32(static_cast<std::uint32_t>(u >> 32));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{data_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() {
    const std::uint64_t lo = u32();
    return std::bit_cast<double>(lo | (std::uint64_t{u32()} << 32));
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > size_) throw Error(ErrorCode::checksum_mismatch, "checkpoint truncated");
  }
  const unsigned char* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, p, static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Model& model) {
  detail::ByteWriter w;
  w.raw("TFMW", 4);
  w.u32(kCheckpointVersion);
  const auto& c = model.config();
  w.u32(36);  // config block length in bytes
  w.u32(static_cast<std::uint32_t>(c.preset));
  w.u32(static_cast<std::uint32_t>(c.input_channels));
  w.u32(static_cast<std::uint32_t>(c.down_blocks));
  w.u32(static_cast<std::uint32_t>(c.layers_per_block));
  w.u32(static_cast<std::uint32_t>(c.growth_rate));
  w.u32(static_cast<std::uint32_t>(c.first_conv_filters));
  w.u32(static_cast<std::uint32_t>(c.up_conv_filters));
  w.f64(c.dropout_rate);
  w.u32(static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name.data(), p.name.size());
    w.u32(static_cast<std::uint32_t>(p.dims.size()));
    for (std::size_t d : p.dims) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p.value.values()) w.f32(v);
  }
  auto& bytes = w.bytes();
  w.u32(detail::crc32_of(bytes.data(), bytes.size()));
  return std::move(bytes);
}

inline Model deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "TFMW")
    throw Error(ErrorCode::checksum_mismatch, "not a TFMW checkpoint");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  if (tail.u32() != detail::crc32_of(bytes.data(), body))
    throw Error(ErrorCode::checksum_mismatch, "checkpoint CRC does not match its contents");

  detail::ByteReader r(bytes.data() + 4, body - 4);
  if (const auto version = r.u32(); version != kCheckpointVersion)
    throw Error(ErrorCode::config_invalid, "unsupported checkpoint version " + std::to_string(version));
  if (r.u32() != 36) throw Error(ErrorCode::config_invalid, "unexpected config block length");
  ModelConfig cfg;
  cfg.preset = static_cast<Preset>(r.u32());
  cfg.input_channels = r.u32();
  cfg.down_blocks = r.u32();
  cfg.layers_per_block = r.u32();
  cfg.growth_rate = r.u32();
  cfg.first_conv_filters = r.u32();
  cfg.up_conv_filters = r.u32();
  cfg.dropout_rate = r.f64();
  auto params = parameter_layout(cfg);
  if (r.u32() != params.size()) throw Error(ErrorCode::config_invalid, "parameter count does not match config");
  for (auto& p : params) {
    const std::string name = r.str(r.u32());
    if (name != p.name) throw Error(ErrorCode::config_invalid, "expected parameter " + p.name + ", found " + name);
    const std::uint32_t rank = r.u32();
    if (rank != p.dims.size()) throw Error(ErrorCode::config_invalid, "rank mismatch for " + name);
    for (std::size_t d : p.dims)
      if (r.u32() != d) throw Error(ErrorCode::config_invalid, "dimension mismatch for " + name);
    for (float& v : p.value.values()) v = r.f32();
  }
  if (!r.done()) throw Error(ErrorCode::config_invalid, "trailing bytes in checkpoint");
  return Model(cfg, std::move(params));
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_bytes(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::io_error, "no checkpoint at " + path.string());
  return deserialize_checkpoint(read_bytes(path));
}

}  // namespace tfm
