#pragma once

// On-disk frame sequences: a JSON manifest plus one little-endian float32
// raw file per map and frame (input_0000.raw, force_0000.raw, ...).

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tfm/error.hpp"
#include "tfm/grid.hpp"

namespace tfm {

struct SamplePair {
  Image input;   // fluorescence intensity, >= 0
  Image force;   // traction magnitude, >= 0
  std::optional<Image> sigma2;  // true log-variance of the force noise, when known
};

struct FrameManifest {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t frames = 0;
  std::string dtype = "f32le";
  std::string units = "force: arbitrary units (synthetic), input: fluorescence counts";
  bool has_sigma2 = false;
  nlohmann::json generator = nlohmann::json::object();
};

struct FrameSet {
  FrameManifest manifest;
  std::vector<SamplePair> frames;
  bool forces_masked = false;  // set by mask_forces at ingestion

  std::size_t size() const { return frames.size(); }
  std::size_t height() const { return manifest.height; }
  std::size_t width() const { return manifest.width; }
};

inline std::string frame_file_name(const std::string& kind, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_%04zu.raw", index);
  return kind + buf;
}

// ---------------------------------------------------------------------------
// Raw float32 little-endian maps
// ---------------------------------------------------------------------------

inline std::vector<unsigned char> encode_f32le(std::span<const float> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    bytes[4 * i + 0] = static_cast<unsigned char>(u);
    bytes[4 * i + 1] = static_cast<unsigned char>(u >> 8);
    bytes[4 * i + 2] = static_cast<unsigned char>(u >> 16);
    bytes[4 * i + 3] = static_cast<unsigned char>(u >> 24);
  }
  return bytes;
}

inline float decode_f32le(const unsigned char* p) {
  const std::uint32_t u = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
                          (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(u);
}

inline void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io_error, "short write to " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_error, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_raw_map(const std::filesystem::path& path, std::span<const float> values) {
  const auto bytes = encode_f32le(values);
  write_bytes(path, bytes);
}

inline void write_raw_map(const std::filesystem::path& path, const Grid<double>& map) {
  std::vector<float> values(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) values[i] = static_cast<float>(map[i]);
  write_raw_map(path, values);
}

/// Reads a height x width map; `frame` only labels errors.
inline Image read_raw_map(const std::filesystem::path& path, std::size_t height, std::size_t width,
                          std::size_t frame) {
  if (!std::filesystem::exists(path))
    throw Error(ErrorCode::truncated_frame, "frame " + std::to_string(frame) + ": missing " + path.string());
  const auto bytes = read_bytes(path);
  const std::size_t expected = height * width * 4;
  if (bytes.size() < expected)
    throw Error(ErrorCode::truncated_frame, "frame " + std::to_string(frame) + ": " + path.filename().string() +
                                                " has " + std::to_string(bytes.size()) + " bytes, expected " +
                                                std::to_string(expected));
  if (bytes.size() != expected)
    throw Error(ErrorCode::dimension_mismatch, "frame " + std::to_string(frame) + ": " +
                                                   path.filename().string() + " has " +
                                                   std::to_string(bytes.size()) + " bytes but manifest says " +
                                                   std::to_string(height) + "x" + std::to_string(width));
  Image img(height, width);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = decode_f32le(bytes.data() + 4 * i);
  return img;
}

// ---------------------------------------------------------------------------
// Frame sets
// ---------------------------------------------------------------------------

inline nlohmann::json manifest_to_json(const FrameManifest& m) {
  return nlohmann::json{{"format", "tfm-frameset"}, {"version", 1},          {"width", m.width},
                        {"height", m.height},       {"frames", m.frames},    {"dtype", m.dtype},
                        {"units", m.units},         {"has_sigma2", m.has_sigma2}, {"generator", m.generator}};
}

inline FrameManifest manifest_from_json(const nlohmann::json& j) {
  FrameManifest m;
  try {
    m.width = j.at("width").get<std::size_t>();
    m.height = j.at("height").get<std::size_t>();
    m.frames = j.at("frames").get<std::size_t>();
    m.dtype = j.value("dtype", "f32le");
    m.units = j.value("units", m.units);
    m.has_sigma2 = j.value("has_sigma2", false);
    m.generator = j.value("generator", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::manifest_missing, std::string("malformed manifest: ") + e.what());
  }
  if (m.dtype != "f32le") throw Error(ErrorCode::dimension_mismatch, "unsupported dtype " + m.dtype);
  return m;
}

inline void write_frameset(const FrameSet& fs, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::io_error, "cannot create " + dir.string() + ": " + ec.message());
  for (std::size_t i = 0; i < fs.frames.size(); ++i) {
    const auto& f = fs.frames[i];
    if (f.input.height() != fs.manifest.height || f.input.width() != fs.manifest.width || !f.input.same_shape(f.force))
      throw Error(ErrorCode::dimension_mismatch, "frame " + std::to_string(i) + " does not match manifest dims");
    write_raw_map(dir / frame_file_name("input", i), f.input.values());
    write_raw_map(dir / frame_file_name("force", i), f.force.values());
    if (fs.manifest.has_sigma2) {
      if (!f.sigma2) throw Error(ErrorCode::dimension_mismatch, "frame " + std::to_string(i) + " lacks sigma2");
      write_raw_map(dir / frame_file_name("sigma2", i), f.sigma2->values());
    }
  }
  FrameManifest m = fs.manifest;
  m.frames = fs.frames.size();
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_error, "cannot write manifest in " + dir.string());
  out << manifest_to_json(m).dump(2) << "\n";
}

inline FrameSet read_frameset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw Error(ErrorCode::manifest_missing, "no manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    std::ifstream in(manifest_path);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::manifest_missing, std::string("unreadable manifest: ") + e.what());
  }
  FrameSet fs;
  fs.manifest = manifest_from_json(j);
  const auto& m = fs.manifest;
  for (std::size_t i = 0; i < m.frames; ++i) {
    SamplePair p;
    p.input = read_raw_map(dir / frame_file_name("input", i), m.height, m.width, i);
    p.force = read_raw_map(dir / frame_file_name("force", i), m.height, m.width, i);
    if (m.has_sigma2) p.sigma2 = read_raw_map(dir / frame_file_name("sigma2", i), m.height, m.width, i);
    fs.frames.push_back(std::move(p));
  }
  return fs;
}

}  // namespace tfm
