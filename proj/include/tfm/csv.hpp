#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tfm/error.hpp"

namespace tfm {

/// Shortest decimal that round-trips, independent of the C locale.
inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_number(std::size_t v) { return std::to_string(v); }

/// Buffered CSV with a fixed header; cells are pre-formatted strings.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) text_ += ',';
      text_ += cells[i];
    }
    text_ += '\n';
  }

  const std::string& text() const { return text_; }

  /// Writes to a sibling temp file, then renames over `path`.
  void save(const std::filesystem::path& path) const {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error(ErrorCode::io_error, "cannot write " + tmp.string());
      out << text_;
      if (!out) throw Error(ErrorCode::io_error, "short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::string text_;
};

}  // namespace tfm
