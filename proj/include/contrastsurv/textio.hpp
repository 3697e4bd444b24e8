#pragma once

#include <charconv>
#include <string>
#include <string_view>

#include "contrastsurv/error.hpp"

namespace contrastsurv::detail {

// Shortest round-trip decimal form; stable across runs.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view cell, int row, int col) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) {
    throw ValidationError("malformed numeric cell '" + std::string(cell) + "' at row " +
                          std::to_string(row) + ", column " + std::to_string(col));
  }
  return v;
}

// RFC 4180 quoting; numeric fields pass through untouched.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace contrastsurv::detail
