#pragma once

// Text matrix format shared by every file the tools read or write:
//
//   rows cols
//   a11 a12 ... a1c
//   ...
//
// Entries are decimal literals separated by single spaces and parsed as
// binary64. No comment lines.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/linalg.hpp"

namespace logstab {

namespace detail {

inline std::vector<std::string_view> split_spaces(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline double parse_real(std::string_view tok, std::size_t line_no) {
  // strtod accepts forms (hex floats, inf) that from_chars on older
  // libstdc++ does not; reject non-finite values explicitly.
  std::string s(tok);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || s.empty()) throw ParseError("not a number: '" + s + "'", line_no);
  if (!std::isfinite(v)) throw ParseError("non-finite entry: '" + s + "'", line_no);
  return v;
}

inline long parse_count(std::string_view tok, std::size_t line_no) {
  long v = 0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || p != tok.data() + tok.size()) {
    throw ParseError("not a count: '" + std::string(tok) + "'", line_no);
  }
  return v;
}

}  // namespace detail

/// Reads one matrix from `in`. `first_line` is the line number of the header
/// in the enclosing document and is only used in error messages.
inline Matrix read_matrix(std::istream& in, std::size_t first_line = 1) {
  std::string line;
  std::size_t line_no = first_line;
  if (!std::getline(in, line)) throw ParseError("missing 'rows cols' header", line_no);
  auto head = detail::split_spaces(line);
  if (head.size() != 2) throw ParseError("expected 'rows cols'", line_no);
  const long rows = detail::parse_count(head[0], line_no);
  const long cols = detail::parse_count(head[1], line_no);
  if (rows < 1 || cols < 1) throw ParseError("matrix dimensions must be positive", line_no);

  Matrix M(rows, cols);
  for (long r = 0; r < rows; ++r) {
    ++line_no;
    if (!std::getline(in, line)) throw ParseError("expected " + std::to_string(rows) + " rows", line_no);
    auto toks = detail::split_spaces(line);
    if (static_cast<long>(toks.size()) != cols) {
      throw ParseError("expected " + std::to_string(cols) + " entries, found " + std::to_string(toks.size()),
                       line_no);
    }
    for (long c = 0; c < cols; ++c) M(r, c) = detail::parse_real(toks[static_cast<std::size_t>(c)], line_no);
  }
  return M;
}

inline Matrix read_matrix_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open matrix file " + path.string(), 0);
  try {
    return read_matrix(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.detail(), e.line());
  }
}

/// Shortest round-trip decimal for a binary64.
inline std::string format_real(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

inline void write_matrix(std::ostream& out, const Matrix& M) {
  out << M.rows() << ' ' << M.cols() << '\n';
  for (Eigen::Index r = 0; r < M.rows(); ++r) {
    for (Eigen::Index c = 0; c < M.cols(); ++c) {
      if (c) out << ' ';
      out << format_real(M(r, c));
    }
    out << '\n';
  }
}

inline std::string matrix_to_string(const Matrix& M) {
  std::ostringstream os;
  write_matrix(os, M);
  return os.str();
}

/// Writes `contents` to `path` via a sibling temporary and a rename, so
/// readers never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_matrix_file(const std::filesystem::path& path, const Matrix& M) {
  write_file_atomic(path, matrix_to_string(M));
}

}  // namespace logstab
