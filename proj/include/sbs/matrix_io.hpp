// Licensed under the Apache License, Version 2.0

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sbs/error.hpp"
#include "sbs/matrix.hpp"

namespace sbs {

// Plain-text matrices: one row per line, values separated by commas and/or
// whitespace. Lines starting with '#' are skipped.
inline Matrix<double> parse_matrix_text(std::istream& in) {
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    for (auto& ch : line)
      if (ch == ',' || ch == '\t' || ch == '\r') ch = ' ';
    std::istringstream ls(line);
    std::string tok;
    std::size_t count = 0;
    if (!(ls >> tok) || tok.front() == '#') continue;
    do {
      double v = 0.0;
      const auto* end = tok.data() + tok.size();
      const auto [ptr, ec] = std::from_chars(tok.data(), end, v);
      if (ec != std::errc{} || ptr != end) {
        throw FormatError("matrix line " + std::to_string(line_no) + ": bad number \"" + tok + "\"");
      }
      values.push_back(v);
      ++count;
    } while (ls >> tok);
    if (rows == 0) cols = count;
    else if (count != cols) throw FormatError("matrix line " + std::to_string(line_no) + ": ragged row");
    ++rows;
  }
  if (rows == 0) throw FormatError("matrix file has no rows");
  return Matrix<double>(rows, cols, std::move(values));
}

inline Matrix<double> load_matrix_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open matrix " + path.string());
  return parse_matrix_text(in);
}

inline void write_matrix_text(const Matrix<double>& m, std::ostream& out) {
  out.precision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
    out << '\n';
  }
}

inline void save_matrix_text(const Matrix<double>& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write matrix " + path.string());
  write_matrix_text(m, out);
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace sbs
