#pragma once

// Line-oriented file helpers shared by the JSONL/CSV writers.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "dlab/error.hpp"

namespace dlab {

// Writes each line followed by '\n'. Parent directories are created.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// Shortest decimal text that round-trips a double ("%.17g"-free output:
// integers print without exponent or fraction).
std::string format_double(double value);
// Fixed significant digits, used for CSV/SVG output.
std::string format_sig(double value, int digits = 12);

// Parses a JSONL file line by line. Blank lines are skipped. Errors raised
// while parsing a line are rethrown as DataError "<path>:<line>: <message>".
template <class T>
std::vector<T> read_jsonl(const std::filesystem::path& path, const std::function<T(std::string_view)>& parse_line) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_line(line));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dlab
