#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/tokenizer.hpp>

namespace dgc::csv {

struct CsvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\\") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

// Shortest round-trippable decimal for a double.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  std::string s = os.str();
  for (int p = 6; p < 17; ++p) {
    std::ostringstream t;
    t.precision(p);
    t << v;
    if (std::strtod(t.str().c_str(), nullptr) == v) return t.str();
  }
  return s;
}

// Fixed-point formatting for presentation tables.
inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

inline std::string row(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += quote(cells[i]);
  }
  return out + '\n';
}

inline std::vector<std::string> split(const std::string& line) {
  using Tok = boost::tokenizer<boost::escaped_list_separator<char>>;
  std::vector<std::string> out;
  for (const auto& cell : Tok(line)) out.push_back(cell);
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw CsvError("missing CSV column: " + name);
  }
};

inline Table parse(std::istream& is) {
  Table t;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      if (cells.size() != t.header.size()) throw CsvError("ragged CSV row: " + line);
      t.rows.push_back(std::move(cells));
    }
  }
  return t;
}

inline Table parse(const std::string& text) {
  std::istringstream is(text);
  return parse(is);
}

inline Table read(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CsvError("cannot open CSV: " + path);
  return parse(is);
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CsvError("cannot open for writing: " + path);
  os << content;
  if (!os) throw CsvError("write failed: " + path);
}

}  // namespace dgc::csv
