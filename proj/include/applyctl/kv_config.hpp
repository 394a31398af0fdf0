#pragma once

// Flat `key = value` files. '#' starts a comment; blank lines are ignored.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "applyctl/error.hpp"

namespace applyctl {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    auto item = trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::istream& is) {
    KeyValueConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
      auto key = trim(std::string_view(line).substr(0, eq));
      auto value = trim(std::string_view(line).substr(eq + 1));
      if (key.empty()) throw FormatError("config line " + std::to_string(lineno) + ": empty key");
      if (!cfg.values_.emplace(key, value).second) {
        throw FormatError("config line " + std::to_string(lineno) + ": duplicate key " + key);
      }
    }
    return cfg;
  }

  static KeyValueConfig parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  static KeyValueConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config file: " + path);
    return parse(in);
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string get_or(const std::string& key, std::string fallback) const { return get(key).value_or(std::move(fallback)); }

  double get_double(const std::string& key, double fallback) const {
    auto v = get(key);
    return v ? parse_double(key, *v) : fallback;
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto v = get(key);
    return v ? parse_int(key, *v) : fallback;
  }

  static double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size()) throw FormatError("key " + key + ": not a number: " + v);
    return d;
  }

  static long long parse_int(const std::string& key, const std::string& v) {
    long long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) throw FormatError("key " + key + ": not an integer: " + v);
    return out;
  }

  // Keys that were never read, so misspelled keys fail loudly.
  std::vector<std::string> unknown_keys(const std::set<std::string>& known) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
      if (!known.count(k)) out.push_back(k);
    }
    return out;
  }

  // Keys of a canonical `key = value` text, each with `prefix` prepended.
  static std::set<std::string> keys_of(const std::string& text, const std::string& prefix) {
    std::set<std::string> out;
    for (const auto& [k, v] : parse_string(text).values_) out.insert(prefix + k);
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace applyctl
