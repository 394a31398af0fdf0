#pragma once

// Bank file: one entry per line, tab separated
//
//   id <TAB> bank_kind <TAB> status <TAB> payload <TAB> embedding
//
// payload escapes backslash, tab, CR and LF as \\ \t \r \n. The embedding is a
// space-separated list of fixed-width decimals (%+.9f).

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "applyctl/error.hpp"
#include "applyctl/memory_bank.hpp"

namespace applyctl {

inline std::string escape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string unescape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (++i == s.size()) throw FormatError("dangling escape in payload");
    switch (s[i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      default: throw FormatError(std::string("unknown escape \\") + s[i]);
    }
  }
  return out;
}

inline std::string format_embedding(const std::vector<double>& v) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%+.9f", v[i]);
    if (i) out.push_back(' ');
    out += buf;
  }
  return out;
}

inline void write_bank_file(std::ostream& os, const MemoryBank& bank) {
  for (const auto& e : bank.entries()) {
    os << e.id << '\t' << to_string(e.bank_kind) << '\t' << to_string(e.status) << '\t' << escape_field(e.payload)
       << '\t' << format_embedding(e.embedding) << '\n';
  }
}

inline MemoryEntry parse_bank_line(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  for (;;) {
    const auto tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (cols.size() != 5) throw FormatError("bank line needs 5 tab-separated fields");
  MemoryEntry e;
  e.id = cols[0];
  if (e.id.empty()) throw FormatError("empty entry id");
  e.bank_kind = parse_bank_kind(cols[1]);
  e.status = parse_entry_status(cols[2]);
  e.payload = unescape_field(cols[3]);
  std::istringstream is(cols[4]);
  std::string tok;
  while (is >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) throw FormatError("bad embedding value: " + tok);
    e.embedding.push_back(v);
  }
  if (e.embedding.empty()) throw FormatError("entry without embedding: " + e.id);
  return e;
}

// Retired entries come back retired; evidence is fit-time state and is not stored.
inline MemoryBank read_bank_file(std::istream& is) {
  std::string line;
  std::vector<MemoryEntry> parsed;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      parsed.push_back(parse_bank_line(line));
    } catch (const FormatError& err) {
      throw FormatError("bank file line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  if (parsed.empty()) throw FormatError("bank file is empty");
  MemoryBank bank(parsed.front().bank_kind);
  std::vector<std::string> retired;
  for (auto& e : parsed) {
    if (e.status == EntryStatus::retired) retired.push_back(e.id);
    e.status = EntryStatus::active;
    bank.add(std::move(e));
  }
  for (const auto& id : retired) bank.retire(id);
  return bank;
}

inline nlohmann::json snapshot_manifest(const BankSnapshot& snap) {
  return {{"bank_kind", std::string(to_string(snap.bank_kind))},
          {"active_entry_ids", snap.active_entry_ids()},
          {"content_hash", snap.content_hash}};
}

}  // namespace applyctl
