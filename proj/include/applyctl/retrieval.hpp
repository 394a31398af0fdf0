#pragma once

// Thresholded cosine top-k over a frozen snapshot, fixed-retrieval identity maps
// and repair/corrupt content edits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "applyctl/error.hpp"
#include "applyctl/memory_bank.hpp"

namespace applyctl {

struct Query {
  std::int64_t id = 0;
  std::vector<double> embedding;
  std::string text;
};

struct RetrievalResult {
  std::int64_t query_id = 0;
  std::vector<std::string> retrieved_ids;
  std::vector<double> similarities;

  bool empty() const { return retrieved_ids.empty(); }
  bool operator==(const RetrievalResult&) const = default;
};

struct RetrievalConfig {
  double threshold = 0.6;
  std::size_t k_max = 2;
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// Up to k_max entries with similarity strictly above the threshold, by descending
// similarity; equal similarities are ordered by ascending id.
inline RetrievalResult retrieve(const Query& query, const BankSnapshot& snapshot, double threshold, std::size_t k_max) {
  if (k_max == 0) throw std::invalid_argument("k_max must be positive");
  if (!snapshot.entries.empty() && query.embedding.size() != snapshot.dimension()) {
    throw std::invalid_argument("query dimension does not match the bank");
  }
  std::vector<std::pair<double, const std::string*>> scored;
  for (const auto& e : snapshot.entries) {
    const double s = cosine_similarity(query.embedding, e.embedding);
    if (s > threshold) scored.emplace_back(s, &e.id);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return *x.second < *y.second;
  });
  RetrievalResult r;
  r.query_id = query.id;
  for (std::size_t i = 0; i < scored.size() && i < k_max; ++i) {
    r.retrieved_ids.push_back(*scored[i].second);
    r.similarities.push_back(scored[i].first);
  }
  return r;
}

inline RetrievalResult retrieve(const Query& query, const BankSnapshot& snapshot, const RetrievalConfig& cfg) {
  return retrieve(query, snapshot, cfg.threshold, cfg.k_max);
}

// query id -> retrieved identities recorded in an original run.
class FrozenRetrievalMap {
 public:
  void insert(std::int64_t query_id, std::vector<std::string> ids) {
    auto [it, fresh] = map_.emplace(query_id, ids);
    if (!fresh && it->second != ids) {
      throw std::invalid_argument("conflicting retrieved identities for query " + std::to_string(query_id));
    }
  }

  const std::vector<std::string>& lookup(std::int64_t query_id) const {
    auto it = map_.find(query_id);
    if (it == map_.end()) throw LookupError("no frozen identity for query " + std::to_string(query_id));
    return it->second;
  }

  bool contains(std::int64_t query_id) const { return map_.count(query_id) != 0; }
  std::size_t size() const { return map_.size(); }
  bool empty() const { return map_.empty(); }
  const std::map<std::int64_t, std::vector<std::string>>& entries() const { return map_; }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [q, ids] : map_) j[std::to_string(q)] = ids;
    return j;
  }

  static FrozenRetrievalMap from_json(const nlohmann::json& j) {
    FrozenRetrievalMap m;
    for (auto it = j.begin(); it != j.end(); ++it) {
      m.insert(std::stoll(it.key()), it.value().get<std::vector<std::string>>());
    }
    return m;
  }

 private:
  std::map<std::int64_t, std::vector<std::string>> map_;
};

// Routed queries and the identities they retrieved.
struct RoutedRetrieval {
  std::int64_t query_id = 0;
  std::vector<std::string> retrieved_ids;
};

inline FrozenRetrievalMap freeze_identities(std::span<const RoutedRetrieval> routed) {
  FrozenRetrievalMap m;
  for (const auto& r : routed) m.insert(r.query_id, r.retrieved_ids);
  return m;
}

// Replays frozen identities instead of searching: returns the frozen ids that
// belong to `snap`, whatever their current embeddings.
struct FrozenRetriever {
  const FrozenRetrievalMap* frozen = nullptr;

  RetrievalResult operator()(const Query& q, const BankSnapshot& snap) const {
    RetrievalResult r;
    r.query_id = q.id;
    for (const auto& id : frozen->lookup(q.id)) {
      if (const auto* e = snap.find(id)) {
        r.retrieved_ids.push_back(id);
        r.similarities.push_back(cosine_similarity(q.embedding, e->embedding));
      }
    }
    return r;
  }
};

enum class EditKind { repair, corrupt };

inline std::string_view to_string(EditKind k) { return k == EditKind::repair ? "repair" : "corrupt"; }

inline EditKind parse_edit_kind(std::string_view s) {
  if (s == "repair") return EditKind::repair;
  if (s == "corrupt") return EditKind::corrupt;
  throw FormatError("unknown edit kind: " + std::string(s));
}

struct ContentEdit {
  std::string entry_id;
  std::string new_payload;
  EditKind edit_kind = EditKind::repair;
};

// Replaces payloads only; ids, embeddings and membership are preserved.
inline BankSnapshot apply_edits(const BankSnapshot& snapshot, std::span<const ContentEdit> edits) {
  BankSnapshot out = snapshot;
  for (const auto& ed : edits) {
    auto it = std::find_if(out.entries.begin(), out.entries.end(), [&](const auto& e) { return e.id == ed.entry_id; });
    if (it == out.entries.end()) throw LookupError("edit targets unknown entry: " + ed.entry_id);
    it->payload = ed.new_payload;
    it->version = ed.edit_kind == EditKind::repair ? ContentVersion::repair : ContentVersion::corrupt;
  }
  out.content_hash = snapshot_content_hash(out.bank_kind, out.entries);
  return out;
}

struct HitPartition {
  std::vector<std::int64_t> hit;
  std::vector<std::int64_t> non_hit;
};

// Routed queries whose frozen retrieved set intersects the edited entries.
inline HitPartition target_hit_partition(const FrozenRetrievalMap& frozen, const std::set<std::string>& edited_ids) {
  if (frozen.empty()) throw std::invalid_argument("empty frozen retrieval map");
  HitPartition p;
  for (const auto& [q, ids] : frozen.entries()) {
    const bool hit = std::any_of(ids.begin(), ids.end(), [&](const auto& id) { return edited_ids.count(id) != 0; });
    (hit ? p.hit : p.non_hit).push_back(q);
  }
  return p;
}

inline std::vector<ContentEdit> read_edits(std::istream& is) {
  std::vector<ContentEdit> edits;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      edits.push_back({j.at("entry_id").get<std::string>(), j.at("new_payload").get<std::string>(),
                       parse_edit_kind(j.at("edit_kind").get<std::string>())});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("edits line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return edits;
}

inline nlohmann::json edit_to_json(const ContentEdit& e) {
  return {{"entry_id", e.entry_id}, {"edit_kind", std::string(to_string(e.edit_kind))}, {"new_payload", e.new_payload}};
}

}  // namespace applyctl
