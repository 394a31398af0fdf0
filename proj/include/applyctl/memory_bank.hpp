#pragma once

// Rule / exemplar memory with a paired-utility evidence ledger, Hoeffding-UCB
// retirement and frozen snapshots.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "applyctl/digest.hpp"
#include "applyctl/error.hpp"

namespace applyctl {

enum class BankKind { rule, exemplar };
enum class EntryStatus { active, retired };
enum class Stage { fit, test };
enum class ContentVersion { original, repair, corrupt };

inline std::string_view to_string(BankKind k) { return k == BankKind::rule ? "rule" : "exemplar"; }
inline std::string_view to_string(EntryStatus s) { return s == EntryStatus::active ? "active" : "retired"; }
inline std::string_view to_string(Stage s) { return s == Stage::fit ? "fit" : "test"; }
inline std::string_view to_string(ContentVersion v) {
  switch (v) {
    case ContentVersion::original: return "original";
    case ContentVersion::repair: return "repair";
    case ContentVersion::corrupt: return "corrupt";
  }
  return "original";
}

inline BankKind parse_bank_kind(std::string_view s) {
  if (s == "rule") return BankKind::rule;
  if (s == "exemplar") return BankKind::exemplar;
  throw FormatError("unknown bank kind: " + std::string(s));
}

inline EntryStatus parse_entry_status(std::string_view s) {
  if (s == "active") return EntryStatus::active;
  if (s == "retired") return EntryStatus::retired;
  throw FormatError("unknown entry status: " + std::string(s));
}

struct EvidenceRecord {
  std::int64_t episode_id = 0;
  double utility = 0.0;  // paired utility vs the baseline, in [-1, 1]
  int iteration = 0;
};

struct MemoryEntry {
  std::string id;
  BankKind bank_kind = BankKind::rule;
  std::string payload;
  std::vector<double> embedding;
  EntryStatus status = EntryStatus::active;
  std::vector<EvidenceRecord> evidence;

  std::size_t evidence_count() const { return evidence.size(); }

  double evidence_mean() const {
    if (evidence.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : evidence) s += r.utility;
    return s / static_cast<double>(evidence.size());
  }
};

// Upper confidence bound on mean utility with Hoeffding radius for support [-1, 1]:
// mean + sqrt(ln(2/delta) / (2n)).
inline double hoeffding_ucb(double mean, std::int64_t n, double delta) {
  if (n < 1) throw std::invalid_argument("hoeffding_ucb needs n >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0,1)");
  return mean + std::sqrt(std::log(2.0 / delta) / (2.0 * static_cast<double>(n)));
}

struct SnapshotEntry {
  std::string id;
  std::string payload;
  std::vector<double> embedding;
  ContentVersion version = ContentVersion::original;
};

// Immutable view of the active entries of a bank.
struct BankSnapshot {
  BankKind bank_kind = BankKind::rule;
  std::vector<SnapshotEntry> entries;
  std::string content_hash;

  std::vector<std::string> active_entry_ids() const {
    std::vector<std::string> ids;
    ids.reserve(entries.size());
    for (const auto& e : entries) ids.push_back(e.id);
    return ids;
  }

  const SnapshotEntry* find(std::string_view id) const {
    for (const auto& e : entries) {
      if (e.id == id) return &e;
    }
    return nullptr;
  }

  std::size_t dimension() const { return entries.empty() ? 0 : entries.front().embedding.size(); }
};

// Hash over kind, ids, payloads and embeddings of the entries, in id order.
inline std::string snapshot_content_hash(BankKind kind, const std::vector<SnapshotEntry>& entries) {
  std::vector<const SnapshotEntry*> sorted;
  sorted.reserve(entries.size());
  for (const auto& e : entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  Sha256 h;
  h.field(to_string(kind)).field(static_cast<std::int64_t>(sorted.size()));
  for (const auto* e : sorted) {
    h.field(e->id).field(e->payload).field(static_cast<std::int64_t>(e->embedding.size()));
    for (double v : e->embedding) h.field(v);
  }
  return h.hex();
}

class MemoryBank {
 public:
  explicit MemoryBank(BankKind kind) : kind_(kind) {}

  BankKind kind() const { return kind_; }
  Stage stage() const { return stage_; }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t dimension() const { return entries_.empty() ? 0 : entries_.front().embedding.size(); }

  void add(MemoryEntry e) {
    require_fit("add entry");
    if (e.bank_kind != kind_) throw std::invalid_argument("entry kind does not match bank kind");
    if (index_.count(e.id)) throw std::invalid_argument("duplicate entry id: " + e.id);
    if (!entries_.empty() && e.embedding.size() != dimension()) {
      throw std::invalid_argument("embedding length differs from the bank's: " + e.id);
    }
    index_.emplace(e.id, entries_.size());
    entries_.push_back(std::move(e));
  }

  const MemoryEntry& entry(std::string_view id) const { return entries_[locate(id)]; }
  bool contains(std::string_view id) const { return index_.count(std::string(id)) != 0; }

  // Evidence may only reference these episodes once set (the fit split).
  void restrict_evidence_to(std::unordered_set<std::int64_t> fit_episodes) { fit_episodes_ = std::move(fit_episodes); }

  std::size_t append_evidence(std::string_view id, const EvidenceRecord& rec) {
    require_fit("append evidence");
    auto& e = entries_[locate(id)];
    if (e.status != EntryStatus::active) throw std::invalid_argument("cannot add evidence to retired entry " + e.id);
    if (!(rec.utility >= -1.0 && rec.utility <= 1.0)) throw std::out_of_range("utility outside [-1, 1]");
    if (fit_episodes_ && !fit_episodes_->count(rec.episode_id)) {
      throw ProtocolViolation("evidence references a non-fit episode");
    }
    e.evidence.push_back(rec);
    return e.evidence.size();
  }

  void retire(std::string_view id) {
    require_fit("retire entry");
    entries_[locate(id)].status = EntryStatus::retired;
  }

  // One-way switch into the test stage; every mutating call fails afterwards.
  void seal() { stage_ = Stage::test; }

 private:
  std::size_t locate(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) throw LookupError("unknown memory entry: " + std::string(id));
    return it->second;
  }

  void require_fit(const char* what) const {
    if (stage_ != Stage::fit) throw ProtocolViolation(std::string("cannot ") + what + " during the test stage");
  }

  BankKind kind_;
  Stage stage_ = Stage::fit;
  std::vector<MemoryEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<std::unordered_set<std::int64_t>> fit_episodes_;
};

// Retire every active entry with evidence whose UCB falls below zero.
// Entries without evidence are left alone.
inline std::vector<std::string> retirement_sweep(MemoryBank& bank, double delta = 0.05) {
  if (bank.stage() != Stage::fit) throw ProtocolViolation("retirement sweep during the test stage");
  std::vector<std::string> retired;
  for (const auto& e : bank.entries()) {
    if (e.status != EntryStatus::active || e.evidence.empty()) continue;
    if (hoeffding_ucb(e.evidence_mean(), static_cast<std::int64_t>(e.evidence_count()), delta) < 0.0) {
      retired.push_back(e.id);
    }
  }
  for (const auto& id : retired) bank.retire(id);
  return retired;
}

inline BankSnapshot freeze_bank(const MemoryBank& bank) {
  BankSnapshot snap;
  snap.bank_kind = bank.kind();
  for (const auto& e : bank.entries()) {
    if (e.status == EntryStatus::active) snap.entries.push_back({e.id, e.payload, e.embedding, ContentVersion::original});
  }
  snap.content_hash = snapshot_content_hash(snap.bank_kind, snap.entries);
  return snap;
}

}  // namespace applyctl
