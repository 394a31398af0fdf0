#pragma once

// Hand-scripted solver for controller tests: every step's baseline and per-context
// second pass are given explicitly. Context is read off the injected ids: all
// "R..." is rule, all "E..." is exemplar, a mix is dual.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "applyctl/controller.hpp"

namespace scripted {

using namespace applyctl;

struct Pass {
  bool correct = false;
  double confidence = 0.5;
  GuardResults guards{{Guard::format, true}, {Guard::valid, true}, {Guard::progress, true}, {Guard::contract, true}};
};

struct Step {
  Pass baseline;
  std::map<std::string, Pass> second;  // by context label
};

struct Solver {
  std::vector<std::vector<Step>> episodes;  // [example][step]
  mutable int second_calls = 0;

  std::size_t steps_per_episode() const { return episodes.front().size(); }
  std::int64_t answer(const StepKey& k) const { return 100 + k.example * 10 + k.step; }
  const Step& at(const StepKey& k) const { return episodes.at(static_cast<std::size_t>(k.example)).at(k.step); }

  Query query(const StepKey& k) const {
    return Query{k.example * 100 + k.step, {1.0, 0.0}, {}};
  }
  bool is_correct(const StepKey& k, std::int64_t a) const { return a == answer(k); }

  Decoded decode_baseline(const StepKey& k, ConfidenceSignal) const {
    const auto& b = at(k).baseline;
    return {b.correct ? answer(k) : answer(k) + 1, b.confidence};
  }

  SecondPass decode_second(const StepKey& k, ConfidenceSignal sig, std::span<const SnapshotEntry* const> inj) const {
    ++second_calls;
    if (inj.empty()) {
      SecondPass sp;
      sp.decoded = decode_baseline(k, sig);
      sp.guards = Pass{}.guards;
      return sp;
    }
    bool rule = false, ex = false;
    for (const auto* e : inj) (e->id[0] == 'R' ? rule : ex) = true;
    const std::string ctx = rule && ex ? "dual" : rule ? "rule" : "exemplar";
    const auto& p = at(k).second.at(ctx);
    return {{p.correct ? answer(k) : answer(k) + 2, p.confidence}, p.guards};
  }
};

static_assert(StepSolver<Solver>);

// One-entry banks aligned with the scripted query direction, so retrieval always hits.
inline BankSnapshot one_entry_bank(BankKind kind, std::vector<double> embedding = {1.0, 0.0}) {
  BankSnapshot s;
  s.bank_kind = kind;
  s.entries = {{kind == BankKind::rule ? "R1" : "E1", "payload", std::move(embedding)}};
  s.content_hash = snapshot_content_hash(kind, s.entries);
  return s;
}

// Counts lookups per bank kind.
struct CountingRetriever {
  RetrievalConfig config;
  mutable std::map<BankKind, int> calls;
  RetrievalResult operator()(const Query& q, const BankSnapshot& s) const {
    ++calls[s.bank_kind];
    return retrieve(q, s, config);
  }
};

}  // namespace scripted
