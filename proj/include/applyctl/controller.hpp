#pragma once

// Per-step control loop: route on baseline confidence, run the memory-conditioned
// second pass, accept only past the margin and the guard conjunction, otherwise roll
// back. Budget and cooldown cap routing per episode. The solver (an LLM in
// deployment, the simulator here) is a template parameter.

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "applyctl/error.hpp"
#include "applyctl/memory_bank.hpp"
#include "applyctl/policy.hpp"
#include "applyctl/retrieval.hpp"
#include "applyctl/stats.hpp"

namespace applyctl {

struct StepKey {
  std::uint32_t replicate = 0;
  std::int64_t example = 0;
  std::uint32_t step = 0;
};

struct Decoded {
  std::int64_t action = 0;
  double confidence = 0.0;
};

using GuardResults = std::map<Guard, bool>;

struct SecondPass {
  Decoded decoded;
  GuardResults guards;
};

template <class S>
concept StepSolver = requires(const S& s, const StepKey& k, ConfidenceSignal sig,
                              std::span<const SnapshotEntry* const> injected, std::int64_t action) {
  { s.decode_baseline(k, sig) } -> std::same_as<Decoded>;
  { s.decode_second(k, sig, injected) } -> std::same_as<SecondPass>;
  { s.query(k) } -> std::same_as<Query>;
  { s.is_correct(k, action) } -> std::same_as<bool>;
  { s.steps_per_episode() } -> std::convertible_to<std::size_t>;
};

struct BankSet {
  const BankSnapshot* rule = nullptr;
  const BankSnapshot* exemplar = nullptr;

  const BankSnapshot& at(BankKind k) const {
    const auto* p = k == BankKind::rule ? rule : exemplar;
    if (!p) throw LookupError("policy references missing bank: " + std::string(to_string(k)));
    return *p;
  }
};

// ---- decision rules ---------------------------------------------------------

inline bool route_decision(double confidence, double tau) { return confidence < tau; }

// Nearest-rank percentile of the fit confidences; routing `c < tau` then sends
// roughly p% of the same list.
inline double select_threshold_percentile(const std::vector<double>& fit_confidences, double percentile) {
  if (fit_confidences.empty()) throw std::invalid_argument("cannot pick a threshold from no confidences");
  return stats::nearest_rank_percentile(fit_confidences, percentile);
}

// Margin check and guard conjunction; guards not enabled count as passing, an
// enabled guard without a result counts as failing.
inline bool accept_decision(double c, std::optional<double> c_second, double margin, const GuardResults& guards,
                            const std::set<Guard>& enabled) {
  if (!c_second) throw std::invalid_argument("acceptance needs a second pass");
  if (!(*c_second >= c + margin)) return false;
  for (auto g : enabled) {
    auto it = guards.find(g);
    if (it == guards.end() || !it->second) return false;
  }
  return true;
}

// ---- bank-policy composition -------------------------------------------------

enum class AcceptanceMode {
  full,    // margin + guards
  gate,    // guards only, margin bypassed
  commit,  // always keep the second pass (no rollback)
};

struct AttemptPlan {
  std::vector<BankKind> banks;  // injected jointly; empty = no-memory pass
  AcceptanceMode mode = AcceptanceMode::full;
  std::string label;
};

inline std::string context_label(const std::vector<BankKind>& banks) {
  if (banks.empty()) return "retry";
  if (banks.size() == 2) return "dual";
  return std::string(to_string(banks.front()));
}

inline std::vector<AttemptPlan> compose_controlled(BankPolicy bp, BankKind bank, BankPolicy member) {
  const auto plan = [](std::vector<BankKind> b, AcceptanceMode m) {
    auto label = context_label(b);
    return AttemptPlan{std::move(b), m, std::move(label)};
  };
  switch (bp) {
    case BankPolicy::gate_only: return {plan({bank}, AcceptanceMode::gate)};
    case BankPolicy::choose: return {plan({bank}, AcceptanceMode::full)};
    case BankPolicy::cascade_rule_then_exemplar:
      return {plan({BankKind::rule}, AcceptanceMode::full), plan({BankKind::exemplar}, AcceptanceMode::full)};
    case BankPolicy::cascade_exemplar_then_rule:
      return {plan({BankKind::exemplar}, AcceptanceMode::full), plan({BankKind::rule}, AcceptanceMode::full)};
    case BankPolicy::dual: return {plan({BankKind::rule, BankKind::exemplar}, AcceptanceMode::full)};
    case BankPolicy::multibank_best:
      if (!is_multibank_member(member)) throw std::invalid_argument("multibank_best needs a resolved member");
      return compose_controlled(member, bank, member);
  }
  return {};
}

// Banks the controlled composition touches, in rule-then-exemplar order. The
// exposure baselines inject all of them at once.
inline std::vector<BankKind> exposure_banks(const PolicyConfig& p) {
  bool rule = false, ex = false;
  for (const auto& a : compose_controlled(p.bank_policy, p.bank, p.multibank_member)) {
    for (auto b : a.banks) (b == BankKind::rule ? rule : ex) = true;
  }
  std::vector<BankKind> out;
  if (rule) out.push_back(BankKind::rule);
  if (ex) out.push_back(BankKind::exemplar);
  return out;
}

inline constexpr std::uint32_t kFixedBudgetRoutes = 2;

// Ordered attempts for a routed step. Verifies every referenced bank exists.
inline std::vector<AttemptPlan> compose_bank_policy(const PolicyConfig& p, const BankSet& banks) {
  std::vector<AttemptPlan> plans;
  switch (p.family) {
    case PolicyFamily::baseline: break;
    case PolicyFamily::controlled: plans = compose_controlled(p.bank_policy, p.bank, p.multibank_member); break;
    case PolicyFamily::retry: plans = {AttemptPlan{{}, AcceptanceMode::commit, "retry"}}; break;
    case PolicyFamily::always_retrieve:
    case PolicyFamily::fixed_budget: {
      auto b = exposure_banks(p);
      auto label = context_label(b);
      plans = {AttemptPlan{std::move(b), AcceptanceMode::commit, std::move(label)}};
      break;
    }
  }
  for (const auto& a : plans) {
    for (auto b : a.banks) (void)banks.at(b);
  }
  return plans;
}

// ---- records -----------------------------------------------------------------

struct Attempt {
  std::string context;
  std::vector<std::pair<BankKind, RetrievalResult>> retrieved;
  std::optional<Decoded> second;  // absent when there was nothing to inject
  GuardResults guard_results;
  bool second_correct = false;
  bool accepted = false;

  std::vector<std::string> retrieved_ids() const {
    std::vector<std::string> ids;
    for (const auto& [k, r] : retrieved) ids.insert(ids.end(), r.retrieved_ids.begin(), r.retrieved_ids.end());
    return ids;
  }
};

struct StepRecord {
  std::uint32_t step_index = 0;
  std::int64_t query_id = 0;
  std::int64_t baseline_action = 0;
  double baseline_confidence = 0.0;
  bool baseline_correct = false;
  bool routed = false;
  std::optional<RetrievalResult> retrieved;
  std::optional<std::int64_t> second_action;
  std::optional<double> second_confidence;
  GuardResults guard_results;
  bool accepted = false;
  std::int64_t final_action = 0;
  bool final_correct = false;
  std::uint32_t calls_used = 1;
  std::string reject_reason;  // empty when accepted or not routed for a reason other than budget
  std::vector<Attempt> attempts;
};

struct EpisodeTrace {
  std::int64_t episode_id = 0;
  std::uint32_t replicate = 0;
  std::vector<StepRecord> steps;
  double outcome_utility = 0.0;  // mean per-step correctness
  bool success = false;          // every step correct
  std::uint32_t routed_count = 0;
  std::uint32_t accepted_count = 0;
  std::uint32_t total_calls = 0;

  void recount() {
    routed_count = accepted_count = total_calls = 0;
    std::size_t correct = 0;
    for (const auto& s : steps) {
      routed_count += s.routed;
      accepted_count += s.accepted;
      total_calls += s.calls_used;
      correct += s.final_correct;
    }
    outcome_utility = steps.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(steps.size());
    success = !steps.empty() && correct == steps.size();
  }
};

struct BudgetState {
  std::uint32_t routed = 0;
  std::uint32_t cooldown_remaining = 0;
};

// ---- execution ---------------------------------------------------------------

namespace detail {
inline RetrievalResult merged(const std::vector<std::pair<BankKind, RetrievalResult>>& parts, std::int64_t qid) {
  RetrievalResult r;
  r.query_id = qid;
  for (const auto& [k, p] : parts) {
    r.retrieved_ids.insert(r.retrieved_ids.end(), p.retrieved_ids.begin(), p.retrieved_ids.end());
    r.similarities.insert(r.similarities.end(), p.similarities.begin(), p.similarities.end());
  }
  return r;
}
}  // namespace detail

// Retrieval can be replaced (fixed-retrieval replay) through this hook; by default
// it queries the snapshot.
struct LiveRetriever {
  RetrievalConfig config;
  RetrievalResult operator()(const Query& q, const BankSnapshot& snap) const { return retrieve(q, snap, config); }
};

template <StepSolver Solver, class Retriever = LiveRetriever>
StepRecord run_step(const Solver& solver, const StepKey& key, const PolicyConfig& policy, const BankSet& banks,
                    BudgetState& budget, const Retriever& retriever) {
  StepRecord rec;
  rec.step_index = key.step;
  const Query query = solver.query(key);
  rec.query_id = query.id;
  const Decoded base = solver.decode_baseline(key, policy.confidence_signal);
  rec.baseline_action = base.action;
  rec.baseline_confidence = base.confidence;
  rec.baseline_correct = solver.is_correct(key, base.action);
  rec.final_action = base.action;
  rec.final_correct = rec.baseline_correct;
  rec.calls_used = 1;

  bool eligible = false;
  bool respects_budget = true;
  switch (policy.family) {
    case PolicyFamily::baseline: break;
    case PolicyFamily::controlled:
    case PolicyFamily::retry: eligible = route_decision(base.confidence, policy.tau); break;
    case PolicyFamily::always_retrieve: eligible = true; respects_budget = false; break;
    case PolicyFamily::fixed_budget:
      eligible = budget.routed < kFixedBudgetRoutes;
      respects_budget = false;
      break;
  }
  if (respects_budget) {
    if (budget.cooldown_remaining > 0) {
      --budget.cooldown_remaining;
      if (eligible) rec.reject_reason = "cooldown";
      eligible = false;
    } else if (policy.budget_B && budget.routed >= *policy.budget_B) {
      if (eligible) rec.reject_reason = "budget";
      eligible = false;
    }
  }
  if (!eligible) return rec;

  rec.routed = true;
  ++budget.routed;
  if (respects_budget) budget.cooldown_remaining = policy.cooldown;

  for (const auto& plan : compose_bank_policy(policy, banks)) {
    Attempt att;
    att.context = plan.label;
    ++rec.calls_used;
    std::vector<const SnapshotEntry*> injected;
    for (auto b : plan.banks) {
      const auto& snap = banks.at(b);
      auto r = retriever(query, snap);
      for (const auto& id : r.retrieved_ids) injected.push_back(snap.find(id));
      att.retrieved.emplace_back(b, std::move(r));
    }
    const bool memory_pass = !plan.banks.empty();
    if (memory_pass && injected.empty()) {
      rec.reject_reason = "empty_retrieval";
      rec.attempts.push_back(std::move(att));
      continue;
    }
    const SecondPass sp = solver.decode_second(key, policy.confidence_signal, injected);
    att.second = sp.decoded;
    att.guard_results = sp.guards;
    att.second_correct = solver.is_correct(key, sp.decoded.action);
    switch (plan.mode) {
      case AcceptanceMode::full:
        att.accepted = accept_decision(base.confidence, sp.decoded.confidence, policy.margin_m, sp.guards,
                                       policy.guards_enabled);
        break;
      case AcceptanceMode::gate:
        att.accepted = accept_decision(base.confidence, sp.decoded.confidence,
                                       -std::numeric_limits<double>::infinity(), sp.guards, policy.guards_enabled);
        break;
      case AcceptanceMode::commit: att.accepted = true; break;
    }
    if (!att.accepted) {
      rec.reject_reason = sp.decoded.confidence >= base.confidence + policy.margin_m || plan.mode != AcceptanceMode::full
                              ? "guard"
                              : "margin";
    }
    rec.attempts.push_back(std::move(att));
    if (rec.attempts.back().accepted) break;
  }

  // The record mirrors the last attempt: the accepted one, or the final rejection.
  const Attempt& last = rec.attempts.back();
  rec.retrieved = detail::merged(last.retrieved, rec.query_id);
  if (last.second) {
    rec.second_action = last.second->action;
    rec.second_confidence = last.second->confidence;
  }
  rec.guard_results = last.guard_results;
  rec.accepted = last.accepted;
  if (rec.accepted) {
    rec.reject_reason.clear();
    rec.final_action = last.second->action;
    rec.final_correct = last.second_correct;
  }
  return rec;
}

template <StepSolver Solver, class Retriever = LiveRetriever>
EpisodeTrace run_episode(const Solver& solver, std::uint32_t replicate, std::int64_t example,
                         const PolicyConfig& policy, const BankSet& banks, const Retriever& retriever) {
  EpisodeTrace t;
  t.episode_id = example;
  t.replicate = replicate;
  BudgetState budget;
  const auto n_steps = static_cast<std::uint32_t>(solver.steps_per_episode());
  for (std::uint32_t s = 0; s < n_steps; ++s) {
    t.steps.push_back(run_step(solver, StepKey{replicate, example, s}, policy, banks, budget, retriever));
  }
  t.recount();
  return t;
}

// ---- oracle ------------------------------------------------------------------

struct OracleCandidate {
  std::string context;
  std::int64_t action = 0;
  bool correct = false;
};

struct OracleStep {
  std::int64_t query_id = 0;
  std::int64_t baseline_action = 0;
  bool baseline_correct = false;
  std::vector<OracleCandidate> candidates;
};

// Paired upper bound: every step is routed and a candidate is committed only when
// its realized utility strictly exceeds the baseline's.
inline EpisodeTrace oracle_policy(std::int64_t episode_id, std::uint32_t replicate, std::span<const OracleStep> steps) {
  EpisodeTrace t;
  t.episode_id = episode_id;
  t.replicate = replicate;
  std::uint32_t idx = 0;
  for (const auto& os : steps) {
    StepRecord r;
    r.step_index = idx++;
    r.query_id = os.query_id;
    r.baseline_action = os.baseline_action;
    r.baseline_correct = os.baseline_correct;
    r.final_action = os.baseline_action;
    r.final_correct = os.baseline_correct;
    r.routed = true;
    r.calls_used = 2;
    if (!os.baseline_correct) {
      for (const auto& c : os.candidates) {
        if (c.correct) {
          r.accepted = true;
          r.second_action = c.action;
          r.final_action = c.action;
          r.final_correct = true;
          break;
        }
      }
    }
    t.steps.push_back(std::move(r));
  }
  t.recount();
  return t;
}

// Second-pass candidates over every context the policy families can reach.
template <StepSolver Solver, class Retriever = LiveRetriever>
OracleStep oracle_step(const Solver& solver, const StepKey& key, const BankSet& banks, const Retriever& retriever) {
  OracleStep os;
  const Query q = solver.query(key);
  os.query_id = q.id;
  const auto base = solver.decode_baseline(key, ConfidenceSignal::mean_logprob);
  os.baseline_action = base.action;
  os.baseline_correct = solver.is_correct(key, base.action);
  std::vector<std::vector<BankKind>> contexts;
  if (banks.rule) contexts.push_back({BankKind::rule});
  if (banks.exemplar) contexts.push_back({BankKind::exemplar});
  if (banks.rule && banks.exemplar) contexts.push_back({BankKind::rule, BankKind::exemplar});
  for (const auto& ctx : contexts) {
    std::vector<const SnapshotEntry*> injected;
    for (auto b : ctx) {
      const auto& snap = banks.at(b);
      for (const auto& id : retriever(q, snap).retrieved_ids) injected.push_back(snap.find(id));
    }
    if (injected.empty()) continue;
    const auto sp = solver.decode_second(key, ConfidenceSignal::mean_logprob, injected);
    os.candidates.push_back({context_label(ctx), sp.decoded.action, solver.is_correct(key, sp.decoded.action)});
  }
  return os;
}

template <StepSolver Solver, class Retriever = LiveRetriever>
EpisodeTrace run_oracle_episode(const Solver& solver, std::uint32_t replicate, std::int64_t example,
                                const BankSet& banks, const Retriever& retriever) {
  std::vector<OracleStep> steps;
  const auto n_steps = static_cast<std::uint32_t>(solver.steps_per_episode());
  for (std::uint32_t s = 0; s < n_steps; ++s) steps.push_back(oracle_step(solver, {replicate, example, s}, banks, retriever));
  return oracle_policy(example, replicate, steps);
}

// ---- trace utilities -----------------------------------------------------------

inline std::vector<RoutedRetrieval> routed_retrievals(std::span<const EpisodeTrace> traces) {
  std::vector<RoutedRetrieval> out;
  for (const auto& t : traces) {
    for (const auto& s : t.steps) {
      if (s.routed && s.retrieved) out.push_back({s.query_id, s.retrieved->retrieved_ids});
    }
  }
  return out;
}

inline FrozenRetrievalMap freeze_identities(std::span<const EpisodeTrace> traces) {
  const auto routed = routed_retrievals(traces);
  return freeze_identities(std::span<const RoutedRetrieval>(routed));
}

inline std::vector<bool> successes(std::span<const EpisodeTrace> traces) {
  std::vector<bool> out;
  out.reserve(traces.size());
  for (const auto& t : traces) out.push_back(t.success);
  return out;
}

struct TraceTotals {
  std::size_t episodes = 0;
  std::size_t steps = 0;
  std::size_t routed = 0;
  std::size_t accepted = 0;
  std::size_t calls = 0;

  double calls_per_query() const { return episodes ? static_cast<double>(calls) / static_cast<double>(episodes) : 0.0; }
  double routed_frac() const { return steps ? static_cast<double>(routed) / static_cast<double>(steps) : 0.0; }
  double accepted_frac() const { return steps ? static_cast<double>(accepted) / static_cast<double>(steps) : 0.0; }
};

inline TraceTotals totals(std::span<const EpisodeTrace> traces) {
  TraceTotals t;
  for (const auto& e : traces) {
    ++t.episodes;
    t.steps += e.steps.size();
    t.routed += e.routed_count;
    t.accepted += e.accepted_count;
    t.calls += e.total_calls;
  }
  return t;
}

inline nlohmann::json to_json(const RetrievalResult& r) {
  return {{"query_id", r.query_id}, {"retrieved_ids", r.retrieved_ids}, {"similarities", r.similarities}};
}

inline nlohmann::json to_json(const StepRecord& s) {
  nlohmann::json j{{"step_index", s.step_index},
                   {"query_id", s.query_id},
                   {"baseline_action", s.baseline_action},
                   {"baseline_confidence", s.baseline_confidence},
                   {"routed", s.routed},
                   {"accepted", s.accepted},
                   {"final_action", s.final_action},
                   {"final_correct", s.final_correct},
                   {"calls_used", s.calls_used}};
  if (s.retrieved) j["retrieved"] = to_json(*s.retrieved);
  if (s.second_action) j["second_action"] = *s.second_action;
  if (s.second_confidence) j["second_confidence"] = *s.second_confidence;
  if (!s.guard_results.empty()) {
    nlohmann::json g = nlohmann::json::object();
    for (const auto& [k, v] : s.guard_results) g[std::string(to_string(k))] = v;
    j["guard_results"] = g;
  }
  if (!s.reject_reason.empty()) j["reject_reason"] = s.reject_reason;
  return j;
}

inline nlohmann::json to_json(const EpisodeTrace& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps) steps.push_back(to_json(s));
  return {{"episode_id", t.episode_id},   {"replicate", t.replicate},       {"outcome_utility", t.outcome_utility},
          {"success", t.success},         {"routed_count", t.routed_count}, {"accepted_count", t.accepted_count},
          {"total_calls", t.total_calls}, {"steps", steps}};
}

}  // namespace applyctl
