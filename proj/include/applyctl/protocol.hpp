#pragma once

// Locked fit -> test protocol over a simulated world: candidate search and
// governance on the fit split, a hash-bound freeze manifest, paired test ledgers,
// and fixed-retrieval counterfactual replay with the free/content/drift audit.

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <nlohmann/json.hpp>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "applyctl/controller.hpp"
#include "applyctl/error.hpp"
#include "applyctl/kv_config.hpp"
#include "applyctl/memory_bank.hpp"
#include "applyctl/policy.hpp"
#include "applyctl/retrieval.hpp"
#include "applyctl/stats.hpp"
#include "applyctl/worldsim.hpp"

namespace applyctl {

// ---- splits and evaluation ------------------------------------------------------

struct SplitPlan {
  std::vector<std::int64_t> fit;
  std::vector<std::int64_t> test;

  static SplitPlan of(const World& w) { return {w.split(true), w.split(false)}; }
};

inline void check_disjoint(const SplitPlan& s) {
  std::unordered_set<std::int64_t> fit(s.fit.begin(), s.fit.end());
  for (auto id : s.test) {
    if (fit.count(id)) throw ProtocolViolation("example " + std::to_string(id) + " is in both fit and test splits");
  }
}

struct Evaluation {
  std::vector<EpisodeTrace> traces;  // ordered by (replicate, example)
  std::vector<bool> success;
  TraceTotals totals;

  double accuracy() const {
    return success.empty() ? 0.0
                           : static_cast<double>(std::count(success.begin(), success.end(), true)) /
                                 static_cast<double>(success.size());
  }
  double mean_calls() const { return totals.calls_per_query(); }
};

namespace detail {
inline Evaluation finish(std::vector<EpisodeTrace> traces) {
  Evaluation e;
  e.traces = std::move(traces);
  e.success = successes(e.traces);
  e.totals = totals(e.traces);
  return e;
}
}  // namespace detail

template <class Retriever = LiveRetriever>
Evaluation evaluate_policy(const World& w, const PolicyConfig& p, const BankSet& banks,
                           std::span<const std::int64_t> examples, const Retriever& retriever) {
  std::vector<EpisodeTrace> traces;
  traces.reserve(examples.size() * w.spec().replicates);
  for (std::uint32_t r = 0; r < w.spec().replicates; ++r) {
    for (auto ex : examples) traces.push_back(run_episode(w, r, ex, p, banks, retriever));
  }
  return detail::finish(std::move(traces));
}

inline Evaluation evaluate_policy(const World& w, const PolicyConfig& p, const BankSet& banks,
                                  std::span<const std::int64_t> examples) {
  return evaluate_policy(w, p, banks, examples, LiveRetriever{w.retrieval_config()});
}

inline Evaluation evaluate_oracle(const World& w, const BankSet& banks, std::span<const std::int64_t> examples) {
  std::vector<EpisodeTrace> traces;
  const LiveRetriever live{w.retrieval_config()};
  for (std::uint32_t r = 0; r < w.spec().replicates; ++r) {
    for (auto ex : examples) traces.push_back(run_oracle_episode(w, r, ex, banks, live));
  }
  return detail::finish(std::move(traces));
}

// ---- candidate grid ---------------------------------------------------------------

struct CandidateGrid {
  PolicyConfig base;  // knobs not searched: guards, cooldown, lambda, delta
  std::vector<double> percentiles{35.0};
  std::vector<double> margins{0.0};
  std::vector<BankPolicy> bank_policies{BankPolicy::choose};
  std::vector<BankKind> banks{BankKind::rule};
  std::vector<std::optional<std::uint32_t>> budgets{std::nullopt};
  std::vector<ConfidenceSignal> signals{ConfidenceSignal::mean_logprob};

  static CandidateGrid from_kv(const KeyValueConfig& kv) {
    CandidateGrid g;
    g.base = PolicyConfig::from_kv(kv, "policy.");
    const auto list = [&](const char* key) { return split_list(kv.get_or(key, "")); };
    if (kv.has("grid.percentiles")) {
      g.percentiles.clear();
      for (const auto& v : list("grid.percentiles")) g.percentiles.push_back(KeyValueConfig::parse_double("grid.percentiles", v));
    }
    if (kv.has("grid.margins")) {
      g.margins.clear();
      for (const auto& v : list("grid.margins")) g.margins.push_back(KeyValueConfig::parse_double("grid.margins", v));
    }
    if (kv.has("grid.bank_policies")) {
      g.bank_policies.clear();
      for (const auto& v : list("grid.bank_policies")) g.bank_policies.push_back(parse_enum(v, kAllBankPolicies, "bank policy"));
    }
    if (kv.has("grid.banks")) {
      g.banks.clear();
      for (const auto& v : list("grid.banks")) g.banks.push_back(parse_bank_kind(v));
    }
    if (kv.has("grid.budgets")) {
      g.budgets.clear();
      for (const auto& v : list("grid.budgets")) {
        if (v == "none") {
          g.budgets.emplace_back(std::nullopt);
        } else {
          const auto b = KeyValueConfig::parse_int("grid.budgets", v);
          if (b < 0) throw FormatError("grid.budgets entries must be nonnegative");
          g.budgets.emplace_back(static_cast<std::uint32_t>(b));
        }
      }
    }
    if (kv.has("grid.signals")) {
      g.signals.clear();
      for (const auto& v : list("grid.signals")) g.signals.push_back(parse_enum(v, kAllSignals, "confidence signal"));
    }
    g.validate();
    return g;
  }

  void validate() const {
    if (percentiles.empty() || margins.empty() || bank_policies.empty() || banks.empty() || budgets.empty() ||
        signals.empty()) {
      throw FormatError("every grid dimension needs at least one value");
    }
    for (double p : percentiles) {
      if (!(p >= 0.0 && p <= 100.0)) throw FormatError("grid percentiles must lie in [0, 100]");
    }
  }
};

struct CandidateResult {
  PolicyConfig policy;
  double percentile = 0.0;
  double delta_acc = 0.0;
  double mean_calls = 0.0;
  double score = 0.0;  // delta_acc - lambda * mean_calls
};

// True when `a` should be preferred over `b`; equal candidates keep grid order.
inline bool better_candidate(const CandidateResult& a, const CandidateResult& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.mean_calls < b.mean_calls;
}

// ---- governance -----------------------------------------------------------------

struct GovernanceIteration {
  std::uint32_t iteration = 0;
  double fit_accuracy = 0.0;
  std::optional<double> gap_close;
  std::vector<std::string> newly_retired;
  std::map<std::string, std::vector<std::string>> retired_ids;  // cumulative, per bank kind
  std::map<std::string, std::string> bank_hashes;
  std::size_t evidence_records = 0;
};

struct GovernanceResult {
  double baseline_accuracy = 0.0;
  double oracle_accuracy = 0.0;
  std::vector<GovernanceIteration> iterations;
  std::uint32_t selected = 0;

  const GovernanceIteration& selected_iteration() const { return iterations.at(selected); }
};

namespace detail {
struct EvidenceKey {
  std::string entry;
  std::uint32_t replicate;
  std::int64_t example;
  std::uint32_t step;
  auto operator<=>(const EvidenceKey&) const = default;
};

// Paired second-pass utility, attributed in full to every entry the attempt injected.
inline std::size_t attach_evidence(const Evaluation& eval, MemoryBank& rule, MemoryBank& exemplar,
                                   std::uint32_t iteration, std::set<EvidenceKey>& seen) {
  std::size_t added = 0;
  for (const auto& t : eval.traces) {
    for (const auto& s : t.steps) {
      if (!s.routed) continue;
      for (const auto& a : s.attempts) {
        if (!a.second) continue;
        const double utility = static_cast<double>(a.second_correct) - static_cast<double>(s.baseline_correct);
        for (const auto& [kind, res] : a.retrieved) {
          auto& bank = kind == BankKind::rule ? rule : exemplar;
          for (const auto& id : res.retrieved_ids) {
            if (bank.entry(id).status != EntryStatus::active) continue;
            if (!seen.insert({id, t.replicate, t.episode_id, s.step_index}).second) continue;
            bank.append_evidence(id, {t.episode_id, utility, static_cast<int>(iteration)});
            ++added;
          }
        }
      }
    }
  }
  return added;
}

inline std::vector<std::string> retired_of(const MemoryBank& b) {
  std::vector<std::string> out;
  for (const auto& e : b.entries()) {
    if (e.status == EntryStatus::retired) out.push_back(e.id);
  }
  return out;
}

inline MemoryBank fit_copy(const World& w, BankKind k, std::span<const std::int64_t> fit) {
  MemoryBank b = w.bank(k);
  b.restrict_evidence_to({fit.begin(), fit.end()});
  return b;
}
}  // namespace detail

// Evaluate -> attach evidence -> retirement sweep, `rounds` times, on the fit split.
// Iteration 0 is the untouched bank.
inline GovernanceResult run_governance_loop(const World& w, const PolicyConfig& policy, std::uint32_t rounds,
                                            std::span<const std::int64_t> fit) {
  if (rounds < 1) throw std::invalid_argument("governance needs at least one round");
  MemoryBank rule = detail::fit_copy(w, BankKind::rule, fit);
  MemoryBank exemplar = detail::fit_copy(w, BankKind::exemplar, fit);

  GovernanceResult out;
  {
    const auto r0 = freeze_bank(rule), e0 = freeze_bank(exemplar);
    const BankSet bs{&r0, &e0};
    out.baseline_accuracy = evaluate_policy(w, with_family(policy, PolicyFamily::baseline), bs, fit).accuracy();
    out.oracle_accuracy = evaluate_oracle(w, bs, fit).accuracy();
  }
  const double gap = out.oracle_accuracy - out.baseline_accuracy;

  std::set<detail::EvidenceKey> seen;
  for (std::uint32_t it = 0; it <= rounds; ++it) {
    GovernanceIteration gi;
    gi.iteration = it;
    if (it > 0) {
      for (auto* b : {&rule, &exemplar}) {
        for (auto& id : retirement_sweep(*b, policy.delta)) gi.newly_retired.push_back(std::move(id));
      }
    }
    const auto rs = freeze_bank(rule), es = freeze_bank(exemplar);
    const BankSet bs{&rs, &es};
    const Evaluation ev = evaluate_policy(w, policy, bs, fit);
    gi.fit_accuracy = ev.accuracy();
    if (gap != 0.0) gi.gap_close = (gi.fit_accuracy - out.baseline_accuracy) / gap;
    gi.retired_ids["rule"] = detail::retired_of(rule);
    gi.retired_ids["exemplar"] = detail::retired_of(exemplar);
    gi.bank_hashes["rule"] = rs.content_hash;
    gi.bank_hashes["exemplar"] = es.content_hash;
    if (it < rounds) gi.evidence_records = detail::attach_evidence(ev, rule, exemplar, it, seen);
    out.iterations.push_back(std::move(gi));
  }
  for (std::uint32_t i = 1; i < out.iterations.size(); ++i) {
    if (out.iterations[i].fit_accuracy > out.iterations[out.selected].fit_accuracy) out.selected = i;
  }
  return out;
}

// ---- freeze manifest ------------------------------------------------------------

struct SelectionRecord {
  double tau = 0.0;
  double percentile = 0.0;
  double margin_m = 0.0;
  std::string bank_policy;
  std::string multibank_member;
  std::string bank;
  std::string budget;
  std::string confidence_signal;
  std::uint32_t governance_iteration = 0;
  double fit_delta_acc = 0.0;
  double fit_mean_calls = 0.0;
  std::size_t candidates_evaluated = 0;
};

struct FreezeManifest {
  std::string policy_kv;
  std::string policy_hash;
  std::string world_kv;
  std::string world_hash;
  std::map<std::string, std::string> bank_hashes;
  std::map<std::string, std::vector<std::string>> retired_ids;
  SelectionRecord selection;

  nlohmann::json to_json() const {
    const auto& s = selection;
    return {{"policy", policy_kv},
            {"policy_hash", policy_hash},
            {"world", world_kv},
            {"world_hash", world_hash},
            {"bank_hashes", bank_hashes},
            {"retired_ids", retired_ids},
            {"selection",
             {{"tau", s.tau},
              {"percentile", s.percentile},
              {"margin_m", s.margin_m},
              {"bank_policy", s.bank_policy},
              {"multibank_member", s.multibank_member},
              {"bank", s.bank},
              {"budget_B", s.budget},
              {"confidence_signal", s.confidence_signal},
              {"governance_iteration", s.governance_iteration},
              {"fit_delta_acc", s.fit_delta_acc},
              {"fit_mean_calls", s.fit_mean_calls},
              {"candidates_evaluated", s.candidates_evaluated}}}};
  }

  static FreezeManifest from_json(const nlohmann::json& j) {
    try {
      FreezeManifest m;
      m.policy_kv = j.at("policy").get<std::string>();
      m.policy_hash = j.at("policy_hash").get<std::string>();
      m.world_kv = j.at("world").get<std::string>();
      m.world_hash = j.at("world_hash").get<std::string>();
      m.bank_hashes = j.at("bank_hashes").get<std::map<std::string, std::string>>();
      m.retired_ids = j.at("retired_ids").get<std::map<std::string, std::vector<std::string>>>();
      const auto& s = j.at("selection");
      m.selection.tau = s.at("tau").get<double>();
      m.selection.percentile = s.at("percentile").get<double>();
      m.selection.margin_m = s.at("margin_m").get<double>();
      m.selection.bank_policy = s.at("bank_policy").get<std::string>();
      m.selection.multibank_member = s.at("multibank_member").get<std::string>();
      m.selection.bank = s.at("bank").get<std::string>();
      m.selection.budget = s.at("budget_B").get<std::string>();
      m.selection.confidence_signal = s.at("confidence_signal").get<std::string>();
      m.selection.governance_iteration = s.at("governance_iteration").get<std::uint32_t>();
      m.selection.fit_delta_acc = s.at("fit_delta_acc").get<double>();
      m.selection.fit_mean_calls = s.at("fit_mean_calls").get<double>();
      m.selection.candidates_evaluated = s.at("candidates_evaluated").get<std::size_t>();
      return m;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed manifest: ") + e.what());
    }
  }
};

struct FitOptions {
  std::uint32_t governance_rounds = 3;
};

struct FitResult {
  FreezeManifest manifest;
  std::vector<CandidateResult> candidates;
  GovernanceResult governance;
};

namespace detail {
inline std::vector<double> fit_confidences(const World& w, ConfidenceSignal sig, std::span<const std::int64_t> fit) {
  std::vector<double> out;
  for (std::uint32_t r = 0; r < w.spec().replicates; ++r) {
    for (auto ex : fit) {
      for (std::uint32_t s = 0; s < w.spec().steps_per_example; ++s) out.push_back(w.decode_baseline({r, ex, s}, sig).confidence);
    }
  }
  return out;
}

inline CandidateResult score(const World& w, PolicyConfig p, double percentile, const BankSet& bs,
                             std::span<const std::int64_t> fit, const std::vector<bool>& base_success) {
  const Evaluation ev = evaluate_policy(w, p, bs, fit);
  const stats::PairedComparison cmp(base_success, ev.success);
  CandidateResult c;
  c.policy = std::move(p);
  c.percentile = percentile;
  c.delta_acc = cmp.delta_acc();
  c.mean_calls = ev.mean_calls();
  c.score = c.delta_acc - c.policy.lambda * c.mean_calls;
  return c;
}

inline std::string budget_text(const std::optional<std::uint32_t>& b) { return b ? std::to_string(*b) : "none"; }
}  // namespace detail

// Grid search on the fit split, then governance with the selected policy; the
// winner and the retained governance iteration are bound into a manifest.
inline FitResult run_fit_stage(const World& w, const CandidateGrid& grid, const FitOptions& opt = {},
                               std::optional<SplitPlan> split = std::nullopt) {
  const SplitPlan plan = split ? *split : SplitPlan::of(w);
  check_disjoint(plan);
  if (plan.fit.empty()) throw std::invalid_argument("fit split is empty");
  grid.validate();

  const auto rs = freeze_bank(w.bank(BankKind::rule)), es = freeze_bank(w.bank(BankKind::exemplar));
  const BankSet bs{&rs, &es};
  const auto base_success = evaluate_policy(w, with_family(grid.base, PolicyFamily::baseline), bs, plan.fit).success;

  FitResult out;
  std::optional<CandidateResult> best;
  for (auto sig : grid.signals) {
    const auto confs = detail::fit_confidences(w, sig, plan.fit);
    for (double pct : grid.percentiles) {
      const double tau = select_threshold_percentile(confs, pct);
      for (double m : grid.margins) {
        for (auto bp : grid.bank_policies) {
          const bool uses_bank = bp == BankPolicy::gate_only || bp == BankPolicy::choose;
          for (std::size_t bi = 0; bi < (uses_bank ? grid.banks.size() : 1); ++bi) {
            for (const auto& budget : grid.budgets) {
              PolicyConfig p = grid.base;
              p.family = PolicyFamily::controlled;
              p.confidence_signal = sig;
              p.tau = tau;
              p.margin_m = m;
              p.bank_policy = bp;
              p.bank = uses_bank ? grid.banks[bi] : grid.base.bank;
              p.budget_B = budget;
              std::optional<CandidateResult> cand;
              if (bp == BankPolicy::multibank_best) {
                for (auto member : {BankPolicy::cascade_rule_then_exemplar, BankPolicy::cascade_exemplar_then_rule,
                                    BankPolicy::dual}) {
                  p.multibank_member = member;
                  auto c = detail::score(w, p, pct, bs, plan.fit, base_success);
                  if (!cand || better_candidate(c, *cand)) cand = std::move(c);
                }
              } else {
                p.multibank_member = grid.base.multibank_member;
                cand = detail::score(w, p, pct, bs, plan.fit, base_success);
              }
              out.candidates.push_back(*cand);
              if (!best || better_candidate(*cand, *best)) best = *cand;
            }
          }
        }
      }
    }
  }

  const PolicyConfig& chosen = best->policy;
  out.governance = run_governance_loop(w, chosen, std::max<std::uint32_t>(opt.governance_rounds, 1), plan.fit);
  const auto& kept = out.governance.selected_iteration();

  FreezeManifest& m = out.manifest;
  m.policy_kv = chosen.to_kv();
  m.policy_hash = chosen.hash();
  m.world_kv = w.spec().to_kv();
  m.world_hash = w.hash();
  m.bank_hashes = kept.bank_hashes;
  m.retired_ids = kept.retired_ids;
  m.selection.tau = chosen.tau;
  m.selection.percentile = best->percentile;
  m.selection.margin_m = chosen.margin_m;
  m.selection.bank_policy = std::string(to_string(chosen.bank_policy));
  m.selection.multibank_member = std::string(to_string(chosen.multibank_member));
  m.selection.bank = std::string(to_string(chosen.bank));
  m.selection.budget = detail::budget_text(chosen.budget_B);
  m.selection.confidence_signal = std::string(to_string(chosen.confidence_signal));
  m.selection.governance_iteration = kept.iteration;
  m.selection.fit_delta_acc = best->delta_acc;
  m.selection.fit_mean_calls = best->mean_calls;
  m.selection.candidates_evaluated = out.candidates.size();
  return out;
}

// ---- frozen setup ---------------------------------------------------------------

// Banks and policy rebuilt from a manifest and checked against its hashes; the
// banks are sealed, so every fit-only mutation fails from here on.
struct FrozenSetup {
  PolicyConfig policy;
  MemoryBank rule{BankKind::rule};
  MemoryBank exemplar{BankKind::exemplar};
  BankSnapshot rule_snapshot;
  BankSnapshot exemplar_snapshot;

  BankSet banks() const { return {&rule_snapshot, &exemplar_snapshot}; }
};

inline FrozenSetup load_frozen(const World& w, const FreezeManifest& m) {
  if (sha256_hex(m.world_kv) != m.world_hash) throw HashMismatch("manifest world description does not match its hash");
  if (w.hash() != m.world_hash) throw HashMismatch("world differs from the one the manifest was fitted on");
  FrozenSetup f;
  f.policy = PolicyConfig::from_kv_text(m.policy_kv);
  if (f.policy.hash() != m.policy_hash) throw HashMismatch("policy differs from the frozen policy hash");
  f.rule = w.bank(BankKind::rule);
  f.exemplar = w.bank(BankKind::exemplar);
  for (auto* b : {&f.rule, &f.exemplar}) {
    const std::string kind(to_string(b->kind()));
    if (auto it = m.retired_ids.find(kind); it != m.retired_ids.end()) {
      for (const auto& id : it->second) b->retire(id);
    }
    b->seal();
  }
  f.rule_snapshot = freeze_bank(f.rule);
  f.exemplar_snapshot = freeze_bank(f.exemplar);
  for (const auto* s : {&f.rule_snapshot, &f.exemplar_snapshot}) {
    const std::string kind(to_string(s->bank_kind));
    auto it = m.bank_hashes.find(kind);
    if (it == m.bank_hashes.end() || it->second != s->content_hash) {
      throw HashMismatch(kind + " bank content differs from the frozen bank hash");
    }
  }
  return f;
}

// ---- ledger ---------------------------------------------------------------------

struct LedgerRow {
  std::string comparison;
  std::size_t n = 0;
  double delta_acc = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  double mcnemar_p = 1.0;
  std::int64_t help_hurt = 0;
  double delta_calls = 0.0;
  double routed_frac = 0.0;
  double accepted_frac = 0.0;
};

struct TestOptions {
  std::size_t bootstrap_resamples = 10000;
  std::uint64_t bootstrap_seed = 0;
};

inline LedgerRow make_ledger_row(const std::string& name, const Evaluation& a, const Evaluation& b,
                                 const TestOptions& opt = {}) {
  const stats::PairedComparison cmp(a.success, b.success);
  const auto diffs = cmp.diffs();
  LedgerRow r;
  r.comparison = name;
  r.n = cmp.n();
  r.delta_acc = cmp.delta_acc();
  const auto ci = stats::bootstrap_ci(diffs, {opt.bootstrap_resamples, 0.05, opt.bootstrap_seed});
  r.ci_lo = ci.lo;
  r.ci_hi = ci.hi;
  r.mcnemar_p = stats::mcnemar_exact(cmp.helps(), cmp.hurts());
  r.help_hurt = cmp.help_hurt();
  r.delta_calls = b.mean_calls() - a.mean_calls();
  r.routed_frac = b.totals.routed_frac();
  r.accepted_frac = b.totals.accepted_frac();
  return r;
}

// Re-derives every field that can be recomputed from the two runs; throws on any
// mismatch.
inline void verify_ledger_row(const LedgerRow& r, const Evaluation& a, const Evaluation& b) {
  const stats::PairedComparison cmp(a.success, b.success);
  const auto fail = [&](const char* what) { throw std::logic_error("ledger row " + r.comparison + ": " + what); };
  if (r.n != cmp.n()) fail("n differs from the paired outcome count");
  if (r.help_hurt != cmp.help_hurt()) fail("help-hurt differs from the outcomes");
  if (std::abs(r.delta_acc * static_cast<double>(r.n) - static_cast<double>(r.help_hurt)) > 1e-9) {
    fail("delta_acc * n differs from help-hurt");
  }
  if (r.mcnemar_p != stats::mcnemar_exact(cmp.helps(), cmp.hurts())) fail("p differs from the discordant counts");
  if (!(r.ci_lo <= r.ci_hi)) fail("confidence interval is inverted");
  if (cmp.helps() == 0 && cmp.hurts() == 0 && (r.ci_lo != 0.0 || r.ci_hi != 0.0)) fail("interval of a null row is not [0,0]");
  const auto ta = totals(a.traces), tb = totals(b.traces);
  if (std::abs(r.delta_calls - (tb.calls_per_query() - ta.calls_per_query())) > 1e-12) fail("delta_calls differs from trace counters");
  if (r.routed_frac != tb.routed_frac() || r.accepted_frac != tb.accepted_frac()) fail("fractions differ from trace counters");
}

inline void write_ledger_csv(std::ostream& os, std::span<const LedgerRow> rows) {
  os << "comparison,n,delta_acc,ci_lo,ci_hi,mcnemar_p,help_hurt,delta_calls,routed_frac,accepted_frac\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%+.4f,%+.4f,%+.4f,%.4g,%+lld,%+.4f,%.4f,%.4f\n", r.comparison.c_str(), r.n,
                  r.delta_acc, r.ci_lo, r.ci_hi, r.mcnemar_p, static_cast<long long>(r.help_hurt), r.delta_calls,
                  r.routed_frac, r.accepted_frac);
    os << buf;
  }
}

// Binned baseline confidence on the test split: the data behind a
// binned-accuracy figure.
struct ConfidenceBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double baseline_accuracy = 0.0;
  double routed_frac = 0.0;
  double final_accuracy = 0.0;
};

inline std::vector<ConfidenceBin> confidence_bins(const Evaluation& policy_run, std::size_t n_bins = 10) {
  std::vector<ConfidenceBin> bins(n_bins);
  std::vector<std::size_t> base(n_bins, 0), routed(n_bins, 0), fin(n_bins, 0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
    bins[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (const auto& t : policy_run.traces) {
    for (const auto& s : t.steps) {
      const auto b = stats::equal_width_bin(s.baseline_confidence, n_bins);
      ++bins[b].count;
      base[b] += s.baseline_correct;
      routed[b] += s.routed;
      fin[b] += s.final_correct;
    }
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    const auto n = static_cast<double>(bins[b].count);
    bins[b].baseline_accuracy = static_cast<double>(base[b]) / n;
    bins[b].routed_frac = static_cast<double>(routed[b]) / n;
    bins[b].final_accuracy = static_cast<double>(fin[b]) / n;
  }
  return bins;
}

inline void write_confidence_bins_csv(std::ostream& os, std::span<const ConfidenceBin> bins) {
  os << "bin_lo,bin_hi,count,baseline_accuracy,routed_frac,final_accuracy\n";
  char buf[256];
  for (const auto& b : bins) {
    std::snprintf(buf, sizeof buf, "%.2f,%.2f,%zu,%.4f,%.4f,%.4f\n", b.lo, b.hi, b.count, b.baseline_accuracy,
                  b.routed_frac, b.final_accuracy);
    os << buf;
  }
}

struct TestStageResult {
  std::vector<LedgerRow> rows;
  std::map<std::string, Evaluation> runs;  // by policy name
  std::vector<ConfidenceBin> bins;
};

// Paired test-split evaluation of the frozen policy against the baselines.
inline TestStageResult run_test_stage(const World& w, const FreezeManifest& manifest, const TestOptions& opt = {},
                                      std::optional<SplitPlan> split = std::nullopt) {
  const SplitPlan plan = split ? *split : SplitPlan::of(w);
  check_disjoint(plan);
  if (plan.test.empty()) throw std::invalid_argument("test split is empty");
  const FrozenSetup f = load_frozen(w, manifest);
  const BankSet bs = f.banks();

  TestStageResult out;
  const auto run = [&](const std::string& name, PolicyFamily fam) {
    out.runs.emplace(name, evaluate_policy(w, with_family(f.policy, fam), bs, plan.test));
  };
  run("baseline", PolicyFamily::baseline);
  run("policy", PolicyFamily::controlled);
  run("retry", PolicyFamily::retry);
  run("always_retrieve", PolicyFamily::always_retrieve);
  run("fixed_budget", PolicyFamily::fixed_budget);
  out.runs.emplace("oracle", evaluate_oracle(w, bs, plan.test));

  const std::pair<const char*, const char*> comparisons[] = {
      {"baseline", "policy"},          {"baseline", "retry"},  {"baseline", "always_retrieve"},
      {"baseline", "fixed_budget"},    {"baseline", "oracle"}, {"retry", "policy"},
      {"always_retrieve", "policy"},
  };
  for (const auto& [a, b] : comparisons) {
    const auto& ra = out.runs.at(a);
    const auto& rb = out.runs.at(b);
    out.rows.push_back(make_ledger_row(std::string(b) + "_vs_" + a, ra, rb, opt));
    verify_ledger_row(out.rows.back(), ra, rb);
  }
  out.bins = confidence_bins(out.runs.at("policy"));
  return out;
}

// ---- counterfactual replay ----------------------------------------------------------

struct CounterfactualRow {
  std::int64_t query_id = 0;
  bool routed = true;
  std::vector<std::string> frozen_identity;
  bool outcome_original = false;
  bool outcome_repair_free = false;
  bool outcome_corrupt_free = false;
  bool outcome_repair_fixed = false;
  bool outcome_corrupt_fixed = false;
  bool target_hit = false;
};

// Free-rerun contrast and its two parts for one row and one content version.
struct Decomposition {
  int free_contrast = 0;
  int content = 0;
  int drift = 0;
};

inline Decomposition decompose(bool original, bool fixed, bool free) {
  const int o = original, x = fixed, r = free;
  return {r - o, x - o, r - x};
}

struct CounterfactualOptions {
  std::size_t max_rows = 0;  // 0: every routed row
  std::size_t permutations = 10000;
  std::uint64_t seed = 0;
};

struct CounterfactualSummary {
  std::size_t rows = 0;
  std::size_t hits = 0;
  std::size_t non_hits = 0;
  std::size_t decomposition_violations = 0;
  std::size_t fixed_drift_nonzero = 0;
  std::size_t fixed_identity_mismatches = 0;
  std::size_t replay_mismatches = 0;  // unedited fixed replay differs from the live run
  std::size_t non_hit_fixed_differences = 0;
  std::int64_t hit_helps = 0;  // repair right, corrupt wrong (fixed retrieval)
  std::int64_t hit_hurts = 0;
  double hit_delta_acc = 0.0;
  double non_hit_delta_acc = 0.0;
  double free_delta_acc = 0.0;   // repair - corrupt over all rows, free rerun
  double fixed_delta_acc = 0.0;  // same under fixed retrieval
  double non_hit_same_fixed = 1.0;
  double rows_same_free = 1.0;
  double interaction_p = 1.0;
  std::size_t drift_rows = 0;  // rows whose free and fixed outcomes differ for some version

  nlohmann::json to_json() const {
    return {{"rows", rows},
            {"hits", hits},
            {"non_hits", non_hits},
            {"decomposition_violations", decomposition_violations},
            {"fixed_drift_nonzero", fixed_drift_nonzero},
            {"fixed_identity_mismatches", fixed_identity_mismatches},
            {"replay_mismatches", replay_mismatches},
            {"non_hit_fixed_differences", non_hit_fixed_differences},
            {"hit_helps", hit_helps},
            {"hit_hurts", hit_hurts},
            {"hit_delta_acc", hit_delta_acc},
            {"non_hit_delta_acc", non_hit_delta_acc},
            {"free_delta_acc", free_delta_acc},
            {"fixed_delta_acc", fixed_delta_acc},
            {"non_hit_same_fixed", non_hit_same_fixed},
            {"rows_same_free", rows_same_free},
            {"drift_rows", drift_rows},
            {"interaction_p", interaction_p}};
  }
};

struct CounterfactualResult {
  std::vector<CounterfactualRow> rows;
  CounterfactualSummary summary;
  FrozenRetrievalMap frozen;
};

namespace detail {
// R(x, M): identities of every bank the policy can touch, rule then exemplar.
inline FrozenRetrievalMap freeze_policy_identities(const World& w, const PolicyConfig& p, const BankSet& banks,
                                                   std::span<const std::int64_t> query_ids_in_order,
                                                   const std::map<std::int64_t, StepKey>& keys) {
  std::vector<RoutedRetrieval> routed;
  const auto cfg = w.retrieval_config();
  auto kinds = exposure_banks(p);
  for (auto qid : query_ids_in_order) {
    const Query q = w.query(keys.at(qid));
    RoutedRetrieval rr{qid, {}};
    for (auto k : kinds) {
      for (auto& id : retrieve(q, banks.at(k), cfg).retrieved_ids) rr.retrieved_ids.push_back(std::move(id));
    }
    routed.push_back(std::move(rr));
  }
  return freeze_identities(std::span<const RoutedRetrieval>(routed));
}

inline std::map<std::int64_t, bool> routed_outcomes(const Evaluation& ev) {
  std::map<std::int64_t, bool> out;
  for (const auto& t : ev.traces) {
    for (const auto& s : t.steps) {
      if (s.routed) out[s.query_id] = s.final_correct;
    }
  }
  return out;
}

inline std::map<std::int64_t, std::vector<std::string>> used_identities(const Evaluation& ev) {
  std::map<std::int64_t, std::vector<std::string>> out;
  for (const auto& t : ev.traces) {
    for (const auto& s : t.steps) {
      if (!s.routed) continue;
      auto& ids = out[s.query_id];
      for (const auto& a : s.attempts) {
        for (const auto& id : a.retrieved_ids()) ids.push_back(id);
      }
    }
  }
  return out;
}

inline std::vector<ContentEdit> edits_of_kind(std::span<const ContentEdit> edits, EditKind k, const BankSnapshot& snap) {
  std::vector<ContentEdit> out;
  for (const auto& e : edits) {
    if (e.edit_kind == k && snap.find(e.entry_id)) out.push_back(e);
  }
  return out;
}

// Bank as re-indexed after the edits: payloads replaced and edited entries
// re-embedded, so retrieval can drift.
inline BankSnapshot reindexed(const World& w, const BankSnapshot& edited, std::span<const ContentEdit> edits) {
  BankSnapshot out = edited;
  for (const auto& ed : edits) {
    for (auto& e : out.entries) {
      if (e.id == ed.entry_id) e.embedding = w.reembed(e.id, ed.new_payload);
    }
  }
  out.content_hash = snapshot_content_hash(out.bank_kind, out.entries);
  return out;
}
}  // namespace detail

inline void check_edits_known(std::span<const ContentEdit> edits, const BankSet& banks) {
  for (const auto& e : edits) {
    if (!banks.rule->find(e.entry_id) && !banks.exemplar->find(e.entry_id)) {
      throw LookupError("edit references an entry not in the frozen banks: " + e.entry_id);
    }
  }
}

// Original run, free reruns and fixed-retrieval replays of the frozen policy on
// the routed test rows, under the repair and corrupt versions of `edits`.
inline CounterfactualResult run_counterfactual(const World& w, const FreezeManifest& manifest,
                                               std::span<const ContentEdit> edits,
                                               const CounterfactualOptions& opt = {},
                                               std::optional<SplitPlan> split = std::nullopt) {
  const SplitPlan plan = split ? *split : SplitPlan::of(w);
  check_disjoint(plan);
  const FrozenSetup f = load_frozen(w, manifest);
  const BankSet bs = f.banks();
  check_edits_known(edits, bs);

  std::vector<std::int64_t> examples = plan.test;
  if (opt.max_rows) {
    // longest prefix of test examples with at most max_rows routed rows
    const Evaluation probe = evaluate_policy(w, f.policy, bs, plan.test);
    std::map<std::int64_t, std::size_t> per_example;
    for (const auto& t : probe.traces) per_example[t.episode_id] += t.routed_count;
    std::size_t total = 0, keep = 0;
    for (; keep < plan.test.size(); ++keep) {
      const auto add = per_example[plan.test[keep]];
      if (total + add > opt.max_rows) break;
      total += add;
    }
    examples.resize(keep);
  }
  const Evaluation original = evaluate_policy(w, f.policy, bs, examples);
  std::vector<std::int64_t> row_ids;
  std::map<std::int64_t, StepKey> keys;
  for (const auto& t : original.traces) {
    for (const auto& s : t.steps) {
      if (!s.routed) continue;
      row_ids.push_back(s.query_id);
      keys[s.query_id] = StepKey{t.replicate, t.episode_id, s.step_index};
    }
  }
  CounterfactualResult out;
  out.frozen = detail::freeze_policy_identities(w, f.policy, bs, row_ids, keys);
  if (out.frozen.empty()) throw LookupError("no routed rows to freeze");

  struct Version {
    BankSnapshot rule_fixed, ex_fixed, rule_free, ex_free;
  };
  const auto build = [&](EditKind k) {
    Version v;
    const auto re = detail::edits_of_kind(edits, k, f.rule_snapshot);
    const auto ee = detail::edits_of_kind(edits, k, f.exemplar_snapshot);
    v.rule_fixed = apply_edits(f.rule_snapshot, re);
    v.ex_fixed = apply_edits(f.exemplar_snapshot, ee);
    v.rule_free = detail::reindexed(w, v.rule_fixed, re);
    v.ex_free = detail::reindexed(w, v.ex_fixed, ee);
    return v;
  };
  const Version repair = build(EditKind::repair), corrupt = build(EditKind::corrupt);
  const FrozenRetriever fixed{&out.frozen};
  const LiveRetriever live{w.retrieval_config()};

  const auto run = [&](const BankSnapshot& r, const BankSnapshot& e, auto retriever) {
    return evaluate_policy(w, f.policy, BankSet{&r, &e}, examples, retriever);
  };
  const Evaluation unedited_fixed = run(f.rule_snapshot, f.exemplar_snapshot, fixed);
  const Evaluation repair_fixed = run(repair.rule_fixed, repair.ex_fixed, fixed);
  const Evaluation corrupt_fixed = run(corrupt.rule_fixed, corrupt.ex_fixed, fixed);
  const Evaluation repair_free = run(repair.rule_free, repair.ex_free, live);
  const Evaluation corrupt_free = run(corrupt.rule_free, corrupt.ex_free, live);

  const auto o_orig = detail::routed_outcomes(original), o_replay = detail::routed_outcomes(unedited_fixed);
  const auto o_rfx = detail::routed_outcomes(repair_fixed), o_cfx = detail::routed_outcomes(corrupt_fixed);
  const auto o_rfr = detail::routed_outcomes(repair_free), o_cfr = detail::routed_outcomes(corrupt_free);
  const auto ids_rfx = detail::used_identities(repair_fixed), ids_cfx = detail::used_identities(corrupt_fixed);

  std::set<std::string> edited;
  for (const auto& e : edits) edited.insert(e.entry_id);
  const auto part = target_hit_partition(out.frozen, edited);
  const std::set<std::int64_t> hit_set(part.hit.begin(), part.hit.end());

  auto& sm = out.summary;
  std::vector<double> hit_diffs, non_hit_diffs;
  std::int64_t fixed_sum = 0, free_sum = 0, non_hit_same = 0, free_same = 0;
  const auto subset_of_frozen = [&](const std::vector<std::string>& used, const std::vector<std::string>& frozen) {
    return std::all_of(used.begin(), used.end(),
                       [&](const auto& id) { return std::find(frozen.begin(), frozen.end(), id) != frozen.end(); });
  };
  for (auto qid : row_ids) {
    CounterfactualRow row;
    row.query_id = qid;
    row.frozen_identity = out.frozen.lookup(qid);
    row.outcome_original = o_orig.at(qid);
    row.outcome_repair_fixed = o_rfx.at(qid);
    row.outcome_corrupt_fixed = o_cfx.at(qid);
    row.outcome_repair_free = o_rfr.at(qid);
    row.outcome_corrupt_free = o_cfr.at(qid);
    row.target_hit = hit_set.count(qid) != 0;

    if (o_replay.at(qid) != row.outcome_original) ++sm.replay_mismatches;
    if (!subset_of_frozen(ids_rfx.at(qid), row.frozen_identity) || !subset_of_frozen(ids_cfx.at(qid), row.frozen_identity)) {
      ++sm.fixed_identity_mismatches;
    }
    bool drifted = false;
    for (auto [fx, fr] : {std::pair{row.outcome_repair_fixed, row.outcome_repair_free},
                          std::pair{row.outcome_corrupt_fixed, row.outcome_corrupt_free}}) {
      const auto d = decompose(row.outcome_original, fx, fr);
      if (d.free_contrast != d.content + d.drift) ++sm.decomposition_violations;
      // the same audit with the fixed replay standing in for the rerun
      const auto dz = decompose(row.outcome_original, fx, fx);
      if (dz.drift != 0 || dz.free_contrast != dz.content + dz.drift) ++sm.fixed_drift_nonzero;
      drifted = drifted || d.drift != 0;
    }
    sm.drift_rows += drifted;

    const double diff = double(row.outcome_repair_fixed) - double(row.outcome_corrupt_fixed);
    fixed_sum += static_cast<std::int64_t>(diff);
    free_sum += int(row.outcome_repair_free) - int(row.outcome_corrupt_free);
    free_same += row.outcome_repair_free == row.outcome_corrupt_free;
    if (row.target_hit) {
      hit_diffs.push_back(diff);
      sm.hit_helps += diff > 0;
      sm.hit_hurts += diff < 0;
    } else {
      non_hit_diffs.push_back(diff);
      if (diff != 0.0) ++sm.non_hit_fixed_differences;
      non_hit_same += diff == 0.0;
    }
    out.rows.push_back(std::move(row));
  }

  sm.rows = out.rows.size();
  sm.hits = hit_diffs.size();
  sm.non_hits = non_hit_diffs.size();
  const auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  sm.hit_delta_acc = mean(hit_diffs);
  sm.non_hit_delta_acc = mean(non_hit_diffs);
  sm.fixed_delta_acc = sm.rows ? static_cast<double>(fixed_sum) / static_cast<double>(sm.rows) : 0.0;
  sm.free_delta_acc = sm.rows ? static_cast<double>(free_sum) / static_cast<double>(sm.rows) : 0.0;
  sm.non_hit_same_fixed = sm.non_hits ? static_cast<double>(non_hit_same) / static_cast<double>(sm.non_hits) : 1.0;
  sm.rows_same_free = sm.rows ? static_cast<double>(free_same) / static_cast<double>(sm.rows) : 1.0;
  if (!hit_diffs.empty() && !non_hit_diffs.empty()) {
    sm.interaction_p = stats::randomization_interaction_test(hit_diffs, non_hit_diffs, {opt.permutations, opt.seed});
  }
  return out;
}

inline void write_counterfactual_csv(std::ostream& os, std::span<const CounterfactualRow> rows) {
  os << "query_id,routed,frozen_identity,outcome_original,outcome_repair_free,outcome_corrupt_free,"
        "outcome_repair_fixed,outcome_corrupt_fixed,target_hit\n";
  for (const auto& r : rows) {
    std::string ids;
    for (const auto& id : r.frozen_identity) ids += (ids.empty() ? "" : " ") + id;
    os << r.query_id << ',' << int(r.routed) << ',' << ids << ',' << int(r.outcome_original) << ','
       << int(r.outcome_repair_free) << ',' << int(r.outcome_corrupt_free) << ',' << int(r.outcome_repair_fixed) << ','
       << int(r.outcome_corrupt_fixed) << ',' << int(r.target_hit) << '\n';
  }
}

// Picks `n_entries` entries of `snap` whose frozen hit rows number exactly
// `target_hits` when possible (else as close as the search gets). Deterministic.
inline std::vector<std::string> select_edit_targets(const FrozenRetrievalMap& frozen, const BankSnapshot& snap,
                                                    std::size_t n_entries, std::size_t target_hits) {
  std::vector<std::string> ids;
  std::vector<std::set<std::int64_t>> cover;
  for (const auto& e : snap.entries) {
    std::set<std::int64_t> rows;
    for (const auto& [q, r] : frozen.entries()) {
      if (std::find(r.begin(), r.end(), e.id) != r.end()) rows.insert(q);
    }
    if (rows.empty()) continue;
    ids.push_back(e.id);
    cover.push_back(std::move(rows));
  }
  if (ids.size() < n_entries) throw std::invalid_argument("too few retrieved entries to pick edit targets from");

  const auto union_size = [&](const std::vector<std::size_t>& pick) {
    std::set<std::int64_t> u;
    for (auto i : pick) u.insert(cover[i].begin(), cover[i].end());
    return u.size();
  };
  const auto gap = [&](const std::vector<std::size_t>& pick) {
    const auto s = union_size(pick);
    return s > target_hits ? s - target_hits : target_hits - s;
  };
  std::vector<std::size_t> pick(n_entries);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  auto best = gap(pick);
  // first-improvement swaps until no single swap helps
  for (bool improved = true; improved && best > 0;) {
    improved = false;
    for (std::size_t slot = 0; slot < n_entries && !improved; ++slot) {
      for (std::size_t cand = 0; cand < ids.size() && !improved; ++cand) {
        if (std::find(pick.begin(), pick.end(), cand) != pick.end()) continue;
        auto trial = pick;
        trial[slot] = cand;
        if (const auto g = gap(trial); g < best) {
          pick = std::move(trial);
          best = g;
          improved = true;
        }
      }
    }
  }
  std::vector<std::string> out;
  for (auto i : pick) out.push_back(ids[i]);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<ContentEdit> make_edit_pair(const BankSnapshot& snap, std::span<const std::string> ids) {
  std::vector<ContentEdit> edits;
  for (const auto& id : ids) {
    const auto* e = snap.find(id);
    if (!e) throw LookupError("unknown entry: " + id);
    edits.push_back({id, e->payload + " (clarified)", EditKind::repair});
  }
  for (const auto& id : ids) {
    edits.push_back({id, snap.find(id)->payload + " (garbled)", EditKind::corrupt});
  }
  return edits;
}

// ---- ledger-check -------------------------------------------------------------------

struct LedgerClaim {
  std::int64_t n = 0;
  double delta_acc = 0.0;
  std::int64_t help_hurt = 0;
  double p = 1.0;
};

struct LedgerSolution {
  bool consistent = false;
  std::int64_t helps = 0;
  std::int64_t hurts = 0;
  double p = 1.0;
  std::string reason;
};

// Smallest-u integer (h, u) with h - u = HH whose exact McNemar p is within
// `rel_tol` of the claimed p, after checking delta_acc * n against HH.
inline LedgerSolution ledger_check(const LedgerClaim& c, double rel_tol = 0.05) {
  LedgerSolution s;
  if (c.n <= 0) throw std::invalid_argument("n must be positive");
  if (!(c.p > 0.0 && c.p <= 1.0)) throw std::invalid_argument("p must lie in (0, 1]");
  if (!(std::abs(c.delta_acc * static_cast<double>(c.n) - static_cast<double>(c.help_hurt)) < 0.5)) {
    s.reason = "delta_acc * n does not round to HH";
    return s;
  }
  const std::int64_t hh = c.help_hurt;
  for (std::int64_t u = std::max<std::int64_t>(0, -hh); 2 * u + hh <= c.n; ++u) {
    const std::int64_t h = u + hh;
    const double p = stats::mcnemar_exact(h, u);
    if (std::abs(p - c.p) <= rel_tol * c.p) {
      s.consistent = true;
      s.helps = h;
      s.hurts = u;
      s.p = p;
      return s;
    }
  }
  s.reason = "no discordant counts reproduce p";
  return s;
}

}  // namespace applyctl
