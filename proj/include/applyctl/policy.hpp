#pragma once

// PolicyConfig: every knob the fit stage selects and the test stage freezes.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "applyctl/digest.hpp"
#include "applyctl/error.hpp"
#include "applyctl/kv_config.hpp"
#include "applyctl/memory_bank.hpp"

namespace applyctl {

enum class Guard { format, valid, progress, contract };

enum class BankPolicy {
  gate_only,
  choose,
  cascade_rule_then_exemplar,
  cascade_exemplar_then_rule,
  dual,
  multibank_best,
};

// Which decision procedure runs; `controlled` is routing + acceptance + rollback,
// the rest are the comparison baselines.
enum class PolicyFamily { controlled, baseline, retry, always_retrieve, fixed_budget };

enum class ConfidenceSignal { mean_logprob, sum_logprob, first_token };

inline constexpr Guard kAllGuards[] = {Guard::format, Guard::valid, Guard::progress, Guard::contract};
inline constexpr BankPolicy kAllBankPolicies[] = {BankPolicy::gate_only,
                                                  BankPolicy::choose,
                                                  BankPolicy::cascade_rule_then_exemplar,
                                                  BankPolicy::cascade_exemplar_then_rule,
                                                  BankPolicy::dual,
                                                  BankPolicy::multibank_best};
inline constexpr PolicyFamily kAllFamilies[] = {PolicyFamily::controlled, PolicyFamily::baseline, PolicyFamily::retry,
                                                PolicyFamily::always_retrieve, PolicyFamily::fixed_budget};
inline constexpr ConfidenceSignal kAllSignals[] = {ConfidenceSignal::mean_logprob, ConfidenceSignal::sum_logprob,
                                                   ConfidenceSignal::first_token};

inline std::string_view to_string(Guard g) {
  switch (g) {
    case Guard::format: return "format";
    case Guard::valid: return "valid";
    case Guard::progress: return "progress";
    case Guard::contract: return "contract";
  }
  return "format";
}

inline std::string_view to_string(BankPolicy p) {
  switch (p) {
    case BankPolicy::gate_only: return "gate_only";
    case BankPolicy::choose: return "choose";
    case BankPolicy::cascade_rule_then_exemplar: return "cascade_rule_then_exemplar";
    case BankPolicy::cascade_exemplar_then_rule: return "cascade_exemplar_then_rule";
    case BankPolicy::dual: return "dual";
    case BankPolicy::multibank_best: return "multibank_best";
  }
  return "gate_only";
}

inline std::string_view to_string(PolicyFamily f) {
  switch (f) {
    case PolicyFamily::controlled: return "controlled";
    case PolicyFamily::baseline: return "baseline";
    case PolicyFamily::retry: return "retry";
    case PolicyFamily::always_retrieve: return "always_retrieve";
    case PolicyFamily::fixed_budget: return "fixed_budget";
  }
  return "controlled";
}

inline std::string_view to_string(ConfidenceSignal s) {
  switch (s) {
    case ConfidenceSignal::mean_logprob: return "mean_logprob";
    case ConfidenceSignal::sum_logprob: return "sum_logprob";
    case ConfidenceSignal::first_token: return "first_token";
  }
  return "mean_logprob";
}

template <class Enum, std::size_t N>
Enum parse_enum(std::string_view s, const Enum (&all)[N], const char* what) {
  for (auto v : all) {
    if (to_string(v) == s) return v;
  }
  throw FormatError(std::string("unknown ") + what + ": " + std::string(s));
}

inline bool is_multibank_member(BankPolicy p) {
  return p == BankPolicy::cascade_rule_then_exemplar || p == BankPolicy::cascade_exemplar_then_rule ||
         p == BankPolicy::dual;
}

struct PolicyConfig {
  PolicyFamily family = PolicyFamily::controlled;
  double tau = 0.5;
  double margin_m = 0.0;
  std::set<Guard> guards_enabled{Guard::format, Guard::valid};
  BankPolicy bank_policy = BankPolicy::choose;
  BankKind bank = BankKind::rule;  // single-bank policies and baselines
  BankPolicy multibank_member = BankPolicy::dual;  // resolved member for multibank_best
  std::optional<std::uint32_t> budget_B;  // routes per episode; empty = unlimited
  std::uint32_t cooldown = 0;
  double lambda = 0.0;
  double delta = 0.05;
  ConfidenceSignal confidence_signal = ConfidenceSignal::mean_logprob;

  bool operator==(const PolicyConfig&) const = default;

  // Canonical `key = value` text; the policy hash is computed over it.
  std::string to_kv() const {
    std::string s;
    const auto line = [&](std::string_view k, const std::string& v) {
      s.append(k).append(" = ").append(v).push_back('\n');
    };
    line("family", std::string(to_string(family)));
    line("tau", exact(tau));
    line("margin_m", exact(margin_m));
    std::string guards;
    for (auto g : guards_enabled) {
      if (!guards.empty()) guards.push_back(',');
      guards.append(to_string(g));
    }
    line("guards_enabled", guards.empty() ? "none" : guards);
    line("bank_policy", std::string(to_string(bank_policy)));
    line("bank", std::string(to_string(bank)));
    line("multibank_member", std::string(to_string(multibank_member)));
    line("budget_B", budget_B ? std::to_string(*budget_B) : "none");
    line("cooldown", std::to_string(cooldown));
    line("lambda", exact(lambda));
    line("delta", exact(delta));
    line("confidence_signal", std::string(to_string(confidence_signal)));
    return s;
  }

  std::string hash() const { return sha256_hex(to_kv()); }

  // Reads the policy keys (optionally under a prefix such as "policy."); absent
  // keys keep their defaults.
  static PolicyConfig from_kv(const KeyValueConfig& kv, const std::string& prefix = "") {
    PolicyConfig p;
    const auto key = [&](const char* k) { return prefix + k; };
    if (auto v = kv.get(key("family"))) p.family = parse_enum(*v, kAllFamilies, "policy family");
    p.tau = kv.get_double(key("tau"), p.tau);
    p.margin_m = kv.get_double(key("margin_m"), p.margin_m);
    if (auto v = kv.get(key("guards_enabled"))) {
      p.guards_enabled.clear();
      if (*v != "none") {
        for (const auto& g : split_list(*v)) p.guards_enabled.insert(parse_enum(g, kAllGuards, "guard"));
      }
    }
    if (auto v = kv.get(key("bank_policy"))) p.bank_policy = parse_enum(*v, kAllBankPolicies, "bank policy");
    if (auto v = kv.get(key("bank"))) p.bank = parse_bank_kind(*v);
    if (auto v = kv.get(key("multibank_member"))) {
      p.multibank_member = parse_enum(*v, kAllBankPolicies, "bank policy");
      if (!is_multibank_member(p.multibank_member)) throw FormatError("multibank_member must be a cascade or dual");
    }
    if (auto v = kv.get(key("budget_B"))) {
      if (*v == "none") {
        p.budget_B.reset();
      } else {
        const auto b = KeyValueConfig::parse_int(key("budget_B"), *v);
        if (b < 0) throw FormatError("budget_B must be nonnegative");
        p.budget_B = static_cast<std::uint32_t>(b);
      }
    }
    if (auto v = kv.get(key("cooldown"))) {
      const auto c = KeyValueConfig::parse_int(key("cooldown"), *v);
      if (c < 0) throw FormatError("cooldown must be nonnegative");
      p.cooldown = static_cast<std::uint32_t>(c);
    }
    p.lambda = kv.get_double(key("lambda"), p.lambda);
    if (p.lambda < 0) throw FormatError("lambda must be nonnegative");
    p.delta = kv.get_double(key("delta"), p.delta);
    if (!(p.delta > 0.0 && p.delta < 1.0)) throw FormatError("delta must lie in (0,1)");
    if (auto v = kv.get(key("confidence_signal"))) p.confidence_signal = parse_enum(*v, kAllSignals, "confidence signal");
    return p;
  }

  static PolicyConfig from_kv_text(const std::string& text) { return from_kv(KeyValueConfig::parse_string(text)); }

  static std::string exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

// Convenience constructors for the comparison families.
inline PolicyConfig with_family(PolicyConfig p, PolicyFamily f) {
  p.family = f;
  return p;
}

}  // namespace applyctl
