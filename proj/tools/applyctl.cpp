// Command-line driver: gen-world, fit, test, counterfactual, governance, ledger-check.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "applyctl/bank_io.hpp"
#include "applyctl/protocol.hpp"

namespace fs = std::filesystem;
using namespace applyctl;

namespace {

std::set<std::string> known_keys() {
  auto keys = KeyValueConfig::keys_of(WorldSpec{}.to_kv(), "world.");
  keys.merge(KeyValueConfig::keys_of(PolicyConfig{}.to_kv(), "policy."));
  for (const char* k : {"grid.percentiles", "grid.margins", "grid.bank_policies", "grid.banks", "grid.budgets",
                        "grid.signals", "governance.rounds", "test.resamples", "test.bootstrap_seed",
                        "counterfactual.max_rows", "counterfactual.permutations", "counterfactual.seed",
                        "counterfactual.edit_bank", "counterfactual.edit_entries", "counterfactual.target_hits"}) {
    keys.insert(k);
  }
  return keys;
}

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string manifest;
  std::string edits;
};

KeyValueConfig load_config(const CommonArgs& a) {
  KeyValueConfig kv = a.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(a.config);
  if (const auto unknown = kv.unknown_keys(known_keys()); !unknown.empty()) {
    throw FormatError("unknown config key: " + unknown.front());
  }
  if (a.seed) kv.set("world.seed", std::to_string(*a.seed));
  return kv;
}

World load_world(const KeyValueConfig& kv) { return World::generate(WorldSpec::from_kv(kv)); }

fs::path out_dir(const CommonArgs& a) {
  fs::path p(a.out);
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

FreezeManifest read_manifest(const CommonArgs& a) {
  if (a.manifest.empty()) throw ProtocolViolation("no freeze manifest given; run `fit` first and pass --manifest");
  std::ifstream in(a.manifest);
  if (!in) throw ProtocolViolation("cannot read freeze manifest " + a.manifest + "; run `fit` first");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  return FreezeManifest::from_json(j);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void write_governance_csv(std::ostream& os, const GovernanceResult& g) {
  os << "iteration,fit_accuracy,gap_close,newly_retired,retired_rule,retired_exemplar,evidence_records,selected\n";
  for (const auto& it : g.iterations) {
    os << it.iteration << ',' << fmt("%.4f", it.fit_accuracy) << ','
       << (it.gap_close ? fmt("%.4f", *it.gap_close) : std::string("absent")) << ',' << it.newly_retired.size() << ','
       << it.retired_ids.at("rule").size() << ',' << it.retired_ids.at("exemplar").size() << ',' << it.evidence_records
       << ',' << int(it.iteration == g.selected) << '\n';
  }
}

int cmd_gen_world(const CommonArgs& a) {
  const auto kv = load_config(a);
  const World w = load_world(kv);
  const auto dir = out_dir(a);
  open_out(dir / "world.cfg") << w.spec().to_kv();
  const auto rs = freeze_bank(w.bank(BankKind::rule)), es = freeze_bank(w.bank(BankKind::exemplar));
  for (const auto* s : {&rs, &es}) {
    const std::string kind(to_string(s->bank_kind));
    auto bank_os = open_out(dir / (kind + ".bank"));
    write_bank_file(bank_os, w.bank(s->bank_kind));
    open_out(dir / (kind + ".snapshot.json")) << snapshot_manifest(*s).dump(2) << '\n';
  }
  open_out(dir / "outcome_table.json") << w.outcome_table_json({&rs, &es}).dump() << '\n';
  std::cout << "world " << w.hash() << '\n';
  return 0;
}

int cmd_fit(const CommonArgs& a) {
  const auto kv = load_config(a);
  const World w = load_world(kv);
  const auto grid = CandidateGrid::from_kv(kv);
  FitOptions opt;
  opt.governance_rounds = static_cast<std::uint32_t>(kv.get_int("governance.rounds", opt.governance_rounds));
  const auto fit = run_fit_stage(w, grid, opt);
  const auto dir = out_dir(a);
  open_out(dir / "manifest.json") << fit.manifest.to_json().dump(2) << '\n';
  auto cand = open_out(dir / "fit_candidates.csv");
  cand << "signal,percentile,tau,margin_m,bank_policy,multibank_member,bank,budget_B,delta_acc,mean_calls,score\n";
  for (const auto& c : fit.candidates) {
    const auto& p = c.policy;
    cand << to_string(p.confidence_signal) << ',' << c.percentile << ',' << fmt("%.6f", p.tau) << ',' << p.margin_m
         << ',' << to_string(p.bank_policy) << ',' << to_string(p.multibank_member) << ',' << to_string(p.bank) << ','
         << (p.budget_B ? std::to_string(*p.budget_B) : "none") << ',' << fmt("%+.4f", c.delta_acc) << ','
         << fmt("%.4f", c.mean_calls) << ',' << fmt("%+.6f", c.score) << '\n';
  }
  auto gov = open_out(dir / "governance.csv");
  write_governance_csv(gov, fit.governance);
  std::cout << "manifest " << (dir / "manifest.json").string() << " policy " << fit.manifest.policy_hash << '\n';
  return 0;
}

int cmd_test(const CommonArgs& a) {
  const auto kv = load_config(a);
  const auto manifest = read_manifest(a);
  const World w = load_world(kv);
  TestOptions opt;
  opt.bootstrap_resamples = static_cast<std::size_t>(kv.get_int("test.resamples", 10000));
  opt.bootstrap_seed = static_cast<std::uint64_t>(kv.get_int("test.bootstrap_seed", 0));
  const auto res = run_test_stage(w, manifest, opt);
  const auto dir = out_dir(a);
  auto ledger = open_out(dir / "ledger.csv");
  write_ledger_csv(ledger, res.rows);
  auto traces = open_out(dir / "traces.jsonl");
  for (const auto& [name, run] : res.runs) {
    for (const auto& t : run.traces) {
      auto j = to_json(t);
      j["policy"] = name;
      traces << j.dump() << '\n';
    }
  }
  auto bins = open_out(dir / "confidence_bins.csv");
  write_confidence_bins_csv(bins, res.bins);
  open_out(dir / "frozen_retrieval.json") << freeze_identities(std::span<const EpisodeTrace>(res.runs.at("policy").traces)).to_json().dump() << '\n';
  write_ledger_csv(std::cout, res.rows);
  return 0;
}

int cmd_counterfactual(const CommonArgs& a) {
  const auto kv = load_config(a);
  const auto manifest = read_manifest(a);
  const World w = load_world(kv);
  CounterfactualOptions opt;
  opt.max_rows = static_cast<std::size_t>(kv.get_int("counterfactual.max_rows", 0));
  opt.permutations = static_cast<std::size_t>(kv.get_int("counterfactual.permutations", 10000));
  opt.seed = static_cast<std::uint64_t>(kv.get_int("counterfactual.seed", 0));
  const auto dir = out_dir(a);

  std::vector<ContentEdit> edits;
  if (!a.edits.empty()) {
    std::ifstream in(a.edits);
    if (!in) throw FormatError("cannot read edits file " + a.edits);
    edits = read_edits(in);
  } else {
    // no edits given: pick targets that hit the configured number of rows
    const auto probe = run_counterfactual(w, manifest, {}, opt);
    const FrozenSetup f = load_frozen(w, manifest);
    const auto kind = parse_bank_kind(kv.get_or("counterfactual.edit_bank", "exemplar"));
    const auto& snap = kind == BankKind::rule ? f.rule_snapshot : f.exemplar_snapshot;
    const auto ids = select_edit_targets(probe.frozen, snap,
                                         static_cast<std::size_t>(kv.get_int("counterfactual.edit_entries", 4)),
                                         static_cast<std::size_t>(kv.get_int("counterfactual.target_hits", 105)));
    edits = make_edit_pair(snap, ids);
    auto eo = open_out(dir / "edits.jsonl");
    for (const auto& e : edits) eo << edit_to_json(e).dump() << '\n';
  }
  const auto res = run_counterfactual(w, manifest, edits, opt);
  auto rows = open_out(dir / "counterfactual.csv");
  write_counterfactual_csv(rows, res.rows);
  const auto audit = res.summary.to_json();
  open_out(dir / "counterfactual_audit.json") << audit.dump(2) << '\n';
  std::cout << audit.dump(2) << '\n';
  const auto& s = res.summary;
  if (s.decomposition_violations || s.fixed_drift_nonzero || s.fixed_identity_mismatches || s.replay_mismatches ||
      s.non_hit_fixed_differences) {
    std::cerr << "applyctl: counterfactual audit failed\n";
    return 3;
  }
  return 0;
}

int cmd_governance(const CommonArgs& a) {
  const auto kv = load_config(a);
  const World w = load_world(kv);
  const auto policy = PolicyConfig::from_kv(kv, "policy.");
  const auto rounds = static_cast<std::uint32_t>(kv.get_int("governance.rounds", 5));
  const auto fit = w.split(true);
  const auto g = run_governance_loop(w, policy, rounds, fit);
  const auto dir = out_dir(a);
  auto os = open_out(dir / "governance.csv");
  write_governance_csv(os, g);
  write_governance_csv(std::cout, g);
  return 0;
}

int cmd_ledger_check(const std::vector<std::string>& tokens) {
  LedgerClaim c;
  bool have[4] = {false, false, false, false};
  for (const auto& t : tokens) {
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("expected key=value, got " + t);
    const auto key = t.substr(0, eq), val = t.substr(eq + 1);
    if (key == "n") {
      c.n = KeyValueConfig::parse_int(key, val);
      have[0] = true;
    } else if (key == "dacc") {
      c.delta_acc = KeyValueConfig::parse_double(key, val);
      have[1] = true;
    } else if (key == "hh") {
      c.help_hurt = KeyValueConfig::parse_int(key, val[0] == '+' ? val.substr(1) : val);
      have[2] = true;
    } else if (key == "p") {
      c.p = KeyValueConfig::parse_double(key, val);
      have[3] = true;
    } else {
      throw FormatError("unknown ledger field: " + key);
    }
  }
  if (!(have[0] && have[1] && have[2] && have[3])) throw FormatError("ledger-check needs n, dacc, hh and p");
  const auto s = ledger_check(c);
  if (!s.consistent) {
    std::cout << "inconsistent: " << s.reason << '\n';
    return 1;
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "h=%lld u=%lld p=%.6g consistent\n", static_cast<long long>(s.helps),
                static_cast<long long>(s.hurts), s.p);
  std::cout << buf;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"applicability control for prompt memory: simulate, fit, freeze, test"};
  app.require_subcommand(1);
  CommonArgs args;
  const auto common = [&](CLI::App* sub, bool manifest, bool edits) {
    sub->add_option("--config", args.config, "key = value configuration file");
    sub->add_option("--seed", args.seed, "world seed (overrides world.seed)");
    sub->add_option("--out", args.out, "output directory");
    if (manifest) sub->add_option("--manifest", args.manifest, "freeze manifest written by `fit`");
    if (edits) sub->add_option("--edits", args.edits, "content edits, one JSON object per line");
  };
  auto* gen = app.add_subcommand("gen-world", "write banks, world description and outcome table");
  auto* fit = app.add_subcommand("fit", "grid search and governance on the fit split; writes the manifest");
  auto* test = app.add_subcommand("test", "paired test-split ledger under a frozen manifest");
  auto* cf = app.add_subcommand("counterfactual", "free-rerun and fixed-retrieval replay of content edits");
  auto* gov = app.add_subcommand("governance", "evidence and retirement rounds on the fit split");
  auto* lc = app.add_subcommand("ledger-check", "search discordant counts consistent with a reported ledger row");
  common(gen, false, false);
  common(fit, false, false);
  common(test, true, false);
  common(cf, true, true);
  common(gov, false, false);
  std::vector<std::string> ledger_tokens;
  lc->add_option("fields", ledger_tokens, "n=<int> dacc=<real> hh=<int> p=<real>")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (gen->parsed()) return cmd_gen_world(args);
    if (fit->parsed()) return cmd_fit(args);
    if (test->parsed()) return cmd_test(args);
    if (cf->parsed()) return cmd_counterfactual(args);
    if (gov->parsed()) return cmd_governance(args);
    if (lc->parsed()) return cmd_ledger_check(ledger_tokens);
  } catch (const std::exception& e) {
    std::cerr << "applyctl: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
