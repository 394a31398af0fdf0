#include <catch_amalgamated.hpp>

#include "applyctl/controller.hpp"
#include "support/oracles.hpp"
#include "support/scripted_solver.hpp"

using namespace applyctl;
using scripted::Pass;

namespace {

scripted::Step step(bool base_ok, double c, bool rule_ok, double c_rule, bool ex_ok = false, double c_ex = 0.0,
                    bool dual_ok = false, double c_dual = 0.0) {
  scripted::Step s;
  s.baseline = {base_ok, c};
  s.second["rule"] = {rule_ok, c_rule};
  s.second["exemplar"] = {ex_ok, c_ex};
  s.second["dual"] = {dual_ok, c_dual};
  return s;
}

PolicyConfig controlled(BankPolicy bp, double tau = 0.5, double m = 0.1) {
  PolicyConfig p;
  p.tau = tau;
  p.margin_m = m;
  p.bank_policy = bp;
  return p;
}

struct Fixture {
  BankSnapshot rule = scripted::one_entry_bank(BankKind::rule);
  BankSnapshot ex = scripted::one_entry_bank(BankKind::exemplar);
  BankSet banks() const { return {&rule, &ex}; }
  LiveRetriever live{};
};

}  // namespace

TEST_CASE("route_decision is a strict threshold") {
  CHECK_FALSE(route_decision(0.9, 0.5));
  CHECK(route_decision(0.4, 0.5));
  CHECK_FALSE(route_decision(0.5, 0.5));
}

TEST_CASE("threshold percentile") {
  std::vector<double> conf;
  for (int i = 0; i < 600; ++i) conf.push_back((i * 7919 % 600) / 600.0);
  const auto frac = [&](double tau) {
    return static_cast<double>(std::count_if(conf.begin(), conf.end(), [&](double c) { return route_decision(c, tau); })) /
           conf.size();
  };
  CHECK(frac(select_threshold_percentile(conf, 0)) == 0.0);
  CHECK(frac(select_threshold_percentile(conf, 100)) >= 598.0 / 600.0);
  const double f35 = frac(select_threshold_percentile(conf, 35));
  CHECK(f35 >= 0.30);
  CHECK(f35 <= 0.40);
  CHECK_THROWS_AS(select_threshold_percentile({}, 35), std::invalid_argument);
}

TEST_CASE("accept_decision: margin and guard conjunction") {
  const GuardResults ok{{Guard::format, true}, {Guard::valid, true}};
  const std::set<Guard> fv{Guard::format, Guard::valid};
  CHECK(accept_decision(0.4, 0.6, 0.1, ok, fv));
  CHECK_FALSE(accept_decision(0.4, 0.45, 0.1, ok, fv));
  GuardResults bad = ok;
  bad[Guard::format] = false;
  CHECK_FALSE(accept_decision(0.4, 0.9, 0.1, bad, fv));
  CHECK(accept_decision(0.4, 0.9, 0.1, bad, {Guard::valid}));       // disabled guard counts as passing
  CHECK_FALSE(accept_decision(0.4, 0.9, 0.1, ok, {Guard::progress}));  // enabled but unreported
  CHECK_THROWS_AS(accept_decision(0.4, std::nullopt, 0.1, ok, fv), std::invalid_argument);
}

TEST_CASE("run_step: confident step is not routed") {
  Fixture f;
  scripted::Solver s{{{step(true, 0.9, false, 0.99)}}};
  BudgetState b;
  const auto r = run_step(s, {0, 0, 0}, controlled(BankPolicy::choose), f.banks(), b, f.live);
  CHECK_FALSE(r.routed);
  CHECK(r.calls_used == 1);
  CHECK_FALSE(r.retrieved);
  CHECK(r.final_action == r.baseline_action);
  CHECK(s.second_calls == 0);
}

TEST_CASE("run_step: empty retrieval rolls back") {
  Fixture f;
  f.rule = scripted::one_entry_bank(BankKind::rule, {0.0, 1.0});  // orthogonal to every query
  scripted::Solver s{{{step(false, 0.2, true, 0.99)}}};
  BudgetState b;
  const auto r = run_step(s, {0, 0, 0}, controlled(BankPolicy::choose), f.banks(), b, f.live);
  CHECK(r.routed);
  CHECK_FALSE(r.accepted);
  CHECK(r.final_action == r.baseline_action);
  CHECK(r.reject_reason == "empty_retrieval");
  CHECK(s.second_calls == 0);
}

TEST_CASE("run_step: accept, margin rejection and guard rejection") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.3, true, 0.8), step(false, 0.3, true, 0.35), step(false, 0.3, true, 0.9)}}};
  s.episodes[0][2].second["rule"].guards[Guard::valid] = false;
  BudgetState b;
  const auto p = controlled(BankPolicy::choose);
  const auto a = run_step(s, {0, 0, 0}, p, f.banks(), b, f.live);
  CHECK(a.accepted);
  CHECK(a.final_correct);
  CHECK(a.calls_used == 2);
  const auto m = run_step(s, {0, 0, 1}, p, f.banks(), b, f.live);
  CHECK_FALSE(m.accepted);
  CHECK(m.reject_reason == "margin");
  CHECK(m.final_action == m.baseline_action);
  const auto g = run_step(s, {0, 0, 2}, p, f.banks(), b, f.live);
  CHECK_FALSE(g.accepted);
  CHECK(g.reject_reason == "guard");
}

TEST_CASE("run_episode: budget and cooldown") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.2, true, 0.9), step(false, 0.2, true, 0.9), step(false, 0.2, true, 0.9),
                       step(false, 0.2, true, 0.9)}}};
  auto p = controlled(BankPolicy::choose);
  p.budget_B = 1;
  auto t = run_episode(s, 0, 0, p, f.banks(), f.live);
  CHECK(t.routed_count == 1);
  CHECK_FALSE(t.steps[1].routed);
  CHECK(t.steps[1].reject_reason == "budget");

  p.budget_B.reset();
  p.cooldown = 1;
  t = run_episode(s, 0, 0, p, f.banks(), f.live);
  CHECK(t.routed_count == 2);
  CHECK(t.steps[0].routed);
  CHECK_FALSE(t.steps[1].routed);
  CHECK(t.steps[1].reject_reason == "cooldown");
  CHECK(t.steps[2].routed);
  CHECK(t.total_calls == 4 + 2);
}

TEST_CASE("compose_bank_policy") {
  Fixture f;
  const auto plans = [&](BankPolicy bp) { return compose_bank_policy(controlled(bp), f.banks()); };
  CHECK(plans(BankPolicy::gate_only).at(0).mode == AcceptanceMode::gate);
  CHECK(plans(BankPolicy::choose).at(0).mode == AcceptanceMode::full);
  const auto cre = plans(BankPolicy::cascade_rule_then_exemplar);
  REQUIRE(cre.size() == 2);
  CHECK(cre[0].banks == std::vector<BankKind>{BankKind::rule});
  CHECK(cre[1].banks == std::vector<BankKind>{BankKind::exemplar});
  CHECK(plans(BankPolicy::dual).size() == 1);
  CHECK(plans(BankPolicy::dual)[0].banks.size() == 2);

  auto mb = controlled(BankPolicy::multibank_best);
  mb.multibank_member = BankPolicy::cascade_exemplar_then_rule;
  CHECK(compose_bank_policy(mb, f.banks())[0].banks == std::vector<BankKind>{BankKind::exemplar});

  auto ex = controlled(BankPolicy::choose);
  ex.bank = BankKind::exemplar;
  CHECK_THROWS_AS(compose_bank_policy(ex, BankSet{&f.rule, nullptr}), LookupError);
  CHECK(compose_bank_policy(with_family(ex, PolicyFamily::baseline), BankSet{}).empty());
}

TEST_CASE("gate_only bypasses the margin but not the guards") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.4, true, 0.1), step(false, 0.4, true, 0.1)}}};
  s.episodes[0][1].second["rule"].guards[Guard::format] = false;
  const auto p = controlled(BankPolicy::gate_only);
  BudgetState b;
  CHECK(run_step(s, {0, 0, 0}, p, f.banks(), b, f.live).accepted);
  CHECK_FALSE(run_step(s, {0, 0, 1}, p, f.banks(), b, f.live).accepted);
}

TEST_CASE("cascade short-circuits on first acceptance") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.3, true, 0.9, true, 0.9)}}};
  scripted::CountingRetriever cr;
  BudgetState b;
  const auto r = run_step(s, {0, 0, 0}, controlled(BankPolicy::cascade_rule_then_exemplar), f.banks(), b, cr);
  CHECK(r.accepted);
  CHECK(r.attempts.size() == 1);
  CHECK(cr.calls[BankKind::exemplar] == 0);
  CHECK(r.calls_used == 2);

  scripted::Solver s2{{{step(false, 0.3, false, 0.1, true, 0.9)}}};
  BudgetState b2;
  const auto r2 = run_step(s2, {0, 0, 0}, controlled(BankPolicy::cascade_rule_then_exemplar), f.banks(), b2, cr);
  CHECK(r2.attempts.size() == 2);
  CHECK(r2.accepted);
  CHECK(r2.final_correct);
  CHECK(r2.calls_used == 3);
}

TEST_CASE("dual makes exactly one second-pass call") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.3, false, 0.1, false, 0.1, true, 0.9)}}};
  BudgetState b;
  const auto r = run_step(s, {0, 0, 0}, controlled(BankPolicy::dual), f.banks(), b, f.live);
  CHECK(s.second_calls == 1);
  CHECK(r.calls_used == 2);
  CHECK(r.accepted);
  CHECK(r.retrieved->retrieved_ids == std::vector<std::string>{"R1", "E1"});
}

TEST_CASE("baseline families") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.9, true, 0.1), step(false, 0.2, true, 0.1), step(true, 0.2, false, 0.9),
                       step(true, 0.2, false, 0.9)}}};
  const auto base = controlled(BankPolicy::choose);
  const auto retry = run_episode(s, 0, 0, with_family(base, PolicyFamily::retry), f.banks(), f.live);
  CHECK(retry.routed_count == 3);
  for (const auto& st : retry.steps) CHECK(st.final_action == st.baseline_action);
  const auto always = run_episode(s, 0, 0, with_family(base, PolicyFamily::always_retrieve), f.banks(), f.live);
  CHECK(always.routed_count == 4);
  CHECK(always.accepted_count == 4);
  CHECK(always.steps[0].final_correct);  // committed without acceptance check
  const auto fixed = run_episode(s, 0, 0, with_family(base, PolicyFamily::fixed_budget), f.banks(), f.live);
  CHECK(fixed.routed_count == kFixedBudgetRoutes);
  const auto none = run_episode(s, 0, 0, with_family(base, PolicyFamily::baseline), f.banks(), f.live);
  CHECK(none.routed_count == 0);
  CHECK(none.total_calls == 4);
}

TEST_CASE("oracle_policy keeps baseline unless strictly better") {
  std::vector<OracleStep> steps(3);
  steps[0] = {0, 10, true, {{"rule", 11, false}}};   // second wrong, baseline right
  steps[1] = {1, 20, false, {{"rule", 21, false}}};  // both wrong
  steps[2] = {2, 30, false, {{"rule", 31, false}, {"exemplar", 32, true}}};
  const auto t = oracle_policy(0, 0, steps);
  CHECK(t.steps[0].final_action == 10);
  CHECK(t.steps[1].final_action == 20);
  CHECK_FALSE(t.steps[1].accepted);
  CHECK(t.steps[2].final_action == 32);
  CHECK(t.accepted_count == 1);
}

TEST_CASE("oracle_policy matches brute-force enumeration") {
  std::mt19937_64 eng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto rows = 1 + bounded_index(eng, 10);
    std::vector<OracleStep> steps;
    std::vector<std::vector<int>> options;
    for (std::uint64_t i = 0; i < rows; ++i) {
      OracleStep os{static_cast<std::int64_t>(i), 0, unit_uniform(eng) < 0.6, {}};
      std::vector<int> opt{os.baseline_correct ? 1 : 0};
      for (int c = 0; c < 3; ++c) {
        const bool ok = unit_uniform(eng) < 0.4;
        os.candidates.push_back({"c", c + 1, ok});
        opt.push_back(ok ? 1 : 0);
      }
      steps.push_back(os);
      options.push_back(opt);
    }
    const auto t = oracle_policy(0, 0, steps);
    int total = 0;
    for (const auto& st : t.steps) total += st.final_correct;
    CHECK(total == oracle::best_assignment(options));
  }
}

TEST_CASE("trace JSON carries the step record fields") {
  Fixture f;
  scripted::Solver s{{{step(false, 0.3, true, 0.9)}}};
  const auto t = run_episode(s, 0, 0, controlled(BankPolicy::choose), f.banks(), f.live);
  const auto j = to_json(t);
  CHECK(j.at("routed_count") == 1);
  const auto& st = j.at("steps").at(0);
  CHECK(st.at("retrieved").at("retrieved_ids") == std::vector<std::string>{"R1"});
  CHECK(st.at("guard_results").at("format") == true);
  CHECK(st.at("calls_used") == 2);
}
