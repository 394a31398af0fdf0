#include <catch_amalgamated.hpp>

#include <cmath>

#include "applyctl/protocol.hpp"
#include "applyctl/stats.hpp"
#include "applyctl/worldsim.hpp"

using namespace applyctl;

namespace {

struct Frozen {
  BankSnapshot rule, exemplar;
  explicit Frozen(const World& w)
      : rule(freeze_bank(w.bank(BankKind::rule))), exemplar(freeze_bank(w.bank(BankKind::exemplar))) {}
  BankSet set() const { return {&rule, &exemplar}; }
};

std::vector<std::int64_t> all_examples(const World& w) {
  std::vector<std::int64_t> ids;
  for (const auto& e : w.examples()) ids.push_back(e.id);
  return ids;
}

}  // namespace

TEST_CASE("same spec gives the same world") {
  WorldSpec s;
  s.n_examples = 40;
  const auto a = World::generate(s), b = World::generate(s);
  const Frozen fa(a), fb(b);
  CHECK(fa.rule.content_hash == fb.rule.content_hash);
  CHECK(fa.exemplar.content_hash == fb.exemplar.content_hash);
  CHECK(a.outcome_table_json(fa.set()).dump() == b.outcome_table_json(fb.set()).dump());

  s.seed = 2;
  const auto c = World::generate(s);
  CHECK(Frozen(c).exemplar.content_hash != fa.exemplar.content_hash);
  CHECK(c.hash() != a.hash());
}

TEST_CASE("decode_baseline is a pure function of its key") {
  const auto w = World::generate(WorldSpec{});
  for (std::int64_t ex = 0; ex < 20; ++ex) {
    const StepKey k{1, ex, 0};
    const auto x = w.decode_baseline(k, ConfidenceSignal::mean_logprob);
    const auto y = w.decode_baseline(k, ConfidenceSignal::mean_logprob);
    CHECK(x.action == y.action);
    CHECK(x.confidence == y.confidence);
    CHECK(w.is_correct(k, x.action) == w.baseline_correct(k));
  }
}

TEST_CASE("retry with no memory reproduces the baseline") {
  const auto w = World::generate(WorldSpec{});
  for (auto sig : kAllSignals) {
    for (std::int64_t ex = 0; ex < 50; ++ex) {
      const StepKey k{0, ex, 0};
      const auto b = w.decode_baseline(k, sig);
      const auto r = w.decode_second(k, sig, {});
      CHECK(r.decoded.action == b.action);
      CHECK(r.decoded.confidence == b.confidence);
    }
  }
}

TEST_CASE("base_accuracy 1 makes every baseline correct") {
  WorldSpec s;
  s.n_examples = 100;
  s.base_accuracy = 1.0;
  const auto w = World::generate(s);
  for (std::uint32_t r = 0; r < s.replicates; ++r) {
    for (std::int64_t ex = 0; ex < s.n_examples; ++ex) CHECK(w.baseline_correct({r, ex, 0}));
  }
}

TEST_CASE("inapplicable memory that always hurts") {
  WorldSpec s;
  s.n_examples = 200;
  s.applicability_rule = 0.0;
  s.applicability_exemplar = 0.0;
  s.hurt_prob = 1.0;
  const auto w = World::generate(s);
  const Frozen f(w);
  PolicyConfig p;
  p.bank_policy = BankPolicy::dual;
  const auto ids = all_examples(w);
  const auto base = evaluate_policy(w, with_family(p, PolicyFamily::baseline), f.set(), ids);
  const auto always = evaluate_policy(w, with_family(p, PolicyFamily::always_retrieve), f.set(), ids);
  const stats::PairedComparison cmp(base.success, always.success);
  CHECK(cmp.helps() == 0);
  // every baseline-correct row with a nonempty retrieval is lost
  std::int64_t exposed_correct = 0;
  for (const auto& t : always.traces) {
    for (const auto& s : t.steps) {
      if (s.baseline_correct && !s.attempts.empty() && !s.attempts.front().retrieved_ids().empty()) ++exposed_correct;
    }
  }
  CHECK(exposed_correct > 0);
  CHECK(cmp.hurts() == exposed_correct);
}

TEST_CASE("realized base accuracy within three binomial deviations") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    WorldSpec s;
    s.seed = seed;
    const auto w = World::generate(s);
    std::int64_t ok = 0, n = 0;
    for (std::uint32_t r = 0; r < s.replicates; ++r) {
      for (std::int64_t ex = 0; ex < s.n_examples; ++ex, ++n) ok += w.baseline_correct({r, ex, 0});
    }
    const double sd = std::sqrt(s.base_accuracy * (1 - s.base_accuracy) / static_cast<double>(n));
    CHECK(std::abs(static_cast<double>(ok) / static_cast<double>(n) - s.base_accuracy) <= 3 * sd);
  }
}

TEST_CASE("default world reaches the target oracle accuracy") {
  const auto w = World::generate(WorldSpec{});
  const Frozen f(w);
  const auto ids = all_examples(w);
  const auto oracle = evaluate_oracle(w, f.set(), ids);
  CHECK(std::abs(oracle.accuracy() - 0.845) <= 0.02);
}

TEST_CASE("second-pass confidence separates at the requested AUC") {
  WorldSpec s;
  s.second_auc_rule = 0.8;
  s.second_auc_exemplar = 0.8;
  const auto w = World::generate(s);
  const Frozen f(w);
  PolicyConfig p;
  p.bank_policy = BankPolicy::choose;
  p.bank = BankKind::exemplar;
  const auto ev = evaluate_policy(w, with_family(p, PolicyFamily::always_retrieve), f.set(), all_examples(w));
  std::vector<double> conf;
  std::vector<bool> label;
  for (const auto& t : ev.traces) {
    for (const auto& st : t.steps) {
      for (const auto& a : st.attempts) {
        if (!a.second || a.retrieved_ids().empty()) continue;
        conf.push_back(a.second->confidence);
        label.push_back(a.second_correct);
      }
    }
  }
  REQUIRE(conf.size() >= 500);
  const double auc = stats::roc_auc(conf, label);
  CHECK(auc >= 0.75);
  CHECK(auc <= 0.85);
}

TEST_CASE("edits change outcomes only on rows that inject the edited entry") {
  const auto w = World::generate(WorldSpec{});
  const auto snap = freeze_bank(w.bank(BankKind::exemplar));
  const std::vector<std::string> ids{"E000", "E001"};
  const auto edits = make_edit_pair(snap, ids);
  const std::vector<ContentEdit> rep(edits.begin(), edits.begin() + 2), cor(edits.begin() + 2, edits.end());
  const auto rs = apply_edits(snap, rep), cs = apply_edits(snap, cor);
  const auto cfg = w.retrieval_config();
  int hit_rows = 0, flipped = 0;
  for (std::int64_t ex = 0; ex < w.spec().n_examples; ++ex) {
    const StepKey k{0, ex, 0};
    const auto got = retrieve(w.query(k), snap, cfg).retrieved_ids;
    if (got.empty()) continue;
    const auto inject = [&](const BankSnapshot& s) {
      std::vector<const SnapshotEntry*> v;
      for (const auto& id : got) v.push_back(s.find(id));
      return w.decode_second(k, ConfidenceSignal::mean_logprob, v);
    };
    const bool hit = std::any_of(got.begin(), got.end(), [&](const auto& id) { return id == "E000" || id == "E001"; });
    const bool r = w.is_correct(k, inject(rs).decoded.action), c = w.is_correct(k, inject(cs).decoded.action);
    if (!hit) {
      CHECK(r == c);
    } else {
      ++hit_rows;
      flipped += r != c;
    }
  }
  CHECK(hit_rows > 0);
  CHECK(flipped > 0);
}

TEST_CASE("exposure averages out when help equals hurt at half applicability") {
  // a single bank with one retrieved entry per row keeps every exposure at rate 0.5
  double always_sum = 0.0, oracle_min = 1.0;
  const int seeds = 10;
  for (int seed = 1; seed <= seeds; ++seed) {
    WorldSpec s;
    s.seed = static_cast<std::uint64_t>(seed);
    s.n_examples = 600;
    s.base_accuracy = 0.5;
    s.applicability_rule = 0.5;
    s.applicability_exemplar = 0.5;
    s.help_prob = 0.3;
    s.hurt_prob = 0.3;
    s.k_max = 1;
    s.n_rule = 0;
    const auto w = World::generate(s);
    const Frozen f(w);
    PolicyConfig p;
    p.bank = BankKind::exemplar;
    const auto ids = all_examples(w);
    const auto base = evaluate_policy(w, with_family(p, PolicyFamily::baseline), f.set(), ids);
    const auto always = evaluate_policy(w, with_family(p, PolicyFamily::always_retrieve), f.set(), ids);
    const auto oracle = evaluate_oracle(w, f.set(), ids);
    always_sum += stats::PairedComparison(base.success, always.success).delta_acc();
    oracle_min = std::min(oracle_min, stats::PairedComparison(base.success, oracle.success).delta_acc());
  }
  CHECK(std::abs(always_sum / seeds) < 0.01);
  CHECK(oracle_min > 0.03);
}

TEST_CASE("toxic entries are chosen exactly and never applicable") {
  WorldSpec s;
  s.toxic_fraction = 0.2;
  const auto w = World::generate(s);
  int toxic = 0;
  for (const auto& e : w.bank(BankKind::exemplar).entries()) {
    if (!w.is_toxic(e.id)) continue;
    ++toxic;
    for (std::int64_t ex = 0; ex < 30; ++ex) CHECK_FALSE(w.applicable({0, ex, 0}, e.id));
  }
  CHECK(toxic == 20);
  CHECK_THROWS_AS(w.is_toxic("nope"), LookupError);
}

TEST_CASE("reembed keeps or moves an entry deterministically") {
  const auto w = World::generate(WorldSpec{});
  const auto a = w.reembed("E003", "new"), b = w.reembed("E003", "new");
  CHECK(a == b);
  CHECK(a.size() == static_cast<std::size_t>(w.spec().embedding_dim));
}

TEST_CASE("invalid specs are rejected") {
  WorldSpec s;
  s.base_accuracy = 1.2;
  CHECK_THROWS_AS(World::generate(s), std::invalid_argument);
  s = {};
  s.baseline_auc = 1.0;
  CHECK_THROWS(World::generate(s));
  s = {};
  s.n_examples = 0;
  CHECK_THROWS(World::generate(s));
  CHECK_THROWS(WorldSpec::from_kv(KeyValueConfig::parse_string("world.hurt_prob = -0.1\n")));
}

TEST_CASE("world spec survives its key-value form") {
  WorldSpec s;
  s.help_prob = 0.123456789;
  s.seed = 99;
  s.steps_per_example = 3;
  const std::string text = s.to_kv();
  std::string prefixed;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    prefixed += "world." + text.substr(pos, nl - pos) + "\n";
    pos = nl + 1;
  }
  const auto back = WorldSpec::from_kv(KeyValueConfig::parse_string(prefixed));
  CHECK(back.hash() == s.hash());
}
