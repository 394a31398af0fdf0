#pragma once

// Synthetic task world standing in for an LLM on a benchmark.
//
// Every outcome is a pure function of (spec, replicate, example, step, injected
// identities, content version) computed from counter-style coins, which makes the
// world an implicit outcome table: rerunning any context returns the same answer.
//
//  * baseline: correct with probability base_accuracy; confidence from a Beta
//    model separating correct from incorrect at `baseline_auc`.
//  * second pass: an injected entry is applicable to a step with its bank's
//    applicability rate (toxic entries never are). Applicable memory turns a wrong
//    baseline right with help_prob; inapplicable memory turns a right baseline
//    wrong with hurt_prob (toxic_hurt_prob for toxic entries). Second-pass
//    confidence separates correct from incorrect at the bank's AUC.
//  * content edits: on edit-sensitive rows whose injected set contains an edited
//    entry, repair and corrupt versions give opposite outcomes.
//  * retry (empty injection) reproduces the baseline exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "applyctl/confidence_model.hpp"
#include "applyctl/controller.hpp"
#include "applyctl/digest.hpp"
#include "applyctl/embedding.hpp"
#include "applyctl/kv_config.hpp"
#include "applyctl/memory_bank.hpp"
#include "applyctl/random.hpp"
#include "applyctl/retrieval.hpp"

namespace applyctl {

struct WorldSpec {
  std::int64_t n_examples = 600;
  std::uint32_t steps_per_example = 1;
  double fit_fraction = 0.5;
  std::uint32_t replicates = 3;  // decode seeds pooled per example

  double base_accuracy = 0.74;
  double applicability_rule = 0.6;
  double applicability_exemplar = 0.5;
  double help_prob = 0.2;  // given applicable
  double hurt_prob = 0.3;  // given inapplicable

  double baseline_auc = 0.75;
  double second_auc_rule = 0.85;
  double second_auc_exemplar = 0.7;
  double confidence_concentration = 6.0;

  std::int64_t n_rule = 50;
  std::int64_t n_exemplar = 100;
  std::int64_t topic_count = 10;
  std::int64_t embedding_dim = 32;
  double topic_weight = 0.9;

  double toxic_fraction = 0.0;
  double toxic_hurt_prob = 1.0;
  double guard_fail_rate = 0.0;        // format / valid
  double agent_guard_fail_rate = 0.0;  // progress / contract

  double edit_sensitivity = 0.3;
  double repair_better_prob = 0.85;
  double drift_prob = 0.5;

  double retrieval_threshold = 0.6;
  std::int64_t k_max = 2;

  std::uint64_t seed = 1;

  void validate() const {
    const auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0,1]");
    };
    const auto auc = [](double p, const char* name) {
      if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument(std::string(name) + " must lie in (0,1)");
    };
    prob(fit_fraction, "fit_fraction");
    prob(base_accuracy, "base_accuracy");
    prob(applicability_rule, "applicability_rule");
    prob(applicability_exemplar, "applicability_exemplar");
    prob(help_prob, "help_prob");
    prob(hurt_prob, "hurt_prob");
    prob(toxic_fraction, "toxic_fraction");
    prob(toxic_hurt_prob, "toxic_hurt_prob");
    prob(guard_fail_rate, "guard_fail_rate");
    prob(agent_guard_fail_rate, "agent_guard_fail_rate");
    prob(edit_sensitivity, "edit_sensitivity");
    prob(repair_better_prob, "repair_better_prob");
    prob(drift_prob, "drift_prob");
    auc(baseline_auc, "baseline_auc");
    auc(second_auc_rule, "second_auc_rule");
    auc(second_auc_exemplar, "second_auc_exemplar");
    if (n_examples < 1) throw std::invalid_argument("n_examples must be positive");
    if (steps_per_example < 1) throw std::invalid_argument("steps_per_example must be positive");
    if (replicates < 1) throw std::invalid_argument("replicates must be positive");
    if (n_rule < 0 || n_exemplar < 0) throw std::invalid_argument("bank sizes must be nonnegative");
    if (topic_count < 1) throw std::invalid_argument("topic_count must be positive");
    if (embedding_dim < 2) throw std::invalid_argument("embedding_dim must be at least 2");
    if (!(topic_weight >= 0.0 && topic_weight <= 1.0)) throw std::invalid_argument("topic_weight must lie in [0,1]");
    if (!(confidence_concentration > 0.0)) throw std::invalid_argument("confidence_concentration must be positive");
    if (!(retrieval_threshold >= -1.0 && retrieval_threshold <= 1.0)) {
      throw std::invalid_argument("retrieval_threshold must lie in [-1,1]");
    }
    if (k_max < 1) throw std::invalid_argument("k_max must be positive");
  }

  std::string to_kv() const {
    std::string s;
    const auto num = [&](const char* k, double v) { s += std::string(k) + " = " + PolicyConfig::exact(v) + "\n"; };
    const auto integer = [&](const char* k, long long v) { s += std::string(k) + " = " + std::to_string(v) + "\n"; };
    integer("n_examples", n_examples);
    integer("steps_per_example", steps_per_example);
    num("fit_fraction", fit_fraction);
    integer("replicates", replicates);
    num("base_accuracy", base_accuracy);
    num("applicability_rule", applicability_rule);
    num("applicability_exemplar", applicability_exemplar);
    num("help_prob", help_prob);
    num("hurt_prob", hurt_prob);
    num("baseline_auc", baseline_auc);
    num("second_auc_rule", second_auc_rule);
    num("second_auc_exemplar", second_auc_exemplar);
    num("confidence_concentration", confidence_concentration);
    integer("n_rule", n_rule);
    integer("n_exemplar", n_exemplar);
    integer("topic_count", topic_count);
    integer("embedding_dim", embedding_dim);
    num("topic_weight", topic_weight);
    num("toxic_fraction", toxic_fraction);
    num("toxic_hurt_prob", toxic_hurt_prob);
    num("guard_fail_rate", guard_fail_rate);
    num("agent_guard_fail_rate", agent_guard_fail_rate);
    num("edit_sensitivity", edit_sensitivity);
    num("repair_better_prob", repair_better_prob);
    num("drift_prob", drift_prob);
    num("retrieval_threshold", retrieval_threshold);
    integer("k_max", k_max);
    s += "seed = " + std::to_string(seed) + "\n";
    return s;
  }

  std::string hash() const { return sha256_hex(to_kv()); }

  static WorldSpec from_kv(const KeyValueConfig& kv, const std::string& prefix = "world.") {
    WorldSpec w;
    const auto d = [&](const char* k, double& field) { field = kv.get_double(prefix + k, field); };
    const auto i = [&](const char* k, auto& field) {
      field = static_cast<std::remove_reference_t<decltype(field)>>(kv.get_int(prefix + k, static_cast<long long>(field)));
    };
    i("n_examples", w.n_examples);
    i("steps_per_example", w.steps_per_example);
    d("fit_fraction", w.fit_fraction);
    i("replicates", w.replicates);
    d("base_accuracy", w.base_accuracy);
    d("applicability_rule", w.applicability_rule);
    d("applicability_exemplar", w.applicability_exemplar);
    d("help_prob", w.help_prob);
    d("hurt_prob", w.hurt_prob);
    d("baseline_auc", w.baseline_auc);
    d("second_auc_rule", w.second_auc_rule);
    d("second_auc_exemplar", w.second_auc_exemplar);
    d("confidence_concentration", w.confidence_concentration);
    i("n_rule", w.n_rule);
    i("n_exemplar", w.n_exemplar);
    i("topic_count", w.topic_count);
    i("embedding_dim", w.embedding_dim);
    d("topic_weight", w.topic_weight);
    d("toxic_fraction", w.toxic_fraction);
    d("toxic_hurt_prob", w.toxic_hurt_prob);
    d("guard_fail_rate", w.guard_fail_rate);
    d("agent_guard_fail_rate", w.agent_guard_fail_rate);
    d("edit_sensitivity", w.edit_sensitivity);
    d("repair_better_prob", w.repair_better_prob);
    d("drift_prob", w.drift_prob);
    d("retrieval_threshold", w.retrieval_threshold);
    i("k_max", w.k_max);
    if (auto v = kv.get(prefix + "seed")) w.seed = static_cast<std::uint64_t>(KeyValueConfig::parse_int(prefix + "seed", *v));
    w.validate();
    return w;
  }
};

struct ExampleInfo {
  std::int64_t id = 0;
  std::vector<std::int64_t> step_topics;
  bool fit = true;
};

// Context outcomes for one (replicate, example, step).
struct ExampleOutcomeRow {
  std::uint32_t replicate = 0;
  std::int64_t example_id = 0;
  std::uint32_t step = 0;
  bool baseline_correct = false;
  double baseline_confidence = 0.0;
  std::map<std::string, bool> second_correct_by_context;
  std::map<std::string, double> confidences;
};

class World {
 public:
  static World generate(const WorldSpec& spec) {
    spec.validate();
    World w;
    w.spec_ = spec;
    w.stub_ = EmbeddingStub{static_cast<std::size_t>(spec.embedding_dim), spec.topic_weight, spec.seed};
    w.baseline_model_ = ConfidenceModel::for_auc(spec.baseline_auc, spec.confidence_concentration);
    w.rule_model_ = ConfidenceModel::for_auc(spec.second_auc_rule, spec.confidence_concentration);
    w.exemplar_model_ = ConfidenceModel::for_auc(spec.second_auc_exemplar, spec.confidence_concentration);

    const auto n_fit = static_cast<std::int64_t>(std::floor(spec.fit_fraction * static_cast<double>(spec.n_examples)));
    for (std::int64_t e = 0; e < spec.n_examples; ++e) {
      ExampleInfo info;
      info.id = e;
      info.fit = e < n_fit;
      for (std::uint32_t s = 0; s < spec.steps_per_example; ++s) {
        info.step_topics.push_back(static_cast<std::int64_t>(coin_hash(spec.seed, "topic", e, s) %
                                                              static_cast<std::uint64_t>(spec.topic_count)));
      }
      w.examples_.push_back(std::move(info));
    }
    w.build_bank(BankKind::rule, spec.n_rule, "R");
    w.build_bank(BankKind::exemplar, spec.n_exemplar, "E");
    return w;
  }

  const WorldSpec& spec() const { return spec_; }
  std::string hash() const { return spec_.hash(); }
  const MemoryBank& bank(BankKind k) const { return k == BankKind::rule ? rule_bank_ : exemplar_bank_; }
  const std::vector<ExampleInfo>& examples() const { return examples_; }
  RetrievalConfig retrieval_config() const {
    return {spec_.retrieval_threshold, static_cast<std::size_t>(spec_.k_max)};
  }

  std::vector<std::int64_t> split(bool fit) const {
    std::vector<std::int64_t> ids;
    for (const auto& e : examples_) {
      if (e.fit == fit) ids.push_back(e.id);
    }
    return ids;
  }

  std::int64_t query_id(const StepKey& k) const {
    return (static_cast<std::int64_t>(k.replicate) * spec_.n_examples + k.example) *
               static_cast<std::int64_t>(spec_.steps_per_example) +
           k.step;
  }

  // ---- ground truth -------------------------------------------------------

  bool is_toxic(std::string_view entry_id) const { return meta(entry_id).toxic; }
  std::int64_t entry_topic(std::string_view entry_id) const { return meta(entry_id).topic; }

  bool applicable(const StepKey& k, std::string_view entry_id) const {
    const auto& m = meta(entry_id);
    if (m.toxic) return false;
    const double rate = m.kind == BankKind::rule ? spec_.applicability_rule : spec_.applicability_exemplar;
    return coin(spec_.seed, "applicable", k.example, k.step, entry_id) < rate;
  }

  std::int64_t answer(const StepKey& k) const {
    return static_cast<std::int64_t>(coin_hash(spec_.seed, "answer", k.example, k.step) >> 24) + 1000;
  }

  bool baseline_correct(const StepKey& k) const {
    return coin(spec_.seed, "baseline", k.replicate, k.example, k.step) < spec_.base_accuracy;
  }

  // ---- solver interface ---------------------------------------------------

  std::size_t steps_per_episode() const { return spec_.steps_per_example; }

  bool is_correct(const StepKey& k, std::int64_t action) const { return action == answer(k); }

  Query query(const StepKey& k) const {
    const auto& ex = examples_.at(static_cast<std::size_t>(k.example));
    Query q;
    q.id = query_id(k);
    q.text = "example " + std::to_string(k.example) + " step " + std::to_string(k.step);
    q.embedding = stub_.embed("query:" + std::to_string(k.example) + ":" + std::to_string(k.step), ex.step_topics.at(k.step));
    return q;
  }

  Decoded decode_baseline(const StepKey& k, ConfidenceSignal signal) const {
    const bool ok = baseline_correct(k);
    Decoded d;
    d.action = ok ? answer(k) : wrong_action(k, coin_hash(spec_.seed, "baseline-wrong", k.replicate));
    const double raw = baseline_model_.sample(ok, coin(spec_.seed, "baseline-conf", k.replicate, k.example, k.step));
    d.confidence = observe(raw, signal, coin_hash(spec_.seed, "baseline-signal", k.replicate, k.example, k.step));
    return d;
  }

  SecondPass decode_second(const StepKey& k, ConfidenceSignal signal,
                           std::span<const SnapshotEntry* const> injected) const {
    if (injected.empty()) {
      // no memory: deterministic decode repeats the baseline exactly
      SecondPass sp;
      sp.decoded = decode_baseline(k, signal);
      for (auto g : kAllGuards) sp.guards[g] = true;
      return sp;
    }
    std::vector<std::string> ids;
    for (const auto* e : injected) ids.push_back(e->id);
    std::sort(ids.begin(), ids.end());
    std::string joined;
    for (const auto& id : ids) joined += id + ",";
    const std::uint64_t ctx = fnv1a64(joined);

    SecondPass sp;
    const auto guard_coin = [&](const char* tag, double rate) {
      return !(coin(spec_.seed, tag, k.replicate, k.example, k.step, ctx) < rate);
    };
    sp.guards[Guard::format] = guard_coin("guard-format", spec_.guard_fail_rate);
    sp.guards[Guard::valid] = guard_coin("guard-valid", spec_.guard_fail_rate);
    sp.guards[Guard::progress] = guard_coin("guard-progress", spec_.agent_guard_fail_rate);
    sp.guards[Guard::contract] = guard_coin("guard-contract", spec_.agent_guard_fail_rate);
    const bool guards_ok = std::all_of(sp.guards.begin(), sp.guards.end(), [](const auto& g) { return g.second; });

    const bool correct = guards_ok && second_correct(k, injected, ctx);
    sp.decoded.action = correct ? answer(k) : wrong_action(k, coin_hash(spec_.seed, "second-wrong", k.replicate, ctx));
    const auto& model = meta(injected.front()->id).kind == BankKind::rule ? rule_model_ : exemplar_model_;
    const double raw = model.sample(correct, coin(spec_.seed, "second-conf", k.replicate, k.example, k.step, ctx));
    sp.decoded.confidence = observe(raw, signal, coin_hash(spec_.seed, "second-signal", k.replicate, k.example, k.step, ctx));
    return sp;
  }

  // Embedding an edited entry gets when the bank is re-indexed after the edit
  // (free rerun). The edit can move the entry to another topic.
  std::vector<double> reembed(std::string_view entry_id, const std::string& new_payload) const {
    const auto& m = meta(entry_id);
    std::int64_t topic = m.topic;
    if (coin(spec_.seed, "drift", entry_id, new_payload) < spec_.drift_prob && spec_.topic_count > 1) {
      const auto shift = 1 + coin_hash(spec_.seed, "drift-topic", entry_id, new_payload) %
                                 static_cast<std::uint64_t>(spec_.topic_count - 1);
      topic = (topic + static_cast<std::int64_t>(shift)) % spec_.topic_count;
    }
    return stub_.embed(std::string(entry_id) + "|" + new_payload, static_cast<std::uint64_t>(topic));
  }

  // Outcomes of the standard contexts (retry, each bank, dual) for one row.
  ExampleOutcomeRow outcome_row(const StepKey& k, const BankSet& banks) const {
    ExampleOutcomeRow row;
    row.replicate = k.replicate;
    row.example_id = k.example;
    row.step = k.step;
    const auto base = decode_baseline(k, ConfidenceSignal::mean_logprob);
    row.baseline_correct = is_correct(k, base.action);
    row.baseline_confidence = base.confidence;
    const Query q = query(k);
    const auto cfg = retrieval_config();
    const auto record = [&](const std::string& name, std::vector<const SnapshotEntry*> inj) {
      const auto sp = decode_second(k, ConfidenceSignal::mean_logprob, inj);
      row.second_correct_by_context[name + "/original"] = is_correct(k, sp.decoded.action);
      row.confidences[name + "/original"] = sp.decoded.confidence;
    };
    record("retry", {});
    std::vector<const SnapshotEntry*> both;
    for (auto kind : {BankKind::rule, BankKind::exemplar}) {
      const auto* snap = kind == BankKind::rule ? banks.rule : banks.exemplar;
      if (!snap) continue;
      std::vector<const SnapshotEntry*> inj;
      for (const auto& id : retrieve(q, *snap, cfg).retrieved_ids) inj.push_back(snap->find(id));
      both.insert(both.end(), inj.begin(), inj.end());
      if (!inj.empty()) record(std::string(to_string(kind)), inj);
    }
    if (banks.rule && banks.exemplar && !both.empty()) record("dual", both);
    return row;
  }

  nlohmann::json outcome_table_json(const BankSet& banks) const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::uint32_t r = 0; r < spec_.replicates; ++r) {
      for (const auto& ex : examples_) {
        for (std::uint32_t s = 0; s < spec_.steps_per_example; ++s) {
          const auto row = outcome_row({r, ex.id, s}, banks);
          rows.push_back({{"replicate", row.replicate},
                          {"example_id", row.example_id},
                          {"step", row.step},
                          {"split", ex.fit ? "fit" : "test"},
                          {"baseline_correct", row.baseline_correct},
                          {"baseline_confidence", row.baseline_confidence},
                          {"second_correct_by_context", row.second_correct_by_context},
                          {"confidences", row.confidences}});
        }
      }
    }
    return {{"world_hash", hash()}, {"rows", rows}};
  }

 private:
  struct EntryMeta {
    BankKind kind = BankKind::rule;
    std::int64_t topic = 0;
    bool toxic = false;
  };

  void build_bank(BankKind kind, std::int64_t n, const char* prefix) {
    MemoryBank bank(kind);
    std::vector<std::string> ids;
    for (std::int64_t i = 0; i < n; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s%03lld", prefix, static_cast<long long>(i));
      ids.emplace_back(buf);
    }
    // exact toxic count, chosen by hash order
    std::vector<std::string> by_hash = ids;
    std::sort(by_hash.begin(), by_hash.end(), [&](const auto& a, const auto& b) {
      return coin_hash(spec_.seed, "toxic", a) < coin_hash(spec_.seed, "toxic", b);
    });
    const auto n_toxic = static_cast<std::size_t>(std::floor(spec_.toxic_fraction * static_cast<double>(n) + 1e-9));
    std::set<std::string> toxic(by_hash.begin(), by_hash.begin() + static_cast<std::ptrdiff_t>(n_toxic));

    for (std::int64_t i = 0; i < n; ++i) {
      const auto& id = ids[static_cast<std::size_t>(i)];
      EntryMeta m{kind, i % spec_.topic_count, toxic.count(id) != 0};
      meta_.emplace(id, m);
      MemoryEntry e;
      e.id = id;
      e.bank_kind = kind;
      e.payload = std::string(to_string(kind)) + " " + id + " for topic " + std::to_string(m.topic);
      e.embedding = stub_.embed(id + "|" + e.payload, static_cast<std::uint64_t>(m.topic));
      bank.add(std::move(e));
    }
    (kind == BankKind::rule ? rule_bank_ : exemplar_bank_) = std::move(bank);
  }

  const EntryMeta& meta(std::string_view id) const {
    auto it = meta_.find(std::string(id));
    if (it == meta_.end()) throw LookupError("entry not in this world: " + std::string(id));
    return it->second;
  }

  std::int64_t wrong_action(const StepKey& k, std::uint64_t salt) const {
    return answer(k) + 1 + static_cast<std::int64_t>(coin_hash(salt, k.example, k.step) % 997);
  }

  bool second_correct(const StepKey& k, std::span<const SnapshotEntry* const> injected, std::uint64_t ctx) const {
    const bool base_ok = baseline_correct(k);

    std::vector<std::string> edited;
    bool any_repair = false;
    for (const auto* e : injected) {
      if (e->version != ContentVersion::original) {
        edited.push_back(e->id);
        any_repair = any_repair || e->version == ContentVersion::repair;
      }
    }
    if (!edited.empty()) {
      std::sort(edited.begin(), edited.end());
      std::string key;
      for (const auto& id : edited) key += id + ",";
      if (coin(spec_.seed, "edit-sensitive", k.replicate, k.example, k.step, key) < spec_.edit_sensitivity) {
        const bool repair_wins = coin(spec_.seed, "repair-wins", k.replicate, k.example, k.step, key) < spec_.repair_better_prob;
        return any_repair == repair_wins;
      }
    }

    bool toxic = false, applicable_any = false;
    for (const auto* e : injected) {
      toxic = toxic || is_toxic(e->id);
      applicable_any = applicable_any || applicable(k, e->id);
    }
    const double u = coin(spec_.seed, "effect", k.replicate, k.example, k.step, ctx);
    if (toxic) return base_ok && !(u < spec_.toxic_hurt_prob);
    if (applicable_any) return base_ok || u < spec_.help_prob;
    return base_ok && !(u < spec_.hurt_prob);
  }

  // Observed confidence under a signal: a monotone transform of the latent value
  // plus signal-specific noise.
  static double observe(double raw, ConfidenceSignal signal, std::uint64_t h) {
    const auto clamp01 = [](double v) { return std::clamp(v, 0.0, 1.0); };
    switch (signal) {
      case ConfidenceSignal::mean_logprob: return raw;
      case ConfidenceSignal::sum_logprob: {
        const double u1 = open_unit(mix64(h ^ 0x1));
        const double u2 = open_unit(mix64(h ^ 0x2));
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
        return clamp01(std::pow(raw, 1.25) + 0.05 * z);
      }
      case ConfidenceSignal::first_token: return clamp01(0.35 * raw + 0.65 * open_unit(mix64(h ^ 0x3)));
    }
    return raw;
  }

  WorldSpec spec_;
  EmbeddingStub stub_;
  ConfidenceModel baseline_model_, rule_model_, exemplar_model_;
  std::vector<ExampleInfo> examples_;
  MemoryBank rule_bank_{BankKind::rule};
  MemoryBank exemplar_bank_{BankKind::exemplar};
  std::unordered_map<std::string, EntryMeta> meta_;
};

static_assert(StepSolver<World>);

}  // namespace applyctl
