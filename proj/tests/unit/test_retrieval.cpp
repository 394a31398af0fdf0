#include <catch_amalgamated.hpp>

#include <sstream>

#include "applyctl/embedding.hpp"
#include "applyctl/retrieval.hpp"

using namespace applyctl;

namespace {

BankSnapshot toy_snapshot() {
  BankSnapshot s;
  s.bank_kind = BankKind::exemplar;
  s.entries = {{"X", "x", {1.0, 0.0}}, {"Z", "z", {0.8, 0.6}}, {"Y", "y", {0.8, -0.6}}, {"W", "w", {0.0, 1.0}}};
  s.content_hash = snapshot_content_hash(s.bank_kind, s.entries);
  return s;
}

Query q(std::int64_t id, std::vector<double> e) { return Query{id, std::move(e), {}}; }

}  // namespace

TEST_CASE("self-similarity ranks first at 1.0") {
  const auto s = toy_snapshot();
  const auto r = retrieve(q(0, {0.0, 1.0}), s, 0.6, 2);
  REQUIRE(r.retrieved_ids.size() == 1);
  CHECK(r.retrieved_ids[0] == "W");
  CHECK(r.similarities[0] == 1.0);
}

TEST_CASE("orthogonal query retrieves nothing") {
  BankSnapshot s;
  s.entries = {{"A", "a", {1.0, 0.0}}};
  CHECK(retrieve(q(0, {0.0, 1.0}), s, 0.6, 2).empty());
}

TEST_CASE("top-k with a tie at rank two goes to the smaller id") {
  // cosines against (1,0): X 1.0, Y 0.8, Z 0.8, W 0.0
  const auto r = retrieve(q(5, {1.0, 0.0}), toy_snapshot(), 0.6, 2);
  CHECK(r.query_id == 5);
  CHECK(r.retrieved_ids == std::vector<std::string>{"X", "Y"});
  CHECK(r.similarities[0] == 1.0);
  CHECK(r.similarities[1] == Catch::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("threshold is strict and dimension is checked") {
  const auto r = retrieve(q(0, {1.0, 0.0}), toy_snapshot(), 0.8, 5);
  CHECK(r.retrieved_ids.size() <= 3);
  for (double v : r.similarities) CHECK(v > 0.8 - 1e-12);
  CHECK_THROWS_AS(retrieve(q(0, {1.0, 0.0, 0.0}), toy_snapshot(), 0.6, 2), std::invalid_argument);
}

TEST_CASE("frozen retrieval map") {
  const RoutedRetrieval routed[] = {{1, {"X"}}, {4, {"Y", "Z"}}};
  const auto m = freeze_identities(std::span<const RoutedRetrieval>(routed));
  CHECK(m.size() == 2);
  CHECK(m.lookup(4) == std::vector<std::string>{"Y", "Z"});
  CHECK_THROWS_AS(m.lookup(2), LookupError);

  const RoutedRetrieval conflict[] = {{1, {"X"}}, {1, {"Y"}}};
  CHECK_THROWS(freeze_identities(std::span<const RoutedRetrieval>(conflict)));

  const auto back = FrozenRetrievalMap::from_json(m.to_json());
  CHECK(back.entries() == m.entries());
}

TEST_CASE("frozen retriever ignores edits") {
  const auto s = toy_snapshot();
  const RoutedRetrieval routed[] = {{9, {"X", "Y"}}};
  const auto m = freeze_identities(std::span<const RoutedRetrieval>(routed));
  const ContentEdit ed[] = {{"Y", "new text", EditKind::corrupt}};
  auto edited = apply_edits(s, ed);
  edited.entries[2].embedding = {0.0, -1.0};  // even a moved embedding keeps its frozen slot
  const FrozenRetriever fr{&m};
  CHECK(fr(q(9, {1.0, 0.0}), s).retrieved_ids == fr(q(9, {1.0, 0.0}), edited).retrieved_ids);
  CHECK_THROWS_AS(fr(q(10, {1.0, 0.0}), s), LookupError);
}

TEST_CASE("apply_edits changes payload and hash only") {
  const auto s = toy_snapshot();
  CHECK(apply_edits(s, {}).content_hash == s.content_hash);

  const std::string ids[] = {"X", "Y", "Z", "W"};
  std::vector<ContentEdit> repair, corrupt;
  for (const auto& id : ids) {
    repair.push_back({id, id + " repaired", EditKind::repair});
    corrupt.push_back({id, id + " corrupted", EditKind::corrupt});
  }
  const auto r = apply_edits(s, std::span<const ContentEdit>(repair.data(), 1));
  CHECK(r.content_hash != s.content_hash);
  CHECK(r.active_entry_ids() == s.active_entry_ids());
  CHECK(r.entries[0].embedding == s.entries[0].embedding);
  CHECK(r.entries[0].version == ContentVersion::repair);

  const auto ra = apply_edits(s, repair), ca = apply_edits(s, corrupt);
  CHECK(ra.active_entry_ids() == ca.active_entry_ids());
  for (std::size_t i = 0; i < ra.entries.size(); ++i) {
    CHECK(ra.entries[i].embedding == ca.entries[i].embedding);
    CHECK(ra.entries[i].payload != ca.entries[i].payload);
  }
  const ContentEdit unknown[] = {{"Q", "?", EditKind::repair}};
  CHECK_THROWS_AS(apply_edits(s, unknown), LookupError);
}

TEST_CASE("target-hit partition") {
  FrozenRetrievalMap m;
  for (std::int64_t i = 0; i < 800; ++i) {
    m.insert(i, {i < 105 ? "E3" : "E7", "E9"});
  }
  const auto p = target_hit_partition(m, {"E3", "E42"});
  CHECK(p.hit.size() == 105);
  CHECK(p.non_hit.size() == 695);
  CHECK(target_hit_partition(m, {"none"}).hit.empty());
  CHECK(target_hit_partition(m, {"E9"}).non_hit.empty());
  CHECK_THROWS(target_hit_partition(FrozenRetrievalMap{}, {"E3"}));
}

TEST_CASE("edits file format") {
  std::istringstream in(
      "{\"entry_id\": \"E3\", \"edit_kind\": \"repair\", \"new_payload\": \"fixed\"}\n\n"
      "{\"entry_id\": \"E3\", \"edit_kind\": \"corrupt\", \"new_payload\": \"broken\"}\n");
  const auto edits = read_edits(in);
  REQUIRE(edits.size() == 2);
  CHECK(edits[1].edit_kind == EditKind::corrupt);
  CHECK(edit_to_json(edits[0]).at("new_payload") == "fixed");
  std::istringstream bad("{\"entry_id\": \"E3\", \"edit_kind\": \"mangle\", \"new_payload\": \"x\"}\n");
  CHECK_THROWS_AS(read_edits(bad), FormatError);
}

TEST_CASE("embedding stub clusters by topic") {
  const EmbeddingStub stub{32, 0.9, 7};
  const auto a = stub.embed("a", 3), b = stub.embed("b", 3), c = stub.embed("c", 4);
  CHECK(cosine_similarity(a, b) > 0.6);
  CHECK(cosine_similarity(a, c) < 0.6);
  CHECK(stub.embed("a", 3) == a);
}
