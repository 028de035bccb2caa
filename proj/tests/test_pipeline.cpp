#include <doctest.h>

#include "evsteer/error.hpp"
#include "evsteer/pipeline.hpp"

using namespace evsteer;
using namespace evsteer::pipeline;

namespace {

std::size_t markers_of(const corpus::PlantedSpec& spec, const std::vector<std::string>& texts, const std::string& e) {
  std::size_t n = 0;
  for (const auto& t : texts)
    for (char c : t)
      if (corpus::marker_emotion(spec, c) == e) ++n;
  return n;
}

}  // namespace

TEST_CASE("extraction contract and determinism") {
  const auto s = planted_setup(0, 4);
  const auto joy = extract(s.model, s.extraction, "joy");
  CHECK(joy.layers() == 4);
  CHECK(joy.width() == 32);
  CHECK(joy.n_queries() == 4);
  CHECK(joy.model_id() == nanoformer::model_digest(s.model));
  CHECK(evcore::serialize(joy) == evcore::serialize(extract(s.model, s.extraction, "joy", {32, 3, false})));

  const auto set = extract_set(s.model, s.extraction, {32, 2, false});
  CHECK(set.members().size() == 5);
  CHECK(set.get("joy") == joy);
  CHECK(set.base().n_queries() == 20);

  const auto per = per_query_vectors(s.model, s.extraction);
  CHECK(per.at("fear").size() == 4);
  CHECK(per.at("fear")[0].n_queries() == 1);

  std::vector<corpus::PromptRecord> only_joy;
  for (const auto& r : s.extraction)
    if (r.emotion == "joy") only_joy.push_back(r);
  CHECK_THROWS_AS((void)extract(s.model, only_joy, "fear"), ValidationError);
  CHECK_THROWS_AS((void)extract(s.model, s.extraction, "neutral"), ValidationError);
}

TEST_CASE("extraction generates responses when none are stored") {
  const auto model = nanoformer::build_model({});
  std::vector<corpus::PromptRecord> recs{{"a", "joy", "how was the day?", {}, {}, {}, {}},
                                         {"b", "joy", "what did you see?", {}, {}, {}, {}}};
  const auto ev = extract(model, recs, "joy", {6, 1, false});
  CHECK(ev.n_queries() == 2);
  CHECK_FALSE(ev.is_zero());
}

TEST_CASE("planted steering raises the target marker count") {
  const auto s = planted_setup(0, 8);
  const auto set = extract_set(s.model, s.extraction);
  std::vector<std::string> queries;
  for (std::size_t i = 0; i < s.eqplus.size(); i += 40) queries.push_back(s.eqplus[i].query);
  for (const auto& e : corpus::kEmotions) {
    const auto base = respond(s.model, queries, {}, {12, 1});
    const auto steered = respond(s.model, queries, Condition{&set.get(e), 1.0, std::nullopt}.config(), {12, 2});
    CHECK(markers_of(s.spec, steered, e) > markers_of(s.spec, base, e));
  }
  const auto zero = respond(s.model, queries, Condition{&set.get("joy"), 0.0, std::nullopt}.config(), {12, 1});
  CHECK(zero == respond(s.model, queries, {}, {12, 1}));
}

TEST_CASE("reports are reproducible") {
  const auto s = planted_setup(0, 2);
  std::vector<corpus::PromptRecord> few(s.eqplus.begin(), s.eqplus.begin() + 6);
  const auto a = ppl_report(s.model, few, {}, {8, 1});
  const auto b = ppl_report(s.model, few, {}, {8, 3});
  CHECK(evalkit::to_csv(a) == evalkit::to_csv(b));
  CHECK(a.rows.size() == 6);
  CHECK(a.aggregate == a.recompute());

  const auto eps = evalkit::LexiconClassifier::planted_eps(s.spec);
  const auto r = eps_report(s.model, few, {}, eps, {8, 1});
  CHECK(r.aggregate == r.recompute());
  CHECK(r.condition["alpha"] == 0.0);
  CHECK_THROWS_AS((void)eps_report(s.model, {}, {}, eps), ValidationError);
}
