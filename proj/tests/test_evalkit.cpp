#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <thread>

#include <httplib.h>

#include "evsteer/error.hpp"
#include "evsteer/evalkit.hpp"
#include "evsteer/io.hpp"

using namespace evsteer;
using namespace evsteer::evalkit;

namespace {

class ConstantClassifier final : public EmotionClassifier {
 public:
  explicit ConstantClassifier(double p) : p_(p) {}
  [[nodiscard]] const std::vector<std::string>& labels() const override { return labels_; }
  [[nodiscard]] std::vector<double> classify(std::string_view) const override {
    return std::vector<double>(labels_.size(), p_);
  }

 private:
  std::vector<std::string> labels_{corpus::kLabels.begin(), corpus::kLabels.end()};
  double p_;
};

// Scores a response by the number of 'x' characters, for order-sensitive checks.
class CountingClassifier final : public EmotionClassifier {
 public:
  [[nodiscard]] const std::vector<std::string>& labels() const override { return labels_; }
  [[nodiscard]] std::vector<double> classify(std::string_view t) const override {
    return {static_cast<double>(std::count(t.begin(), t.end(), 'x')) / 10.0};
  }

 private:
  std::vector<std::string> labels_{"joy"};
};

std::shared_ptr<FixtureTransport> fixtures(std::string_view tmpl, const std::vector<JudgeItem>& items,
                                           const std::vector<std::string>& contents) {
  std::map<std::string, std::string> m;
  for (std::size_t i = 0; i < items.size(); ++i) {
    m[FixtureTransport::digest(render_template(tmpl, {{"question", items[i].question}, {"answer", items[i].answer}}))] =
        contents[i];
  }
  return std::make_shared<FixtureTransport>(std::move(m));
}

std::vector<JudgeItem> items(std::size_t n) {
  std::vector<JudgeItem> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({"q" + std::to_string(i), "question " + std::to_string(i), "answer"});
  return out;
}

const std::string kAllZero = R"({"anger":0,"disgust":0,"fear":0,"joy":0,"sadness":0,"surprise":0})";
const std::string kAllHundred = R"({"anger":100,"disgust":100,"fear":100,"joy":100,"sadness":100,"surprise":100})";
const std::string kJoyHalf = R"({"anger":0,"disgust":0,"fear":0,"joy":50,"sadness":0,"surprise":0})";

}  // namespace

TEST_CASE("EPS") {
  const std::array<double, 3> emotional{0.1, 0.2, 0.7}, neutral{0.1, 0.8, 0.1}, tie{0.4, 0.4, 0.4};
  CHECK(eps_score(std::vector{emotional, emotional}) == 1.0);
  CHECK(eps_score(std::vector{neutral, tie}) == 0.0);
  CHECK(eps_score(std::vector{emotional, emotional, emotional, neutral}) == 0.75);
  CHECK(eps_argmax(std::vector<double>{0.3, 0.5, 0.5}) == 1);
  CHECK(eps_argmax(tie) == 0);
  CHECK_THROWS_AS((void)eps_score(std::vector<std::array<double, 3>>{}), ValidationError);
  CHECK_THROWS_AS((void)eps_argmax(std::vector<double>{1.0}), ValidationError);
}

TEST_CASE("EAS") {
  std::map<std::string, int> all;
  for (const auto& e : kEasEmotions) all[e] = 100;
  CHECK(eas_score(all) == 6.0);
  for (auto& [e, v] : all) v = 0;
  CHECK(eas_score(all) == 0.0);
  CHECK(eas_score({{"joy", 50}}) == 0.25);
  CHECK(eas_score({{"joy", 50}, {"fear", 10}}) < eas_score({{"joy", 50}, {"fear", 11}}));
  CHECK_THROWS_AS((void)eas_score({{"joy", 101}}), ValidationError);
  CHECK_THROWS_AS((void)eas_score({{"joy", -1}}), ValidationError);
  CHECK_THROWS_AS((void)eas_score({{"pride", 1}}), ValidationError);
}

TEST_CASE("lexicon classifier") {
  const auto spec = corpus::PlantedSpec::standard();
  const auto cls = LexiconClassifier::planted_emotions(spec);
  SUBCASE("empty text gives logistic(offset)") {
    const auto p = cls.classify("");
    for (std::size_t i = 0; i < 5; ++i) CHECK(p[i] == doctest::Approx(1.0 / (1.0 + std::exp(2.0))).epsilon(1e-15));
    CHECK(p[5] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-15));
  }
  SUBCASE("pure joy markers") {
    const auto p = cls.classify("J O Y U J");
    const auto joy = p[3];
    for (std::size_t i = 0; i < p.size(); ++i)
      if (i != 3) CHECK(joy > p[i]);
    for (double x : p) CHECK((x >= 0.0 && x <= 1.0));
  }
  SUBCASE("counting is non-overlapping and deterministic") {
    CHECK(count_occurrences("aaaa", "aa") == 2);
    CHECK(count_occurrences("abc", "") == 0);
    CHECK(cls.classify("JJ a") == cls.classify("JJ a"));
  }
  SUBCASE("EPS lexicon thresholds") {
    const auto eps = LexiconClassifier::planted_eps(spec);
    CHECK(eps_argmax(eps.classify("plain words")) == 0);
    CHECK(eps_argmax(eps.classify("one J here")) == 1);
    CHECK(eps_argmax(eps.classify("J and A")) == 2);
  }
  SUBCASE("emotional vs neutral responses separate per emotion") {
    const auto recs = corpus::generate_planted(spec, 40);
    for (const auto& e : corpus::kEmotions) {
      std::vector<double> pos, neg;
      for (const auto& r : recs) {
        if (r.emotion != e) continue;
        pos.push_back(cls.probability(*r.emotion_response, e));
        neg.push_back(cls.probability(*r.neutral_response, e));
      }
      const double a = auc(pos, neg);
      MESSAGE(e << " AUC " << a);
      CHECK(a >= 0.95);
    }
  }
  CHECK(auc(std::vector<double>{1, 2}, std::vector<double>{0, 0}) == 1.0);
  CHECK(auc(std::vector<double>{1}, std::vector<double>{1}) == 0.5);
  CHECK_THROWS_AS(LexiconClassifier({{"a", {}, 0.0}, {"a", {}, 0.0}}), ValidationError);
  CHECK_THROWS_AS((void)cls.probability("x", "pride"), ValidationError);
}

TEST_CASE("TEC") {
  const ConstantClassifier c(0.4);
  const std::vector<std::string> r{"a", "b", "c"};
  CHECK(tec_score(r, "joy", c) == doctest::Approx(0.4).epsilon(1e-9));

  const CountingClassifier k;
  const std::vector<std::string> two{"xx", "xxxxxxxx"};
  CHECK(tec_score(two, "joy", k) == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<std::string> rev{"xxxxxxxx", "xx"};
  CHECK(tec_score(rev, "joy", k) == tec_score(two, "joy", k));
  CHECK_THROWS_AS((void)tec_score(std::vector<std::string>{}, "joy", c), ValidationError);

  ResponseGrid grid;
  grid["joy"][0.0] = {"x"};
  grid["joy"][1.0] = {"xxx"};
  grid["fear"][0.0] = {"xx"};
  const auto m = tec_matrix("joy", {"joy", "fear", "neutral"}, {0.0, 1.0}, grid, k);
  CHECK(m.cells[0][0] == doctest::Approx(0.1));
  CHECK(m.cells[0][1] == doctest::Approx(0.3));
  CHECK(m.cells[1][0] == doctest::Approx(0.2));
  CHECK_FALSE(m.cells[1][1].has_value());
  CHECK_FALSE(m.cells[2][0].has_value());
  CHECK(to_json(m)["rows"][1]["cells"][1].is_null());
  CHECK_THROWS_AS((void)tec_matrix("pride", {"joy"}, {0.0}, grid, k), ValidationError);
}

TEST_CASE("perplexity of uniform logits is the vocabulary size") {
  for (std::size_t vocab : {260u, 7u}) {
    numkit::Mat logits(5, vocab);
    std::vector<nanoformer::TokenId> t{1, 4, 5, 6, 2};
    CHECK(nanoformer::perplexity_from_logits(logits, t) == doctest::Approx(static_cast<double>(vocab)).epsilon(1e-12));
  }
}

TEST_CASE("metric reports") {
  MetricReport rep{"eps", {{"alpha", 1.0}}, {{"a", "x", 1.0, ""}, {"b", "x", std::nullopt, "invalid"}, {"c", "x", 0.0, ""}}, 0.0};
  rep.aggregate = rep.recompute();
  CHECK(rep.aggregate == 0.5);
  CHECK(rep.invalid() == 1);
  const auto j = to_json(rep);
  CHECK(j["invalid"] == 1);
  CHECK(j["rows"][1]["score"].is_null());
  CHECK(j["condition"]["alpha"] == 1.0);
  CHECK(to_csv(rep) == "metric,query_id,condition,score,note\neps,a,x,1,\neps,b,x,,invalid\neps,c,x,0,\n");
  MetricReport none{"eps", {}, {{"a", "", std::nullopt, ""}}, 0.0};
  CHECK_THROWS_AS((void)none.recompute(), ValidationError);
}

TEST_CASE("templates match the golden files byte for byte") {
  const std::string dir = EVSTEER_DATA_DIR "/prompts/";
  CHECK(io::read_text(dir + "topic_adherence.txt") == topic_adherence_template());
  CHECK(io::read_text(dir + "eas.txt") == eas_template());
  CHECK(io::read_text(dir + "emotionquery_generation.txt") == emotionquery_generation_template());
  CHECK(io::read_text(dir + "eqplus_neutral_generation.txt") == eqplus_neutral_generation_template());
}

TEST_CASE("template rendering") {
  CHECK(render_template("{{a}} {a} }}", {{"a", "x"}}) == "{a} x }");
  const auto ta = render_template(topic_adherence_template(), {{"question", "Q?"}, {"answer", "A."}});
  CHECK(ta.find("User's question: Q?\nAssistant's answer: A.\n") != std::string::npos);
  CHECK(ta.find("{\n    \"topic_adherence\": int(0-1)\n}") != std::string::npos);
  CHECK(render_template(emotionquery_generation_template(), {{"emotion", "joy"}}).find("either an joy or neutral") !=
        std::string::npos);
  CHECK_THROWS_AS((void)render_template("{b}", {{"a", "x"}}), ValidationError);
  CHECK_THROWS_AS((void)render_template("{a", {{"a", "x"}}), ValidationError);
  CHECK_THROWS_AS((void)render_template("a}", {}), ValidationError);
}

TEST_CASE("topic adherence with recorded judges") {
  const auto it = items(4);
  const auto ta = topic_adherence_template();
  CHECK(topic_adherence(it, JudgeClient(fixtures(ta, it, std::vector<std::string>(4, R"({"topic_adherence": 1})"))))
            .aggregate == 1.0);
  CHECK(topic_adherence(it, JudgeClient(fixtures(ta, it,
                                                  {R"({"topic_adherence": 1})", R"({"topic_adherence": 0})",
                                                   R"({"topic_adherence": 1})", R"({"topic_adherence": 0})"})))
            .aggregate == 0.5);

  const auto five = items(5);
  const auto rep = topic_adherence(
      five, JudgeClient(fixtures(ta, five,
                                 {R"({"topic_adherence": 1})", "not json", R"({"topic_adherence": 1})",
                                  R"({"topic_adherence": 0})", R"({"topic_adherence": 1})"})));
  CHECK(rep.invalid() == 1);
  CHECK(rep.aggregate == 0.75);
  CHECK(rep.rows[1].note.find("invalid") == 0);
  CHECK(rep.aggregate == rep.recompute());

  CHECK_FALSE(parse_topic_adherence(R"({"topic_adherence": 2})"));
  CHECK_FALSE(parse_topic_adherence(R"({"topic_adherence": "1"})"));
  CHECK_FALSE(parse_topic_adherence(R"([1])"));

  // Unrecorded prompts are a runtime failure, not an invalid item.
  CHECK_THROWS_AS((void)topic_adherence(items(6), JudgeClient(fixtures(ta, it, std::vector<std::string>(4, "")))),
                  RuntimeError);
}

TEST_CASE("EAS with recorded judges") {
  const auto it = items(1);
  const auto eas = eas_template();
  CHECK(judge_eas(it, JudgeClient(fixtures(eas, it, {kAllZero}))).aggregate == 0.0);
  CHECK(judge_eas(it, JudgeClient(fixtures(eas, it, {kAllHundred}))).aggregate == 6.0);
  CHECK(judge_eas(it, JudgeClient(fixtures(eas, it, {kJoyHalf}))).aggregate == 0.25);

  CHECK_FALSE(parse_eas(R"({"anger":0,"disgust":0,"fear":0,"joy":50,"sadness":0})"));
  CHECK_FALSE(parse_eas(R"({"anger":0,"disgust":0,"fear":0,"joy":150,"sadness":0,"surprise":0})"));
  const auto three = items(3);
  const auto rep = judge_eas(three, JudgeClient(fixtures(eas, three, {kJoyHalf, "{}", kAllHundred})));
  CHECK(rep.invalid() == 1);
  CHECK(rep.aggregate == doctest::Approx(3.125).epsilon(1e-15));
}

TEST_CASE("fixture files") {
  const auto path = (std::filesystem::temp_directory_path() / "evsteer_fixtures.jsonl").string();
  io::write_text(path, FixtureTransport::record("p1", "c1") + "\n" + FixtureTransport::record("p2", "c2") + "\n");
  auto t = FixtureTransport::load(path);
  CHECK(t.complete("p2") == "c2");
  CHECK(FixtureTransport::digest("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  io::write_text(path, "{\"digest\": 1}\n");
  CHECK_THROWS_AS((void)FixtureTransport::load(path), ValidationError);
}

TEST_CASE("HTTP judge against a local server") {
  httplib::Server server;
  std::atomic<int> in_flight{0}, peak{0};
  server.Post("/judge", [&](const httplib::Request& req, httplib::Response& res) {
    const int now = ++in_flight;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    const auto prompt = nlohmann::json::parse(req.body).at("prompt").get<std::string>();
    const bool adherent = prompt.find("question 1\n") != std::string::npos ||
                          prompt.find("question 3\n") != std::string::npos;
    const nlohmann::json reply{{"content", adherent ? R"({"topic_adherence": 1})" : R"({"topic_adherence": 0})"}};
    --in_flight;
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/broken", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  const auto it = items(8);
  const auto rep = topic_adherence(it, JudgeClient(std::make_shared<HttpTransport>(base + "/judge"), 2));
  CHECK(rep.aggregate == 0.25);
  for (std::size_t i = 0; i < it.size(); ++i) {
    CHECK(rep.rows[i].query_id == it[i].id);
    CHECK(*rep.rows[i].score == ((i == 1 || i == 3) ? 1.0 : 0.0));
  }
  CHECK(peak.load() <= 2);
  CHECK_THROWS_AS((void)topic_adherence(it, JudgeClient(std::make_shared<HttpTransport>(base + "/broken"), 2)),
                  RuntimeError);
  server.stop();
  thread.join();

  CHECK_THROWS_AS(HttpTransport("ftp://x"), ValidationError);
  CHECK_THROWS_AS(JudgeClient(nullptr), ValidationError);
}
