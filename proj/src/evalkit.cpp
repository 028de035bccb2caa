#include "evsteer/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "evsteer/error.hpp"
#include "evsteer/io.hpp"

namespace evsteer::evalkit {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::size_t eps_argmax(std::span<const double> p) {
  if (p.size() != kEpsLabels.size()) throw ValidationError("EPS expects three label probabilities");
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

double eps_score(std::span<const std::array<double, 3>> items) {
  if (items.empty()) throw ValidationError("EPS of an empty item list");
  std::size_t emotional = 0;
  for (const auto& p : items)
    if (eps_argmax(p) == 2) ++emotional;
  return static_cast<double>(emotional) / static_cast<double>(items.size());
}

double eas_score(const std::map<std::string, int>& scores) {
  double s = 0.0;
  for (const auto& [name, v] : scores) {
    if (std::find(kEasEmotions.begin(), kEasEmotions.end(), name) == kEasEmotions.end()) {
      throw ValidationError("EAS: unknown emotion '" + name + "'");
    }
    if (v < 0 || v > 100) throw ValidationError("EAS: score for '" + name + "' outside [0, 100]");
    const double x = v / 100.0;
    s += x * x;
  }
  return s;
}

double EmotionClassifier::probability(std::string_view text, const std::string& label) const {
  const auto& names = labels();
  const auto it = std::find(names.begin(), names.end(), label);
  if (it == names.end()) throw ValidationError("classifier has no label '" + label + "'");
  return classify(text)[static_cast<std::size_t>(it - names.begin())];
}

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  if (needle.empty()) return 0;
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

LexiconClassifier::LexiconClassifier(std::vector<Label> labels, double slope) : table_(std::move(labels)), slope_(slope) {
  if (table_.empty()) throw ValidationError("lexicon classifier needs at least one label");
  if (!std::isfinite(slope_)) throw ValidationError("lexicon classifier slope must be finite");
  for (const auto& l : table_) {
    if (std::find(names_.begin(), names_.end(), l.name) != names_.end()) {
      throw ValidationError("duplicate classifier label '" + l.name + "'");
    }
    if (!std::isfinite(l.offset)) throw ValidationError("lexicon offset must be finite");
    for (const auto& [k, w] : l.lexicon) {
      if (k.empty() || !std::isfinite(w)) throw ValidationError("lexicon entries need a non-empty key and finite weight");
    }
    names_.push_back(l.name);
  }
}

std::vector<double> LexiconClassifier::classify(std::string_view text) const {
  std::vector<double> out;
  out.reserve(table_.size());
  for (const auto& l : table_) {
    double s = 0.0;
    for (const auto& [k, w] : l.lexicon) s += w * static_cast<double>(count_occurrences(text, k));
    out.push_back(logistic(slope_ * s + l.offset));
  }
  return out;
}

LexiconClassifier LexiconClassifier::planted_emotions(const corpus::PlantedSpec& spec) {
  spec.validate();
  std::vector<Label> labels;
  Label neutral{"neutral", {}, 1.0};
  for (const auto& e : corpus::kEmotions) {
    Label l{e, {}, -2.0};
    if (const auto it = spec.markers.find(e); it != spec.markers.end()) {
      for (char c : it->second) {
        l.lexicon[std::string(1, c)] = 1.0;
        neutral.lexicon[std::string(1, c)] = -1.0;
      }
    }
    labels.push_back(std::move(l));
  }
  labels.push_back(std::move(neutral));
  return LexiconClassifier(std::move(labels));
}

LexiconClassifier LexiconClassifier::planted_eps(const corpus::PlantedSpec& spec) {
  spec.validate();
  Label emotionless{"emotionless", {}, 0.5};
  Label neutral{"neutral", {}, 0.0};
  Label emotional{"emotional", {}, -1.5};
  for (const auto& [e, set] : spec.markers) {
    for (char c : set) {
      emotionless.lexicon[std::string(1, c)] = -1.0;
      emotional.lexicon[std::string(1, c)] = 1.0;
    }
  }
  return LexiconClassifier({emotionless, neutral, emotional});
}

double auc(std::span<const double> pos, std::span<const double> neg) {
  if (pos.empty() || neg.empty()) throw ValidationError("AUC needs positive and negative scores");
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// ---- reports ----

double MetricReport::recompute() const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (!r.score) continue;
    s += *r.score;
    ++n;
  }
  if (n == 0) throw ValidationError("metric '" + metric + "' has no valid items");
  return s / static_cast<double>(n);
}

std::size_t MetricReport::invalid() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const MetricRow& r) { return !r.score; }));
}

nlohmann::json to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["metric"] = report.metric;
  j["condition"] = report.condition;
  j["aggregate"] = report.aggregate;
  j["valid"] = report.rows.size() - report.invalid();
  j["invalid"] = report.invalid();
  auto rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    nlohmann::ordered_json row;
    row["query_id"] = r.query_id;
    row["condition"] = r.condition;
    row["score"] = r.score ? nlohmann::ordered_json(*r.score) : nlohmann::ordered_json(nullptr);
    if (!r.note.empty()) row["note"] = r.note;
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return nlohmann::json::parse(j.dump());
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string number(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

void csv_rows(const MetricReport& report, std::string& out) {
  for (const auto& r : report.rows) {
    out += csv_field(report.metric) + "," + csv_field(r.query_id) + "," + csv_field(r.condition) + "," +
           (r.score ? number(*r.score) : std::string()) + "," + csv_field(r.note) + "\n";
  }
}

}  // namespace

std::string to_csv(const MetricReport& report) { return to_csv(std::vector<MetricReport>{report}); }

std::string to_csv(const std::vector<MetricReport>& reports) {
  std::string out = "metric,query_id,condition,score,note\n";
  for (const auto& r : reports) csv_rows(r, out);
  return out;
}

// ---- TEC ----

double tec_score(std::span<const std::string> responses, const std::string& target,
                 const EmotionClassifier& classifier) {
  if (responses.empty()) throw ValidationError("TEC of an empty response list");
  double s = 0.0;
  for (const auto& r : responses) s += classifier.probability(r, target);
  return s / static_cast<double>(responses.size());
}

TecMatrix tec_matrix(const std::string& target, const std::vector<std::string>& origins,
                     const std::vector<double>& alphas, const ResponseGrid& responses,
                     const EmotionClassifier& classifier) {
  const auto& names = classifier.labels();
  if (std::find(names.begin(), names.end(), target) == names.end()) {
    throw ValidationError("classifier has no label '" + target + "'");
  }
  TecMatrix m{target, origins, alphas, {}};
  for (const auto& o : origins) {
    std::vector<std::optional<double>> row;
    const auto it = responses.find(o);
    for (double a : alphas) {
      std::optional<double> cell;
      if (it != responses.end()) {
        const auto jt = it->second.find(a);
        if (jt != it->second.end() && !jt->second.empty()) cell = tec_score(jt->second, target, classifier);
      }
      row.push_back(cell);
    }
    m.cells.push_back(std::move(row));
  }
  return m;
}

nlohmann::json to_json(const TecMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.origins.size(); ++i) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : m.cells[i]) cells.push_back(c ? nlohmann::json(*c) : nlohmann::json(nullptr));
    rows.push_back({{"origin", m.origins[i]}, {"cells", cells}});
  }
  return {{"target", m.target}, {"alphas", m.alphas}, {"rows", rows}};
}

// ---- perplexity ----

MetricReport perplexity_report(const nanoformer::NanoModel& model,
                               const std::vector<std::pair<std::string, std::string>>& items,
                               const std::vector<std::string>& ids) {
  if (items.empty()) throw ValidationError("perplexity of an empty item list");
  if (ids.size() != items.size()) throw ValidationError("perplexity: one id per item required");
  MetricReport rep{"ppl", nlohmann::json::object(), {}, 0.0};
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::vector<nanoformer::TokenId> t{nanoformer::kBos};
    for (auto id : nanoformer::Tokenizer::encode(items[i].first)) t.push_back(id);
    t.push_back(nanoformer::kSep);
    for (auto id : nanoformer::Tokenizer::encode(items[i].second)) t.push_back(id);
    rep.rows.push_back({ids[i], "", nanoformer::perplexity(model, t), ""});
  }
  rep.aggregate = rep.recompute();
  return rep;
}

// ---- templates ----

std::string_view topic_adherence_template() {
  return R"TMPL(Please rate the assistant's answer as follows:
- topic adherence: int, 0-1, evaluate based on the assistant's answer and the user's question
    - 0 points mean the assistant's answer is completely irrelevant to the user's question
    - 1 point means the assistant's answer touches on some of the topics in the user's question

The dialogue is as follows:
User's question: {question}
Assistant's answer: {answer}

You must give your response in the following JSON-string format and **DON'T** include any other text in the response:
{{
    "topic_adherence": int(0-1)
}})TMPL";
}

std::string_view eas_template() {
  return R"TMPL(Please generate the emotion scores for the following five emotions (anger, disgust, fear, joy, and sadness) based on the given sentence. Each emotion score should be a value between 0 and 100, where 0 represents no presence of the emotion, and 100 represents the maximum intensity of that emotion. Return the results in a JSON format, with the emotion names as keys and their corresponding scores as values.

You must give your response in the following JSON-string format and **DON'T** include any other text in the response.:
{{
    "anger": int(0-100),
    "disgust": int(0-100),
    "fear": int(0-100),
    "joy": int(0-100),
    "sadness": int(0-100),
    "surprise": int(0-100)
}}

The sentences you need to score come from a set of dialogues, and you need to score the sentiment of the **answer** part.

Question: {question}
Answer: {answer}

Please make sure to provide the emotion scores for the **answer** part only.)TMPL";
}

std::string_view emotionquery_generation_template() {
  return "Please generate a short question that contains a scenario and can be answered from either an {emotion} or "
         "neutral perspective. You only have to respond with the sentence and don't say anything else.";
}

std::string_view eqplus_neutral_generation_template() {
  return "Please give me a neutral greeting, question, or sentence that is commonly used in daily conversation and "
         "does not contain any emotion. You only have to give me the single sentence and don't say anything else. "
         "The sentence:";
}

std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const char c = tmpl[i];
    if ((c == '{' || c == '}') && i + 1 < tmpl.size() && tmpl[i + 1] == c) {
      out += c;
      ++i;
    } else if (c == '{') {
      const std::size_t close = tmpl.find('}', i);
      if (close == std::string_view::npos) throw ValidationError("template: unterminated placeholder");
      const std::string key(tmpl.substr(i + 1, close - i - 1));
      const auto it = values.find(key);
      if (it == values.end()) throw ValidationError("template: no value for '{" + key + "}'");
      out += it->second;
      i = close;
    } else if (c == '}') {
      throw ValidationError("template: stray '}'");
    } else {
      out += c;
    }
  }
  return out;
}

// ---- transports ----

std::string FixtureTransport::digest(std::string_view prompt) { return io::sha256_hex(prompt); }

std::string FixtureTransport::record(std::string_view prompt, std::string_view content) {
  nlohmann::ordered_json j;
  j["digest"] = digest(prompt);
  j["content"] = std::string(content);
  return j.dump();
}

FixtureTransport FixtureTransport::load(const std::string& path) {
  const std::string text = io::read_text(path);
  std::map<std::string, std::string> by_digest;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      by_digest[j.at("digest").get<std::string>()] = j.at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("fixture " + path + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return FixtureTransport(std::move(by_digest));
}

std::string FixtureTransport::complete(const std::string& prompt) {
  const auto it = by_digest_.find(digest(prompt));
  if (it == by_digest_.end()) throw RuntimeError("no recorded judge reply for prompt digest " + digest(prompt));
  return it->second;
}

HttpTransport::HttpTransport(std::string url, int timeout_seconds) : timeout_(timeout_seconds) {
  static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ValidationError("judge URL must look like http://host:port/path: " + url);
  origin_ = m[1];
  path_ = m[2].matched ? std::string(m[2]) : "/";
}

std::string HttpTransport::complete(const std::string& prompt) {
  httplib::Client cli(origin_);
  cli.set_connection_timeout(timeout_);
  cli.set_read_timeout(timeout_);
  const nlohmann::json body{{"prompt", prompt}};
  auto res = cli.Post(path_, body.dump(), "application/json");
  if (!res) throw RuntimeError("judge request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw RuntimeError("judge returned HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body).at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError(std::string("judge reply is not {\"content\": string}: ") + e.what());
  }
}

JudgeClient::JudgeClient(std::shared_ptr<JudgeTransport> transport, std::size_t max_in_flight)
    : transport_(std::move(transport)), max_in_flight_(max_in_flight) {
  if (!transport_) throw ValidationError("judge client needs a transport");
  if (max_in_flight_ == 0) throw ValidationError("judge in-flight cap must be at least 1");
}

std::vector<std::string> JudgeClient::ask(const std::vector<std::string>& prompts) const {
  std::vector<std::string> out(prompts.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < prompts.size(); i = next++) {
      try {
        out[i] = transport_->complete(prompts[i]);
      } catch (...) {
        const std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = prompts.size();
      }
    }
  };
  const std::size_t n = std::min(max_in_flight_, prompts.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  if (n > 0) worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---- judge parsing ----

namespace {

std::optional<nlohmann::json> parse_object(std::string_view content, std::string* reason) {
  try {
    auto j = nlohmann::json::parse(content);
    if (j.is_object()) return j;
    if (reason) *reason = "reply is not a JSON object";
  } catch (const nlohmann::json::parse_error&) {
    if (reason) *reason = "reply is not valid JSON";
  }
  return std::nullopt;
}

}  // namespace

std::optional<int> parse_topic_adherence(std::string_view content, std::string* reason) {
  const auto j = parse_object(content, reason);
  if (!j) return std::nullopt;
  const auto it = j->find("topic_adherence");
  if (it == j->end() || !it->is_number_integer()) {
    if (reason) *reason = "missing integer field topic_adherence";
    return std::nullopt;
  }
  const auto v = it->get<long long>();
  if (v != 0 && v != 1) {
    if (reason) *reason = "topic_adherence must be 0 or 1";
    return std::nullopt;
  }
  return static_cast<int>(v);
}

std::optional<std::map<std::string, int>> parse_eas(std::string_view content, std::string* reason) {
  const auto j = parse_object(content, reason);
  if (!j) return std::nullopt;
  std::map<std::string, int> scores;
  for (const auto& e : kEasEmotions) {
    const auto it = j->find(e);
    if (it == j->end() || !it->is_number_integer()) {
      if (reason) *reason = "missing integer field " + e;
      return std::nullopt;
    }
    const auto v = it->get<long long>();
    if (v < 0 || v > 100) {
      if (reason) *reason = e + " outside [0, 100]";
      return std::nullopt;
    }
    scores[e] = static_cast<int>(v);
  }
  return scores;
}

namespace {

template <typename Score>
MetricReport judged(const std::string& metric, std::string_view tmpl, const std::vector<JudgeItem>& items,
                    const JudgeClient& judge, Score score) {
  if (items.empty()) throw ValidationError(metric + " of an empty item list");
  std::vector<std::string> prompts;
  prompts.reserve(items.size());
  for (const auto& it : items) {
    prompts.push_back(render_template(tmpl, {{"question", it.question}, {"answer", it.answer}}));
  }
  const auto replies = judge.ask(prompts);
  MetricReport rep{metric, nlohmann::json::object(), {}, 0.0};
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::string reason;
    const auto s = score(replies[i], &reason);
    rep.rows.push_back({items[i].id, "", s, s ? "" : "invalid: " + reason});
  }
  rep.aggregate = rep.recompute();
  return rep;
}

}  // namespace

MetricReport topic_adherence(const std::vector<JudgeItem>& items, const JudgeClient& judge) {
  return judged("topic_adherence", topic_adherence_template(), items, judge,
                [](const std::string& c, std::string* why) -> std::optional<double> {
                  const auto v = parse_topic_adherence(c, why);
                  if (!v) return std::nullopt;
                  return static_cast<double>(*v);
                });
}

MetricReport judge_eas(const std::vector<JudgeItem>& items, const JudgeClient& judge) {
  return judged("eas", eas_template(), items, judge, [](const std::string& c, std::string* why) -> std::optional<double> {
    const auto v = parse_eas(c, why);
    if (!v) return std::nullopt;
    return eas_score(*v);
  });
}

}  // namespace evsteer::evalkit
