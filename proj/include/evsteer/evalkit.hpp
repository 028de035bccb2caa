#pragma once

// Metric formulas (perplexity, EPS, EAS, TEC, topic adherence), the lexicon
// classifier used as a deterministic stand-in for an external NLI model, and
// the judge client behind topic adherence and EAS.

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evsteer/corpus.hpp"
#include "evsteer/nanoformer.hpp"

namespace evsteer::evalkit {

// ---- EPS ----

// Label order doubles as the tie-break order.
inline const std::array<std::string, 3> kEpsLabels{"emotionless", "neutral", "emotional"};

[[nodiscard]] std::size_t eps_argmax(std::span<const double> probabilities);
// Fraction of items whose argmax is "emotional".
[[nodiscard]] double eps_score(std::span<const std::array<double, 3>> items);

// ---- EAS ----

inline const std::array<std::string, 6> kEasEmotions{"anger", "disgust", "fear", "joy", "sadness", "surprise"};

// Sum of (score/100)^2 over the given emotions; absent emotions count as 0.
// Unknown names and scores outside [0, 100] throw ValidationError.
[[nodiscard]] double eas_score(const std::map<std::string, int>& scores);

// ---- classifiers ----

class EmotionClassifier {
 public:
  virtual ~EmotionClassifier() = default;
  [[nodiscard]] virtual const std::vector<std::string>& labels() const = 0;
  // Independent per-label probabilities in [0, 1], in labels() order.
  [[nodiscard]] virtual std::vector<double> classify(std::string_view text) const = 0;
  [[nodiscard]] double probability(std::string_view text, const std::string& label) const;
};

// Per label: logistic(slope * sum_k weight_k * count_k + offset), where count_k
// is the number of non-overlapping occurrences of lexicon entry k in the text.
class LexiconClassifier final : public EmotionClassifier {
 public:
  struct Label {
    std::string name;
    std::map<std::string, double> lexicon;
    double offset = 0.0;
  };

  explicit LexiconClassifier(std::vector<Label> labels, double slope = 1.0);

  [[nodiscard]] const std::vector<std::string>& labels() const override { return names_; }
  [[nodiscard]] std::vector<double> classify(std::string_view text) const override;

  // Five emotions plus neutral, keyed on the planted markers.
  [[nodiscard]] static LexiconClassifier planted_emotions(const corpus::PlantedSpec& spec);
  // emotionless / neutral / emotional on the total marker count c:
  // logistic(0.5 - c), logistic(0), logistic(c - 1.5); argmax is emotional iff c >= 2.
  [[nodiscard]] static LexiconClassifier planted_eps(const corpus::PlantedSpec& spec);

 private:
  std::vector<Label> table_;
  std::vector<std::string> names_;
  double slope_;
};

[[nodiscard]] std::size_t count_occurrences(std::string_view text, std::string_view needle);

// Area under the ROC curve (ties count one half).
[[nodiscard]] double auc(std::span<const double> positives, std::span<const double> negatives);

// ---- reports ----

struct MetricRow {
  std::string query_id;
  std::string condition;
  std::optional<double> score;  // absent for invalid items
  std::string note;
};

struct MetricReport {
  std::string metric;
  nlohmann::json condition = nlohmann::json::object();  // model, EV, alpha
  std::vector<MetricRow> rows;
  double aggregate = 0.0;

  // Mean over valid rows; throws ValidationError when none are valid.
  [[nodiscard]] double recompute() const;
  [[nodiscard]] std::size_t invalid() const;
};

[[nodiscard]] nlohmann::json to_json(const MetricReport& report);
[[nodiscard]] std::string to_csv(const MetricReport& report);
[[nodiscard]] std::string to_csv(const std::vector<MetricReport>& reports);

// ---- TEC ----

[[nodiscard]] double tec_score(std::span<const std::string> responses, const std::string& target,
                               const EmotionClassifier& classifier);

// Rows are origin labels, columns intensities; empty cells stay absent.
struct TecMatrix {
  std::string target;
  std::vector<std::string> origins;
  std::vector<double> alphas;
  std::vector<std::vector<std::optional<double>>> cells;
};

using ResponseGrid = std::map<std::string, std::map<double, std::vector<std::string>>>;

[[nodiscard]] TecMatrix tec_matrix(const std::string& target, const std::vector<std::string>& origins,
                                   const std::vector<double>& alphas, const ResponseGrid& responses,
                                   const EmotionClassifier& classifier);
[[nodiscard]] nlohmann::json to_json(const TecMatrix& m);

// ---- perplexity ----

// Mean of per-item perplexities over [BOS] query [SEP] response.
[[nodiscard]] MetricReport perplexity_report(const nanoformer::NanoModel& model,
                                             const std::vector<std::pair<std::string, std::string>>& items,
                                             const std::vector<std::string>& ids);

// ---- judge ----

// Verbatim judge and corpus-generation templates. Placeholders use Python
// format syntax: {name} is substituted and {{ / }} stand for literal braces.
[[nodiscard]] std::string_view topic_adherence_template();
[[nodiscard]] std::string_view eas_template();
[[nodiscard]] std::string_view emotionquery_generation_template();
[[nodiscard]] std::string_view eqplus_neutral_generation_template();
[[nodiscard]] std::string render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

class JudgeTransport {
 public:
  virtual ~JudgeTransport() = default;
  // Returns the judge's raw content string; throws RuntimeError on failure.
  [[nodiscard]] virtual std::string complete(const std::string& prompt) = 0;
};

// Replays JSONL records {"digest": sha256-hex(prompt), "content": string}.
class FixtureTransport final : public JudgeTransport {
 public:
  explicit FixtureTransport(std::map<std::string, std::string> by_digest) : by_digest_(std::move(by_digest)) {}
  [[nodiscard]] static FixtureTransport load(const std::string& path);
  [[nodiscard]] static std::string digest(std::string_view prompt);
  [[nodiscard]] static std::string record(std::string_view prompt, std::string_view content);
  [[nodiscard]] std::string complete(const std::string& prompt) override;

 private:
  std::map<std::string, std::string> by_digest_;
};

// POST {"prompt": ...} to `url`, expecting {"content": ...}.
class HttpTransport final : public JudgeTransport {
 public:
  explicit HttpTransport(std::string url, int timeout_seconds = 60);
  [[nodiscard]] std::string complete(const std::string& prompt) override;

 private:
  std::string origin_;
  std::string path_;
  int timeout_;
};

class JudgeClient {
 public:
  explicit JudgeClient(std::shared_ptr<JudgeTransport> transport, std::size_t max_in_flight = 4);
  // Responses in prompt order; at most max_in_flight requests outstanding.
  [[nodiscard]] std::vector<std::string> ask(const std::vector<std::string>& prompts) const;

 private:
  std::shared_ptr<JudgeTransport> transport_;
  std::size_t max_in_flight_;
};

struct JudgeItem {
  std::string id;
  std::string question;
  std::string answer;
};

// Parsers return nullopt (with a reason) for malformed judge output.
[[nodiscard]] std::optional<int> parse_topic_adherence(std::string_view content, std::string* reason = nullptr);
[[nodiscard]] std::optional<std::map<std::string, int>> parse_eas(std::string_view content,
                                                                  std::string* reason = nullptr);

// Invalid judge replies are excluded from the aggregate and kept as rows
// without a score.
[[nodiscard]] MetricReport topic_adherence(const std::vector<JudgeItem>& items, const JudgeClient& judge);
[[nodiscard]] MetricReport judge_eas(const std::vector<JudgeItem>& items, const JudgeClient& judge);

}  // namespace evsteer::evalkit
