#pragma once

// Orchestration over corpora: paired extraction runs, steered generation
// sweeps and the metric tables built from them. Per-record work runs on up
// to `jobs` threads; results are merged in record order.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evsteer/corpus.hpp"
#include "evsteer/evalkit.hpp"
#include "evsteer/evcore.hpp"
#include "evsteer/nanoformer.hpp"
#include "evsteer/steer.hpp"

namespace evsteer::pipeline {

// [BOS] prompt [SEP]
[[nodiscard]] std::vector<nanoformer::TokenId> prompt_tokens(std::string_view prompt);

struct ExtractionOptions {
  std::size_t max_new = 32;  // generation length when a record has no stored response
  std::size_t jobs = 1;
  bool truncate_to_min = false;
};

// One shift per record: response rows of the emotion-instructed run minus
// those of the neutral run. Stored responses are teacher-forced; otherwise
// the response is generated greedily first. query_id is the record's index
// in `records`.
[[nodiscard]] std::vector<evcore::ShiftSample> shifts(const nanoformer::NanoModel& model,
                                                      const std::vector<corpus::PromptRecord>& records,
                                                      const ExtractionOptions& options = {});

// Records labelled `emotion` only; throws ValidationError when there are none.
[[nodiscard]] evcore::EmotionVector extract(const nanoformer::NanoModel& model,
                                            const std::vector<corpus::PromptRecord>& records,
                                            const std::string& emotion, const ExtractionOptions& options = {});

// Every emotion present in the corpus, plus the base vector.
[[nodiscard]] evcore::EVSet extract_set(const nanoformer::NanoModel& model,
                                        const std::vector<corpus::PromptRecord>& records,
                                        const ExtractionOptions& options = {});

// Per-record vectors (n_queries = 1), grouped by emotion, for geometry stats.
[[nodiscard]] std::map<std::string, std::vector<evcore::EmotionVector>> per_query_vectors(
    const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
    const ExtractionOptions& options = {});

struct GenerationOptions {
  std::size_t max_new = 16;
  std::size_t jobs = 1;
};

[[nodiscard]] std::vector<std::string> respond(const nanoformer::NanoModel& model,
                                               const std::vector<std::string>& queries,
                                               const steer::SteeringConfig& cfg, const GenerationOptions& options = {});

// A single-vector steering condition; `ev` null means unsteered.
struct Condition {
  const evcore::EmotionVector* ev = nullptr;
  double alpha = 0.0;
  std::optional<std::vector<int>> layers;

  [[nodiscard]] steer::SteeringConfig config() const;
  [[nodiscard]] std::string label() const;
};

// Per-query reports over `records` for one condition. EPS rows are 1 for an
// "emotional" argmax and 0 otherwise.
[[nodiscard]] evalkit::MetricReport eps_report(const nanoformer::NanoModel& model,
                                               const std::vector<corpus::PromptRecord>& records,
                                               const Condition& condition, const evalkit::EmotionClassifier& eps,
                                               const GenerationOptions& options = {});
[[nodiscard]] evalkit::MetricReport tec_report(const nanoformer::NanoModel& model,
                                               const std::vector<corpus::PromptRecord>& records,
                                               const Condition& condition, const std::string& target,
                                               const evalkit::EmotionClassifier& classifier,
                                               const GenerationOptions& options = {});
[[nodiscard]] evalkit::MetricReport ppl_report(const nanoformer::NanoModel& model,
                                               const std::vector<corpus::PromptRecord>& records,
                                               const Condition& condition, const GenerationOptions& options = {});

// One matrix per member of `set`: rows are origin labels (five emotions then
// neutral), columns the intensities; at most `per_origin` records per row.
// Unsteered responses are generated once and shared across targets.
[[nodiscard]] std::vector<evalkit::TecMatrix> tec_matrices(const nanoformer::NanoModel& model,
                                                           const std::vector<corpus::PromptRecord>& records,
                                                           const evcore::EVSet& set, const std::vector<double>& alphas,
                                                           const evalkit::EmotionClassifier& classifier,
                                                           std::size_t per_origin,
                                                           const GenerationOptions& options = {});

// Planted model, extraction corpus (20 records per emotion, markers only in
// responses) and a strict-composition EQ+ corpus whose emotional queries
// carry their origin's markers.
struct PlantedSetup {
  corpus::PlantedSpec spec;
  nanoformer::NanoModel model;
  std::vector<corpus::PromptRecord> extraction;
  std::vector<corpus::PromptRecord> eqplus;
};

[[nodiscard]] PlantedSetup planted_setup(std::uint64_t seed = 0, std::size_t per_emotion = 20);
[[nodiscard]] corpus::PlantedSpec planted_eqplus_spec(std::uint64_t seed);

}  // namespace evsteer::pipeline
