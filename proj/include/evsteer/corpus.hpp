#pragma once

// Query corpora (JSONL, one record per line) and planted synthetic corpora in
// which each emotion is carried by its own disjoint set of marker tokens.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "evsteer/nanoformer.hpp"

namespace evsteer::corpus {

// The five extracted emotions, in canonical order, and the full label set.
inline const std::array<std::string, 5> kEmotions{"anger", "disgust", "fear", "joy", "sadness"};
inline const std::array<std::string, 6> kLabels{"anger", "disgust", "fear", "joy", "sadness", "neutral"};

[[nodiscard]] bool is_emotion(std::string_view label);
[[nodiscard]] bool is_label(std::string_view label);

// {id, emotion, query, emotion_prompt?, neutral_prompt?} plus optional stored
// responses, so planted corpora can be saved with their texts.
struct PromptRecord {
  std::string id;
  std::string emotion;
  std::string query;
  std::optional<std::string> emotion_prompt;
  std::optional<std::string> neutral_prompt;
  std::optional<std::string> emotion_response;
  std::optional<std::string> neutral_response;

  friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

// Instruction framing used when a record carries no explicit paired prompts.
[[nodiscard]] std::string emotion_instruction(const PromptRecord& r);
[[nodiscard]] std::string neutral_instruction(const PromptRecord& r);

enum class CorpusKind { emotion_query, eq_plus };

// Throws ValidationError naming the line for schema violations, duplicate
// ids and empty input. With `strict`, an EQ+ corpus must hold exactly 50
// queries for each of the five emotions plus 150 neutral ones.
[[nodiscard]] std::vector<PromptRecord> parse_corpus(std::string_view jsonl, CorpusKind kind, bool strict = false);
[[nodiscard]] std::vector<PromptRecord> load_corpus(const std::string& path, CorpusKind kind, bool strict = false);
[[nodiscard]] std::string to_jsonl(const std::vector<PromptRecord>& records);
void save_corpus(const std::vector<PromptRecord>& records, const std::string& path);

void check_eqplus_composition(const std::vector<PromptRecord>& records);
[[nodiscard]] std::map<std::string, std::size_t> label_counts(const std::vector<PromptRecord>& records);

struct PlantedSpec {
  // Single-character markers per emotion; must be pairwise disjoint and
  // absent from the base vocabulary (lowercase words).
  std::map<std::string, std::vector<char>> markers;
  double rate = 0.3;        // per-word marker probability in emotional responses
  double query_rate = 0.0;  // per-word marker probability in emotional queries
  std::size_t min_words = 6;
  std::size_t max_words = 10;
  std::uint64_t seed = 0;

  void validate() const;
  [[nodiscard]] static PlantedSpec standard();
};

// n_per_emotion records per emotion with paired prompts and responses
// (emotional responses hold at least one marker, neutral ones none), then
// n_neutral neutral queries without responses.
[[nodiscard]] std::vector<PromptRecord> generate_planted(const PlantedSpec& spec, std::size_t n_per_emotion,
                                                         std::size_t n_neutral = 0);

// Knobs of the planted model: marker directions in the embedding and the
// unembedding, a uniform-attention context accumulator, and output biases
// that restrict decoding to the corpus alphabet.
struct PlantedModelOptions {
  double embed_gain = 1.5;
  double unembed_gain = 3.0;
  double accumulator_gain = 1.0;
  double marker_bias = -4.0;
  double blocked_bias = -1e4;
};

// Builds the default model for `config` and plants, for each emotion e, a
// unit direction q_e plus a shared affect direction q_0 (all orthonormal and
// orthogonal to the all-ones vector, so layer norm keeps them).
[[nodiscard]] nanoformer::NanoModel build_planted_model(const nanoformer::ModelConfig& config,
                                                        const PlantedSpec& spec,
                                                        const PlantedModelOptions& options = {});

// Emotion owning `c` as a marker, if any.
[[nodiscard]] std::optional<std::string> marker_emotion(const PlantedSpec& spec, char c);

}  // namespace evsteer::corpus
