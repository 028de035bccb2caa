#include "evsteer/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <json.hpp>

#include "evsteer/error.hpp"
#include "evsteer/io.hpp"

namespace evsteer::corpus {

bool is_emotion(std::string_view label) {
  return std::find(kEmotions.begin(), kEmotions.end(), label) != kEmotions.end();
}

bool is_label(std::string_view label) { return label == "neutral" || is_emotion(label); }

std::string emotion_instruction(const PromptRecord& r) {
  if (r.emotion_prompt) return *r.emotion_prompt;
  const std::string feeling = r.emotion == "neutral" ? "emotion" : r.emotion;
  return "answer with " + feeling + ": " + r.query;
}

std::string neutral_instruction(const PromptRecord& r) {
  if (r.neutral_prompt) return *r.neutral_prompt;
  return "answer neutrally: " + r.query;
}

namespace {

std::optional<std::string> optional_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  if (!j.at(key).is_string()) {
    throw ValidationError("corpus line " + std::to_string(line) + ": field '" + key + "' must be a string");
  }
  return j.at(key).get<std::string>();
}

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line) {
  auto v = optional_string(j, key, line);
  if (!v) throw ValidationError("corpus line " + std::to_string(line) + ": missing field '" + key + "'");
  return *v;
}

}  // namespace

std::vector<PromptRecord> parse_corpus(std::string_view jsonl, CorpusKind kind, bool strict) {
  std::vector<PromptRecord> out;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    std::string_view line = jsonl.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError("corpus line " + std::to_string(line_no) + ": expected an object");
    PromptRecord r;
    if (j.contains("id") && j.at("id").is_number_integer()) {
      r.id = std::to_string(j.at("id").get<long long>());
    } else {
      r.id = required_string(j, "id", line_no);
    }
    r.emotion = required_string(j, "emotion", line_no);
    r.query = required_string(j, "query", line_no);
    r.emotion_prompt = optional_string(j, "emotion_prompt", line_no);
    r.neutral_prompt = optional_string(j, "neutral_prompt", line_no);
    r.emotion_response = optional_string(j, "emotion_response", line_no);
    r.neutral_response = optional_string(j, "neutral_response", line_no);
    if (r.id.empty()) throw ValidationError("corpus line " + std::to_string(line_no) + ": empty id");
    if (!is_label(r.emotion)) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": unknown emotion label '" + r.emotion + "'");
    }
    if (r.query.empty()) throw ValidationError("corpus line " + std::to_string(line_no) + ": empty query");
    if (!ids.insert(r.id).second) {
      throw ValidationError("corpus line " + std::to_string(line_no) + ": duplicate id '" + r.id + "'");
    }
    out.push_back(std::move(r));
    if (end == jsonl.size()) break;
  }
  if (out.empty()) throw ValidationError("corpus is empty");
  if (kind == CorpusKind::eq_plus && strict) check_eqplus_composition(out);
  return out;
}

std::vector<PromptRecord> load_corpus(const std::string& path, CorpusKind kind, bool strict) {
  return parse_corpus(io::read_text(path), kind, strict);
}

std::string to_jsonl(const std::vector<PromptRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["emotion"] = r.emotion;
    j["query"] = r.query;
    if (r.emotion_prompt) j["emotion_prompt"] = *r.emotion_prompt;
    if (r.neutral_prompt) j["neutral_prompt"] = *r.neutral_prompt;
    if (r.emotion_response) j["emotion_response"] = *r.emotion_response;
    if (r.neutral_response) j["neutral_response"] = *r.neutral_response;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const std::vector<PromptRecord>& records, const std::string& path) {
  io::write_text(path, to_jsonl(records));
}

std::map<std::string, std::size_t> label_counts(const std::vector<PromptRecord>& records) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : records) ++counts[r.emotion];
  return counts;
}

void check_eqplus_composition(const std::vector<PromptRecord>& records) {
  const auto counts = label_counts(records);
  std::ostringstream problems;
  for (const auto& e : kEmotions) {
    const auto it = counts.find(e);
    const std::size_t n = it == counts.end() ? 0 : it->second;
    if (n != 50) problems << " " << e << "=" << n << " (want 50)";
  }
  const auto it = counts.find("neutral");
  const std::size_t neutral = it == counts.end() ? 0 : it->second;
  if (neutral != 150) problems << " neutral=" << neutral << " (want 150)";
  if (records.size() != 400) problems << " total=" << records.size() << " (want 400)";
  if (!problems.str().empty()) throw ValidationError("EQ+ composition mismatch:" + problems.str());
}

// ---- planted corpora ----

namespace {

const std::array<const char*, 40> kWords{
    "the",   "a",    "we",     "you",   "it",    "day",   "home",  "walk", "time",  "cup",
    "tea",   "road", "city",   "bus",   "rain",  "sun",   "book",  "door", "park",  "dog",
    "went",  "saw",  "made",   "took",  "see",   "find",  "have",  "keep", "when",  "then",
    "after", "near", "around", "today", "again", "small", "quiet", "long", "plain", "window"};

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::size_t draw_length(const PlantedSpec& spec, numkit::SeededRng& rng) {
  return spec.min_words + rng.below(spec.max_words - spec.min_words + 1);
}

std::string word(numkit::SeededRng& rng) { return kWords[rng.below(kWords.size())]; }

std::string marker(const std::vector<char>& set, numkit::SeededRng& rng) {
  return std::string(1, set[rng.below(set.size())]);
}

// Words with markers mixed in at `rate`; at least one marker when `force`.
std::vector<std::string> marked_text(const PlantedSpec& spec, const std::vector<char>* markers, double rate,
                                     bool force, numkit::SeededRng& rng) {
  const std::size_t n = draw_length(spec, rng);
  std::vector<std::string> words;
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (markers != nullptr && rate > 0.0 && rng.uniform() < rate) {
      words.push_back(marker(*markers, rng));
      any = true;
    } else {
      words.push_back(word(rng));
    }
  }
  if (force && !any && markers != nullptr) words[rng.below(words.size())] = marker(*markers, rng);
  return words;
}

}  // namespace

void PlantedSpec::validate() const {
  if (markers.empty()) throw ValidationError("planted spec has no marker sets");
  std::set<char> seen;
  for (const auto& [e, set] : markers) {
    if (!is_emotion(e)) throw ValidationError("planted spec: unknown emotion '" + e + "'");
    if (set.empty()) throw ValidationError("planted spec: empty marker set for '" + e + "'");
    for (char c : set) {
      if (c >= 'a' && c <= 'z') throw ValidationError("planted spec: markers must not be lowercase letters");
      if (c == ' ') throw ValidationError("planted spec: space cannot be a marker");
      if (!seen.insert(c).second) throw ValidationError(std::string("planted spec: marker '") + c + "' is shared");
    }
  }
  if (!(rate > 0.0 && rate <= 1.0)) throw ValidationError("planted spec: rate must lie in (0, 1]");
  if (!(query_rate >= 0.0 && query_rate <= 1.0)) throw ValidationError("planted spec: query_rate must lie in [0, 1]");
  if (min_words == 0 || max_words < min_words) throw ValidationError("planted spec: invalid length range");
}

PlantedSpec PlantedSpec::standard() {
  PlantedSpec s;
  s.markers = {{"anger", {'A', 'N', 'G', 'R'}},
               {"disgust", {'D', 'S', 'K', 'X'}},
               {"fear", {'F', 'E', 'W', 'Z'}},
               {"joy", {'J', 'O', 'Y', 'U'}},
               {"sadness", {'B', 'L', 'M', 'P'}}};
  return s;
}

std::optional<std::string> marker_emotion(const PlantedSpec& spec, char c) {
  for (const auto& [e, set] : spec.markers) {
    if (std::find(set.begin(), set.end(), c) != set.end()) return e;
  }
  return std::nullopt;
}

std::vector<PromptRecord> generate_planted(const PlantedSpec& spec, std::size_t n_per_emotion, std::size_t n_neutral) {
  spec.validate();
  if (n_per_emotion == 0 && n_neutral == 0) throw ValidationError("generate_planted: nothing to generate");
  numkit::SeededRng rng(spec.seed);
  std::vector<PromptRecord> out;
  auto id = [](const std::string& label, std::size_t i) {
    std::string n = std::to_string(i);
    return label + "-" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
  };
  for (const auto& e : kEmotions) {
    const auto it = spec.markers.find(e);
    if (it == spec.markers.end()) continue;
    for (std::size_t i = 0; i < n_per_emotion; ++i) {
      PromptRecord r;
      r.id = id(e, i);
      r.emotion = e;
      r.query = join(marked_text(spec, &it->second, spec.query_rate, false, rng)) + "?";
      r.emotion_prompt = emotion_instruction(r);
      r.neutral_prompt = neutral_instruction(r);
      r.emotion_response = join(marked_text(spec, &it->second, spec.rate, true, rng));
      r.neutral_response = join(marked_text(spec, nullptr, 0.0, false, rng));
      out.push_back(std::move(r));
    }
  }
  for (std::size_t i = 0; i < n_neutral; ++i) {
    PromptRecord r;
    r.id = id("neutral", i);
    r.emotion = "neutral";
    r.query = join(marked_text(spec, nullptr, 0.0, false, rng)) + "?";
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

using numkit::Vec64;

Vec64 unit_orthogonal(Vec64 v, const std::vector<Vec64>& basis) {
  for (const auto& b : basis) {
    const double c = numkit::dot(v, b);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= c * b[j];
  }
  const double n = numkit::norm2(v);
  for (double& x : v) x /= n;
  return v;
}

}  // namespace

nanoformer::NanoModel build_planted_model(const nanoformer::ModelConfig& config, const PlantedSpec& spec,
                                          const PlantedModelOptions& opt) {
  spec.validate();
  auto model = nanoformer::build_model(config);
  const auto d = static_cast<std::size_t>(config.d_model);
  if (d < spec.markers.size() + 2) throw ValidationError("planted model needs d_model >= emotions + 2");
  if (config.vocab < nanoformer::kByteOffset + 256) throw ValidationError("planted model needs the byte vocabulary");

  // Orthonormal directions, all orthogonal to the all-ones vector.
  numkit::SeededRng rng(spec.seed ^ 0x5EED5EED5EED5EEDULL);
  std::vector<Vec64> basis{Vec64(d, 1.0 / std::sqrt(static_cast<double>(d)))};
  auto draw = [&] {
    Vec64 v(d);
    for (double& x : v) x = rng.gaussian();
    auto u = unit_orthogonal(std::move(v), basis);
    basis.push_back(u);
    return u;
  };
  const Vec64 q0 = draw();
  std::map<std::string, Vec64> q;
  for (const auto& [e, set] : spec.markers) q[e] = draw();

  auto& w = model.weights;
  auto row = [](numkit::Mat& m, int tok) { return m.row(static_cast<std::size_t>(tok)); };
  const float blocked = static_cast<float>(opt.blocked_bias);
  std::fill(w.unembed_bias.begin(), w.unembed_bias.end(), blocked);
  for (char c = 'a'; c <= 'z'; ++c) w.unembed_bias[static_cast<std::size_t>(nanoformer::kByteOffset + c)] = 0.0F;
  w.unembed_bias[static_cast<std::size_t>(nanoformer::kByteOffset + ' ')] = 0.0F;

  // Planted directions are removed from every other embedding row, so only
  // markers (and steering) move the residual stream along them.
  const std::vector<Vec64> planted(basis.begin() + 1, basis.end());
  auto project_out = [&](std::span<float> r) {
    for (const auto& b : planted) {
      double c = 0.0;
      for (std::size_t j = 0; j < d; ++j) c += static_cast<double>(r[j]) * b[j];
      for (std::size_t j = 0; j < d; ++j) r[j] = static_cast<float>(static_cast<double>(r[j]) - c * b[j]);
    }
  };
  for (std::size_t t = 0; t < w.token_embedding.rows(); ++t) project_out(w.token_embedding.row(t));
  for (std::size_t t = 0; t < w.position_embedding.rows(); ++t) project_out(w.position_embedding.row(t));

  for (const auto& [e, set] : spec.markers) {
    for (char c : set) {
      const int tok = nanoformer::kByteOffset + static_cast<unsigned char>(c);
      auto emb = row(w.token_embedding, tok);
      auto out = row(w.unembed, tok);
      for (std::size_t j = 0; j < d; ++j) {
        const double dir = q.at(e)[j] + q0[j];
        emb[j] = static_cast<float>(opt.embed_gain * dir);
        out[j] = static_cast<float>(opt.unembed_gain * dir);
      }
      w.unembed_bias[static_cast<std::size_t>(tok)] = static_cast<float>(opt.marker_bias);
    }
  }

  // Uniform causal attention that adds the running mean of the normalised
  // context to the residual stream.
  for (auto& b : w.blocks) {
    std::fill(b.wq.flat().begin(), b.wq.flat().end(), 0.0F);
    std::fill(b.wk.flat().begin(), b.wk.flat().end(), 0.0F);
    b.wv = numkit::Mat::identity(d);
    for (float& x : b.wv.flat()) x *= static_cast<float>(opt.accumulator_gain);
    b.wo = numkit::Mat::identity(d);
  }
  return model;
}

}  // namespace evsteer::corpus
