#include "evsteer/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "evsteer/error.hpp"

namespace evsteer::pipeline {

using nanoformer::TokenId;

namespace {

// Runs fn(i) for i in [0, n) on up to `jobs` threads; the first exception wins.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex m;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard lock(m);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(jobs, n); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<TokenId> with_response(std::vector<TokenId> prompt, std::span<const TokenId> response) {
  prompt.insert(prompt.end(), response.begin(), response.end());
  return prompt;
}

evcore::ShiftSample one_shift(const nanoformer::NanoModel& model, const std::string& model_id, std::uint64_t id,
                              const corpus::PromptRecord& r, const ExtractionOptions& opt) {
  auto side = [&](const std::string& instruction, const std::optional<std::string>& stored) {
    const auto prompt = prompt_tokens(instruction);
    std::vector<TokenId> response;
    if (stored) {
      response = nanoformer::Tokenizer::encode(*stored);
    } else {
      const std::size_t room = static_cast<std::size_t>(model.config.max_seq) - prompt.size();
      response = steer::generate(model, prompt, {}, std::min(opt.max_new, room));
    }
    if (response.empty()) throw RuntimeError("record '" + r.id + "' has an empty response");
    auto trace = nanoformer::forward_with_taps(model, with_response(prompt, response));
    return std::make_pair(std::move(trace), prompt.size());
  };
  const auto [te, pe] = side(corpus::emotion_instruction(r), r.emotion_response);
  const auto [tn, pn] = side(corpus::neutral_instruction(r), r.neutral_response);
  return evcore::emotional_shift(id, evcore::TraceView{&te, pe, std::nullopt, model_id},
                                 evcore::TraceView{&tn, pn, std::nullopt, model_id},
                                 evcore::PoolingOptions{opt.truncate_to_min});
}

}  // namespace

std::vector<TokenId> prompt_tokens(std::string_view prompt) {
  std::vector<TokenId> t{nanoformer::kBos};
  for (TokenId id : nanoformer::Tokenizer::encode(prompt)) t.push_back(id);
  t.push_back(nanoformer::kSep);
  return t;
}

std::vector<evcore::ShiftSample> shifts(const nanoformer::NanoModel& model,
                                        const std::vector<corpus::PromptRecord>& records,
                                        const ExtractionOptions& options) {
  const std::string id = nanoformer::model_digest(model);
  std::vector<evcore::ShiftSample> out(records.size());
  parallel_for(records.size(), options.jobs,
               [&](std::size_t i) { out[i] = one_shift(model, id, i, records[i], options); });
  return out;
}

namespace {

std::vector<corpus::PromptRecord> with_label(const std::vector<corpus::PromptRecord>& records, const std::string& e,
                                             std::vector<std::uint64_t>* ids) {
  std::vector<corpus::PromptRecord> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].emotion != e) continue;
    out.push_back(records[i]);
    ids->push_back(i);
  }
  return out;
}

std::map<std::string, std::vector<evcore::ShiftSample>> grouped_shifts(const nanoformer::NanoModel& model,
                                                                      const std::vector<corpus::PromptRecord>& records,
                                                                      const ExtractionOptions& options) {
  std::vector<corpus::PromptRecord> emotional;
  for (const auto& r : records)
    if (corpus::is_emotion(r.emotion)) emotional.push_back(r);
  if (emotional.empty()) throw ValidationError("corpus has no emotional records to extract from");
  auto all = shifts(model, emotional, options);
  std::map<std::string, std::vector<evcore::ShiftSample>> grouped;
  for (std::size_t i = 0; i < emotional.size(); ++i) grouped[emotional[i].emotion].push_back(std::move(all[i]));
  return grouped;
}

}  // namespace

evcore::EmotionVector extract(const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
                              const std::string& emotion, const ExtractionOptions& options) {
  if (!corpus::is_emotion(emotion)) throw ValidationError("cannot extract a vector for label '" + emotion + "'");
  std::vector<std::uint64_t> ids;
  const auto subset = with_label(records, emotion, &ids);
  if (subset.empty()) throw ValidationError("corpus has no records labelled '" + emotion + "'");
  auto s = shifts(model, subset, options);
  for (std::size_t i = 0; i < s.size(); ++i) s[i].query_id = ids[i];
  return evcore::build_emotion_vector(std::move(s), emotion, nanoformer::model_digest(model));
}

evcore::EVSet extract_set(const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
                          const ExtractionOptions& options) {
  const std::string id = nanoformer::model_digest(model);
  std::map<std::string, evcore::EmotionVector> members;
  for (auto& [e, s] : grouped_shifts(model, records, options)) {
    members.emplace(e, evcore::build_emotion_vector(std::move(s), e, id));
  }
  return evcore::EVSet(std::move(members));
}

std::map<std::string, std::vector<evcore::EmotionVector>> per_query_vectors(
    const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
    const ExtractionOptions& options) {
  const std::string id = nanoformer::model_digest(model);
  std::map<std::string, std::vector<evcore::EmotionVector>> out;
  for (auto& [e, s] : grouped_shifts(model, records, options)) {
    for (auto& sample : s) out[e].emplace_back(e, id, std::move(sample.layers), 1);
  }
  return out;
}

std::vector<std::string> respond(const nanoformer::NanoModel& model, const std::vector<std::string>& queries,
                                 const steer::SteeringConfig& cfg, const GenerationOptions& options) {
  std::vector<std::string> out(queries.size());
  parallel_for(queries.size(), options.jobs, [&](std::size_t i) {
    out[i] = nanoformer::Tokenizer::decode(steer::generate(model, prompt_tokens(queries[i]), cfg, options.max_new));
  });
  return out;
}

steer::SteeringConfig Condition::config() const {
  steer::SteeringConfig cfg;
  if (ev != nullptr) cfg.blend.push_back({ev, alpha});
  cfg.layer_mask = layers;
  return cfg;
}

std::string Condition::label() const {
  std::ostringstream os;
  os << (ev == nullptr ? std::string("none") : ev->emotion()) << ":" << (ev == nullptr ? 0.0 : alpha);
  return os.str();
}

namespace {

std::vector<std::string> queries_of(const std::vector<corpus::PromptRecord>& records) {
  if (records.empty()) throw ValidationError("evaluation corpus is empty");
  std::vector<std::string> q;
  q.reserve(records.size());
  for (const auto& r : records) q.push_back(r.query);
  return q;
}

evalkit::MetricReport report_for(const std::string& metric, const nanoformer::NanoModel& model,
                                 const Condition& c) {
  evalkit::MetricReport rep;
  rep.metric = metric;
  rep.condition = {{"model", nanoformer::model_digest(model)},
                   {"ev", c.ev == nullptr ? std::string() : c.ev->emotion()},
                   {"alpha", c.ev == nullptr ? 0.0 : c.alpha}};
  if (c.layers) rep.condition["layers"] = *c.layers;
  return rep;
}

}  // namespace

evalkit::MetricReport eps_report(const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
                                 const Condition& condition, const evalkit::EmotionClassifier& eps,
                                 const GenerationOptions& options) {
  if (eps.labels().size() != 3) throw ValidationError("EPS needs a three-label classifier");
  const auto responses = respond(model, queries_of(records), condition.config(), options);
  auto rep = report_for("eps", model, condition);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto p = eps.classify(responses[i]);
    rep.rows.push_back({records[i].id, condition.label(), evalkit::eps_argmax(p) == 2 ? 1.0 : 0.0, ""});
  }
  rep.aggregate = rep.recompute();
  return rep;
}

evalkit::MetricReport tec_report(const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
                                 const Condition& condition, const std::string& target,
                                 const evalkit::EmotionClassifier& classifier, const GenerationOptions& options) {
  const auto responses = respond(model, queries_of(records), condition.config(), options);
  auto rep = report_for("tec:" + target, model, condition);
  for (std::size_t i = 0; i < records.size(); ++i) {
    rep.rows.push_back({records[i].id, condition.label(), classifier.probability(responses[i], target), ""});
  }
  rep.aggregate = rep.recompute();
  return rep;
}

evalkit::MetricReport ppl_report(const nanoformer::NanoModel& model, const std::vector<corpus::PromptRecord>& records,
                                 const Condition& condition, const GenerationOptions& options) {
  const auto responses = respond(model, queries_of(records), condition.config(), options);
  std::vector<std::pair<std::string, std::string>> items;
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    items.emplace_back(records[i].query, responses[i]);
    ids.push_back(records[i].id);
  }
  auto rep = evalkit::perplexity_report(model, items, ids);
  const auto header = report_for("ppl", model, condition);
  rep.condition = header.condition;
  for (auto& r : rep.rows) r.condition = condition.label();
  return rep;
}

std::vector<evalkit::TecMatrix> tec_matrices(const nanoformer::NanoModel& model,
                                             const std::vector<corpus::PromptRecord>& records,
                                             const evcore::EVSet& set, const std::vector<double>& alphas,
                                             const evalkit::EmotionClassifier& classifier, std::size_t per_origin,
                                             const GenerationOptions& options) {
  if (alphas.empty()) throw ValidationError("TEC matrices need at least one intensity");
  if (per_origin == 0) throw ValidationError("TEC matrices need at least one record per origin");
  const std::vector<std::string> origins(corpus::kLabels.begin(), corpus::kLabels.end());
  std::map<std::string, std::vector<std::string>> queries;
  for (const auto& r : records) {
    auto& q = queries[r.emotion];
    if (q.size() < per_origin) q.push_back(r.query);
  }
  std::map<std::string, std::vector<std::string>> unsteered;
  std::vector<evalkit::TecMatrix> out;
  for (const auto& [target, ev] : set.members()) {
    evalkit::ResponseGrid grid;
    for (const auto& o : origins) {
      const auto it = queries.find(o);
      if (it == queries.end()) continue;
      for (double a : alphas) {
        if (a == 0.0) {
          auto cached = unsteered.find(o);
          if (cached == unsteered.end()) cached = unsteered.emplace(o, respond(model, it->second, {}, options)).first;
          grid[o][a] = cached->second;
        } else {
          grid[o][a] = respond(model, it->second, Condition{&ev, a, std::nullopt}.config(), options);
        }
      }
    }
    out.push_back(evalkit::tec_matrix(target, origins, alphas, grid, classifier));
  }
  return out;
}

corpus::PlantedSpec planted_eqplus_spec(std::uint64_t seed) {
  auto spec = corpus::PlantedSpec::standard();
  spec.seed = seed + 1;
  spec.query_rate = 0.3;
  return spec;
}

PlantedSetup planted_setup(std::uint64_t seed, std::size_t per_emotion) {
  auto spec = corpus::PlantedSpec::standard();
  spec.seed = seed;
  nanoformer::ModelConfig config;
  config.seed = seed;
  PlantedSetup s{spec, corpus::build_planted_model(config, spec), corpus::generate_planted(spec, per_emotion), {}};
  s.eqplus = corpus::generate_planted(planted_eqplus_spec(seed), 50, 150);
  return s;
}

}  // namespace evsteer::pipeline
