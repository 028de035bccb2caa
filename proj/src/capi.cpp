#include "evsteer.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <sstream>

#include "evsteer/corpus.hpp"
#include "evsteer/error.hpp"
#include "evsteer/evalkit.hpp"
#include "evsteer/evcore.hpp"
#include "evsteer/io.hpp"
#include "evsteer/pipeline.hpp"
#include "evsteer/steer.hpp"
#include "evsteer/theorylab.hpp"

struct evs_model {
  evsteer::nanoformer::NanoModel m;
};
struct evs_corpus {
  std::vector<evsteer::corpus::PromptRecord> records;
};
struct evs_ev {
  evsteer::evcore::EmotionVector v;
};
struct evs_evset {
  evsteer::evcore::EVSet s;
};

namespace {

using namespace evsteer;

thread_local std::string g_last_error;

// Raised internally when a verification bundle has failing checks.
struct TheoremFailure {};

template <typename Fn>
evs_status guard(Fn fn) {
  g_last_error.clear();
  try {
    fn();
    return EVS_OK;
  } catch (const TheoremFailure&) {
    g_last_error = "one or more checks failed";
    return EVS_ERR_THEOREM;
  } catch (const ValidationError& e) {
    g_last_error = e.what();
    return EVS_ERR_VALIDATION;
  } catch (const nlohmann::json::exception& e) {
    g_last_error = e.what();
    return EVS_ERR_VALIDATION;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return EVS_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return EVS_ERR_RUNTIME;
  }
}

template <typename T>
const T& need(const T* p, const char* what) {
  if (p == nullptr) throw ValidationError(std::string("null ") + what);
  return *p;
}

template <typename T>
T** out_ptr(T** p) {
  if (p == nullptr) throw ValidationError("null output pointer");
  return p;
}

std::string str(const char* s, const char* what) {
  if (s == nullptr) throw ValidationError(std::string("null ") + what);
  return s;
}

char* dup(const std::string& s) {
  auto* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p == nullptr) throw RuntimeError("out of memory");
  std::memcpy(p, s.data(), s.size() + 1);
  return p;
}

std::optional<std::vector<int>> mask_of(const evs_layer_mask& m) {
  if (m.enabled == 0) return std::nullopt;
  if (m.count > 0 && m.layers == nullptr) throw ValidationError("layer mask has a null list");
  return std::vector<int>(m.layers, m.layers + m.count);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

extern "C" {

const char* evs_version(void) { return EVSTEER_VERSION; }

const char* evs_last_error(void) { return g_last_error.c_str(); }

void evs_string_free(char* s) { std::free(s); }

evs_status evs_sha256(const void* data, size_t size, char** out) {
  return guard([&] {
    if (data == nullptr && size > 0) throw ValidationError("null data");
    const auto* p = static_cast<const std::uint8_t*>(data);
    *out_ptr(out) = dup(io::sha256_hex(std::span<const std::uint8_t>(p, size)));
  });
}

evs_status evs_model_create(const char* kind, uint64_t seed, evs_model** out) {
  return guard([&] {
    const std::string k = str(kind, "model kind");
    nanoformer::ModelConfig c;
    c.seed = seed;
    auto** o = out_ptr(out);
    if (k == "desk") {
      *o = new evs_model{nanoformer::build_model(c)};
    } else if (k == "stub") {
      c.kind = nanoformer::ModelKind::linear_stub;
      *o = new evs_model{nanoformer::build_model(c)};
    } else if (k == "planted") {
      auto spec = corpus::PlantedSpec::standard();
      spec.seed = seed;
      *o = new evs_model{corpus::build_planted_model(c, spec)};
    } else {
      throw ValidationError("unknown model kind '" + k + "' (desk, stub, planted)");
    }
  });
}

evs_status evs_model_load(const char* path, evs_model** out) {
  return guard([&] { *out_ptr(out) = new evs_model{nanoformer::load_model(str(path, "path"))}; });
}

evs_status evs_model_save(const evs_model* model, const char* path) {
  return guard([&] { nanoformer::save_model(need(model, "model").m, str(path, "path")); });
}

evs_status evs_model_digest(const evs_model* model, char** out) {
  return guard([&] { *out_ptr(out) = dup(nanoformer::model_digest(need(model, "model").m)); });
}

evs_status evs_model_info(const evs_model* model, int* layers, int* d_model, int* vocab) {
  return guard([&] {
    const auto& c = need(model, "model").m.config;
    if (layers) *layers = c.layers;
    if (d_model) *d_model = c.d_model;
    if (vocab) *vocab = c.vocab;
  });
}

void evs_model_free(evs_model* model) { delete model; }

evs_status evs_corpus_load(const char* path, int eqplus, int strict, evs_corpus** out) {
  return guard([&] {
    const auto kind = eqplus ? corpus::CorpusKind::eq_plus : corpus::CorpusKind::emotion_query;
    *out_ptr(out) = new evs_corpus{corpus::load_corpus(str(path, "path"), kind, strict != 0)};
  });
}

evs_status evs_corpus_planted(uint64_t seed, int eqplus, size_t per_emotion, evs_corpus** out) {
  return guard([&] {
    auto** o = out_ptr(out);
    if (eqplus) {
      *o = new evs_corpus{corpus::generate_planted(pipeline::planted_eqplus_spec(seed), 50, 150)};
    } else {
      auto spec = corpus::PlantedSpec::standard();
      spec.seed = seed;
      *o = new evs_corpus{corpus::generate_planted(spec, per_emotion)};
    }
  });
}

evs_status evs_corpus_save(const evs_corpus* c, const char* path) {
  return guard([&] { corpus::save_corpus(need(c, "corpus").records, str(path, "path")); });
}

evs_status evs_corpus_size(const evs_corpus* c, size_t* out) {
  return guard([&] {
    if (out == nullptr) throw ValidationError("null output pointer");
    *out = need(c, "corpus").records.size();
  });
}

void evs_corpus_free(evs_corpus* c) { delete c; }

evs_status evs_extract(const evs_model* model, const evs_corpus* c, const char* emotion, size_t jobs, evs_ev** out) {
  return guard([&] {
    pipeline::ExtractionOptions opt;
    opt.jobs = std::max<size_t>(1, jobs);
    *out_ptr(out) = new evs_ev{
        pipeline::extract(need(model, "model").m, need(c, "corpus").records, str(emotion, "emotion"), opt)};
  });
}

evs_status evs_extract_set(const evs_model* model, const evs_corpus* c, size_t jobs, evs_evset** out) {
  return guard([&] {
    pipeline::ExtractionOptions opt;
    opt.jobs = std::max<size_t>(1, jobs);
    *out_ptr(out) = new evs_evset{pipeline::extract_set(need(model, "model").m, need(c, "corpus").records, opt)};
  });
}

evs_status evs_ev_load(const char* path, evs_ev** out) {
  return guard([&] { *out_ptr(out) = new evs_ev{evcore::load_ev(str(path, "path"))}; });
}

evs_status evs_ev_save(const evs_ev* ev, const char* path) {
  return guard([&] { evcore::save_ev(need(ev, "vector").v, str(path, "path")); });
}

evs_status evs_ev_info(const evs_ev* ev, char** out) {
  return guard([&] {
    const auto& v = need(ev, "vector").v;
    const nlohmann::ordered_json j{{"emotion", v.emotion()}, {"model_id", v.model_id()}, {"layers", v.layers()},
                                   {"width", v.width()},     {"n_queries", v.n_queries()}, {"norms", v.norms()}};
    *out_ptr(out) = dup(j.dump());
  });
}

void evs_ev_free(evs_ev* ev) { delete ev; }

evs_status evs_evset_load(const char* dir, evs_evset** out) {
  return guard([&] { *out_ptr(out) = new evs_evset{evcore::load_set(str(dir, "directory"))}; });
}

evs_status evs_evset_save(const evs_evset* set, const char* dir) {
  return guard([&] { evcore::save_set(need(set, "set").s, str(dir, "directory")); });
}

evs_status evs_evset_get(const evs_evset* set, const char* name, evs_ev** out) {
  return guard([&] { *out_ptr(out) = new evs_ev{need(set, "set").s.get(str(name, "name"))}; });
}

void evs_evset_free(evs_evset* set) { delete set; }

evs_status evs_steer(const evs_model* model, const char* prompt, const evs_steer_options* options, char** out) {
  return guard([&] {
    const auto& m = need(model, "model").m;
    const auto& opt = need(options, "options");
    steer::SteeringConfig cfg;
    if (opt.n_terms > 0 && opt.terms == nullptr) throw ValidationError("null blend term list");
    for (size_t i = 0; i < opt.n_terms; ++i) {
      cfg.blend.push_back({&need(opt.terms[i].ev, "blend vector").v, opt.terms[i].alpha});
    }
    cfg.layer_mask = mask_of(opt.mask);
    cfg.apply_during =
        opt.generation_only ? steer::ApplyDuring::generation_only : steer::ApplyDuring::prompt_and_generation;
    const auto tokens = pipeline::prompt_tokens(str(prompt, "prompt"));
    const auto generated = steer::generate(m, tokens, cfg, opt.max_new);
    const auto baseline = steer::generate(m, tokens, {}, opt.max_new);
    const auto delta = steer::logit_delta<float>(m, tokens, cfg);

    double l2 = 0.0, max_abs = 0.0;
    std::vector<std::size_t> order(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
      l2 += delta[i] * delta[i];
      max_abs = std::max(max_abs, std::abs(delta[i]));
      order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return delta[a] > delta[b]; });
    nlohmann::ordered_json top = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < std::min<std::size_t>(5, order.size()); ++i) {
      if (!(delta[order[i]] > 0.0)) break;  // only tokens the steering raised
      const auto id = static_cast<nanoformer::TokenId>(order[i]);
      top.push_back({{"token", id},
                     {"text", nanoformer::Tokenizer::decode(std::vector<nanoformer::TokenId>{id})},
                     {"delta", delta[order[i]]}});
    }
    nlohmann::ordered_json j;
    j["text"] = nanoformer::Tokenizer::decode(generated);
    j["tokens"] = generated;
    j["baseline_text"] = nanoformer::Tokenizer::decode(baseline);
    j["logit_delta"] = {{"l2", std::sqrt(l2)}, {"max_abs", max_abs}, {"top", top}};
    *out_ptr(out) = dup(j.dump());
  });
}

evs_status evs_verify(const evs_model* model, const evs_ev* const* evs, size_t n_evs, double alpha, uint64_t seed,
                      char** out) {
  return guard([&] {
    const auto& m = need(model, "model").m;
    auto** o = out_ptr(out);
    if (n_evs > 2) throw ValidationError("verify takes at most two vectors");
    if (n_evs > 0 && evs == nullptr) throw ValidationError("null vector list");
    const auto a = n_evs > 0 ? need(evs[0], "vector").v : theorylab::random_vector(m.config, seed + 5, "random_a");
    const auto b = n_evs > 1 ? need(evs[1], "vector").v : theorylab::random_vector(m.config, seed + 6, "random_b");
    a.check_compatible(m.config);
    b.check_compatible(m.config);
    theorylab::BundleOptions opt;
    opt.alpha = alpha;
    opt.seed = seed;
    const auto reports = theorylab::verify_bundle(m, a, b, opt);
    nlohmann::json arr = nlohmann::json::array();
    bool all = true;
    for (const auto& r : reports) {
      arr.push_back(theorylab::to_json(r));
      all = all && r.pass;
    }
    const nlohmann::json j{{"pass", all}, {"alpha", alpha}, {"seed", seed}, {"reports", arr}};
    *o = dup(j.dump());
    if (!all) throw TheoremFailure{};
  });
}

evs_status evs_eval(const evs_model* model, const evs_corpus* c, const evs_evset* set,
                    const evs_eval_options* options, char** out_json, char** out_csv) {
  return guard([&] {
    const auto& m = need(model, "model").m;
    const auto& records = need(c, "corpus").records;
    const auto& s = need(set, "set").s;
    const auto& opt = need(options, "options");
    if (opt.n_alphas == 0 || opt.alphas == nullptr) throw ValidationError("eval needs at least one alpha");
    const std::vector<double> alphas(opt.alphas, opt.alphas + opt.n_alphas);
    const auto metrics = split(opt.metrics == nullptr ? "eps" : opt.metrics);
    if (metrics.empty()) throw ValidationError("eval needs at least one metric");
    const auto layers = mask_of(opt.mask);
    pipeline::GenerationOptions gen{opt.max_new == 0 ? 16 : opt.max_new, std::max<size_t>(1, opt.jobs)};

    auto spec = corpus::PlantedSpec::standard();
    spec.seed = opt.planted_seed;
    const auto eps = evalkit::LexiconClassifier::planted_eps(spec);
    const auto emotions = evalkit::LexiconClassifier::planted_emotions(spec);

    std::unique_ptr<evalkit::JudgeClient> judge;
    auto need_judge = [&]() -> const evalkit::JudgeClient& {
      if (!judge) {
        std::shared_ptr<evalkit::JudgeTransport> t;
        if (opt.fixtures_path != nullptr && *opt.fixtures_path != '\0') {
          t = std::make_shared<evalkit::FixtureTransport>(evalkit::FixtureTransport::load(opt.fixtures_path));
        } else if (opt.judge_url != nullptr && *opt.judge_url != '\0') {
          t = std::make_shared<evalkit::HttpTransport>(opt.judge_url);
        } else {
          throw ValidationError("judge metrics need EVSTEER_FIXTURES or EVSTEER_JUDGE_URL");
        }
        judge = std::make_unique<evalkit::JudgeClient>(t, std::max<size_t>(1, opt.judge_in_flight));
      }
      return *judge;
    };

    std::vector<evalkit::MetricReport> reports;
    nlohmann::json matrices = nlohmann::json::array();
    for (const auto& metric : metrics) {
      if (metric == "tec") {
        for (const auto& mx : pipeline::tec_matrices(m, records, s, alphas, emotions,
                                                     opt.tec_per_origin == 0 ? 10 : opt.tec_per_origin, gen)) {
          matrices.push_back(evalkit::to_json(mx));
          evalkit::MetricReport rep{"tec_matrix:" + mx.target, {{"target", mx.target}}, {}, 0.0};
          for (std::size_t i = 0; i < mx.origins.size(); ++i) {
            for (std::size_t k = 0; k < mx.alphas.size(); ++k) {
              std::ostringstream cond;
              cond << mx.target << ":" << mx.alphas[k];
              rep.rows.push_back({mx.origins[i], cond.str(), mx.cells[i][k], mx.cells[i][k] ? "" : "absent"});
            }
          }
          rep.aggregate = rep.recompute();
          reports.push_back(std::move(rep));
        }
        continue;
      }
      for (double a : alphas) {
        const pipeline::Condition cond{&s.base(), a, layers};
        if (metric == "eps") {
          reports.push_back(pipeline::eps_report(m, records, cond, eps, gen));
        } else if (metric == "ppl") {
          reports.push_back(pipeline::ppl_report(m, records, cond, gen));
        } else if (metric == "ta" || metric == "eas") {
          const auto& j = need_judge();
          std::vector<std::string> queries;
          for (const auto& r : records) queries.push_back(r.query);
          const auto answers = pipeline::respond(m, queries, cond.config(), gen);
          std::vector<evalkit::JudgeItem> items;
          for (std::size_t i = 0; i < records.size(); ++i) items.push_back({records[i].id, records[i].query, answers[i]});
          auto rep = metric == "ta" ? evalkit::topic_adherence(items, j) : evalkit::judge_eas(items, j);
          rep.condition = {{"model", nanoformer::model_digest(m)}, {"ev", "base"}, {"alpha", a}};
          for (auto& row : rep.rows) row.condition = cond.label();
          reports.push_back(std::move(rep));
        } else {
          throw ValidationError("unknown metric '" + metric + "' (eps, tec, ppl, ta, eas)");
        }
      }
    }
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) arr.push_back(evalkit::to_json(r));
    const nlohmann::json j{{"reports", arr}, {"tec_matrices", matrices}};
    if (out_json) *out_json = dup(j.dump());
    if (out_csv) *out_csv = dup(evalkit::to_csv(reports));
  });
}

evs_status evs_inspect(const evs_ev* const* evs, size_t n, char** out) {
  return guard([&] {
    if (n > 0 && evs == nullptr) throw ValidationError("null vector list");
    std::vector<evcore::EmotionVector> list;
    for (size_t i = 0; i < n; ++i) list.push_back(need(evs[i], "vector").v);
    *out_ptr(out) = dup(evcore::inspect(list).dump());
  });
}

evs_status evs_geometry(const evs_model* model, const evs_corpus* c, size_t jobs, char** out) {
  return guard([&] {
    pipeline::ExtractionOptions opt;
    opt.jobs = std::max<size_t>(1, jobs);
    const auto per = pipeline::per_query_vectors(need(model, "model").m, need(c, "corpus").records, opt);
    *out_ptr(out) = dup(evcore::to_json(evcore::ev_stats(per)).dump());
  });
}

}  // extern "C"
