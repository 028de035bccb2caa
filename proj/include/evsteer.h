#ifndef EVSTEER_H
#define EVSTEER_H

/* C interface to the emotion-vector steering toolkit.
 *
 * Every call returns an evs_status. On failure, evs_last_error() holds a
 * message for the calling thread until its next call. Strings returned
 * through char** are owned by the caller and freed with evs_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define EVS_API __declspec(dllexport)
#else
#define EVS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum evs_status {
  EVS_OK = 0,
  EVS_ERR_VALIDATION = 1, /* bad input, malformed files */
  EVS_ERR_RUNTIME = 2,    /* I/O or computation failure */
  EVS_ERR_THEOREM = 3     /* a verification check did not pass */
} evs_status;

typedef struct evs_model evs_model;
typedef struct evs_corpus evs_corpus;
typedef struct evs_ev evs_ev;
typedef struct evs_evset evs_evset;

EVS_API const char* evs_version(void);
EVS_API const char* evs_last_error(void);
EVS_API void evs_string_free(char* s);
/* Lowercase hex SHA-256 of a byte range. */
EVS_API evs_status evs_sha256(const void* data, size_t size, char** out);

/* kind: "desk", "stub" or "planted". */
EVS_API evs_status evs_model_create(const char* kind, uint64_t seed, evs_model** out);
EVS_API evs_status evs_model_load(const char* path, evs_model** out);
EVS_API evs_status evs_model_save(const evs_model* model, const char* path);
EVS_API evs_status evs_model_digest(const evs_model* model, char** out);
EVS_API evs_status evs_model_info(const evs_model* model, int* layers, int* d_model, int* vocab);
EVS_API void evs_model_free(evs_model* model);

/* eqplus selects the EQ+ schema; strict enforces its 5x50 + 150 composition. */
EVS_API evs_status evs_corpus_load(const char* path, int eqplus, int strict, evs_corpus** out);
/* Planted corpora: eqplus = 0 gives the extraction corpus (per_emotion
 * records per emotion), eqplus = 1 the 400-record EQ+ corpus. */
EVS_API evs_status evs_corpus_planted(uint64_t seed, int eqplus, size_t per_emotion, evs_corpus** out);
EVS_API evs_status evs_corpus_save(const evs_corpus* corpus, const char* path);
EVS_API evs_status evs_corpus_size(const evs_corpus* corpus, size_t* out);
EVS_API void evs_corpus_free(evs_corpus* corpus);

EVS_API evs_status evs_extract(const evs_model* model, const evs_corpus* corpus, const char* emotion, size_t jobs,
                               evs_ev** out);
EVS_API evs_status evs_extract_set(const evs_model* model, const evs_corpus* corpus, size_t jobs, evs_evset** out);

EVS_API evs_status evs_ev_load(const char* path, evs_ev** out);
EVS_API evs_status evs_ev_save(const evs_ev* ev, const char* path);
/* {"emotion", "model_id", "layers", "width", "n_queries", "norms"} */
EVS_API evs_status evs_ev_info(const evs_ev* ev, char** out_json);
EVS_API void evs_ev_free(evs_ev* ev);

EVS_API evs_status evs_evset_load(const char* dir, evs_evset** out);
EVS_API evs_status evs_evset_save(const evs_evset* set, const char* dir);
/* "base" selects the base vector. The result is an independent copy. */
EVS_API evs_status evs_evset_get(const evs_evset* set, const char* name, evs_ev** out);
EVS_API void evs_evset_free(evs_evset* set);

typedef struct evs_blend_term {
  const evs_ev* ev;
  double alpha;
} evs_blend_term;

typedef struct evs_layer_mask {
  const int* layers;
  size_t count;
  int enabled; /* 0: every layer */
} evs_layer_mask;

typedef struct evs_steer_options {
  const evs_blend_term* terms;
  size_t n_terms;
  evs_layer_mask mask;
  int generation_only;
  size_t max_new;
} evs_steer_options;

/* {"text", "tokens", "baseline_text", "logit_delta": {"l2", "max_abs", "top"}};
 * "top" lists up to five tokens with the largest positive logit change. */
EVS_API evs_status evs_steer(const evs_model* model, const char* prompt, const evs_steer_options* options,
                             char** out_json);

/* Runs the five checks. evs may be empty (seeded random vectors are used) or
 * hold one or two vectors. Returns EVS_ERR_THEOREM, with the bundle still
 * written to out_json, when any check fails. */
EVS_API evs_status evs_verify(const evs_model* model, const evs_ev* const* evs, size_t n_evs, double alpha,
                              uint64_t seed, char** out_json);

typedef struct evs_eval_options {
  const double* alphas;
  size_t n_alphas;
  const char* metrics; /* comma list of eps, tec, ppl, ta, eas */
  evs_layer_mask mask;
  size_t jobs;
  size_t max_new;
  size_t tec_per_origin;
  uint64_t planted_seed; /* marker spec for the lexicon classifiers */
  const char* judge_url;     /* ta/eas over HTTP */
  const char* fixtures_path; /* ta/eas from recorded replies */
  size_t judge_in_flight;
} evs_eval_options;

EVS_API evs_status evs_eval(const evs_model* model, const evs_corpus* corpus, const evs_evset* set,
                            const evs_eval_options* options, char** out_json, char** out_csv);

/* Norms, pairwise cosine table and PCA coordinates of the given vectors. */
EVS_API evs_status evs_inspect(const evs_ev* const* evs, size_t n, char** out_json);
/* Within/between cosine statistics over per-query vectors of a corpus. */
EVS_API evs_status evs_geometry(const evs_model* model, const evs_corpus* corpus, size_t jobs, char** out_json);

#ifdef __cplusplus
}
#endif

#endif
