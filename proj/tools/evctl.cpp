// evctl: command-line front end over the evsteer C interface.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "evsteer.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kEmotions{"anger", "disgust", "fear", "joy", "sadness"};

struct Failure {
  int code;
  std::string message;
};

void check(evs_status s) {
  if (s != EVS_OK) throw Failure{static_cast<int>(s), evs_last_error()};
}

[[noreturn]] void invalid(const std::string& msg) { throw Failure{EVS_ERR_VALIDATION, msg}; }

struct StringDeleter {
  void operator()(char* p) const { evs_string_free(p); }
};
using Str = std::unique_ptr<char, StringDeleter>;

struct ModelDeleter {
  void operator()(evs_model* p) const { evs_model_free(p); }
};
struct CorpusDeleter {
  void operator()(evs_corpus* p) const { evs_corpus_free(p); }
};
struct EvDeleter {
  void operator()(evs_ev* p) const { evs_ev_free(p); }
};
struct SetDeleter {
  void operator()(evs_evset* p) const { evs_evset_free(p); }
};
using Model = std::unique_ptr<evs_model, ModelDeleter>;
using Corpus = std::unique_ptr<evs_corpus, CorpusDeleter>;
using Ev = std::unique_ptr<evs_ev, EvDeleter>;
using Set = std::unique_ptr<evs_evset, SetDeleter>;

std::string take(char* p) {
  const Str owned(p);
  return p ? std::string(p) : std::string();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Failure{EVS_ERR_RUNTIME, "cannot read '" + p.string() + "'"};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256(const std::string& bytes) {
  char* out = nullptr;
  check(evs_sha256(bytes.data(), bytes.size(), &out));
  return take(out);
}

std::string digest_path(const fs::path& p) {
  if (!fs::is_directory(p)) return sha256(read_bytes(p));
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += f.filename().string() + ":" + sha256(read_bytes(f)) + "\n";
  return sha256(joined);
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Failure{EVS_ERR_RUNTIME, "cannot write '" + p.string() + "'"};
  out << text;
  if (!out) throw Failure{EVS_ERR_RUNTIME, "write failed for '" + p.string() + "'"};
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty())
    std::cout << text;
  else
    write_text(out, text);
}

Model load_model(const std::string& path) {
  evs_model* m = nullptr;
  check(evs_model_load(path.c_str(), &m));
  return Model(m);
}

std::string model_digest(const evs_model* m) {
  char* out = nullptr;
  check(evs_model_digest(m, &out));
  return take(out);
}

Corpus load_corpus(const std::string& path, bool eqplus, bool strict) {
  evs_corpus* c = nullptr;
  check(evs_corpus_load(path.c_str(), eqplus ? 1 : 0, strict ? 1 : 0, &c));
  return Corpus(c);
}

Ev load_ev(const std::string& path) {
  evs_ev* e = nullptr;
  check(evs_ev_load(path.c_str(), &e));
  return Ev(e);
}

Set load_set(const std::string& dir) {
  evs_evset* s = nullptr;
  check(evs_evset_load(dir.c_str(), &s));
  return Set(s);
}

Ev set_member(const evs_evset* s, const std::string& name) {
  evs_ev* e = nullptr;
  check(evs_evset_get(s, name.c_str(), &e));
  return Ev(e);
}

json ev_info(const evs_ev* e) {
  char* out = nullptr;
  check(evs_ev_info(e, &out));
  return json::parse(take(out));
}

// Provenance sidecar. Carries no timestamps so reruns are byte-identical.
struct Manifest {
  std::string command;
  json config = json::object();
  std::string model;
  std::string corpus;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> outputs;

  void write(const fs::path& where) const {
    json j{{"tool", "evctl"},
           {"version", evs_version()},
           {"command", command},
           {"config", config},
           {"config_digest", sha256(config.dump())},
           {"seed", seed},
           {"outputs", outputs}};
    j["model_digest"] = model.empty() ? json(nullptr) : json(model);
    j["corpus_digest"] = corpus.empty() ? json(nullptr) : json(corpus);
    write_text(where, j.dump(2) + "\n");
  }
};

fs::path sidecar_for(const fs::path& out) {
  if (fs::is_directory(out)) return out / "manifest.json";
  return fs::path(out.string() + ".manifest.json");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) parts.push_back(cur);
  return parts;
}

double parse_alpha(const std::string& text, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    invalid("bad alpha '" + text + "' in " + where);
  }
}

evs_layer_mask mask_of(const std::vector<int>& layers) {
  return evs_layer_mask{layers.empty() ? nullptr : layers.data(), layers.size(), layers.empty() ? 0 : 1};
}

// ---- init -------------------------------------------------------------------

struct InitArgs {
  std::string kind = "planted";
  std::uint64_t seed = 0;
  std::size_t per_emotion = 20;
  std::string out;
};

int run_init(const InitArgs& a) {
  const fs::path dir(a.out);
  fs::create_directories(dir);
  evs_model* raw = nullptr;
  check(evs_model_create(a.kind.c_str(), a.seed, &raw));
  Model model(raw);
  check(evs_model_save(model.get(), (dir / "model.nfmt").string().c_str()));

  evs_corpus* ext = nullptr;
  check(evs_corpus_planted(a.seed, 0, a.per_emotion, &ext));
  Corpus extraction(ext);
  check(evs_corpus_save(extraction.get(), (dir / "extraction.jsonl").string().c_str()));
  evs_corpus* eq = nullptr;
  check(evs_corpus_planted(a.seed, 1, 0, &eq));
  Corpus eqplus(eq);
  check(evs_corpus_save(eqplus.get(), (dir / "eqplus.jsonl").string().c_str()));

  Manifest m;
  m.command = "init";
  m.config = {{"kind", a.kind}, {"seed", a.seed}, {"per_emotion", a.per_emotion}};
  m.model = model_digest(model.get());
  m.seed = a.seed;
  for (const char* f : {"model.nfmt", "extraction.jsonl", "eqplus.jsonl"}) m.outputs[f] = digest_path(dir / f);
  m.write(dir / "manifest.json");

  int layers = 0, width = 0, vocab = 0;
  check(evs_model_info(model.get(), &layers, &width, &vocab));
  std::cout << a.kind << " model: " << layers << " layers, d_model " << width << ", vocab " << vocab << "\n"
            << "model digest " << m.model << "\n"
            << "wrote " << (dir / "model.nfmt").string() << ", extraction.jsonl, eqplus.jsonl\n";
  return 0;
}

// ---- extract ----------------------------------------------------------------

struct ExtractArgs {
  std::string model, corpus, emotion, out;
  std::size_t jobs = 1;
};

void print_norms(const std::string& name, const json& info) {
  std::cout << name << " (" << info["n_queries"].get<int>() << " queries)";
  for (const auto& n : info["norms"]) std::cout << " " << n.get<double>();
  std::cout << "\n";
}

int run_extract(const ExtractArgs& a) {
  auto model = load_model(a.model);
  auto corpus = load_corpus(a.corpus, false, false);
  Manifest m;
  m.command = "extract";
  m.config = {{"emotion", a.emotion.empty() ? json(nullptr) : json(a.emotion)}};
  m.model = model_digest(model.get());
  m.corpus = digest_path(a.corpus);

  std::cout << "per-layer norms\n";
  if (!a.emotion.empty()) {
    evs_ev* raw = nullptr;
    check(evs_extract(model.get(), corpus.get(), a.emotion.c_str(), a.jobs, &raw));
    Ev ev(raw);
    check(evs_ev_save(ev.get(), a.out.c_str()));
    print_norms(a.emotion, ev_info(ev.get()));
  } else {
    evs_evset* raw = nullptr;
    check(evs_extract_set(model.get(), corpus.get(), a.jobs, &raw));
    Set set(raw);
    check(evs_evset_save(set.get(), a.out.c_str()));
    for (const auto& e : kEmotions) print_norms(e, ev_info(set_member(set.get(), e).get()));
    print_norms("base", ev_info(set_member(set.get(), "base").get()));
  }
  m.outputs[fs::path(a.out).filename().string()] = digest_path(a.out);
  m.write(sidecar_for(a.out));
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// ---- steer ------------------------------------------------------------------

struct SteerArgs {
  std::string model, prompt, blend, out;
  std::vector<std::string> evs;
  double alpha = 1.0;
  std::vector<int> layers;
  bool generation_only = false;
  std::size_t max_new = 16;
};

// Vectors reachable by label: members of set directories and single files
// keyed by their emotion.
struct Library {
  std::vector<Set> sets;
  std::vector<std::pair<std::string, Ev>> files;
  std::vector<Ev> owned;

  explicit Library(const std::vector<std::string>& paths) {
    for (const auto& p : paths) {
      if (fs::is_directory(p)) {
        sets.push_back(load_set(p));
      } else {
        auto ev = load_ev(p);
        auto name = ev_info(ev.get())["emotion"].get<std::string>();
        files.emplace_back(std::move(name), std::move(ev));
      }
    }
  }

  const evs_ev* find(const std::string& label) {
    for (const auto& [name, ev] : files)
      if (name == label) return ev.get();
    for (const auto& s : sets) {
      evs_ev* raw = nullptr;
      if (evs_evset_get(s.get(), label.c_str(), &raw) == EVS_OK) {
        owned.emplace_back(raw);
        return raw;
      }
    }
    invalid("no vector for label '" + label + "' among --ev inputs");
  }
};

int run_steer(const SteerArgs& a) {
  auto model = load_model(a.model);
  Library lib(a.evs);
  std::vector<evs_blend_term> terms;
  json blend = json::array();
  if (!a.blend.empty()) {
    for (const auto& item : split(a.blend, ',')) {
      const auto colon = item.rfind(':');
      if (colon == std::string::npos || colon == 0) invalid("blend term '" + item + "' is not label:alpha");
      const auto label = item.substr(0, colon);
      const double alpha = parse_alpha(item.substr(colon + 1), "--blend");
      terms.push_back({lib.find(label), alpha});
      blend.push_back({{"label", label}, {"alpha", alpha}});
    }
  } else {
    if (!lib.sets.empty()) invalid("set directories need --blend to pick members");
    for (const auto& [name, ev] : lib.files) {
      terms.push_back({ev.get(), a.alpha});
      blend.push_back({{"label", name}, {"alpha", a.alpha}});
    }
  }
  evs_steer_options opt{terms.empty() ? nullptr : terms.data(), terms.size(), mask_of(a.layers),
                        a.generation_only ? 1 : 0, a.max_new};
  char* raw = nullptr;
  check(evs_steer(model.get(), a.prompt.c_str(), &opt, &raw));
  auto result = json::parse(take(raw));
  result["blend"] = blend;
  emit(a.out, result.dump(2) + "\n");
  if (!a.out.empty()) {
    Manifest m;
    m.command = "steer";
    m.config = {{"prompt", a.prompt},     {"blend", blend},       {"layers", a.layers},
                {"max_new", a.max_new},   {"generation_only", a.generation_only}};
    m.model = model_digest(model.get());
    m.outputs[fs::path(a.out).filename().string()] = digest_path(a.out);
    m.write(sidecar_for(a.out));
  }
  return 0;
}

// ---- verify -----------------------------------------------------------------

struct VerifyArgs {
  std::string model, out;
  std::vector<std::string> evs;
  double alpha = 0.1;
  std::uint64_t seed = 0;
};

int run_verify(const VerifyArgs& a) {
  if (a.evs.size() > 2) invalid("verify takes at most two --ev vectors");
  auto model = load_model(a.model);
  std::vector<Ev> owned;
  std::vector<const evs_ev*> ptrs;
  for (const auto& p : a.evs) {
    owned.push_back(load_ev(p));
    ptrs.push_back(owned.back().get());
  }
  char* raw = nullptr;
  const evs_status s = evs_verify(model.get(), ptrs.data(), ptrs.size(), a.alpha, a.seed, &raw);
  if (s != EVS_OK && s != EVS_ERR_THEOREM) check(s);
  const auto bundle = json::parse(take(raw));
  emit(a.out, bundle.dump(2) + "\n");
  for (const auto& r : bundle["reports"])
    std::cerr << (r["pass"].get<bool>() ? "PASS " : "FAIL ") << r["theorem"].get<std::string>() << "\n";
  if (!a.out.empty()) {
    Manifest m;
    m.command = "verify";
    m.config = {{"alpha", a.alpha}, {"evs", a.evs.size()}};
    m.model = model_digest(model.get());
    m.seed = a.seed;
    m.outputs[fs::path(a.out).filename().string()] = digest_path(a.out);
    m.write(sidecar_for(a.out));
  }
  if (s == EVS_ERR_THEOREM) throw Failure{EVS_ERR_THEOREM, "verification failed at alpha " + std::to_string(a.alpha)};
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string model, corpus, set, out, format = "json", metrics = "eps";
  std::vector<double> alphas{0.0, 1.0};
  std::vector<int> layers;
  bool strict = false;
  std::size_t jobs = 1, max_new = 16, tec_per_origin = 10, judge_in_flight = 4;
  std::uint64_t planted_seed = 0;
};

int run_eval(const EvalArgs& a) {
  if (a.format != "json" && a.format != "csv") invalid("--format must be json or csv");
  auto model = load_model(a.model);
  auto corpus = load_corpus(a.corpus, true, a.strict);
  auto set = load_set(a.set);
  const char* url = std::getenv("EVSTEER_JUDGE_URL");
  const char* fixtures = std::getenv("EVSTEER_FIXTURES");
  evs_eval_options opt{a.alphas.data(), a.alphas.size(), a.metrics.c_str(), mask_of(a.layers), a.jobs, a.max_new,
                       a.tec_per_origin, a.planted_seed, url, fixtures, a.judge_in_flight};
  char* js = nullptr;
  char* csv = nullptr;
  check(evs_eval(model.get(), corpus.get(), set.get(), &opt, &js, &csv));
  const std::string json_text = take(js);
  const std::string csv_text = take(csv);
  emit(a.out, a.format == "json" ? json::parse(json_text).dump(2) + "\n" : csv_text);
  if (!a.out.empty()) {
    Manifest m;
    m.command = "eval";
    m.config = {{"alphas", a.alphas},   {"metrics", a.metrics},         {"layers", a.layers},
                {"max_new", a.max_new}, {"tec_per_origin", a.tec_per_origin}, {"format", a.format},
                {"strict_eqplus", a.strict}, {"ev_set", digest_path(a.set)},
                {"judge", url ? "http" : fixtures ? "fixtures" : "none"}};
    m.model = model_digest(model.get());
    m.corpus = digest_path(a.corpus);
    m.seed = a.planted_seed;
    m.outputs[fs::path(a.out).filename().string()] = digest_path(a.out);
    m.write(sidecar_for(a.out));
  }
  return 0;
}

// ---- inspect ----------------------------------------------------------------

struct InspectArgs {
  std::vector<std::string> evs;
  std::string model, corpus, out;
  std::size_t jobs = 1;
};

int run_inspect(const InspectArgs& a) {
  char* raw = nullptr;
  Manifest m;
  m.command = "inspect";
  if (!a.evs.empty()) {
    if (!a.model.empty() || !a.corpus.empty()) invalid("use either --ev or --model with --corpus");
    std::vector<Ev> owned;
    for (const auto& p : a.evs) {
      if (fs::is_directory(p)) {
        auto set = load_set(p);
        for (const auto& e : kEmotions) owned.push_back(set_member(set.get(), e));
      } else {
        owned.push_back(load_ev(p));
      }
    }
    std::vector<const evs_ev*> ptrs;
    for (const auto& e : owned) ptrs.push_back(e.get());
    check(evs_inspect(ptrs.data(), ptrs.size(), &raw));
    json inputs = json::array();
    for (const auto& p : a.evs) inputs.push_back(digest_path(p));
    m.config = {{"ev_inputs", inputs}};
  } else {
    if (a.model.empty() || a.corpus.empty()) invalid("inspect needs --ev, or --model with --corpus");
    auto model = load_model(a.model);
    auto corpus = load_corpus(a.corpus, false, false);
    check(evs_geometry(model.get(), corpus.get(), a.jobs, &raw));
    m.config = {{"geometry", true}};
    m.model = model_digest(model.get());
    m.corpus = digest_path(a.corpus);
  }
  emit(a.out, json::parse(take(raw)).dump(2) + "\n");
  if (!a.out.empty()) {
    m.outputs[fs::path(a.out).filename().string()] = digest_path(a.out);
    m.write(sidecar_for(a.out));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Emotion-vector extraction, steering and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(evs_version()));

  InitArgs init;
  auto* c_init = app.add_subcommand("init", "Write a model and planted corpora into a directory");
  c_init->add_option("--kind", init.kind, "desk, stub or planted")->check(CLI::IsMember({"desk", "stub", "planted"}));
  c_init->add_option("--seed", init.seed);
  c_init->add_option("--per-emotion", init.per_emotion, "extraction records per emotion")->check(CLI::PositiveNumber);
  c_init->add_option("--out", init.out)->required();

  ExtractArgs ex;
  auto* c_ex = app.add_subcommand("extract", "Extract one emotion vector or a full set");
  c_ex->add_option("--model", ex.model)->required()->check(CLI::ExistingFile);
  c_ex->add_option("--corpus", ex.corpus)->required()->check(CLI::ExistingFile);
  c_ex->add_option("--emotion", ex.emotion, "omit to write a set directory")->check(CLI::IsMember(kEmotions));
  c_ex->add_option("--out", ex.out)->required();
  c_ex->add_option("--jobs", ex.jobs)->check(CLI::PositiveNumber);

  SteerArgs st;
  auto* c_st = app.add_subcommand("steer", "Generate with a blend of emotion vectors");
  c_st->add_option("--model", st.model)->required()->check(CLI::ExistingFile);
  c_st->add_option("--prompt", st.prompt)->required();
  c_st->add_option("--ev", st.evs, "vector file or set directory")->check(CLI::ExistingPath);
  c_st->add_option("--blend", st.blend, "label:alpha,... summed; 'base' selects the base vector");
  c_st->add_option("--alpha", st.alpha, "scale for --ev files without --blend");
  c_st->add_option("--layers", st.layers)->delimiter(',');
  c_st->add_flag("--generation-only", st.generation_only, "leave prompt positions unsteered");
  c_st->add_option("--max-new", st.max_new);
  c_st->add_option("--out", st.out);

  VerifyArgs ve;
  auto* c_ve = app.add_subcommand("verify", "Run the theory checks; exit 3 if any fails");
  c_ve->add_option("--model", ve.model)->required()->check(CLI::ExistingFile);
  c_ve->add_option("--ev", ve.evs, "up to two vector files; seeded random vectors otherwise")
      ->check(CLI::ExistingFile);
  c_ve->add_option("--alpha", ve.alpha);
  c_ve->add_option("--seed", ve.seed);
  c_ve->add_option("--out", ve.out);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score steered generations over an EQ+ corpus");
  c_ev->add_option("--model", ev.model)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--corpus", ev.corpus)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--ev", ev.set, "set directory")->required()->check(CLI::ExistingDirectory);
  c_ev->add_option("--alpha", ev.alphas)->delimiter(',');
  c_ev->add_option("--metrics", ev.metrics, "comma list of eps, tec, ppl, ta, eas");
  c_ev->add_option("--layers", ev.layers)->delimiter(',');
  c_ev->add_option("--format", ev.format)->check(CLI::IsMember({"json", "csv"}));
  c_ev->add_flag("--strict-eqplus", ev.strict, "require the 5x50 + 150 composition");
  c_ev->add_option("--jobs", ev.jobs)->check(CLI::PositiveNumber);
  c_ev->add_option("--max-new", ev.max_new)->check(CLI::PositiveNumber);
  c_ev->add_option("--tec-per-origin", ev.tec_per_origin)->check(CLI::PositiveNumber);
  c_ev->add_option("--planted-seed", ev.planted_seed, "marker spec used by the lexicon classifiers");
  c_ev->add_option("--judge-in-flight", ev.judge_in_flight)->check(CLI::PositiveNumber);
  c_ev->add_option("--out", ev.out);

  InspectArgs in;
  auto* c_in = app.add_subcommand("inspect", "Cosine table and PCA of vectors, or per-query geometry");
  c_in->add_option("--ev", in.evs, "vector files or set directories")->check(CLI::ExistingPath);
  c_in->add_option("--model", in.model)->check(CLI::ExistingFile);
  c_in->add_option("--corpus", in.corpus)->check(CLI::ExistingFile);
  c_in->add_option("--jobs", in.jobs)->check(CLI::PositiveNumber);
  c_in->add_option("--out", in.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : EVS_ERR_VALIDATION;
  }

  try {
    if (*c_init) return run_init(init);
    if (*c_ex) return run_extract(ex);
    if (*c_st) return run_steer(st);
    if (*c_ve) return run_verify(ve);
    if (*c_ev) return run_eval(ev);
    if (*c_in) return run_inspect(in);
  } catch (const Failure& f) {
    std::cerr << "evctl: " << f.message << "\n";
    return f.code;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "evctl: " << e.what() << "\n";
    return EVS_ERR_RUNTIME;
  } catch (const std::exception& e) {
    std::cerr << "evctl: " << e.what() << "\n";
    return EVS_ERR_RUNTIME;
  }
  return EVS_ERR_VALIDATION;
}
