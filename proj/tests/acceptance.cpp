// Acceptance suite: one PASS/FAIL line per criterion, checked against the
// stated tolerances from the raw measurements rather than the report flags
// alone. Exit status is the number of failed criteria (capped at 1).

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "evsteer/corpus.hpp"
#include "evsteer/error.hpp"
#include "evsteer/evalkit.hpp"
#include "evsteer/evcore.hpp"
#include "evsteer/io.hpp"
#include "evsteer/nanoformer.hpp"
#include "evsteer/pipeline.hpp"
#include "evsteer/steer.hpp"
#include "evsteer/theorylab.hpp"

using namespace evsteer;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;  // runtime limit; 0 means none stated
  std::function<Outcome()> run;
};

bool within_relative(double got, double want, double rel) {
  return std::abs(got - want) <= rel * std::abs(want);
}

std::vector<nanoformer::TokenId> tokens(std::string_view text) { return pipeline::prompt_tokens(text); }

const char* kPrompt = "how are you today";

std::vector<double> numbers(const nlohmann::json& j) { return j.get<std::vector<double>>(); }

std::string fmt(const std::vector<double>& v) {
  std::ostringstream s;
  s.precision(4);
  s << "[";
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? ", " : "") << v[i];
  s << "]";
  return s.str();
}

nanoformer::NanoModel desk() { return nanoformer::build_model({}); }

nanoformer::NanoModel linear_stub() {
  nanoformer::ModelConfig c;
  c.kind = nanoformer::ModelKind::linear_stub;
  return nanoformer::build_model(c);
}

evcore::EmotionVector test_ev(const nanoformer::NanoModel& m, std::uint64_t seed) {
  return theorylab::random_vector(m.config, seed, "random");
}

// ---- theory checks ----------------------------------------------------------

Outcome first_order() {
  const std::vector<double> grid{0.1, 0.05, 0.025};
  const auto toks = tokens(kPrompt);
  const auto m = desk();
  const auto rep = theorylab::check_first_order(m, toks, test_ev(m, 5), grid);
  const auto ratios = numbers(rep.measurements["ratios"]);
  bool ok = rep.pass && ratios.size() == 2;
  for (double r : ratios) ok = ok && r >= 0.15 && r <= 0.45;

  const auto s = linear_stub();
  const auto srep = theorylab::check_first_order(s, toks, test_ev(s, 5), grid);
  double worst = 0.0;
  for (double r : numbers(srep.measurements["residual"])) worst = std::max(worst, r);
  ok = ok && worst <= 1e-9;
  return {ok, "desk ratios " + fmt(ratios) + " in [0.15, 0.45]; stub max residual " + fmt({worst}) + " <= 1e-9"};
}

Outcome monotonic_gain() {
  const auto m = desk();
  const auto toks = tokens(kPrompt);
  std::vector<double> grid;
  for (int i = 1; i <= 10; ++i) grid.push_back(0.01 * i);
  const auto stack = theorylab::fd_jacobians(m, toks);
  const auto rep = theorylab::check_monotonic_gain(m, toks, test_ev(m, 5), grid, stack);
  const auto dg = numbers(rep.measurements["delta_g"]);
  bool ok = rep.pass && dg.size() == 10 && dg[0] > 0.0;
  for (std::size_t i = 1; i < dg.size(); ++i) ok = ok && dg[i] > dg[i - 1];
  return {ok, "10 points, dg from " + fmt({dg.front()}) + " to " + fmt({dg.back()}) + ", strictly increasing"};
}

Outcome fisher() {
  const auto sph = theorylab::fisher_check(theorylab::fisher_spec(16, false), 10000, 0);
  const auto an = theorylab::fisher_check(theorylab::fisher_spec(16, true), 10000, 0);
  const double sph_raw = std::abs(sph.measurements["raw_cosine"].get<double>());
  const double an_raw = std::abs(an.measurements["raw_cosine"].get<double>());
  const double an_white = std::abs(an.measurements["whitened_cosine"].get<double>());
  const bool ok = sph.pass && an.pass && sph_raw >= 0.99 && an_raw < 0.99 && an_white >= 0.99;
  return {ok, "spherical |cos| " + fmt({sph_raw}) + " >= 0.99; anisotropic raw " + fmt({an_raw}) +
                  " < 0.99, whitened " + fmt({an_white}) + " >= 0.99"};
}

Outcome semantic_bound() {
  const auto m = desk();
  const auto toks = tokens(kPrompt);
  const auto stack = theorylab::fd_jacobians(m, toks);
  theorylab::SemanticOptions opt;  // alpha 0.02, 20 samples, 5% slack, 10x separation
  const auto rep = theorylab::check_semantic_bound(m, toks, test_ev(m, 5), opt, stack);
  const auto ds = numbers(rep.measurements["delta_s_random"]);
  const auto bound = numbers(rep.measurements["bound_random"]);
  bool ok = rep.pass && ds.size() == 20 && bound.size() == 20;
  double worst = 0.0;
  for (std::size_t i = 0; i < ds.size() && i < bound.size(); ++i) {
    ok = ok && std::abs(ds[i]) <= 1.05 * bound[i];
    worst = std::max(worst, std::abs(ds[i]) / bound[i]);
  }
  const double aligned = std::abs(rep.measurements["delta_s_aligned"].get<double>());
  const double orth = rep.measurements["max_delta_s_orthogonal"].get<double>();
  ok = ok && aligned >= 10.0 * orth;
  return {ok, "max |ds|/bound " + fmt({worst}) + " <= 1.05 over 20 u; aligned/orthogonal " +
                  fmt({orth > 0 ? aligned / orth : INFINITY}) + " >= 10"};
}

Outcome additivity() {
  const auto m = desk();
  const auto toks = tokens(kPrompt);
  const auto stack = theorylab::fd_jacobians(m, toks);
  const std::vector<std::pair<double, double>> pairs{{0.1, 0.1}, {0.05, 0.05}, {0.025, 0.025}};
  const std::vector<double> gains{0.02, 0.04, 0.08};
  const auto rep = theorylab::check_additivity(m, toks, test_ev(m, 5), test_ev(m, 6), pairs, gains, stack);
  const auto ratios = numbers(rep.measurements["ratios"]);
  const auto slopes = numbers(rep.measurements["delta_g_over_alpha"]);
  bool ok = rep.pass && ratios.size() == 2 && slopes.size() == 3;
  for (double r : ratios) ok = ok && r >= 0.15 && r <= 0.45;
  const auto [lo, hi] = std::minmax_element(slopes.begin(), slopes.end());
  const double spread = (*hi - *lo) / std::abs(*lo);
  ok = ok && spread <= 0.05;
  return {ok, "defect ratios " + fmt(ratios) + " in [0.15, 0.45]; dg/alpha spread " + fmt({spread}) + " <= 0.05"};
}

// ---- steering no-op ----------------------------------------------------------

template <typename T>
bool same_bits(const numkit::BasicMat<T>& a, const numkit::BasicMat<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.flat().data(), b.flat().data(), a.flat().size() * sizeof(T)) == 0;
}

template <typename T>
bool same_trace(const nanoformer::BasicTrace<T>& a, const nanoformer::BasicTrace<T>& b) {
  if (a.taps.size() != b.taps.size() || !same_bits(a.logits, b.logits)) return false;
  for (std::size_t l = 0; l < a.taps.size(); ++l)
    if (!same_bits(a.taps[l], b.taps[l])) return false;
  return true;
}

Outcome steering_noop() {
  const auto planted = pipeline::planted_setup(0, 8);
  const auto set = pipeline::extract_set(planted.model, planted.extraction);
  const auto d = desk();
  const auto rnd = test_ev(d, 5);
  std::size_t compared = 0;
  bool ok = true;
  auto compare = [&](const nanoformer::NanoModel& m, const evcore::EmotionVector& ev) {
    const auto toks = tokens("answer with joy: how was the day?");
    const steer::SteeringConfig none;
    std::vector<steer::SteeringConfig> noops;
    noops.push_back({{{&ev, 0.0}}, std::nullopt, steer::ApplyDuring::prompt_and_generation});
    noops.push_back({{{&ev, 1.0}, {&ev, -1.0}}, std::nullopt, steer::ApplyDuring::prompt_and_generation});
    noops.push_back({{{&ev, 0.0}}, std::vector<int>{0, 2}, steer::ApplyDuring::generation_only});
    noops.push_back({{{&ev, 2.5}, {&ev, -1.5}, {&ev, -1.0}}, std::nullopt, steer::ApplyDuring::generation_only});
    const auto base32 = steer::steered_forward<float>(m, toks, none);
    const auto base64 = steer::steered_forward<double>(m, toks, none);
    const auto base_gen = steer::generate(m, toks, none, 16);
    for (const auto& cfg : noops) {
      ok = ok && same_trace(base32, steer::steered_forward<float>(m, toks, cfg));
      ok = ok && same_trace(base64, steer::steered_forward<double>(m, toks, cfg));
      ok = ok && base_gen == steer::generate(m, toks, cfg, 16);
      ++compared;
    }
  };
  compare(planted.model, set.get("joy"));
  compare(d, rnd);
  return {ok, std::to_string(compared) + " alpha=0 / cancelling configurations, float and double traces and "
                                         "generations bitwise equal"};
}

// ---- planted pipeline --------------------------------------------------------

Outcome planted_direction() {
  const auto s = pipeline::planted_setup(0, 20);
  const auto set = pipeline::extract_set(s.model, s.extraction);
  const auto eps_cls = evalkit::LexiconClassifier::planted_eps(s.spec);
  const pipeline::GenerationOptions gen{16, 1};
  std::vector<double> eps;
  for (double a : {-1.0, 0.0, 1.0})
    eps.push_back(pipeline::eps_report(s.model, s.eqplus, {&set.base(), a, std::nullopt}, eps_cls, gen).aggregate);
  bool ok = eps[2] > eps[1] && eps[0] < eps[1];

  const auto tec_cls = evalkit::LexiconClassifier::planted_emotions(s.spec);
  const std::vector<double> alphas{0.0, 1.0, 2.0};
  const auto mats = pipeline::tec_matrices(s.model, s.eqplus, set, alphas, tec_cls, 10, gen);
  std::size_t cells = 0, rising = 0;
  for (const auto& m : mats) {
    for (const auto& row : m.cells) {
      ++cells;
      bool mono = row.size() == 3;
      for (std::size_t j = 1; mono && j < row.size(); ++j)
        mono = row[j].has_value() && row[j - 1].has_value() && *row[j] >= *row[j - 1];
      if (mono) ++rising;
    }
  }
  ok = ok && mats.size() == 5 && cells == 30 && rising == cells;
  return {ok, "EPS(-1,0,1) = " + fmt(eps) + "; TEC rows non-decreasing over 0x,1x,2x: " + std::to_string(rising) +
                  "/" + std::to_string(cells)};
}

Outcome ev_geometry() {
  const auto s = pipeline::planted_setup(0, 20);
  const auto per = pipeline::per_query_vectors(s.model, s.extraction);
  bool ok = per.size() == 5;
  for (const auto& [e, v] : per) ok = ok && v.size() == 20;
  const auto stats = evcore::ev_stats(per);
  ok = ok && stats.within_mean < stats.between_mean;
  return {ok, "mean cosine distance within " + fmt({stats.within_mean}) + " < between " + fmt({stats.between_mean})};
}

// ---- metric formulas ---------------------------------------------------------

class ConstantClassifier final : public evalkit::EmotionClassifier {
 public:
  explicit ConstantClassifier(double p) : p_(p) {}
  const std::vector<std::string>& labels() const override { return labels_; }
  std::vector<double> classify(std::string_view) const override { return std::vector<double>(labels_.size(), p_); }

 private:
  double p_;
  std::vector<std::string> labels_{corpus::kEmotions.begin(), corpus::kEmotions.end()};
};

Outcome metric_oracles() {
  bool ok = true;
  std::ostringstream d;
  // Uniform logits, both directly and through a model whose readout is zero.
  auto m = desk();
  std::fill(m.weights.unembed.flat().begin(), m.weights.unembed.flat().end(), 0.0f);
  std::fill(m.weights.unembed_bias.begin(), m.weights.unembed_bias.end(), 0.0f);
  const auto toks = tokens("the weather is mild");
  const double v = static_cast<double>(m.config.vocab);
  const double ppl_model = nanoformer::perplexity(m, toks);
  const std::vector<nanoformer::TokenId> small{1, 4, 5, 6, 2};
  const double ppl_logits = nanoformer::perplexity_from_logits(numkit::Mat(small.size(), 7), small);
  ok = ok && within_relative(ppl_model, v, 1e-9) && within_relative(ppl_logits, 7.0, 1e-9);
  d << "ppl " << ppl_model << " (V=" << v << ")";

  std::map<std::string, int> all;
  for (const auto& e : evalkit::kEasEmotions) all[e] = 100;
  const double eas_all = evalkit::eas_score(all);
  const double eas_joy = evalkit::eas_score({{"joy", 50}});
  ok = ok && within_relative(eas_all, 6.0, 1e-9) && within_relative(eas_joy, 0.25, 1e-9);
  d << "; EAS " << eas_all << ", " << eas_joy;

  double worst = 0.0;
  const std::vector<std::string> responses{"one", "two", "three", "", "five"};
  for (double p : {0.0, 0.1, 0.4, 0.5, 0.9, 1.0}) {
    const double got = evalkit::tec_score(responses, "joy", ConstantClassifier(p));
    worst = std::max(worst, std::abs(got - p) / std::max(p, 1e-300));
    ok = ok && (p == 0.0 ? got == 0.0 : within_relative(got, p, 1e-9));
  }
  d << "; TEC constant-p max rel err " << worst;
  return {ok, d.str()};
}

// ---- formats -----------------------------------------------------------------

std::vector<std::uint8_t> file_bytes(const fs::path& p) { return io::read_file(p.string()); }

Outcome format_roundtrips() {
  const auto dir = fs::temp_directory_path() / ("evsteer_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  bool ok = true;
  std::ostringstream d;

  for (const auto& m : {desk(), linear_stub(), pipeline::planted_setup(0, 2).model}) {
    const auto path = (dir / "m.nfmt").string();
    nanoformer::save_model(m, path);
    const auto bytes = file_bytes(path);
    const auto back = nanoformer::load_model(path);
    nanoformer::save_model(back, (dir / "m2.nfmt").string());
    ok = ok && bytes == nanoformer::serialize(m) && bytes == file_bytes(dir / "m2.nfmt") &&
         nanoformer::model_digest(back) == nanoformer::model_digest(m);
  }
  d << "NFMT x3";

  const auto s = pipeline::planted_setup(0, 4);
  const auto set = pipeline::extract_set(s.model, s.extraction);
  for (const auto& ev : {set.get("joy"), set.base(), test_ev(s.model, 9)}) {
    const auto path = (dir / "v.evec").string();
    evcore::save_ev(ev, path);
    const auto bytes = file_bytes(path);
    const auto back = evcore::load_ev(path);
    evcore::save_ev(back, (dir / "v2.evec").string());
    ok = ok && back == ev && bytes == evcore::serialize(ev) && bytes == file_bytes(dir / "v2.evec");
  }
  d << ", EVEC x3";

  const auto text = corpus::to_jsonl(s.eqplus);
  const auto parsed = corpus::parse_corpus(text, corpus::CorpusKind::eq_plus, true);
  ok = ok && parsed.size() == 400 && corpus::to_jsonl(parsed) == text;
  std::size_t rejected = 0;
  auto expect_reject = [&](std::vector<corpus::PromptRecord> recs) {
    try {
      (void)corpus::parse_corpus(corpus::to_jsonl(recs), corpus::CorpusKind::eq_plus, true);
    } catch (const ValidationError&) {
      ++rejected;
    }
  };
  auto minus_one = s.eqplus;
  minus_one.pop_back();
  expect_reject(minus_one);
  auto swapped = s.eqplus;
  swapped.back().emotion = "joy";
  expect_reject(swapped);
  auto extra = s.eqplus;
  extra.push_back(extra.front());
  extra.back().id = "extra";
  expect_reject(extra);
  ok = ok && rejected == 3;
  d << ", EQ+ strict accepts 400 and rejects " << rejected << "/3 off-composition corpora";

  fs::remove_all(dir);
  return {ok, d.str()};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"first_order_expansion", 60, first_order},
      {"monotonic_emotion_gain", 30, monotonic_gain},
      {"fisher_alignment", 10, fisher},
      {"semantic_bound", 60, semantic_bound},
      {"blend_additivity", 60, additivity},
      {"steering_noop_bitwise", 0, steering_noop},
      {"planted_direction_of_effect", 300, planted_direction},
      {"ev_geometry", 300, ev_geometry},
      {"metric_formula_oracles", 0, metric_oracles},
      {"format_roundtrips", 0, format_roundtrips},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.budget_s <= 0 || secs < c.budget_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failed;
    std::printf("%s %-28s %7.2fs%s  %s%s\n", pass ? "PASS" : "FAIL", c.name.c_str(), secs,
                c.budget_s > 0 ? (" < " + std::to_string(static_cast<int>(c.budget_s)) + "s").c_str() : "",
                o.detail.c_str(), in_time ? "" : " (over time budget)");
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
