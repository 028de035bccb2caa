#include "evsteer/evcore.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "evsteer/error.hpp"
#include "evsteer/io.hpp"

namespace evsteer::evcore {

using numkit::Vec;
using numkit::Vec64;

namespace {

constexpr std::string_view kMagic = "EVEC";
constexpr std::uint32_t kVersion = 1;

double l2(const Vec& v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

std::string format_alpha(double a) {
  std::ostringstream os;
  os << a;
  return os.str();
}

}  // namespace

EmotionVector::EmotionVector(std::string emotion, std::string model_id, std::vector<Vec> layers,
                             std::uint32_t n_queries, std::int64_t created_unix)
    : emotion_(std::move(emotion)),
      model_id_(std::move(model_id)),
      layers_(std::move(layers)),
      n_queries_(n_queries),
      created_unix_(created_unix) {
  if (layers_.empty()) throw ValidationError("emotion vector needs at least one layer");
  const std::size_t d = layers_.front().size();
  if (d == 0) throw ValidationError("emotion vector layers must be non-empty");
  norms_.reserve(layers_.size());
  for (const auto& v : layers_) {
    if (v.size() != d) throw ValidationError("emotion vector layers have unequal widths");
    for (float x : v) {
      if (!std::isfinite(x)) throw ValidationError("emotion vector has a non-finite component");
    }
    norms_.push_back(l2(v));
  }
}

Vec64 EmotionVector::concatenated() const {
  Vec64 out;
  out.reserve(layers() * width());
  for (const auto& v : layers_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

bool EmotionVector::is_zero() const {
  return std::all_of(norms_.begin(), norms_.end(), [](double n) { return n == 0.0; });
}

void EmotionVector::check_compatible(const nanoformer::ModelConfig& config) const {
  if (layers() != static_cast<std::size_t>(config.layers)) {
    throw ValidationError("emotion vector '" + emotion_ + "' has " + std::to_string(layers()) +
                          " layers, model has " + std::to_string(config.layers));
  }
  if (width() != static_cast<std::size_t>(config.d_model)) {
    throw ValidationError("emotion vector '" + emotion_ + "' has width " + std::to_string(width()) +
                          ", model has d=" + std::to_string(config.d_model));
  }
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Vec> pooled(const TraceView& v, std::size_t rows_limit) {
  if (v.trace == nullptr) throw ValidationError("emotional_shift: null trace");
  std::vector<Vec> out;
  out.reserve(v.trace->taps.size());
  for (const auto& tap : v.trace->taps) {
    const std::size_t end = std::min(v.end_row.value_or(tap.rows()), tap.rows());
    if (v.first_row >= end) throw ValidationError("emotional_shift: no rows to pool");
    const std::size_t stop = v.first_row + std::min(end - v.first_row, rows_limit);
    numkit::Mat rows(stop - v.first_row, tap.cols());
    for (std::size_t t = v.first_row; t < stop; ++t) {
      std::copy(tap.row(t).begin(), tap.row(t).end(), rows.row(t - v.first_row).begin());
    }
    out.push_back(numkit::mean_rows(rows));
  }
  return out;
}

std::size_t pooled_rows(const TraceView& v) {
  if (v.trace == nullptr || v.trace->taps.empty()) return 0;
  const std::size_t rows = v.trace->taps.front().rows();
  const std::size_t end = std::min(v.end_row.value_or(rows), rows);
  return end > v.first_row ? end - v.first_row : 0;
}

}  // namespace

ShiftSample emotional_shift(std::uint64_t query_id, const TraceView& emotion, const TraceView& neutral,
                            const PoolingOptions& options) {
  if (emotion.trace == nullptr || neutral.trace == nullptr) throw ValidationError("emotional_shift: null trace");
  if (!emotion.model_id.empty() && !neutral.model_id.empty() && emotion.model_id != neutral.model_id) {
    throw ValidationError("emotional_shift: traces come from different models");
  }
  if (emotion.trace->taps.size() != neutral.trace->taps.size()) {
    throw ValidationError("emotional_shift: layer count mismatch");
  }
  if (emotion.trace->taps.empty()) throw ValidationError("emotional_shift: traces have no layers");
  std::size_t limit = static_cast<std::size_t>(-1);
  if (options.truncate_to_min) limit = std::min(pooled_rows(emotion), pooled_rows(neutral));
  const auto e = pooled(emotion, limit);
  const auto n = pooled(neutral, limit);
  ShiftSample s{query_id, {}};
  s.layers.reserve(e.size());
  for (std::size_t l = 0; l < e.size(); ++l) {
    if (e[l].size() != n[l].size()) throw ValidationError("emotional_shift: width mismatch at layer " + std::to_string(l));
    Vec diff(e[l].size());
    for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = e[l][j] - n[l][j];
    s.layers.push_back(std::move(diff));
  }
  return s;
}

ShiftSample emotional_shift(const nanoformer::TapTrace& emotion, const nanoformer::TapTrace& neutral) {
  return emotional_shift(0, TraceView{&emotion, 0, std::nullopt, {}}, TraceView{&neutral, 0, std::nullopt, {}});
}

EmotionVector build_emotion_vector(std::vector<ShiftSample> shifts, std::string emotion, std::string model_id) {
  if (shifts.empty()) throw ValidationError("build_emotion_vector: no shift samples for '" + emotion + "'");
  std::stable_sort(shifts.begin(), shifts.end(),
                   [](const ShiftSample& a, const ShiftSample& b) { return a.query_id < b.query_id; });
  const std::size_t L = shifts.front().layers.size();
  if (L == 0) throw ValidationError("build_emotion_vector: shift has no layers");
  const std::size_t d = shifts.front().layers.front().size();
  std::vector<std::vector<double>> acc(L, std::vector<double>(d, 0.0));
  for (const auto& s : shifts) {
    if (s.layers.size() != L) throw ValidationError("build_emotion_vector: layer count mismatch");
    for (std::size_t l = 0; l < L; ++l) {
      if (s.layers[l].size() != d) throw ValidationError("build_emotion_vector: width mismatch");
      for (std::size_t j = 0; j < d; ++j) acc[l][j] += static_cast<double>(s.layers[l][j]);
    }
  }
  const double n = static_cast<double>(shifts.size());
  std::vector<Vec> layers(L, Vec(d));
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t j = 0; j < d; ++j) layers[l][j] = static_cast<float>(acc[l][j] / n);
  }
  return {std::move(emotion), std::move(model_id), std::move(layers), static_cast<std::uint32_t>(shifts.size())};
}

EmotionVector build_base_vector(const std::map<std::string, EmotionVector>& set) {
  if (set.empty()) throw ValidationError("build_base_vector: empty emotion set");
  const EmotionVector& first = set.begin()->second;
  std::vector<std::vector<double>> acc(first.layers(), std::vector<double>(first.width(), 0.0));
  std::uint32_t total_queries = 0;
  for (const auto& [name, ev] : set) {
    if (!ev.same_shape(first)) throw ValidationError("build_base_vector: member '" + name + "' has a different shape");
    if (ev.model_id() != first.model_id()) {
      throw ValidationError("build_base_vector: member '" + name + "' comes from a different model");
    }
    for (std::size_t l = 0; l < ev.layers(); ++l) {
      for (std::size_t j = 0; j < ev.width(); ++j) acc[l][j] += static_cast<double>(ev.layer(l)[j]);
    }
    total_queries += ev.n_queries();
  }
  const double k = static_cast<double>(set.size());
  std::vector<Vec> layers(first.layers(), Vec(first.width()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t j = 0; j < layers[l].size(); ++j) layers[l][j] = static_cast<float>(acc[l][j] / k);
  }
  return {"base", first.model_id(), std::move(layers), total_queries};
}

EmotionVector combine(const std::vector<std::pair<const EmotionVector*, double>>& weighted) {
  if (weighted.empty()) throw ValidationError("combine: empty blend");
  const EmotionVector& first = *weighted.front().first;
  std::vector<std::vector<double>> acc(first.layers(), std::vector<double>(first.width(), 0.0));
  std::string label = "blend(";
  for (std::size_t k = 0; k < weighted.size(); ++k) {
    const auto& [ev, alpha] = weighted[k];
    if (ev == nullptr) throw ValidationError("combine: null emotion vector");
    if (!ev->same_shape(first)) throw ValidationError("combine: shape mismatch for '" + ev->emotion() + "'");
    if (!std::isfinite(alpha)) throw ValidationError("combine: non-finite weight");
    for (std::size_t l = 0; l < ev->layers(); ++l) {
      for (std::size_t j = 0; j < ev->width(); ++j) acc[l][j] += alpha * static_cast<double>(ev->layer(l)[j]);
    }
    if (k > 0) label += ",";
    label += ev->emotion() + ":" + format_alpha(alpha);
  }
  label += ")";
  std::vector<Vec> layers(first.layers(), Vec(first.width()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t j = 0; j < layers[l].size(); ++j) layers[l][j] = static_cast<float>(acc[l][j]);
  }
  return {std::move(label), first.model_id(), std::move(layers), first.n_queries()};
}

EVSet::EVSet(std::map<std::string, EmotionVector> members)
    : members_(std::move(members)), base_(build_base_vector(members_)) {}

EVSet::EVSet(std::map<std::string, EmotionVector> members, EmotionVector base)
    : members_(std::move(members)), base_(std::move(base)) {
  if (members_.empty()) throw ValidationError("EV set is empty");
  const auto expected = build_base_vector(members_);
  if (!base_.same_shape(expected)) throw ValidationError("EV set base has a different shape from its members");
  for (std::size_t l = 0; l < expected.layers(); ++l) {
    for (std::size_t j = 0; j < expected.width(); ++j) {
      if (std::abs(expected.layer(l)[j] - base_.layer(l)[j]) > 1e-6) {
        throw ValidationError("EV set base is not the mean of its members");
      }
    }
  }
}

const EmotionVector& EVSet::get(const std::string& emotion) const {
  if (emotion == "base") return base_;
  const auto it = members_.find(emotion);
  if (it == members_.end()) throw ValidationError("no emotion vector for '" + emotion + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// EVEC

std::vector<std::uint8_t> serialize(const EmotionVector& ev) {
  const nlohmann::json header{{"emotion", ev.emotion()},
                              {"model_id", ev.model_id()},
                              {"L", ev.layers()},
                              {"d", ev.width()},
                              {"n_queries", ev.n_queries()},
                              {"created_unix", ev.created_unix()}};
  const std::string text = header.dump();
  io::ByteWriter w;
  w.text(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  for (const auto& layer : ev.all_layers()) w.f32s(layer);
  return std::move(w.buffer());
}

EmotionVector deserialize(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kMagic);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported EVEC version " + std::to_string(v), version_at);
  const std::uint32_t header_len = r.u32();
  const std::size_t header_at = r.offset();
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(r.text(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EVEC header is not valid JSON: ") + e.what(), header_at);
  }
  std::size_t L = 0, d = 0;
  std::string emotion, model_id;
  std::uint32_t n_queries = 0;
  std::int64_t created = 0;
  try {
    emotion = h.at("emotion").get<std::string>();
    model_id = h.at("model_id").get<std::string>();
    L = h.at("L").get<std::size_t>();
    d = h.at("d").get<std::size_t>();
    n_queries = h.at("n_queries").get<std::uint32_t>();
    created = h.at("created_unix").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EVEC header field error: ") + e.what(), header_at);
  }
  if (L == 0 || d == 0) throw FormatError("EVEC header declares an empty vector", header_at);
  if (r.remaining() < L * d * 4) throw FormatError("truncated EVEC payload", r.offset());
  std::vector<Vec> layers(L, Vec(d));
  for (auto& layer : layers) {
    for (float& v : layer) {
      const std::size_t at = r.offset();
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError("non-finite EVEC component", at);
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after EVEC payload", r.offset());
  return {std::move(emotion), std::move(model_id), std::move(layers), n_queries, created};
}

void save_ev(const EmotionVector& ev, const std::string& path) { io::write_file(path, serialize(ev)); }

EmotionVector load_ev(const std::string& path) { return deserialize(io::read_file(path)); }

EmotionVector load_ev(const std::string& path, const nanoformer::ModelConfig& model) {
  auto ev = load_ev(path);
  ev.check_compatible(model);
  return ev;
}

void save_set(const EVSet& set, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, ev] : set.members()) save_ev(ev, dir + "/" + name + ".evec");
  save_ev(set.base(), dir + "/base.evec");
}

EVSet load_set(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ValidationError("EV set directory not found: " + dir);
  std::map<std::string, EmotionVector> members;
  std::optional<EmotionVector> base;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".evec") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& p : files) {
    auto ev = load_ev(p.string());
    if (p.stem() == "base") {
      base = std::move(ev);
    } else {
      const std::string key = ev.emotion();
      members.emplace(key, std::move(ev));
    }
  }
  if (members.empty()) throw ValidationError("EV set directory has no member vectors: " + dir);
  if (base) return EVSet(std::move(members), std::move(*base));
  return EVSet(std::move(members));
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

struct Sample {
  std::string emotion;
  std::size_t index;
  Vec64 v;
};

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  for (double x : xs) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(xs.size()));
}

}  // namespace

Pca2 pca2(const std::vector<Vec64>& rows) {
  Pca2 out;
  if (rows.size() < 2) {
    out.coords.assign(rows.size(), {0.0, 0.0});
    return out;
  }
  const std::size_t dim = rows.front().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) throw ValidationError("pca2: rows have different widths");
    for (std::size_t j = 0; j < dim; ++j) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  X.rowwise() -= X.colwise().mean();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(X, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  Eigen::MatrixXd V = svd.matrixV();
  const double total = sv.squaredNorm();
  const Eigen::Index k = std::min<Eigen::Index>(2, sv.size());
  for (Eigen::Index c = 0; c < k; ++c) {
    // Sign convention: largest-magnitude loading is positive.
    Eigen::Index arg = 0;
    V.col(c).cwiseAbs().maxCoeff(&arg);
    if (V(arg, c) < 0) V.col(c) *= -1.0;
    out.explained_variance[c] = total > 0.0 ? sv(c) * sv(c) / total : 0.0;
  }
  const Eigen::MatrixXd coords = X * V.leftCols(k);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out.coords.emplace_back(coords(r, 0), k > 1 ? coords(r, 1) : 0.0);
  }
  return out;
}

nlohmann::json inspect(const std::vector<EmotionVector>& evs) {
  if (evs.empty()) throw ValidationError("inspect needs at least one vector");
  std::vector<Vec64> rows;
  nlohmann::json vectors = nlohmann::json::array();
  for (const auto& ev : evs) {
    if (!ev.same_shape(evs.front())) throw ValidationError("inspect: vectors have different shapes");
    rows.push_back(ev.concatenated());
    vectors.push_back({{"emotion", ev.emotion()},
                       {"model_id", ev.model_id()},
                       {"n_queries", ev.n_queries()},
                       {"norms", ev.norms()},
                       {"norm", numkit::norm2(rows.back())}});
  }
  nlohmann::json table = nlohmann::json::array();
  for (const auto& a : rows) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& b : rows) {
      const double na = numkit::norm2(a), nb = numkit::norm2(b);
      row.push_back(na == 0.0 || nb == 0.0 ? nlohmann::json(nullptr) : nlohmann::json(numkit::cosine(a, b)));
    }
    table.push_back(std::move(row));
  }
  const auto proj = pca2(rows);
  nlohmann::json pca = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    pca.push_back({{"emotion", evs[i].emotion()}, {"x", proj.coords[i].first}, {"y", proj.coords[i].second}});
  }
  return {{"vectors", vectors},
          {"cosine", table},
          {"pca", pca},
          {"explained_variance", {proj.explained_variance[0], proj.explained_variance[1]}}};
}

GeometryStats ev_stats(const std::map<std::string, std::vector<EmotionVector>>& samples) {
  if (samples.size() < 2) throw ValidationError("ev_stats needs at least two emotions");
  GeometryStats out;
  std::vector<Sample> kept;
  std::size_t dim = 0;
  for (const auto& [emotion, list] : samples) {
    if (list.size() < 2) throw ValidationError("ev_stats needs at least two samples for '" + emotion + "'");
    for (std::size_t i = 0; i < list.size(); ++i) {
      auto v = list[i].concatenated();
      if (dim == 0) dim = v.size();
      if (v.size() != dim) throw ValidationError("ev_stats: samples have different shapes");
      if (numkit::norm2(v) == 0.0) {
        out.excluded.push_back(emotion + "#" + std::to_string(i));
        continue;
      }
      kept.push_back({emotion, i, std::move(v)});
    }
  }

  std::map<std::string, std::vector<double>> within;
  std::map<std::string, std::vector<double>> between;
  std::vector<double> all_within, all_between;
  for (std::size_t a = 0; a < kept.size(); ++a) {
    for (std::size_t b = a + 1; b < kept.size(); ++b) {
      const double dist = 1.0 - numkit::cosine(kept[a].v, kept[b].v);
      if (kept[a].emotion == kept[b].emotion) {
        within[kept[a].emotion].push_back(dist);
        all_within.push_back(dist);
      } else {
        const auto& lo = std::min(kept[a].emotion, kept[b].emotion);
        const auto& hi = std::max(kept[a].emotion, kept[b].emotion);
        between[lo + "|" + hi].push_back(dist);
        all_between.push_back(dist);
      }
    }
  }
  for (const auto& [emotion, list] : samples) {
    GeometryStats::ClassSummary c;
    c.emotion = emotion;
    c.samples = static_cast<std::size_t>(
        std::count_if(kept.begin(), kept.end(), [&](const Sample& s) { return s.emotion == emotion; }));
    mean_std(within[emotion], c.within_mean, c.within_std);
    out.classes.push_back(c);
  }
  mean_std(all_within, out.within_mean, out.within_std);
  mean_std(all_between, out.between_mean, out.between_std);
  for (const auto& [key, dists] : between) {
    double m = 0.0, s = 0.0;
    mean_std(dists, m, s);
    out.pair_between_mean[key] = m;
  }

  std::vector<Vec64> rows;
  for (const auto& k : kept) rows.push_back(k.v);
  const auto proj = pca2(rows);
  out.explained_variance[0] = proj.explained_variance[0];
  out.explained_variance[1] = proj.explained_variance[1];
  for (std::size_t i = 0; i < proj.coords.size(); ++i) {
    out.pca.push_back({kept[i].emotion, kept[i].index, proj.coords[i].first, proj.coords[i].second});
  }
  return out;
}

nlohmann::json to_json(const GeometryStats& s) {
  nlohmann::json j;
  auto classes = nlohmann::json::array();
  for (const auto& c : s.classes) {
    classes.push_back({{"emotion", c.emotion}, {"samples", c.samples}, {"within_mean", c.within_mean},
                       {"within_std", c.within_std}});
  }
  j["classes"] = classes;
  j["within_mean"] = s.within_mean;
  j["within_std"] = s.within_std;
  j["between_mean"] = s.between_mean;
  j["between_std"] = s.between_std;
  j["pair_between_mean"] = s.pair_between_mean;
  auto pca = nlohmann::json::array();
  for (const auto& p : s.pca) pca.push_back({{"emotion", p.emotion}, {"index", p.index}, {"x", p.x}, {"y", p.y}});
  j["pca"] = pca;
  j["explained_variance"] = {s.explained_variance[0], s.explained_variance[1]};
  j["excluded"] = s.excluded;
  return j;
}

}  // namespace evsteer::evcore
