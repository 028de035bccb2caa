#pragma once

// Emotion vectors: per-layer mean residual-stream shifts between
// emotion-conditioned and neutral passes, their averages and blends, the EVEC
// file format, and geometry statistics over per-query vectors.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evsteer/nanoformer.hpp"
#include "evsteer/numkit.hpp"

namespace evsteer::evcore {

class EmotionVector {
 public:
  EmotionVector() = default;
  EmotionVector(std::string emotion, std::string model_id, std::vector<numkit::Vec> layers, std::uint32_t n_queries,
                std::int64_t created_unix = 0);

  [[nodiscard]] const std::string& emotion() const noexcept { return emotion_; }
  [[nodiscard]] const std::string& model_id() const noexcept { return model_id_; }
  [[nodiscard]] std::uint32_t n_queries() const noexcept { return n_queries_; }
  [[nodiscard]] std::int64_t created_unix() const noexcept { return created_unix_; }
  [[nodiscard]] std::size_t layers() const noexcept { return layers_.size(); }
  [[nodiscard]] std::size_t width() const noexcept { return layers_.empty() ? 0 : layers_.front().size(); }
  [[nodiscard]] const numkit::Vec& layer(std::size_t l) const { return layers_.at(l); }
  [[nodiscard]] const std::vector<numkit::Vec>& all_layers() const noexcept { return layers_; }
  [[nodiscard]] const std::vector<double>& norms() const noexcept { return norms_; }
  // Layers concatenated in order, widened to double.
  [[nodiscard]] numkit::Vec64 concatenated() const;
  [[nodiscard]] bool is_zero() const;

  // Throws ValidationError unless the layer count and width match the model.
  void check_compatible(const nanoformer::ModelConfig& config) const;
  [[nodiscard]] bool same_shape(const EmotionVector& other) const noexcept {
    return layers() == other.layers() && width() == other.width();
  }

  friend bool operator==(const EmotionVector&, const EmotionVector&) = default;

 private:
  std::string emotion_;
  std::string model_id_;
  std::vector<numkit::Vec> layers_;
  std::uint32_t n_queries_ = 0;
  std::int64_t created_unix_ = 0;
  std::vector<double> norms_;
};

// Mean response-row shift for one query, per layer.
struct ShiftSample {
  std::uint64_t query_id = 0;
  std::vector<numkit::Vec> layers;
};

// A trace restricted to its pooled rows [first_row, end_row).
struct TraceView {
  const nanoformer::TapTrace* trace = nullptr;
  std::size_t first_row = 0;
  std::optional<std::size_t> end_row;
  std::string_view model_id;
};

struct PoolingOptions {
  // Pool both traces over the first min(T_e, T_n) response rows instead of
  // each over its own rows.
  bool truncate_to_min = false;
};

[[nodiscard]] ShiftSample emotional_shift(std::uint64_t query_id, const TraceView& emotion, const TraceView& neutral,
                                          const PoolingOptions& options = {});
// Pools every row of both traces.
[[nodiscard]] ShiftSample emotional_shift(const nanoformer::TapTrace& emotion, const nanoformer::TapTrace& neutral);

// Mean over shifts, accumulated in double in ascending query-id order.
[[nodiscard]] EmotionVector build_emotion_vector(std::vector<ShiftSample> shifts, std::string emotion,
                                                 std::string model_id);

[[nodiscard]] EmotionVector build_base_vector(const std::map<std::string, EmotionVector>& set);

// Per-layer sum of alpha_k * EV_k. The result is labelled "blend(e1:a1,...)".
[[nodiscard]] EmotionVector combine(const std::vector<std::pair<const EmotionVector*, double>>& weighted);

class EVSet {
 public:
  EVSet() = default;
  explicit EVSet(std::map<std::string, EmotionVector> members);
  EVSet(std::map<std::string, EmotionVector> members, EmotionVector base);

  [[nodiscard]] const std::map<std::string, EmotionVector>& members() const noexcept { return members_; }
  [[nodiscard]] const EmotionVector& base() const noexcept { return base_; }
  // "base" resolves to the base vector.
  [[nodiscard]] const EmotionVector& get(const std::string& emotion) const;

 private:
  std::map<std::string, EmotionVector> members_;
  EmotionVector base_;
};

// EVEC: "EVEC" | u32 version=1 | u32 header length | JSON header | L*d f32 LE.
[[nodiscard]] std::vector<std::uint8_t> serialize(const EmotionVector& ev);
[[nodiscard]] EmotionVector deserialize(std::span<const std::uint8_t> bytes);
void save_ev(const EmotionVector& ev, const std::string& path);
[[nodiscard]] EmotionVector load_ev(const std::string& path);
[[nodiscard]] EmotionVector load_ev(const std::string& path, const nanoformer::ModelConfig& model);

// A directory of <emotion>.evec files plus base.evec.
void save_set(const EVSet& set, const std::string& dir);
[[nodiscard]] EVSet load_set(const std::string& dir);

struct GeometryStats {
  struct ClassSummary {
    std::string emotion;
    std::size_t samples = 0;
    double within_mean = 0.0;
    double within_std = 0.0;
  };
  struct Projection {
    std::string emotion;
    std::size_t index = 0;  // position within its emotion group
    double x = 0.0;
    double y = 0.0;
  };
  std::vector<ClassSummary> classes;
  // Pooled over every same-label pair / every cross-label pair.
  double within_mean = 0.0;
  double within_std = 0.0;
  double between_mean = 0.0;
  double between_std = 0.0;
  // Mean cosine distance for each unordered label pair, keyed "a|b" with a < b.
  std::map<std::string, double> pair_between_mean;
  std::vector<Projection> pca;
  double explained_variance[2] = {0.0, 0.0};
  std::vector<std::string> excluded;  // "emotion#index" of zero-norm samples
};

// Cosine distance 1 - cos(u, v) over layer-concatenated vectors.
[[nodiscard]] GeometryStats ev_stats(const std::map<std::string, std::vector<EmotionVector>>& samples);

[[nodiscard]] nlohmann::json to_json(const GeometryStats& stats);

// Two leading principal coordinates of the centred rows.
struct Pca2 {
  std::vector<std::pair<double, double>> coords;
  double explained_variance[2] = {0.0, 0.0};
};
[[nodiscard]] Pca2 pca2(const std::vector<numkit::Vec64>& rows);

// Per-vector norms, the pairwise cosine table (null for zero vectors) and PCA
// coordinates of the layer-concatenated vectors.
[[nodiscard]] nlohmann::json inspect(const std::vector<EmotionVector>& evs);

}  // namespace evsteer::evcore
