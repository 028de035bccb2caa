#pragma once

// A small deterministic decoder-only transformer whose residual stream can be
// read (taps) and edited (injections) at every block.
//
// Block l (pre-norm):
//   X <- X + Attn_l(LN1_l(X))
//   X <- X + FFN_l(LN2_l(X))
// Tap O_l is X after both residual adds of block l. An injection for layer l
// is added to X at the *input* of block l. Logits are W_o * LN_f(X_L) + b for
// every position (the final norm is skipped for the linear stub).
//
// The kernels are templated on the activation scalar: float for the engine,
// double for the theory checks. Weights are always stored as float.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evsteer/numkit.hpp"

namespace evsteer::nanoformer {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kByteOffset = 4;

enum class ModelKind {
  transformer,
  // Zero-weight blocks and no final norm: logits are an affine function of the
  // residual stream, so first-order expansions are exact.
  linear_stub,
};

struct ModelConfig {
  int layers = 4;
  int d_model = 32;
  int heads = 4;
  int vocab = 260;
  int max_seq = 256;
  std::uint64_t seed = 0;
  ModelKind kind = ModelKind::transformer;

  [[nodiscard]] int head_dim() const { return d_model / heads; }
  [[nodiscard]] int ffn_width() const { return 4 * d_model; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct BlockWeights {
  numkit::Vec ln1_gain, ln1_bias;
  numkit::Mat wq, wk, wv, wo;  // d x d, applied as x * W
  numkit::Vec ln2_gain, ln2_bias;
  numkit::Mat w_in;  // d x 4d
  numkit::Vec b_in;
  numkit::Mat w_out;  // 4d x d
  numkit::Vec b_out;
};

struct Weights {
  numkit::Mat token_embedding;     // V x d
  numkit::Mat position_embedding;  // T_max x d
  std::vector<BlockWeights> blocks;
  numkit::Vec lnf_gain, lnf_bias;
  numkit::Mat unembed;  // W_o, V x d
  numkit::Vec unembed_bias;
};

struct NanoModel {
  ModelConfig config;
  Weights weights;
};

// Initialisation scales. Block and unembedding matrices use 0.02/sqrt(L).
inline constexpr double kTokenEmbeddingScale = 1.0;
inline constexpr double kPositionEmbeddingScale = 0.1;
inline constexpr double kLayerNormEps = 1e-5;

// Draw order: token embedding, position embedding, then per block
// wq, wk, wv, wo, w_in, w_out, then the unembedding. Gains start at 1,
// biases at 0. The linear stub consumes the same stream and then zeroes every
// block matrix.
[[nodiscard]] NanoModel build_model(const ModelConfig& config);

// Every tensor in serialization order, with its name.
struct TensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<const float> data;
};
[[nodiscard]] std::vector<TensorRef> tensors(const NanoModel& model);

template <typename T>
struct BasicTrace {
  std::vector<numkit::BasicMat<T>> taps;  // L matrices, T x d
  numkit::BasicMat<T> logits;             // T x V
};
using TapTrace = BasicTrace<float>;
using TapTrace64 = BasicTrace<double>;

// Per-layer additive offsets applied at block inputs. A disengaged layer is
// skipped entirely; positions before `from_position` are left untouched.
template <typename T>
struct Injection {
  std::vector<std::optional<std::vector<T>>> per_layer;
  std::size_t from_position = 0;

  [[nodiscard]] bool active() const {
    for (const auto& v : per_layer)
      if (v) return true;
    return false;
  }
};

void validate_tokens(const NanoModel& model, std::span<const TokenId> tokens);

template <typename T>
[[nodiscard]] BasicTrace<T> forward(const NanoModel& model, std::span<const TokenId> tokens,
                                    const Injection<T>* injection = nullptr);

[[nodiscard]] TapTrace forward_with_taps(const NanoModel& model, std::span<const TokenId> tokens);

// Pieces of the forward pass, exposed for chain-rule checks.
template <typename T>
[[nodiscard]] numkit::BasicMat<T> embed(const NanoModel& model, std::span<const TokenId> tokens);
template <typename T>
[[nodiscard]] numkit::BasicMat<T> block_forward(const NanoModel& model, int layer, const numkit::BasicMat<T>& x);
template <typename T>
[[nodiscard]] numkit::BasicMat<T> layer_norm(const numkit::BasicMat<T>& x, const numkit::Vec& gain,
                                             const numkit::Vec& bias);
template <typename T>
[[nodiscard]] numkit::BasicMat<T> readout(const NanoModel& model, const numkit::BasicMat<T>& x);

// exp(-(1/N) sum log P(y_i | y_<i)) over positions 2..T, log-softmax in double.
// Row t of `logits` predicts token t+1.
[[nodiscard]] double perplexity_from_logits(const numkit::Mat& logits, std::span<const TokenId> tokens);
[[nodiscard]] double perplexity(const NanoModel& model, std::span<const TokenId> tokens);

[[nodiscard]] std::vector<double> log_softmax(std::span<const float> logits);

// Byte-level tokenizer: byte b -> b + 4.
class Tokenizer {
 public:
  [[nodiscard]] static std::vector<TokenId> encode(std::string_view text);
  // Special ids are dropped.
  [[nodiscard]] static std::string decode(std::span<const TokenId> ids);
  [[nodiscard]] static bool is_byte(TokenId id) noexcept { return id >= kByteOffset && id < kByteOffset + 256; }
};

// NFMT weight files.
[[nodiscard]] std::vector<std::uint8_t> serialize(const NanoModel& model);
[[nodiscard]] NanoModel deserialize(std::span<const std::uint8_t> bytes);
void save_model(const NanoModel& model, const std::string& path);
[[nodiscard]] NanoModel load_model(const std::string& path);

// Hex SHA-256 of the NFMT serialization.
[[nodiscard]] std::string model_digest(const NanoModel& model);

}  // namespace evsteer::nanoformer
