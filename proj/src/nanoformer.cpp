#include "evsteer/nanoformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "evsteer/error.hpp"
#include "evsteer/io.hpp"

namespace evsteer::nanoformer {

using numkit::BasicMat;
using numkit::Mat;
using numkit::Vec;

namespace {

constexpr std::string_view kMagic = "NFMT";
constexpr std::uint32_t kVersion = 1;

std::string kind_name(ModelKind k) { return k == ModelKind::linear_stub ? "linear_stub" : "transformer"; }

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1) throw ValidationError("model config: layers must be >= 1");
  if (d_model < 1 || heads < 1) throw ValidationError("model config: d_model and heads must be positive");
  if (d_model % heads != 0) throw ValidationError("model config: d_model must be divisible by heads");
  if (vocab < 4) throw ValidationError("model config: vocab must be >= 4 (PAD/BOS/EOS/SEP)");
  if (max_seq < 1) throw ValidationError("model config: max_seq must be >= 1");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers}, {"d_model", c.d_model}, {"heads", c.heads},  {"vocab", c.vocab},
                     {"max_seq", c.max_seq}, {"seed", c.seed},       {"kind", kind_name(c.kind)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.vocab = j.value("vocab", d.vocab);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.seed = j.value("seed", d.seed);
  const std::string kind = j.value("kind", std::string("transformer"));
  if (kind == "transformer") {
    c.kind = ModelKind::transformer;
  } else if (kind == "linear_stub") {
    c.kind = ModelKind::linear_stub;
  } else {
    throw ValidationError("model config: unknown kind \"" + kind + "\"");
  }
}

NanoModel build_model(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.ffn_width());
  const auto V = static_cast<std::size_t>(config.vocab);
  const double w = 0.02 / std::sqrt(static_cast<double>(config.layers));

  numkit::SeededRng rng(config.seed);
  NanoModel m{config, {}};
  auto& W = m.weights;
  W.token_embedding = numkit::gaussian_matrix(rng, V, d, kTokenEmbeddingScale);
  W.position_embedding = numkit::gaussian_matrix(rng, static_cast<std::size_t>(config.max_seq), d,
                                                 kPositionEmbeddingScale);
  for (int l = 0; l < config.layers; ++l) {
    BlockWeights b;
    b.ln1_gain.assign(d, 1.0F);
    b.ln1_bias.assign(d, 0.0F);
    b.wq = numkit::gaussian_matrix(rng, d, d, w);
    b.wk = numkit::gaussian_matrix(rng, d, d, w);
    b.wv = numkit::gaussian_matrix(rng, d, d, w);
    b.wo = numkit::gaussian_matrix(rng, d, d, w);
    b.ln2_gain.assign(d, 1.0F);
    b.ln2_bias.assign(d, 0.0F);
    b.w_in = numkit::gaussian_matrix(rng, d, f, w);
    b.b_in.assign(f, 0.0F);
    b.w_out = numkit::gaussian_matrix(rng, f, d, w);
    b.b_out.assign(d, 0.0F);
    if (config.kind == ModelKind::linear_stub) {
      for (Mat* mat : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out}) std::fill(mat->flat().begin(), mat->flat().end(), 0.0F);
    }
    W.blocks.push_back(std::move(b));
  }
  W.lnf_gain.assign(d, 1.0F);
  W.lnf_bias.assign(d, 0.0F);
  W.unembed = numkit::gaussian_matrix(rng, V, d, w);
  W.unembed_bias.assign(V, 0.0F);
  return m;
}

std::vector<TensorRef> tensors(const NanoModel& model) {
  const auto& W = model.weights;
  std::vector<TensorRef> out;
  auto mat = [&](std::string name, const Mat& m) { out.push_back({std::move(name), m.rows(), m.cols(), m.flat()}); };
  auto vec = [&](std::string name, const Vec& v) { out.push_back({std::move(name), 1, v.size(), v}); };
  mat("token_embedding", W.token_embedding);
  mat("position_embedding", W.position_embedding);
  for (std::size_t l = 0; l < W.blocks.size(); ++l) {
    const auto& b = W.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    vec(p + "ln1_gain", b.ln1_gain);
    vec(p + "ln1_bias", b.ln1_bias);
    mat(p + "wq", b.wq);
    mat(p + "wk", b.wk);
    mat(p + "wv", b.wv);
    mat(p + "wo", b.wo);
    vec(p + "ln2_gain", b.ln2_gain);
    vec(p + "ln2_bias", b.ln2_bias);
    mat(p + "w_in", b.w_in);
    vec(p + "b_in", b.b_in);
    mat(p + "w_out", b.w_out);
    vec(p + "b_out", b.b_out);
  }
  vec("lnf_gain", W.lnf_gain);
  vec("lnf_bias", W.lnf_bias);
  mat("unembed", W.unembed);
  vec("unembed_bias", W.unembed_bias);
  return out;
}

// ---------------------------------------------------------------------------
// Forward kernels

namespace {

// y = x * W (+ bias), accumulation over k ascending in T.
template <typename T>
BasicMat<T> linear(const BasicMat<T>& x, const Mat& w, const Vec* bias = nullptr) {
  BasicMat<T> y(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto out = y.row(i);
    if (bias != nullptr) {
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>((*bias)[j]);
    }
    for (std::size_t k = 0; k < x.cols(); ++k) {
      const T xik = x(i, k);
      auto wrow = w.row(k);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += xik * static_cast<T>(wrow[j]);
    }
  }
  return y;
}

template <typename T>
T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(c * (x + static_cast<T>(0.044715) * x * x * x)));
}

template <typename T>
BasicMat<T> causal_attention(const BasicMat<T>& a, const BlockWeights& b, int heads) {
  const auto q = linear(a, b.wq);
  const auto k = linear(a, b.wk);
  const auto v = linear(a, b.wv);
  const std::size_t T_len = a.rows();
  const std::size_t hd = a.cols() / static_cast<std::size_t>(heads);
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  BasicMat<T> ctx(T_len, a.cols());
  std::vector<T> score(T_len);
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    for (std::size_t t = 0; t < T_len; ++t) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        T acc{0};
        for (std::size_t c = 0; c < hd; ++c) acc += q(t, off + c) * k(s, off + c);
        score[s] = acc * scale;
        mx = std::max(mx, score[s]);
      }
      T denom{0};
      for (std::size_t s = 0; s <= t; ++s) {
        score[s] = std::exp(score[s] - mx);
        denom += score[s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const T p = score[s] / denom;
        for (std::size_t c = 0; c < hd; ++c) ctx(t, off + c) += p * v(s, off + c);
      }
    }
  }
  return linear(ctx, b.wo);
}

template <typename T>
void add_inplace(BasicMat<T>& x, const BasicMat<T>& y) {
  auto xs = x.flat();
  auto ys = y.flat();
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ys[i];
}

}  // namespace

template <typename T>
BasicMat<T> layer_norm(const BasicMat<T>& x, const Vec& gain, const Vec& bias) {
  BasicMat<T> y(x.rows(), x.cols());
  const T n = static_cast<T>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    T mean{0};
    for (T v : r) mean += v;
    mean /= n;
    T var{0};
    for (T v : r) var += (v - mean) * (v - mean);
    var /= n;
    const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
    auto out = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) {
      out[j] = (r[j] - mean) * inv * static_cast<T>(gain[j]) + static_cast<T>(bias[j]);
    }
  }
  return y;
}

template BasicMat<float> layer_norm<float>(const BasicMat<float>&, const Vec&, const Vec&);
template BasicMat<double> layer_norm<double>(const BasicMat<double>&, const Vec&, const Vec&);

void validate_tokens(const NanoModel& model, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw ValidationError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(model.config.max_seq)) {
    throw ValidationError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                          std::to_string(model.config.max_seq));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= model.config.vocab) throw ValidationError("forward: token id " + std::to_string(t) + " out of vocab");
  }
}

template <typename T>
BasicMat<T> embed(const NanoModel& model, std::span<const TokenId> tokens) {
  validate_tokens(model, tokens);
  const auto& W = model.weights;
  BasicMat<T> x(tokens.size(), static_cast<std::size_t>(model.config.d_model));
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    auto e = W.token_embedding.row(static_cast<std::size_t>(tokens[t]));
    auto p = W.position_embedding.row(t);
    auto out = x.row(t);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<T>(e[j]) + static_cast<T>(p[j]);
  }
  return x;
}

template <typename T>
BasicMat<T> block_forward(const NanoModel& model, int layer, const BasicMat<T>& x_in) {
  const auto& b = model.weights.blocks.at(static_cast<std::size_t>(layer));
  BasicMat<T> x = x_in;
  add_inplace(x, causal_attention(layer_norm(x, b.ln1_gain, b.ln1_bias), b, model.config.heads));
  auto hidden = linear(layer_norm(x, b.ln2_gain, b.ln2_bias), b.w_in, &b.b_in);
  for (T& v : hidden.flat()) v = gelu(v);
  add_inplace(x, linear(hidden, b.w_out, &b.b_out));
  return x;
}

template <typename T>
BasicMat<T> readout(const NanoModel& model, const BasicMat<T>& x) {
  const auto& W = model.weights;
  const BasicMat<T> h = model.config.kind == ModelKind::linear_stub ? x : layer_norm(x, W.lnf_gain, W.lnf_bias);
  BasicMat<T> z(h.rows(), W.unembed.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    auto hr = h.row(t);
    for (std::size_t v = 0; v < W.unembed.rows(); ++v) {
      auto wr = W.unembed.row(v);
      T acc = static_cast<T>(W.unembed_bias[v]);
      for (std::size_t j = 0; j < hr.size(); ++j) acc += static_cast<T>(wr[j]) * hr[j];
      z(t, v) = acc;
    }
  }
  return z;
}

template <typename T>
BasicTrace<T> forward(const NanoModel& model, std::span<const TokenId> tokens, const Injection<T>* injection) {
  const auto L = static_cast<std::size_t>(model.config.layers);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  if (injection != nullptr && injection->per_layer.size() != L) {
    throw ValidationError("injection layer count " + std::to_string(injection->per_layer.size()) +
                          " != model layers " + std::to_string(L));
  }
  BasicTrace<T> trace;
  trace.taps.reserve(L);
  BasicMat<T> x = embed<T>(model, tokens);
  for (std::size_t l = 0; l < L; ++l) {
    if (injection != nullptr && injection->per_layer[l]) {
      const auto& off = *injection->per_layer[l];
      if (off.size() != d) throw ValidationError("injection width mismatch at layer " + std::to_string(l));
      for (std::size_t t = injection->from_position; t < x.rows(); ++t) {
        auto r = x.row(t);
        for (std::size_t j = 0; j < d; ++j) r[j] += off[j];
      }
    }
    x = block_forward(model, static_cast<int>(l), x);
    trace.taps.push_back(x);
  }
  trace.logits = readout(model, x);
  return trace;
}

template BasicMat<float> embed<float>(const NanoModel&, std::span<const TokenId>);
template BasicMat<double> embed<double>(const NanoModel&, std::span<const TokenId>);
template BasicMat<float> block_forward<float>(const NanoModel&, int, const BasicMat<float>&);
template BasicMat<double> block_forward<double>(const NanoModel&, int, const BasicMat<double>&);
template BasicMat<float> readout<float>(const NanoModel&, const BasicMat<float>&);
template BasicMat<double> readout<double>(const NanoModel&, const BasicMat<double>&);
template BasicTrace<float> forward<float>(const NanoModel&, std::span<const TokenId>, const Injection<float>*);
template BasicTrace<double> forward<double>(const NanoModel&, std::span<const TokenId>, const Injection<double>*);

TapTrace forward_with_taps(const NanoModel& model, std::span<const TokenId> tokens) {
  return forward<float>(model, tokens, nullptr);
}

std::vector<double> log_softmax(std::span<const float> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

double perplexity_from_logits(const Mat& logits, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw ValidationError("perplexity needs at least two tokens");
  if (logits.rows() < tokens.size() - 1) throw ValidationError("perplexity: fewer logit rows than predicted tokens");
  double nll = 0.0;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const auto y = static_cast<std::size_t>(tokens[i]);
    if (y >= logits.cols()) throw ValidationError("perplexity: token id outside logit width");
    nll -= log_softmax(logits.row(i - 1))[y];
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

double perplexity(const NanoModel& model, std::span<const TokenId> tokens) {
  if (tokens.size() < 2) throw ValidationError("perplexity needs at least two tokens");
  return perplexity_from_logits(forward_with_taps(model, tokens).logits, tokens);
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)) + kByteOffset);
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) {
  std::string s;
  for (TokenId id : ids) {
    if (is_byte(id)) s.push_back(static_cast<char>(static_cast<unsigned char>(id - kByteOffset)));
  }
  return s;
}

// ---------------------------------------------------------------------------
// NFMT: "NFMT" | u32 version | u32 header length | JSON header | f32 tensors

std::vector<std::uint8_t> serialize(const NanoModel& model) {
  nlohmann::json header;
  header["config"] = model.config;
  auto list = tensors(model);
  auto shapes = nlohmann::json::array();
  for (const auto& t : list) shapes.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  header["tensors"] = shapes;
  const std::string text = header.dump();

  io::ByteWriter w;
  w.text(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.text(text);
  for (const auto& t : list) w.f32s(t.data);
  return std::move(w.buffer());
}

NanoModel deserialize(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(kMagic);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u32(); v != kVersion) throw FormatError("unsupported NFMT version " + std::to_string(v), version_at);
  const std::uint32_t header_len = r.u32();
  const std::size_t header_at = r.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.text(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("NFMT header is not valid JSON: ") + e.what(), header_at);
  }
  ModelConfig cfg;
  try {
    cfg = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("NFMT header missing config: ") + e.what(), header_at);
  }
  cfg.validate();

  // Shapes are derived from the config; the stored manifest must agree.
  NanoModel m = build_model(cfg);
  auto expected = tensors(m);
  const auto& listed = header.at("tensors");
  if (listed.size() != expected.size()) throw FormatError("NFMT tensor count does not match config", header_at);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& e = expected[i];
    const auto& got = listed[i];
    if (got.at("name").get<std::string>() != e.name || got.at("rows").get<std::size_t>() != e.rows ||
        got.at("cols").get<std::size_t>() != e.cols) {
      throw FormatError("NFMT tensor " + e.name + " shape does not match config", header_at);
    }
  }
  for (const auto& e : expected) {
    // The spans in `expected` alias m's storage.
    auto dst = std::span<float>(const_cast<float*>(e.data.data()), e.data.size());
    for (float& v : dst) {
      const std::size_t at = r.offset();
      v = r.f32();
      if (!std::isfinite(v)) throw FormatError("non-finite weight in " + e.name, at);
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after NFMT payload", r.offset());
  return m;
}

void save_model(const NanoModel& model, const std::string& path) { io::write_file(path, serialize(model)); }

NanoModel load_model(const std::string& path) { return deserialize(io::read_file(path)); }

std::string model_digest(const NanoModel& model) { return io::sha256_hex(serialize(model)); }

}  // namespace evsteer::nanoformer
