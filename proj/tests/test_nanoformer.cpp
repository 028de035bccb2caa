#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>

#include "evsteer/io.hpp"
#include "evsteer/nanoformer.hpp"

using namespace evsteer;
using namespace evsteer::nanoformer;
using numkit::Mat;

namespace {

ModelConfig desk() { return ModelConfig{}; }

std::vector<TokenId> sample_tokens(std::size_t n, std::uint64_t seed) {
  numkit::SeededRng rng(seed);
  std::vector<TokenId> t{kBos};
  while (t.size() < n) t.push_back(static_cast<TokenId>(kByteOffset + 'a' + rng.below(26)));
  return t;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  c.heads = 5;
  CHECK_THROWS_AS((void)build_model(c), ValidationError);
  c = desk();
  c.vocab = 3;
  CHECK_THROWS_AS((void)build_model(c), ValidationError);
  c = desk();
  c.layers = 0;
  CHECK_THROWS_AS((void)build_model(c), ValidationError);
}

TEST_CASE("build_model is deterministic and seed sensitive") {
  const auto a = build_model(desk());
  const auto b = build_model(desk());
  CHECK(serialize(a) == serialize(b));

  ModelConfig c1 = desk(), c2 = desk();
  c1.seed = 1;
  c2.seed = 2;
  CHECK(serialize(build_model(c1)) != serialize(build_model(c2)));
}

TEST_CASE("forward shape contract and determinism") {
  const auto m = build_model(desk());
  const auto toks = sample_tokens(12, 1);
  const auto tr = forward_with_taps(m, toks);
  REQUIRE(tr.taps.size() == 4);
  for (const auto& o : tr.taps) {
    CHECK(o.rows() == toks.size());
    CHECK(o.cols() == 32);
  }
  CHECK(tr.logits.rows() == toks.size());
  CHECK(tr.logits.cols() == 260);

  const auto again = forward_with_taps(m, toks);
  for (std::size_t l = 0; l < 4; ++l) CHECK(numkit::bitwise_equal(tr.taps[l].flat(), again.taps[l].flat()));
  CHECK(numkit::bitwise_equal(tr.logits.flat(), again.logits.flat()));
}

TEST_CASE("forward rejects empty and overlong input") {
  const auto m = build_model(desk());
  CHECK_THROWS_AS((void)forward_with_taps(m, std::vector<TokenId>{}), ValidationError);
  CHECK_THROWS_AS((void)forward_with_taps(m, std::vector<TokenId>(257, kBos)), ValidationError);
  CHECK_THROWS_AS((void)forward_with_taps(m, std::vector<TokenId>{kBos, 999}), ValidationError);
}

TEST_CASE("swapping two non-adjacent tokens changes the trace") {
  const auto m = build_model(desk());
  auto toks = sample_tokens(10, 2);
  toks[2] = kByteOffset + 'x';
  toks[6] = kByteOffset + 'q';
  auto swapped = toks;
  std::swap(swapped[2], swapped[6]);
  const auto a = forward_with_taps(m, toks);
  const auto b = forward_with_taps(m, swapped);
  bool differs = false;
  for (std::size_t l = 0; l < a.taps.size(); ++l) differs = differs || !numkit::bitwise_equal(a.taps[l].flat(), b.taps[l].flat());
  CHECK(differs);
}

TEST_CASE("causality: later edits leave earlier logits bitwise unchanged") {
  const auto m = build_model(desk());
  const auto toks = sample_tokens(16, 3);
  const auto base = forward_with_taps(m, toks);
  for (std::size_t edit = 1; edit < toks.size(); edit += 3) {
    auto changed = toks;
    changed[edit] = kByteOffset + 'Z';
    const auto tr = forward_with_taps(m, changed);
    for (std::size_t t = 0; t < edit; ++t) CHECK(numkit::bitwise_equal(base.logits.row(t), tr.logits.row(t)));
  }
}

TEST_CASE("softmax rows sum to one") {
  const auto m = build_model(desk());
  const auto tr = forward_with_taps(m, sample_tokens(20, 4));
  for (std::size_t t = 0; t < tr.logits.rows(); ++t) {
    double s = 0.0;
    for (double lp : log_softmax(tr.logits.row(t))) s += std::exp(lp);
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("layer norm output is standardised before gain and bias") {
  const auto m = build_model(desk());
  const auto x = embed<float>(m, sample_tokens(30, 5));
  const auto y = layer_norm(x, numkit::Vec(32, 1.0F), numkit::Vec(32, 0.0F));
  for (std::size_t t = 0; t < y.rows(); ++t) {
    double mean = 0.0, var = 0.0;
    for (float v : y.row(t)) mean += v;
    mean /= 32.0;
    for (float v : y.row(t)) var += (v - mean) * (v - mean);
    var /= 32.0;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("perplexity oracles") {
  SUBCASE("uniform logits give the vocabulary size") {
    auto m = build_model(desk());
    std::fill(m.weights.unembed.flat().begin(), m.weights.unembed.flat().end(), 0.0F);
    const auto ppl = perplexity(m, sample_tokens(9, 6));
    CHECK(std::abs(ppl - 260.0) <= 1e-9 * 260.0);
  }
  SUBCASE("certain predictions give one") {
    const std::vector<TokenId> toks{1, 5, 7, 9};
    Mat logits(4, 10);
    for (std::size_t t = 0; t + 1 < toks.size(); ++t) {
      for (std::size_t v = 0; v < 10; ++v) logits(t, v) = -1e4F;
      logits(t, static_cast<std::size_t>(toks[t + 1])) = 0.0F;
    }
    CHECK(perplexity_from_logits(logits, toks) == 1.0);
  }
  SUBCASE("single predicted token with probability one half") {
    const Mat logits(2, 2, {0.0F, 0.0F, 0.0F, 0.0F});
    CHECK(std::abs(perplexity_from_logits(logits, std::vector<TokenId>{0, 1}) - 2.0) < 1e-12);
  }
  SUBCASE("needs two tokens") {
    const auto m = build_model(desk());
    CHECK_THROWS_AS((void)perplexity(m, std::vector<TokenId>{kBos}), ValidationError);
  }
}

TEST_CASE("tokenizer round trips arbitrary bytes") {
  numkit::SeededRng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(rng.below(64), '\0');
    for (char& c : s) c = static_cast<char>(rng.below(256));
    const auto ids = Tokenizer::encode(s);
    for (TokenId id : ids) CHECK(Tokenizer::is_byte(id));
    CHECK(Tokenizer::decode(ids) == s);
  }
  CHECK(Tokenizer::decode(std::vector<TokenId>{kBos, kByteOffset + 'h', kSep, kByteOffset + 'i', kEos}) == "hi");
}

TEST_CASE("NFMT round trip and validation") {
  const auto m = build_model(desk());
  const auto bytes = serialize(m);
  const auto back = deserialize(bytes);
  CHECK(back.config == m.config);
  CHECK(serialize(back) == bytes);

  const std::string path = "test_nfmt_roundtrip.nfmt";
  save_model(m, path);
  CHECK(serialize(load_model(path)) == bytes);
  std::remove(path.c_str());

  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[1] = 'X';
    CHECK_THROWS_AS((void)deserialize(bad), FormatError);
  }
  SUBCASE("truncated") {
    auto bad = bytes;
    bad.resize(bad.size() - 3);
    CHECK_THROWS_AS((void)deserialize(bad), FormatError);
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes;
    bad.push_back(0);
    CHECK_THROWS_AS((void)deserialize(bad), FormatError);
  }
  SUBCASE("stub kind survives") {
    ModelConfig c = desk();
    c.kind = ModelKind::linear_stub;
    const auto stub = build_model(c);
    CHECK(deserialize(serialize(stub)).config.kind == ModelKind::linear_stub);
  }
}

TEST_CASE("linear stub logits are affine in the residual stream") {
  ModelConfig c = desk();
  c.kind = ModelKind::linear_stub;
  const auto m = build_model(c);
  const auto toks = sample_tokens(6, 8);
  const auto x = embed<double>(m, toks);
  const auto tr = forward<double>(m, toks);
  // Blocks are the identity, so the last tap equals the embedding.
  CHECK(tr.taps.back() == x);
}
