#include "evsteer/steer.hpp"

#include <cmath>
#include <string>

#include "evsteer/error.hpp"

namespace evsteer::steer {

using nanoformer::NanoModel;
using nanoformer::TokenId;

std::vector<BlendTerm> merged_terms(const SteeringConfig& cfg) {
  std::vector<BlendTerm> out;
  for (const auto& term : cfg.blend) {
    if (term.ev == nullptr) throw ValidationError("steering blend has a null emotion vector");
    if (!std::isfinite(term.alpha)) throw ValidationError("steering alpha must be finite");
    bool merged = false;
    for (auto& o : out) {
      if (o.ev == term.ev) {
        o.alpha += term.alpha;
        merged = true;
        break;
      }
    }
    if (!merged) out.push_back(term);
  }
  std::erase_if(out, [](const BlendTerm& t) { return t.alpha == 0.0; });
  return out;
}

namespace {

std::vector<bool> mask_for(const NanoModel& model, const SteeringConfig& cfg) {
  const auto L = static_cast<std::size_t>(model.config.layers);
  if (!cfg.layer_mask) return std::vector<bool>(L, true);
  std::vector<bool> mask(L, false);
  for (int l : *cfg.layer_mask) {
    if (l < 0 || static_cast<std::size_t>(l) >= L) {
      throw ValidationError("layer mask index " + std::to_string(l) + " out of range 0.." + std::to_string(L - 1));
    }
    mask[static_cast<std::size_t>(l)] = true;
  }
  return mask;
}

}  // namespace

template <typename T>
nanoformer::Injection<T> resolve(const NanoModel& model, const SteeringConfig& cfg, std::size_t prompt_length) {
  const auto mask = mask_for(model, cfg);
  const auto terms = merged_terms(cfg);
  for (const auto& t : terms) t.ev->check_compatible(model.config);

  const auto L = static_cast<std::size_t>(model.config.layers);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  nanoformer::Injection<T> inj;
  inj.per_layer.resize(L);
  inj.from_position = cfg.apply_during == ApplyDuring::generation_only ? prompt_length : 0;
  if (terms.empty()) return inj;

  for (std::size_t l = 0; l < L; ++l) {
    if (!mask[l]) continue;
    std::vector<double> acc(d, 0.0);
    for (const auto& t : terms) {
      const auto& v = t.ev->layer(l);
      for (std::size_t j = 0; j < d; ++j) acc[j] += t.alpha * static_cast<double>(v[j]);
    }
    bool nonzero = false;
    std::vector<T> off(d);
    for (std::size_t j = 0; j < d; ++j) {
      off[j] = static_cast<T>(acc[j]);
      nonzero = nonzero || off[j] != T(0);
    }
    if (nonzero) inj.per_layer[l] = std::move(off);
  }
  return inj;
}

template nanoformer::Injection<float> resolve<float>(const NanoModel&, const SteeringConfig&, std::size_t);
template nanoformer::Injection<double> resolve<double>(const NanoModel&, const SteeringConfig&, std::size_t);

template <typename T>
nanoformer::BasicTrace<T> steered_forward(const NanoModel& model, std::span<const TokenId> tokens,
                                          const SteeringConfig& cfg) {
  const auto inj = resolve<T>(model, cfg, tokens.size());
  return nanoformer::forward<T>(model, tokens, inj.active() ? &inj : nullptr);
}

template nanoformer::BasicTrace<float> steered_forward<float>(const NanoModel&, std::span<const TokenId>,
                                                              const SteeringConfig&);
template nanoformer::BasicTrace<double> steered_forward<double>(const NanoModel&, std::span<const TokenId>,
                                                                const SteeringConfig&);

std::vector<TokenId> generate(const NanoModel& model, std::span<const TokenId> prompt, const SteeringConfig& cfg,
                              std::size_t max_new) {
  if (prompt.empty()) throw ValidationError("generate: empty prompt");
  if (prompt.size() + max_new > static_cast<std::size_t>(model.config.max_seq)) {
    throw ValidationError("generate: prompt of " + std::to_string(prompt.size()) + " tokens plus " +
                          std::to_string(max_new) + " new tokens exceeds max_seq " +
                          std::to_string(model.config.max_seq));
  }
  const auto inj = resolve<float>(model, cfg, prompt.size());
  const auto* active = inj.active() ? &inj : nullptr;

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  // No KV cache: every step re-runs the whole sequence.
  for (std::size_t step = 0; step < max_new; ++step) {
    const auto trace = nanoformer::forward<float>(model, seq, active);
    const auto last = trace.logits.row(trace.logits.rows() - 1);
    std::size_t best = 0;
    for (std::size_t v = 1; v < last.size(); ++v) {
      if (last[v] > last[best]) best = v;
    }
    const auto id = static_cast<TokenId>(best);
    if (id == nanoformer::kEos) break;
    out.push_back(id);
    seq.push_back(id);
  }
  return out;
}

template <typename T>
numkit::Vec64 logit_delta(const NanoModel& model, std::span<const TokenId> tokens, const SteeringConfig& cfg) {
  const auto base = nanoformer::forward<T>(model, tokens, nullptr);
  const auto steered = steered_forward<T>(model, tokens, cfg);
  const std::size_t last = base.logits.rows() - 1;
  numkit::Vec64 delta(base.logits.cols());
  for (std::size_t v = 0; v < delta.size(); ++v) {
    delta[v] = static_cast<double>(steered.logits(last, v)) - static_cast<double>(base.logits(last, v));
  }
  return delta;
}

template numkit::Vec64 logit_delta<float>(const NanoModel&, std::span<const TokenId>, const SteeringConfig&);
template numkit::Vec64 logit_delta<double>(const NanoModel&, std::span<const TokenId>, const SteeringConfig&);

}  // namespace evsteer::steer
