#pragma once

// Residual-stream steering: adds sum_k alpha_k * EV_l^(k) to the input of every
// masked block l, at every token position, during forward passes and greedy
// decoding.

#include <optional>
#include <span>
#include <vector>

#include "evsteer/evcore.hpp"
#include "evsteer/nanoformer.hpp"

namespace evsteer::steer {

enum class ApplyDuring {
  prompt_and_generation,
  // Only positions at or after the end of the prompt are offset.
  generation_only,
};

struct BlendTerm {
  const evcore::EmotionVector* ev = nullptr;
  double alpha = 0.0;
};

struct SteeringConfig {
  std::vector<BlendTerm> blend;
  std::optional<std::vector<int>> layer_mask;  // all layers when unset
  ApplyDuring apply_during = ApplyDuring::prompt_and_generation;
};

// Terms that reference the same vector are summed and net-zero terms dropped
// before any arithmetic, so {(v,1),(v,-1)} resolves to no injection at all.
[[nodiscard]] std::vector<BlendTerm> merged_terms(const SteeringConfig& cfg);

// Per-layer offsets for `model`, accumulated in double in blend order. Layers
// outside the mask, or whose offset is exactly zero, are left disengaged.
// `prompt_length` only matters for generation-only mode.
template <typename T>
[[nodiscard]] nanoformer::Injection<T> resolve(const nanoformer::NanoModel& model, const SteeringConfig& cfg,
                                               std::size_t prompt_length = 0);

// Uninjected code path whenever nothing resolves.
template <typename T>
[[nodiscard]] nanoformer::BasicTrace<T> steered_forward(const nanoformer::NanoModel& model,
                                                        std::span<const nanoformer::TokenId> tokens,
                                                        const SteeringConfig& cfg);

// Greedy argmax decoding (lowest id wins ties); returns only the new tokens.
// Stops after emitting EOS (not returned) or after max_new tokens.
[[nodiscard]] std::vector<nanoformer::TokenId> generate(const nanoformer::NanoModel& model,
                                                        std::span<const nanoformer::TokenId> prompt,
                                                        const SteeringConfig& cfg, std::size_t max_new);

// Final-position logits(steered) - logits(unsteered).
template <typename T>
[[nodiscard]] numkit::Vec64 logit_delta(const nanoformer::NanoModel& model,
                                        std::span<const nanoformer::TokenId> tokens, const SteeringConfig& cfg);

}  // namespace evsteer::steer
