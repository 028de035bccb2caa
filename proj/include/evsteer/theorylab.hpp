#pragma once

// Numerical checks of the first-order steering theory, all in double:
// finite-difference layer-to-logit Jacobians, the first-order expansion, the
// monotonic emotion gain under a constructed readout, the semantic bound,
// additivity of blends, and the Fisher/mean-difference alignment.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evsteer/evcore.hpp"
#include "evsteer/nanoformer.hpp"
#include "evsteer/numkit.hpp"

namespace evsteer::theorylab {

using numkit::Mat64;
using numkit::Vec64;

// J_l = d z_last / d delta_l, where delta_l is added to every position at the
// input of block l (the steering site).
struct JacobianStack {
  std::vector<Mat64> J;  // L matrices, V x d
  Vec64 base_logits;     // final position, unsteered
  std::vector<double> step;         // h per layer
  std::vector<double> certificate;  // ||J(h) - J(h/2)||_F / ||J(h/2)||_F per layer
  [[nodiscard]] bool converged(double tolerance = 1e-2) const;
};

[[nodiscard]] JacobianStack fd_jacobians(const nanoformer::NanoModel& model,
                                         std::span<const nanoformer::TokenId> tokens);

// sum_l J_l EV_l.
[[nodiscard]] Vec64 first_order_prediction(const JacobianStack& stack, const evcore::EmotionVector& ev);

// Exact final-position logit change for alpha * ev, in double.
[[nodiscard]] Vec64 logit_shift(const nanoformer::NanoModel& model, std::span<const nanoformer::TokenId> tokens,
                                const evcore::EmotionVector& ev, double alpha);

// Full-sequence chain rule: with G_l = d z_last / d H_l over all T*d entries
// and F_l the per-block Jacobian, G_l must equal G_{l+1} F_l (G_L being the
// readout alone). The broadcast J_l must equal G_l summed over positions.
struct ChainRuleReport {
  std::vector<double> product_error;    // ||G_l - G_{l+1} F_l|| / ||G_l||, l = 0..L-1
  std::vector<double> broadcast_error;  // ||J_l - sum_t G_l[t]|| / ||J_l||
  std::vector<double> certificate;      // step-halving error of the per-position FDs
};
[[nodiscard]] ChainRuleReport chain_rule_check(const nanoformer::NanoModel& model,
                                               std::span<const nanoformer::TokenId> tokens);

struct TheoremReport {
  std::string id;
  bool pass = false;
  std::string inputs_digest;
  nlohmann::json measurements = nlohmann::json::object();
  nlohmann::json tolerances = nlohmann::json::object();
};
[[nodiscard]] nlohmann::json to_json(const TheoremReport& report);

// r(alpha) = ||dz(alpha) - alpha * sum_l J_l EV_l||. The grid must halve at
// each step; passes iff every ratio r(a/2)/r(a) is in [0.15, 0.45], or r(a)
// is below the 1e-8 noise floor.
[[nodiscard]] TheoremReport check_first_order(const nanoformer::NanoModel& model,
                                              std::span<const nanoformer::TokenId> tokens,
                                              const evcore::EmotionVector& ev, std::span<const double> alphas);
[[nodiscard]] TheoremReport check_first_order(const nanoformer::NanoModel& model,
                                              std::span<const nanoformer::TokenId> tokens,
                                              const evcore::EmotionVector& ev, std::span<const double> alphas,
                                              const JacobianStack& stack);

// w_e = normalize(sum_l J_l EV_l); dg(alpha) = w_e . dz(alpha) must be
// positive and strictly increasing over an increasing grid in (0, 0.1].
// Reports gamma_hat = min_l w_e . J_l EV_l / ||EV_l||^2. A zero EV throws.
[[nodiscard]] TheoremReport check_monotonic_gain(const nanoformer::NanoModel& model,
                                                 std::span<const nanoformer::TokenId> tokens,
                                                 const evcore::EmotionVector& ev, std::span<const double> alphas,
                                                 const JacobianStack& stack);

// First-order bound alpha * sqrt(sum_l ||u^T J_l||^2) * sqrt(sum_l ||EV_l||^2).
[[nodiscard]] double semantic_bound(const JacobianStack& stack, std::span<const double> u,
                                    const evcore::EmotionVector& ev, double alpha);

struct SemanticOptions {
  double alpha = 0.02;
  std::size_t samples = 20;
  std::uint64_t seed = 0;
  double slack = 0.05;
  // C in ||R|| <= C alpha^2 sum_l ||EV_l||^2, measured per model and frozen.
  double curvature_constant = 0.0;
  double separation = 10.0;
};

// Random unit u must satisfy |ds| <= (1 + slack) * bound. Rows orthogonalised
// against sum_l J_l EV_l must move at least `separation` times less than the
// aligned readout, and by no more than separation * C alpha^2 sum ||EV_l||^2
// when a curvature constant is given.
[[nodiscard]] TheoremReport check_semantic_bound(const nanoformer::NanoModel& model,
                                                 std::span<const nanoformer::TokenId> tokens,
                                                 const evcore::EmotionVector& ev, const SemanticOptions& options,
                                                 const JacobianStack& stack);

// a(a1, a2) = ||dz(a1 A + a2 B) - dz(a1 A) - dz(a2 B)|| must decay
// quadratically under joint halving of the pairs (ratio in [0.15, 0.45]), and
// dg(alpha)/alpha for the equal blend A + B, read along
// normalize(sum_l J_l (A_l + B_l)), must vary by at most 5% over `gain_alphas`.
[[nodiscard]] TheoremReport check_additivity(const nanoformer::NanoModel& model,
                                             std::span<const nanoformer::TokenId> tokens,
                                             const evcore::EmotionVector& a, const evcore::EmotionVector& b,
                                             std::span<const std::pair<double, double>> pairs,
                                             std::span<const double> gain_alphas, const JacobianStack& stack);

struct GaussianLayerSpec {
  Vec64 mu_e;
  Vec64 mu_n;
  Mat64 sigma;  // d x d, symmetric positive definite
  void validate() const;
  [[nodiscard]] bool spherical() const;
};

// Population Fisher direction sigma^-1 (mu_e - mu_n).
[[nodiscard]] Vec64 fisher_direction(const Mat64& sigma, std::span<const double> mean_difference);

// Samples n points per class. The Fisher direction and mean difference come
// from one half of the samples; the whitening covariance from the other half,
// so the whitened cosine is not an algebraic identity. Spherical specs pass on
// the raw cosine, others on the whitened one.
[[nodiscard]] TheoremReport fisher_check(const GaussianLayerSpec& spec, std::size_t n, std::uint64_t seed);

// Angle (radians) between the sampled and population Fisher directions, one
// entry per sample count.
[[nodiscard]] std::vector<double> fisher_population_limit(const GaussianLayerSpec& spec,
                                                          std::span<const std::size_t> sample_counts,
                                                          std::uint64_t seed);

// Layers with N(0, 1/d) entries, so each layer has unit norm in expectation.
[[nodiscard]] evcore::EmotionVector random_vector(const nanoformer::ModelConfig& config, std::uint64_t seed,
                                                  std::string name);

// mu_e = e_0, mu_n = 0, identity covariance; the anisotropic variant uses
// sigma_00 = 4 and mu_e = e_0 + e_1.
[[nodiscard]] GaussianLayerSpec fisher_spec(std::size_t d, bool anisotropic);

struct BundleOptions {
  double alpha = 0.1;  // first-order grid {a, a/2, a/4}; additivity pairs (a, a) halved twice
  std::string prompt = "how are you today";
  std::uint64_t seed = 0;
  std::size_t fisher_samples = 10000;
};

// The five checks, in order: first_order, monotonic_gain, fisher (spherical
// raw and anisotropic whitened, d = 16), semantic_bound and additivity.
[[nodiscard]] std::vector<TheoremReport> verify_bundle(const nanoformer::NanoModel& model,
                                                       const evcore::EmotionVector& a,
                                                       const evcore::EmotionVector& b,
                                                       const BundleOptions& options = {});

}  // namespace evsteer::theorylab
