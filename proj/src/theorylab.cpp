#include "evsteer/theorylab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "evsteer/error.hpp"
#include "evsteer/io.hpp"
#include "evsteer/steer.hpp"

namespace evsteer::theorylab {

using nanoformer::Injection;
using nanoformer::NanoModel;
using nanoformer::TokenId;

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr double kNoiseFloor = 1e-8;
constexpr double kRatioLow = 0.15;
constexpr double kRatioHigh = 0.45;

double frobenius(const Mat64& m) { return numkit::norm2(m.values()); }

double frobenius_diff(const Mat64& a, const Mat64& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values()[i] - b.values()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double relative(double err, double scale) { return scale > 0.0 ? err / scale : err; }

Vec64 matvec(const Mat64& m, std::span<const double> x) {
  Vec64 y(m.rows(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) s += r[j] * x[j];
    y[i] = s;
  }
  return y;
}

Vec64 to64(const numkit::Vec& v) { return {v.begin(), v.end()}; }

Vec64 unit(Vec64 v) {
  const double n = numkit::norm2(v);
  if (n == 0.0) throw ValidationError("cannot normalise a zero vector");
  for (double& x : v) x /= n;
  return v;
}

double ev_energy(const evcore::EmotionVector& ev) {
  double s = 0.0;
  for (double n : ev.norms()) s += n * n;
  return s;
}

// Final-position logits with an optional per-layer offset.
Vec64 last_logits(const NanoModel& model, std::span<const TokenId> tokens, const Injection<double>* inj) {
  const auto tr = nanoformer::forward<double>(model, tokens, inj);
  const auto row = tr.logits.row(tr.logits.rows() - 1);
  return {row.begin(), row.end()};
}

Mat64 fd_layer(const NanoModel& model, std::span<const TokenId> tokens, std::size_t layer, double h) {
  const auto L = static_cast<std::size_t>(model.config.layers);
  const auto d = static_cast<std::size_t>(model.config.d_model);
  const auto V = static_cast<std::size_t>(model.config.vocab);
  Mat64 J(V, d);
  Injection<double> inj;
  inj.per_layer.resize(L);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> off(d, 0.0);
    off[j] = h;
    inj.per_layer[layer] = off;
    const auto zp = last_logits(model, tokens, &inj);
    off[j] = -h;
    inj.per_layer[layer] = off;
    const auto zm = last_logits(model, tokens, &inj);
    for (std::size_t v = 0; v < V; ++v) J(v, j) = (zp[v] - zm[v]) / (2.0 * h);
  }
  return J;
}

// Block inputs H_0..H_{L-1} of the unsteered pass.
std::vector<Mat64> block_inputs(const NanoModel& model, std::span<const TokenId> tokens) {
  const auto tr = nanoformer::forward<double>(model, tokens, nullptr);
  std::vector<Mat64> h;
  h.push_back(nanoformer::embed<double>(model, tokens));
  for (std::size_t l = 0; l + 1 < tr.taps.size(); ++l) h.push_back(tr.taps[l]);
  return h;
}

double step_for(const Mat64& h) {
  const auto mean = numkit::mean_rows(h);
  double inf = 0.0;
  for (double x : mean) inf = std::max(inf, std::abs(x));
  return 1e-3 * std::max(1.0, inf);
}

std::string digest_inputs(const NanoModel& model, std::span<const TokenId> tokens,
                          std::vector<const evcore::EmotionVector*> evs, const nlohmann::json& params) {
  std::ostringstream s;
  s << nanoformer::model_digest(model) << '|';
  for (TokenId t : tokens) s << t << ',';
  s << '|';
  for (const auto* ev : evs) {
    const auto bytes = evcore::serialize(*ev);
    s << io::sha256_hex(bytes) << '|';
  }
  s << params.dump();
  return io::sha256_hex(s.str());
}

void check_halving(std::span<const double> alphas, const char* what) {
  for (std::size_t i = 0; i + 1 < alphas.size(); ++i) {
    if (std::abs(alphas[i + 1] - alphas[i] / 2.0) > 1e-12 * alphas[i]) {
      throw ValidationError(std::string(what) + ": alpha grid must halve at each step");
    }
  }
}

void check_finite_grid(std::span<const double> alphas, const char* what) {
  if (alphas.empty()) throw ValidationError(std::string(what) + ": empty alpha grid");
  for (double a : alphas) {
    if (!std::isfinite(a) || a < 0.0) throw ValidationError(std::string(what) + ": alphas must be finite and >= 0");
  }
}

}  // namespace

bool JacobianStack::converged(double tolerance) const {
  return std::all_of(certificate.begin(), certificate.end(), [&](double c) { return c <= tolerance; });
}

JacobianStack fd_jacobians(const NanoModel& model, std::span<const TokenId> tokens) {
  nanoformer::validate_tokens(model, tokens);
  JacobianStack stack;
  stack.base_logits = last_logits(model, tokens, nullptr);
  const auto inputs = block_inputs(model, tokens);
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    const double h = step_for(inputs[l]);
    auto J = fd_layer(model, tokens, l, h);
    const auto J_half = fd_layer(model, tokens, l, h / 2.0);
    stack.step.push_back(h);
    stack.certificate.push_back(relative(frobenius_diff(J, J_half), frobenius(J_half)));
    stack.J.push_back(std::move(J));
  }
  return stack;
}

Vec64 first_order_prediction(const JacobianStack& stack, const evcore::EmotionVector& ev) {
  if (ev.layers() != stack.J.size()) throw ValidationError("EV layer count does not match the Jacobian stack");
  Vec64 out(stack.base_logits.size(), 0.0);
  for (std::size_t l = 0; l < stack.J.size(); ++l) {
    if (ev.width() != stack.J[l].cols()) throw ValidationError("EV width does not match the Jacobian stack");
    const auto jv = matvec(stack.J[l], to64(ev.layer(l)));
    for (std::size_t v = 0; v < out.size(); ++v) out[v] += jv[v];
  }
  return out;
}

Vec64 logit_shift(const NanoModel& model, std::span<const TokenId> tokens, const evcore::EmotionVector& ev,
                  double alpha) {
  return steer::logit_delta<double>(model, tokens, {{{&ev, alpha}}});
}

ChainRuleReport chain_rule_check(const NanoModel& model, std::span<const TokenId> tokens) {
  nanoformer::validate_tokens(model, tokens);
  const auto L = static_cast<std::size_t>(model.config.layers);
  const auto V = static_cast<std::size_t>(model.config.vocab);
  const auto inputs = block_inputs(model, tokens);
  const auto final_x = nanoformer::forward<double>(model, tokens, nullptr).taps.back();
  const std::size_t T = final_x.rows();
  const std::size_t d = final_x.cols();
  const std::size_t n = T * d;

  // d z_last / d X for X fed into blocks from..L-1 then the readout.
  auto tail = [&](const Mat64& x, std::size_t from) {
    Mat64 y = x;
    for (std::size_t k = from; k < L; ++k) y = nanoformer::block_forward<double>(model, static_cast<int>(k), y);
    const auto z = nanoformer::readout<double>(model, y);
    const auto row = z.row(T - 1);
    return Vec64(row.begin(), row.end());
  };
  auto fd_tail = [&](const Mat64& x, std::size_t from, double h) {
    Mat64 G(V, n);
    for (std::size_t c = 0; c < n; ++c) {
      Mat64 xp = x, xm = x;
      xp.flat()[c] += h;
      xm.flat()[c] -= h;
      const auto zp = tail(xp, from);
      const auto zm = tail(xm, from);
      for (std::size_t v = 0; v < V; ++v) G(v, c) = (zp[v] - zm[v]) / (2.0 * h);
    }
    return G;
  };
  auto fd_block = [&](const Mat64& x, std::size_t layer, double h) {
    Mat64 F(n, n);
    for (std::size_t c = 0; c < n; ++c) {
      Mat64 xp = x, xm = x;
      xp.flat()[c] += h;
      xm.flat()[c] -= h;
      const auto yp = nanoformer::block_forward<double>(model, static_cast<int>(layer), xp);
      const auto ym = nanoformer::block_forward<double>(model, static_cast<int>(layer), xm);
      for (std::size_t r = 0; r < n; ++r) F(r, c) = (yp.flat()[r] - ym.flat()[r]) / (2.0 * h);
    }
    return F;
  };

  ChainRuleReport report;
  const auto stack = fd_jacobians(model, tokens);
  std::vector<Mat64> G(L + 1);
  {
    const double h = step_for(final_x);
    G[L] = fd_tail(final_x, L, h);
  }
  for (std::size_t l = L; l-- > 0;) {
    const double h = step_for(inputs[l]);
    G[l] = fd_tail(inputs[l], l, h);
    const auto G_half = fd_tail(inputs[l], l, h / 2.0);
    const auto F = fd_block(inputs[l], l, h);
    const auto product = numkit::matmul(G[l + 1], F);
    report.product_error.insert(report.product_error.begin(),
                                relative(frobenius_diff(G[l], product), frobenius(G[l])));
    report.certificate.insert(report.certificate.begin(), relative(frobenius_diff(G[l], G_half), frobenius(G_half)));

    Mat64 summed(V, d);
    for (std::size_t v = 0; v < V; ++v)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) summed(v, j) += G[l](v, t * d + j);
    report.broadcast_error.insert(report.broadcast_error.begin(),
                                  relative(frobenius_diff(stack.J[l], summed), frobenius(stack.J[l])));
  }
  return report;
}

nlohmann::json to_json(const TheoremReport& r) {
  return {{"theorem", r.id},
          {"pass", r.pass},
          {"inputs_digest", r.inputs_digest},
          {"measurements", r.measurements},
          {"tolerances", r.tolerances}};
}

TheoremReport check_first_order(const NanoModel& model, std::span<const TokenId> tokens,
                                const evcore::EmotionVector& ev, std::span<const double> alphas) {
  return check_first_order(model, tokens, ev, alphas, fd_jacobians(model, tokens));
}

TheoremReport check_first_order(const NanoModel& model, std::span<const TokenId> tokens,
                                const evcore::EmotionVector& ev, std::span<const double> alphas,
                                const JacobianStack& stack) {
  check_finite_grid(alphas, "check_first_order");
  check_halving(alphas, "check_first_order");
  ev.check_compatible(model.config);
  const auto pred = first_order_prediction(stack, ev);

  std::vector<double> r;
  for (double a : alphas) {
    const auto dz = logit_shift(model, tokens, ev, a);
    double s = 0.0;
    for (std::size_t v = 0; v < dz.size(); ++v) {
      const double e = dz[v] - a * pred[v];
      s += e * e;
    }
    r.push_back(std::sqrt(s));
  }
  std::vector<double> ratios;
  bool pass = true;
  for (std::size_t i = 0; i + 1 < r.size(); ++i) {
    const double ratio = r[i] > 0.0 ? r[i + 1] / r[i] : 0.0;
    ratios.push_back(ratio);
    if (r[i] < kNoiseFloor) continue;
    pass = pass && ratio >= kRatioLow && ratio <= kRatioHigh;
  }
  double curvature = 0.0;
  const double energy = ev_energy(ev);
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (alphas[i] > 0.0 && energy > 0.0) curvature = std::max(curvature, r[i] / (alphas[i] * alphas[i] * energy));
  }

  TheoremReport rep;
  rep.id = "first_order";
  rep.pass = pass;
  const nlohmann::json params{{"alphas", alphas}};
  rep.inputs_digest = digest_inputs(model, tokens, {&ev}, params);
  rep.measurements = {{"alphas", alphas},
                      {"residual", r},
                      {"ratios", ratios},
                      {"curvature_constant", curvature},
                      {"fd_certificate", stack.certificate}};
  rep.tolerances = {{"ratio_low", kRatioLow}, {"ratio_high", kRatioHigh}, {"noise_floor", kNoiseFloor}};
  return rep;
}

TheoremReport check_monotonic_gain(const NanoModel& model, std::span<const TokenId> tokens,
                                   const evcore::EmotionVector& ev, std::span<const double> alphas,
                                   const JacobianStack& stack) {
  if (ev.is_zero()) throw ValidationError("check_monotonic_gain: emotion vector is all zero");
  check_finite_grid(alphas, "check_monotonic_gain");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (alphas[i] <= 0.0 || alphas[i] > 0.1) throw ValidationError("check_monotonic_gain: alphas must lie in (0, 0.1]");
    if (i > 0 && alphas[i] <= alphas[i - 1]) throw ValidationError("check_monotonic_gain: alphas must increase");
  }
  ev.check_compatible(model.config);
  const auto pred = first_order_prediction(stack, ev);

  TheoremReport rep;
  rep.id = "monotonic_gain";
  rep.inputs_digest = digest_inputs(model, tokens, {&ev}, {{"alphas", alphas}});
  rep.tolerances = {{"strictly_increasing", true}, {"positive", true}};
  if (numkit::norm2(pred) == 0.0) {
    rep.pass = false;
    rep.measurements = {{"note", "first-order prediction is zero; no readout can be constructed"}};
    return rep;
  }
  const auto w = unit(pred);

  std::vector<double> gains, slopes;
  bool pass = true;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const double g = numkit::dot(w, logit_shift(model, tokens, ev, alphas[i]));
    pass = pass && g > 0.0 && (i == 0 || g > gains.back());
    gains.push_back(g);
    slopes.push_back(g / alphas[i]);
  }
  double gamma = std::numeric_limits<double>::infinity();
  std::vector<double> per_layer;
  for (std::size_t l = 0; l < stack.J.size(); ++l) {
    const double n2 = ev.norms()[l] * ev.norms()[l];
    if (n2 == 0.0) continue;
    const double m = numkit::dot(w, matvec(stack.J[l], to64(ev.layer(l)))) / n2;
    per_layer.push_back(m);
    gamma = std::min(gamma, m);
  }
  rep.pass = pass;
  rep.measurements = {{"alphas", alphas},
                      {"delta_g", gains},
                      {"delta_g_over_alpha", slopes},
                      {"first_order_gain", numkit::norm2(pred)},
                      {"gamma_hat", gamma},
                      {"per_layer_margin", per_layer}};
  return rep;
}

double semantic_bound(const JacobianStack& stack, std::span<const double> u, const evcore::EmotionVector& ev,
                      double alpha) {
  if (ev.layers() != stack.J.size()) throw ValidationError("EV layer count does not match the Jacobian stack");
  double sens = 0.0;
  for (const auto& J : stack.J) {
    if (u.size() != J.rows()) throw ValidationError("readout length does not match the vocabulary");
    for (std::size_t j = 0; j < J.cols(); ++j) {
      double c = 0.0;
      for (std::size_t v = 0; v < J.rows(); ++v) c += u[v] * J(v, j);
      sens += c * c;
    }
  }
  return std::abs(alpha) * std::sqrt(sens) * std::sqrt(ev_energy(ev));
}

TheoremReport check_semantic_bound(const NanoModel& model, std::span<const TokenId> tokens,
                                   const evcore::EmotionVector& ev, const SemanticOptions& opt,
                                   const JacobianStack& stack) {
  if (!(opt.alpha > 0.0) || !std::isfinite(opt.alpha)) throw ValidationError("check_semantic_bound: alpha must be > 0");
  if (opt.samples == 0) throw ValidationError("check_semantic_bound: need at least one sample");
  ev.check_compatible(model.config);
  const auto V = stack.base_logits.size();
  const auto pred = first_order_prediction(stack, ev);
  const auto dz = logit_shift(model, tokens, ev, opt.alpha);

  TheoremReport rep;
  rep.id = "semantic_bound";
  rep.inputs_digest = digest_inputs(model, tokens, {&ev},
                                    {{"alpha", opt.alpha}, {"samples", opt.samples}, {"seed", opt.seed}});
  rep.tolerances = {{"slack", opt.slack},
                    {"separation", opt.separation},
                    {"curvature_constant", opt.curvature_constant}};
  if (numkit::norm2(pred) == 0.0) {
    rep.pass = false;
    rep.measurements = {{"note", "first-order prediction is zero; no aligned readout"}};
    return rep;
  }
  const auto w = unit(pred);
  const double aligned = std::abs(numkit::dot(w, dz));
  const double aligned_bound = semantic_bound(stack, w, ev, opt.alpha);

  numkit::SeededRng rng(opt.seed);
  std::vector<double> ds, bounds, ds_orth, bounds_orth;
  bool within = true;
  for (std::size_t i = 0; i < opt.samples; ++i) {
    Vec64 u(V);
    for (double& x : u) x = rng.gaussian();
    u = unit(std::move(u));
    Vec64 up = u;
    const double c = numkit::dot(u, w);
    for (std::size_t v = 0; v < V; ++v) up[v] -= c * w[v];
    up = unit(std::move(up));

    ds.push_back(std::abs(numkit::dot(u, dz)));
    bounds.push_back(semantic_bound(stack, u, ev, opt.alpha));
    ds_orth.push_back(std::abs(numkit::dot(up, dz)));
    bounds_orth.push_back(semantic_bound(stack, up, ev, opt.alpha));
    within = within && ds.back() <= (1.0 + opt.slack) * bounds.back() &&
             ds_orth.back() <= (1.0 + opt.slack) * bounds_orth.back();
  }
  const double worst_orth = *std::max_element(ds_orth.begin(), ds_orth.end());
  const bool separated = worst_orth * opt.separation <= aligned;
  const double curvature_limit = opt.separation * opt.curvature_constant * opt.alpha * opt.alpha * ev_energy(ev);
  const bool curvature_ok = opt.curvature_constant <= 0.0 || worst_orth <= curvature_limit;

  rep.pass = within && separated && curvature_ok;
  rep.measurements = {{"alpha", opt.alpha},
                      {"delta_s_random", ds},
                      {"bound_random", bounds},
                      {"delta_s_orthogonal", ds_orth},
                      {"bound_orthogonal", bounds_orth},
                      {"delta_s_aligned", aligned},
                      {"bound_aligned", aligned_bound},
                      {"max_delta_s_orthogonal", worst_orth},
                      {"separation_measured", worst_orth > 0.0 ? aligned / worst_orth : 0.0},
                      {"curvature_limit", curvature_limit},
                      {"within_bound", within},
                      {"separated", separated},
                      {"curvature_ok", curvature_ok}};
  return rep;
}

TheoremReport check_additivity(const NanoModel& model, std::span<const TokenId> tokens,
                               const evcore::EmotionVector& a, const evcore::EmotionVector& b,
                               std::span<const std::pair<double, double>> pairs, std::span<const double> gain_alphas,
                               const JacobianStack& stack) {
  if (a.all_layers() == b.all_layers()) throw ValidationError("check_additivity: needs two distinct emotion vectors");
  if (!a.same_shape(b)) throw ValidationError("check_additivity: emotion vectors differ in shape");
  if (pairs.empty() || gain_alphas.empty()) throw ValidationError("check_additivity: empty alpha grid");
  a.check_compatible(model.config);
  for (std::size_t i = 0; i + 1 < pairs.size(); ++i) {
    const double r1 = pairs[i + 1].first * 2.0, r2 = pairs[i + 1].second * 2.0;
    if (std::abs(r1 - pairs[i].first) > 1e-12 * std::abs(pairs[i].first) ||
        std::abs(r2 - pairs[i].second) > 1e-12 * std::abs(pairs[i].second)) {
      throw ValidationError("check_additivity: alpha pairs must halve jointly");
    }
  }

  std::vector<double> defect;
  for (const auto& [a1, a2] : pairs) {
    const auto both = steer::logit_delta<double>(model, tokens, {{{&a, a1}, {&b, a2}}});
    const auto da = steer::logit_delta<double>(model, tokens, {{{&a, a1}}});
    const auto db = steer::logit_delta<double>(model, tokens, {{{&b, a2}}});
    double s = 0.0;
    for (std::size_t v = 0; v < both.size(); ++v) {
      const double e = both[v] - da[v] - db[v];
      s += e * e;
    }
    defect.push_back(std::sqrt(s));
  }
  std::vector<double> ratios;
  bool quadratic = true;
  for (std::size_t i = 0; i + 1 < defect.size(); ++i) {
    const double ratio = defect[i] > 0.0 ? defect[i + 1] / defect[i] : 0.0;
    ratios.push_back(ratio);
    if (defect[i] < kNoiseFloor) continue;
    quadratic = quadratic && ratio >= kRatioLow && ratio <= kRatioHigh;
  }

  auto pred = first_order_prediction(stack, a);
  const auto pb = first_order_prediction(stack, b);
  for (std::size_t v = 0; v < pred.size(); ++v) pred[v] += pb[v];
  std::vector<double> slopes;
  bool constant = false;
  double spread = 0.0;
  if (numkit::norm2(pred) > 0.0) {
    const auto w = unit(pred);
    for (double al : gain_alphas) {
      if (!(al > 0.0)) throw ValidationError("check_additivity: gain alphas must be positive");
      const auto dz = steer::logit_delta<double>(model, tokens, {{{&a, al}, {&b, al}}});
      slopes.push_back(numkit::dot(w, dz) / al);
    }
    const auto [lo, hi] = std::minmax_element(slopes.begin(), slopes.end());
    spread = *lo > 0.0 ? (*hi - *lo) / *lo : std::numeric_limits<double>::infinity();
    constant = spread <= 0.05;
  }

  TheoremReport rep;
  rep.id = "additivity";
  nlohmann::json pj = nlohmann::json::array();
  for (const auto& [a1, a2] : pairs) pj.push_back({a1, a2});
  rep.inputs_digest = digest_inputs(model, tokens, {&a, &b}, {{"pairs", pj}, {"gain_alphas", gain_alphas}});
  rep.pass = quadratic && constant;
  rep.measurements = {{"pairs", pj},
                      {"defect", defect},
                      {"ratios", ratios},
                      {"gain_alphas", gain_alphas},
                      {"delta_g_over_alpha", slopes},
                      {"relative_spread", spread},
                      {"quadratic", quadratic},
                      {"constant_gain", constant}};
  rep.tolerances = {{"ratio_low", kRatioLow},
                    {"ratio_high", kRatioHigh},
                    {"noise_floor", kNoiseFloor},
                    {"max_relative_spread", 0.05}};
  return rep;
}

// ---- Fisher ----

namespace {

Eigen::MatrixXd to_eigen(const Mat64& m) {
  return Eigen::Map<const RowMajor>(m.values().data(), static_cast<Eigen::Index>(m.rows()),
                                    static_cast<Eigen::Index>(m.cols()));
}

Eigen::VectorXd to_eigen(std::span<const double> v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Vec64 from_eigen(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

struct SampleStats {
  Eigen::VectorXd mean_e, mean_n;
  Eigen::MatrixXd pooled;
};

// Rows [begin, end) of each class.
SampleStats stats(const Eigen::MatrixXd& xe, const Eigen::MatrixXd& xn, Eigen::Index begin, Eigen::Index end) {
  const Eigen::Index m = end - begin;
  SampleStats s;
  s.mean_e = xe.middleRows(begin, m).colwise().mean().transpose();
  s.mean_n = xn.middleRows(begin, m).colwise().mean().transpose();
  const Eigen::MatrixXd ce = xe.middleRows(begin, m).rowwise() - s.mean_e.transpose();
  const Eigen::MatrixXd cn = xn.middleRows(begin, m).rowwise() - s.mean_n.transpose();
  s.pooled = (ce.transpose() * ce + cn.transpose() * cn) / static_cast<double>(2 * m - 2);
  return s;
}

// Solves sigma x = b, adding a ridge of 1e-6 trace/d when sigma is not
// numerically positive definite.
Eigen::VectorXd solve_spd(const Eigen::MatrixXd& sigma, const Eigen::VectorXd& b, bool& ridged) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() == Eigen::Success) return llt.solve(b);
  ridged = true;
  const double ridge = 1e-6 * sigma.trace() / static_cast<double>(sigma.rows());
  const Eigen::MatrixXd reg = sigma + ridge * Eigen::MatrixXd::Identity(sigma.rows(), sigma.cols());
  return Eigen::LLT<Eigen::MatrixXd>(reg).solve(b);
}

void draw(const GaussianLayerSpec& spec, std::size_t n, numkit::SeededRng& rng, Eigen::MatrixXd& xe,
          Eigen::MatrixXd& xn) {
  const auto d = static_cast<Eigen::Index>(spec.mu_e.size());
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(to_eigen(spec.sigma)).matrixL();
  auto fill = [&](Eigen::MatrixXd& x, const Vec64& mu) {
    x.resize(static_cast<Eigen::Index>(n), d);
    Eigen::VectorXd z(d);
    const Eigen::VectorXd m = to_eigen(mu);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < d; ++j) z(j) = rng.gaussian();
      x.row(i) = (m + chol * z).transpose();
    }
  };
  fill(xe, spec.mu_e);
  fill(xn, spec.mu_n);
}

double abs_cos(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  return std::abs(a.dot(b)) / (a.norm() * b.norm());
}

}  // namespace

void GaussianLayerSpec::validate() const {
  const std::size_t d = mu_e.size();
  if (d == 0 || mu_n.size() != d) throw ValidationError("Gaussian spec: means must be nonempty and equal length");
  if (sigma.rows() != d || sigma.cols() != d) throw ValidationError("Gaussian spec: covariance must be d x d");
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(sigma(i, j) - sigma(j, i)) > 1e-12 * (std::abs(sigma(i, j)) + 1.0)) {
        throw ValidationError("Gaussian spec: covariance is not symmetric");
      }
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(sigma), Eigen::EigenvaluesOnly);
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw ValidationError("Gaussian spec: covariance is not positive definite");
}

bool GaussianLayerSpec::spherical() const {
  const std::size_t d = sigma.rows();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      if ((i == j && sigma(i, j) != sigma(0, 0)) || (i != j && sigma(i, j) != 0.0)) return false;
  return true;
}

Vec64 fisher_direction(const Mat64& sigma, std::span<const double> mean_difference) {
  if (sigma.rows() != sigma.cols() || sigma.rows() != mean_difference.size()) {
    throw ValidationError("fisher_direction: shape mismatch");
  }
  bool ridged = false;
  return from_eigen(solve_spd(to_eigen(sigma), to_eigen(mean_difference), ridged));
}

TheoremReport fisher_check(const GaussianLayerSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.mu_e.size();
  if (n < 10 * d) throw ValidationError("fisher_check: need n >= 10 d samples per class");
  numkit::SeededRng rng(seed);
  Eigen::MatrixXd xe, xn;
  draw(spec, n, rng, xe, xn);
  const auto N = static_cast<Eigen::Index>(n);
  const Eigen::Index half = N / 2;

  bool ridged = false;
  const auto full = stats(xe, xn, 0, N);
  const Eigen::VectorXd ev_full = full.mean_e - full.mean_n;
  const Eigen::VectorXd v_full = solve_spd(full.pooled, ev_full, ridged);
  const double raw = abs_cos(v_full, ev_full);

  const auto fit = stats(xe, xn, 0, half);
  const auto held = stats(xe, xn, half, N);
  const Eigen::VectorXd ev_fit = fit.mean_e - fit.mean_n;
  const Eigen::VectorXd v_fit = solve_spd(fit.pooled, ev_fit, ridged);
  const double whitened = abs_cos(held.pooled * v_fit, ev_fit);

  const bool sph = spec.spherical();
  TheoremReport rep;
  rep.id = "fisher";
  rep.pass = sph ? raw >= 0.99 : whitened >= 0.99;
  std::ostringstream s;
  s << seed << '|' << n << '|';
  for (double x : spec.mu_e) s << x << ',';
  for (double x : spec.mu_n) s << x << ',';
  for (double x : spec.sigma.values()) s << x << ',';
  rep.inputs_digest = io::sha256_hex(s.str());
  const auto pop = fisher_direction(spec.sigma, [&] {
    Vec64 diff(d);
    for (std::size_t j = 0; j < d; ++j) diff[j] = spec.mu_e[j] - spec.mu_n[j];
    return diff;
  }());
  rep.measurements = {{"n", n},
                      {"d", d},
                      {"spherical", sph},
                      {"raw_cosine", raw},
                      {"whitened_cosine", whitened},
                      {"population_cosine", abs_cos(v_full, to_eigen(pop))},
                      {"ridge_added", ridged}};
  rep.tolerances = {{"min_cosine", 0.99}, {"criterion", sph ? "raw" : "whitened"}};
  return rep;
}

std::vector<double> fisher_population_limit(const GaussianLayerSpec& spec, std::span<const std::size_t> counts,
                                            std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.mu_e.size();
  Vec64 diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = spec.mu_e[j] - spec.mu_n[j];
  const Eigen::VectorXd pop = to_eigen(fisher_direction(spec.sigma, diff));
  std::vector<double> angles;
  for (std::size_t n : counts) {
    if (n < 2) throw ValidationError("fisher_population_limit: need at least two samples per class");
    numkit::SeededRng rng(seed);
    Eigen::MatrixXd xe, xn;
    draw(spec, n, rng, xe, xn);
    const auto s = stats(xe, xn, 0, static_cast<Eigen::Index>(n));
    bool ridged = false;
    const Eigen::VectorXd v = solve_spd(s.pooled, s.mean_e - s.mean_n, ridged);
    angles.push_back(std::acos(std::min(1.0, abs_cos(v, pop))));
  }
  return angles;
}

evcore::EmotionVector random_vector(const nanoformer::ModelConfig& config, std::uint64_t seed, std::string name) {
  numkit::SeededRng rng(seed);
  std::vector<numkit::Vec> layers;
  const auto d = static_cast<std::size_t>(config.d_model);
  for (int l = 0; l < config.layers; ++l) {
    const auto m = numkit::gaussian_matrix(rng, 1, d, 1.0 / std::sqrt(static_cast<double>(d)));
    layers.emplace_back(m.flat().begin(), m.flat().end());
  }
  return {std::move(name), "random", std::move(layers), 1};
}

GaussianLayerSpec fisher_spec(std::size_t d, bool anisotropic) {
  if (d < 2) throw ValidationError("fisher_spec: need d >= 2");
  GaussianLayerSpec s;
  s.mu_e.assign(d, 0.0);
  s.mu_n.assign(d, 0.0);
  s.sigma = Mat64::identity(d);
  s.mu_e[0] = 1.0;
  if (anisotropic) {
    s.sigma(0, 0) = 4.0;
    s.mu_e[1] = 1.0;
  }
  return s;
}

std::vector<TheoremReport> verify_bundle(const nanoformer::NanoModel& model, const evcore::EmotionVector& a,
                                         const evcore::EmotionVector& b, const BundleOptions& opt) {
  if (!(opt.alpha > 0.0) || !std::isfinite(opt.alpha)) throw ValidationError("verify: alpha must be positive");
  std::vector<nanoformer::TokenId> tokens{nanoformer::kBos};
  for (auto t : nanoformer::Tokenizer::encode(opt.prompt)) tokens.push_back(t);
  tokens.push_back(nanoformer::kSep);
  const auto stack = fd_jacobians(model, tokens);

  std::vector<TheoremReport> out;
  const std::vector<double> halving{opt.alpha, opt.alpha / 2, opt.alpha / 4};
  out.push_back(check_first_order(model, tokens, a, halving, stack));

  std::vector<double> gain_grid;
  for (int i = 1; i <= 10; ++i) gain_grid.push_back(0.01 * i);
  out.push_back(check_monotonic_gain(model, tokens, a, gain_grid, stack));

  const auto sph = fisher_check(fisher_spec(16, false), opt.fisher_samples, opt.seed);
  const auto an = fisher_check(fisher_spec(16, true), opt.fisher_samples, opt.seed);
  TheoremReport fisher;
  fisher.id = "fisher";
  const double an_raw = an.measurements["raw_cosine"];
  fisher.pass = sph.pass && an.pass && an_raw < 0.99;
  fisher.inputs_digest = io::sha256_hex(sph.inputs_digest + an.inputs_digest);
  fisher.measurements = {{"spherical", sph.measurements}, {"anisotropic", an.measurements}};
  fisher.tolerances = {{"min_cosine", 0.99}, {"anisotropic_raw_below", 0.99}};
  out.push_back(std::move(fisher));

  SemanticOptions so;
  so.seed = opt.seed;
  out.push_back(check_semantic_bound(model, tokens, a, so, stack));

  const std::vector<std::pair<double, double>> pairs{
      {opt.alpha, opt.alpha}, {opt.alpha / 2, opt.alpha / 2}, {opt.alpha / 4, opt.alpha / 4}};
  out.push_back(check_additivity(model, tokens, a, b, pairs, std::vector<double>{0.02, 0.04, 0.08}, stack));
  return out;
}

}  // namespace evsteer::theorylab
