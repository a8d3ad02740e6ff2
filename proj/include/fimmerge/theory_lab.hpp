#pragma once

// Numerical checks of the Hessian bound on task-arithmetic interpolation
// error, the Fisher/Hessian agreement near an optimum, and the per-layer
// nonlinearity score.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fimmerge/common.hpp"
#include "fimmerge/hessian.hpp"
#include "fimmerge/micro_model.hpp"
#include "fimmerge/stats.hpp"
#include "fimmerge/topology.hpp"

namespace fimmerge::theory {

using Vector = std::vector<double>;

inline Vector along(std::span<const double> theta, std::span<const double> delta, double t) {
  Vector x(theta.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = theta[i] + t * delta[i];
  return x;
}

inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// ---- fixtures ----

// f(x) = 1/2 x^T A x + b^T x + c. A = 0 gives the linear fixture.
struct QuadraticObjective {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
  double c = 0.0;

  std::size_t dimension() const { return static_cast<std::size_t>(b.size()); }
  double value(std::span<const double> x) const {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
    return 0.5 * v.dot(a * v) + b.dot(v) + c;
  }
  void gradient(std::span<const double> x, std::span<double> out) const {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size())) = a * v + b;
  }
};

// Vector-valued f(x) = M x + b.
struct LinearVectorMap {
  Eigen::MatrixXd m;
  Eigen::VectorXd b;
  std::vector<double> outputs(std::span<const double> x) const {
    Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
    Eigen::VectorXd y = m * v + b;
    return {y.data(), y.data() + y.size()};
  }
};

// ---- merging error ----

// |f(theta + a delta) - lerp(f(theta), f(theta + delta), a)|
template <ScalarObjective F>
double merging_error(const F& f, std::span<const double> theta, std::span<const double> delta,
                     double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw ValidationError("merging_error: alpha must lie in [0,1]");
  const double f0 = f.value(theta);
  const double f1 = f.value(along(theta, delta, 1.0));
  const double fa = f.value(along(theta, delta, alpha));
  return std::abs(fa - std::lerp(f0, f1, alpha));
}

// Merging error of the micro model's scalar summary (mean probe log-prob).
inline double merging_error(const MicroModel& base, const TensorArchive& delta, double alpha,
                            const std::vector<TokenSeq>& probes) {
  MicroNet net(base.config);
  ProbeObjective f(net, probes);
  const auto theta = net.layout().flatten(base.parameters);
  const auto d = net.layout().flatten(delta);
  return merging_error(f, theta, d, alpha);
}

// ---- Hessian bound ----

struct LineCurvature {
  std::vector<double> t_grid;
  std::vector<double> hessian_norms;  // spectral norm at each grid t
  double sup_norm = 0.0;              // max over grid and refinement points
  double argmax_t = 0.0;
};

inline std::vector<double> uniform_grid(int points) {
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[i] = points == 1 ? 0.0 : double(i) / (points - 1);
  return g;
}

// Indices of nonzero entries (the support the Hessian must cover).
inline std::vector<std::size_t> support_of(std::span<const double> delta) {
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (delta[i] != 0.0) s.push_back(i);
  }
  return s;
}

// sup_t ||H_f(theta + t delta)||_2 over the grid, refined by one bisection
// step on each side of the grid argmax. The Hessian is restricted to
// `subset`, which must contain the support of delta so the restriction is
// exact along the line.
template <ScalarObjective F>
LineCurvature line_hessian_sup(const F& f, std::span<const double> theta,
                               std::span<const double> delta, std::span<const std::size_t> subset,
                               std::vector<double> t_grid = uniform_grid(11), double h = 1e-4) {
  if (t_grid.empty()) throw ValidationError("t grid is empty");
  std::vector<char> in_subset(delta.size(), 0);
  for (auto i : subset) in_subset.at(i) = 1;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (delta[i] != 0.0 && !in_subset[i]) {
      throw ValidationError("Hessian subset does not cover the support of delta");
    }
  }
  auto norm_at = [&](double t) {
    return spectral_norm(finite_difference_hessian(f, along(theta, delta, t), subset, h).matrix);
  };
  LineCurvature lc;
  std::sort(t_grid.begin(), t_grid.end());
  lc.t_grid = t_grid;
  for (double t : t_grid) lc.hessian_norms.push_back(norm_at(t));
  const auto best = static_cast<std::size_t>(
      std::max_element(lc.hessian_norms.begin(), lc.hessian_norms.end()) - lc.hessian_norms.begin());
  lc.sup_norm = lc.hessian_norms[best];
  lc.argmax_t = t_grid[best];
  for (int side : {-1, 1}) {
    const auto nb = static_cast<std::ptrdiff_t>(best) + side;
    if (nb < 0 || nb >= static_cast<std::ptrdiff_t>(t_grid.size())) continue;
    const double mid = 0.5 * (t_grid[best] + t_grid[static_cast<std::size_t>(nb)]);
    const double v = norm_at(mid);
    if (v > lc.sup_norm) {
      lc.sup_norm = v;
      lc.argmax_t = mid;
    }
  }
  return lc;
}

// alpha(1-alpha)/2 * ||delta||^2 (sum of squares) * sup_t ||H||.
inline double hessian_bound_value(double alpha, double delta_norm_sq, double sup_norm) {
  return alpha * (1.0 - alpha) / 2.0 * delta_norm_sq * sup_norm;
}

template <ScalarObjective F>
double hessian_bound(const F& f, std::span<const double> theta, std::span<const double> delta,
                     double alpha, const std::vector<double>& t_grid = uniform_grid(11)) {
  const auto subset = support_of(delta);
  if (alpha == 0.0 || alpha == 1.0 || subset.empty()) return 0.0;
  const auto lc = line_hessian_sup(f, theta, delta, subset, t_grid);
  return hessian_bound_value(alpha, squared_norm(delta), lc.sup_norm);
}

// Directional second derivative g''(t) = delta^T H(theta + t delta) delta
// from a central difference of the analytic gradient along delta.
template <ScalarObjective F>
double directional_curvature(const F& f, std::span<const double> theta,
                             std::span<const double> delta, double t, double s = 1e-3) {
  Vector gp(theta.size()), gm(theta.size());
  f.gradient(along(theta, delta, t + s), gp);
  f.gradient(along(theta, delta, t - s), gm);
  double acc = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) acc += (gp[i] - gm[i]) * delta[i];
  return acc / (2.0 * s);
}

// max_t |g'''(t)| / 6 from differences of g'' on the grid: the size of the
// third-order term the quadratic analysis drops.
template <ScalarObjective F>
double cubic_slack(const F& f, std::span<const double> theta, std::span<const double> delta,
                   const std::vector<double>& t_grid = uniform_grid(11)) {
  std::vector<double> g2;
  for (double t : t_grid) g2.push_back(directional_curvature(f, theta, delta, t));
  double worst = 0.0;
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    worst = std::max(worst, std::abs(g2[i] - g2[i - 1]) / (t_grid[i] - t_grid[i - 1]));
  }
  return worst / 6.0;
}

struct BoundCheckResult {
  int trial = 0;
  std::uint64_t seed = 0;
  std::vector<double> alpha_grid;
  std::vector<double> measured_error;
  std::vector<double> bound;
  double delta_norm_sq = 0.0;
  double sup_hessian_norm = 0.0;
  double argmax_t = 0.0;
  double cubic_slack_estimate = 0.0;
  double tol_rel = 0.05;
  bool passed = false;
};

inline nlohmann::json to_json(const BoundCheckResult& r) {
  return {{"trial", r.trial},
          {"seed", r.seed},
          {"alpha_grid", r.alpha_grid},
          {"measured_error", r.measured_error},
          {"bound", r.bound},
          {"delta_norm_sq", r.delta_norm_sq},
          {"sup_hessian_norm", r.sup_hessian_norm},
          {"argmax_t", r.argmax_t},
          {"cubic_slack_estimate", r.cubic_slack_estimate},
          {"tol_rel", r.tol_rel},
          {"passed", r.passed}};
}

inline std::vector<double> default_alpha_grid() {
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
}

// One bound check: E(a) <= bound(a) * (1 + tol_rel) + slack for every a.
template <ScalarObjective F>
BoundCheckResult check_bound(const F& f, std::span<const double> theta,
                             std::span<const double> delta,
                             const std::vector<double>& alpha_grid = default_alpha_grid(),
                             double tol_rel = 0.05) {
  BoundCheckResult r;
  r.alpha_grid = alpha_grid;
  r.tol_rel = tol_rel;
  r.delta_norm_sq = squared_norm(delta);
  const auto subset = support_of(delta);
  const auto lc = line_hessian_sup(f, theta, delta, subset);
  r.sup_hessian_norm = lc.sup_norm;
  r.argmax_t = lc.argmax_t;
  r.cubic_slack_estimate = cubic_slack(f, theta, delta);
  r.passed = true;
  for (double a : alpha_grid) {
    const double e = merging_error(f, theta, delta, a);
    const double b = hessian_bound_value(a, r.delta_norm_sq, r.sup_hessian_norm);
    r.measured_error.push_back(e);
    r.bound.push_back(b);
    if (!(e <= b * (1.0 + tol_rel) + r.cubic_slack_estimate)) r.passed = false;
  }
  return r;
}

struct BoundTrialOptions {
  MicroModelConfig config{};
  int subset_size = 32;
  int probe_count = 4;
  int probe_len = 32;
};

// Randomized trials on freshly initialized micro models: a random subset of
// coordinates, a random direction on it scaled to ||delta|| = delta_scale.
inline std::vector<BoundCheckResult> verify_bound(int trials, double delta_scale,
                                                  std::uint64_t seed,
                                                  const BoundTrialOptions& opts = {}) {
  if (trials < 1) throw ValidationError("verify_bound: trials must be >= 1");
  if (!(delta_scale > 0.0)) throw ValidationError("verify_bound: delta_scale must be > 0");
  std::vector<BoundCheckResult> out;
  for (int k = 0; k < trials; ++k) {
    const std::uint64_t trial_seed = seed + 1000003ULL * static_cast<std::uint64_t>(k);
    auto cfg = opts.config;
    cfg.seed = trial_seed;
    const auto model = MicroModel::init(cfg);
    MicroNet net(cfg);
    ProbeObjective f(net, uniform_token_sequences(cfg.vocab_size, opts.probe_count,
                                                  opts.probe_len, trial_seed ^ 0x5bd1e995ULL));
    const auto theta = net.layout().flatten(model.parameters);

    std::mt19937_64 rng(trial_seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> coords(theta.size());
    std::iota(coords.begin(), coords.end(), 0);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(opts.subset_size));
    std::sort(coords.begin(), coords.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector delta(theta.size(), 0.0);
    double n2 = 0.0;
    for (auto i : coords) {
      delta[i] = normal(rng);
      n2 += delta[i] * delta[i];
    }
    for (auto i : coords) delta[i] *= delta_scale / std::sqrt(n2);

    auto r = check_bound(f, theta, delta);
    r.trial = k;
    r.seed = trial_seed;
    out.push_back(std::move(r));
  }
  return out;
}

// Max relative deviation of E(a) / (a (1 - a)) from its mean over the grid.
template <ScalarObjective F>
double quadratic_coefficient_check(const F& f, std::span<const double> theta,
                                   std::span<const double> delta,
                                   const std::vector<double>& alpha_grid = default_alpha_grid()) {
  std::vector<double> ratios;
  for (double a : alpha_grid) {
    if (a <= 0.0 || a >= 1.0) throw ValidationError("alpha grid must lie strictly inside (0,1)");
    ratios.push_back(merging_error(f, theta, delta, a) / (a * (1.0 - a)));
  }
  const double m = stats::mean(ratios);
  if (m == 0.0) return 0.0;
  double dev = 0.0;
  for (double r : ratios) dev = std::max(dev, std::abs(r - m) / std::abs(m));
  return dev;
}

// ---- Fisher vs Hessian ----

struct FisherHessianLayer {
  int layer = 0;
  double fisher_mean = 0.0;
  double hessian_mean = 0.0;
};

struct FisherHessianResult {
  std::vector<FisherHessianLayer> layers;
  double rank_correlation = 0.0;
  double mean_relative_gap = 0.0;
  double grad_norm = 0.0;
};

inline nlohmann::json to_json(const FisherHessianResult& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer}, {"fisher_mean", l.fisher_mean}, {"hessian_mean", l.hessian_mean}});
  }
  return {{"layers", layers},
          {"per_layer_rank_correlation", r.rank_correlation},
          {"mean_relative_gap", r.mean_relative_gap},
          {"grad_norm", r.grad_norm}};
}

// Coordinates sampled per coefficient-set layer, `per_layer` each.
inline std::map<int, std::vector<std::size_t>> sample_layer_coordinates(const MicroNet& net,
                                                                        int per_layer,
                                                                        std::uint64_t seed) {
  const auto topo = parse_topology(micro_parameter_shapes(net.config()));
  std::map<int, std::vector<std::size_t>> pool;
  for (const auto& s : net.layout().slots()) {
    const auto& rec = topo.at(s.name);
    if (!rec.in_coefficient_set) continue;
    for (std::size_t i = 0; i < s.size; ++i) pool[*rec.layer_index].push_back(s.offset + i);
  }
  std::mt19937_64 rng(seed);
  for (auto& [_, v] : pool) {
    std::shuffle(v.begin(), v.end(), rng);
    v.resize(std::min(v.size(), static_cast<std::size_t>(per_layer)));
    std::sort(v.begin(), v.end());
  }
  return pool;
}

// Compares per-layer means of the empirical diagonal Fisher (per-token
// squared gradients on the corpus) with per-layer means of the diagonal
// Hessian of the corpus mean NLL (central differences of the gradient).
inline FisherHessianResult fisher_hessian_check(
    const MicroNet& net, std::span<const double> theta, const std::vector<TokenSeq>& corpus,
    const std::map<int, std::vector<std::size_t>>& coords, double h = 1e-4) {
  if (corpus.empty()) throw ValidationError("fisher_hessian_check: empty corpus");
  const std::size_t d = theta.size();
  std::size_t n_tokens = 0;
  for (const auto& s : corpus) n_tokens += s.size() - 1;

  std::vector<std::vector<double>> seq_fisher(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const auto& s = corpus[i];
    seq_fisher[i].assign(d, 0.0);
    std::vector<double> w(s.size() - 1, 0.0), g(d);
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      std::fill(w.begin(), w.end(), 0.0);
      w[t] = 1.0;
      std::fill(g.begin(), g.end(), 0.0);
      net.evaluate(theta, s, g, 1.0, w);
      for (std::size_t p = 0; p < d; ++p) seq_fisher[i][p] += g[p] * g[p];
    }
  });
  std::vector<double> fisher(d, 0.0);
  for (const auto& f : seq_fisher) {
    for (std::size_t p = 0; p < d; ++p) fisher[p] += f[p] / static_cast<double>(n_tokens);
  }

  // corpus loss = token-weighted mean NLL so that H matches the Fisher scale
  auto corpus_grad = [&](std::span<const double> x, std::span<double> g) {
    std::fill(g.begin(), g.end(), 0.0);
    for (const auto& s : corpus) {
      const double w = static_cast<double>(s.size() - 1) / static_cast<double>(n_tokens);
      net.evaluate(x, s, g, w);
    }
  };

  FisherHessianResult res;
  {
    std::vector<double> g(d);
    corpus_grad(theta, g);
    res.grad_norm = std::sqrt(squared_norm(g));
  }
  std::vector<double> fm, hm;
  for (const auto& [layer, idx] : coords) {
    std::vector<double> hdiag(idx.size());
    parallel_for(idx.size(), [&](std::size_t k) {
      std::vector<double> x(theta.begin(), theta.end()), gp(d), gm(d);
      x[idx[k]] = theta[idx[k]] + h;
      corpus_grad(x, gp);
      x[idx[k]] = theta[idx[k]] - h;
      corpus_grad(x, gm);
      hdiag[k] = (gp[idx[k]] - gm[idx[k]]) / (2.0 * h);
    });
    FisherHessianLayer rec{layer, 0.0, 0.0};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      rec.fisher_mean += fisher[idx[k]] / static_cast<double>(idx.size());
      rec.hessian_mean += hdiag[k] / static_cast<double>(idx.size());
    }
    fm.push_back(rec.fisher_mean);
    hm.push_back(rec.hessian_mean);
    res.layers.push_back(rec);
  }
  double gap = 0.0;
  for (std::size_t i = 0; i < fm.size(); ++i) gap += std::abs(fm[i] - hm[i]) / std::abs(hm[i]);
  res.mean_relative_gap = gap / static_cast<double>(fm.size());
  res.rank_correlation = fm.size() >= 2 ? stats::spearman(fm, hm) : 1.0;
  return res;
}

// Single softmax layer over one-hot features: p(y | x) = softmax(W[:, x]).
// W is [classes, features] row-major. Its maximum-likelihood solution is
// W[c, k] = log q(c | k) for empirical conditionals q.
struct SoftmaxToy {
  int n_features = 0;
  int n_classes = 0;
  std::vector<std::pair<int, int>> samples;  // (feature, class)

  std::size_t dimension() const { return static_cast<std::size_t>(n_features * n_classes); }

  double sample_nll(std::span<const double> w, int x, int y, std::span<double> grad = {},
                    double scale = 1.0) const {
    std::vector<double> z(static_cast<std::size_t>(n_classes));
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n_classes; ++c) {
      z[c] = w[static_cast<std::size_t>(c * n_features + x)];
      mx = std::max(mx, z[c]);
    }
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    if (!grad.empty()) {
      for (int c = 0; c < n_classes; ++c) {
        const double p = std::exp(z[c] - lse);
        grad[static_cast<std::size_t>(c * n_features + x)] += scale * (p - (c == y ? 1.0 : 0.0));
      }
    }
    return lse - z[y];
  }

  double value(std::span<const double> w) const {
    double s = 0.0;
    for (auto [x, y] : samples) s += sample_nll(w, x, y);
    return s / static_cast<double>(samples.size());
  }

  void gradient(std::span<const double> w, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    const double inv = 1.0 / static_cast<double>(samples.size());
    for (auto [x, y] : samples) sample_nll(w, x, y, out, inv);
  }

  std::vector<double> mle() const {
    std::vector<double> counts(dimension(), 0.0), totals(static_cast<std::size_t>(n_features), 0.0);
    for (auto [x, y] : samples) {
      counts[static_cast<std::size_t>(y * n_features + x)] += 1.0;
      totals[static_cast<std::size_t>(x)] += 1.0;
    }
    std::vector<double> w(dimension());
    for (int c = 0; c < n_classes; ++c) {
      for (int k = 0; k < n_features; ++k) {
        const auto i = static_cast<std::size_t>(c * n_features + k);
        if (counts[i] == 0.0) throw ValidationError("softmax toy: every (feature, class) pair must occur");
        w[i] = std::log(counts[i] / totals[static_cast<std::size_t>(k)]);
      }
    }
    return w;
  }

  // Empirical diagonal Fisher: mean over samples of squared per-sample gradients.
  std::vector<double> empirical_fisher_diag(std::span<const double> w) const {
    std::vector<double> f(dimension(), 0.0), g(dimension());
    for (auto [x, y] : samples) {
      std::fill(g.begin(), g.end(), 0.0);
      sample_nll(w, x, y, g);
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += g[i] * g[i] / static_cast<double>(samples.size());
    }
    return f;
  }
};

// Random toy dataset where every (feature, class) pair occurs at least once.
inline SoftmaxToy make_softmax_toy(int n_features, int n_classes, int extra_samples,
                                   std::uint64_t seed) {
  SoftmaxToy toy{n_features, n_classes, {}};
  for (int k = 0; k < n_features; ++k) {
    for (int c = 0; c < n_classes; ++c) toy.samples.emplace_back(k, c);
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> fx(0, n_features - 1), cy(0, n_classes - 1);
  for (int i = 0; i < extra_samples; ++i) toy.samples.emplace_back(fx(rng), cy(rng));
  return toy;
}

struct ToyFisherHessianResult {
  std::vector<double> fisher_diag;
  std::vector<double> hessian_diag;
  double max_gap = 0.0;  // max_i |F_ii - H_ii| / max_j |H_jj|
};

inline ToyFisherHessianResult toy_fisher_hessian(const SoftmaxToy& toy, double h = 1e-4) {
  const auto w = toy.mle();
  ToyFisherHessianResult r;
  r.fisher_diag = toy.empirical_fisher_diag(w);
  std::vector<std::size_t> all(toy.dimension());
  std::iota(all.begin(), all.end(), 0);
  const auto hess = finite_difference_hessian(toy, w, all, h).matrix;
  double scale = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    r.hessian_diag.push_back(hess(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)));
    scale = std::max(scale, std::abs(r.hessian_diag.back()));
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    r.max_gap = std::max(r.max_gap, std::abs(r.fisher_diag[i] - r.hessian_diag[i]) / scale);
  }
  return r;
}

// ---- nonlinearity score ----

// Per-probe output vector: log p(x_{t+1} | x_<=t) along the probe.
struct ProbeLogProbs {
  const MicroNet* net;
  TokenSeq probe;
  std::vector<double> outputs(std::span<const double> theta) const {
    return net->token_log_probs(theta, probe);
  }
};

struct InterpolationTerms {
  double error_norm = 0.0;   // ||f(a) - lerp(f(0), f(1), a)||
  double change_norm = 0.0;  // ||f(1) - f(0)||
};

template <typename VF>
InterpolationTerms interpolation_terms(const VF& f, std::span<const double> theta,
                                       std::span<const double> delta, double alpha) {
  const auto f0 = f.outputs(theta);
  const auto f1 = f.outputs(along(theta, delta, 1.0));
  const auto fa = f.outputs(along(theta, delta, alpha));
  InterpolationTerms r;
  for (std::size_t i = 0; i < f0.size(); ++i) {
    const double e = fa[i] - std::lerp(f0[i], f1[i], alpha);
    const double c = f1[i] - f0[i];
    r.error_norm += e * e;
    r.change_norm += c * c;
  }
  r.error_norm = std::sqrt(r.error_norm);
  r.change_norm = std::sqrt(r.change_norm);
  return r;
}

inline constexpr double kNlDenominatorFloor = 1e-12;

// Mean over probe functions of error_norm / change_norm; nullopt when any
// probe's output change falls below 1e-12.
template <typename VF>
std::optional<double> nl_score(const std::vector<VF>& probes, std::span<const double> theta,
                               std::span<const double> delta, double alpha) {
  if (probes.empty()) throw ValidationError("nl_score needs at least one probe");
  double sum = 0.0;
  for (const auto& f : probes) {
    const auto terms = interpolation_terms(f, theta, delta, alpha);
    if (terms.change_norm < kNlDenominatorFloor) return std::nullopt;
    sum += terms.error_norm / terms.change_norm;
  }
  return sum / static_cast<double>(probes.size());
}

// delta with every entry outside layer `layer` zeroed.
inline Vector restrict_to_layer(const MicroNet& net, std::span<const double> delta, int layer) {
  const auto topo = parse_topology(micro_parameter_shapes(net.config()));
  Vector out(delta.size(), 0.0);
  for (const auto& s : net.layout().slots()) {
    if (topo.at(s.name).layer_index != layer) continue;
    for (std::size_t i = 0; i < s.size; ++i) out[s.offset + i] = delta[s.offset + i];
  }
  return out;
}

inline std::optional<double> nl_score(const MicroModel& base, const TensorArchive& delta, int layer,
                                      double alpha = 0.5, int n_probes = 8,
                                      std::uint64_t seed = 42) {
  MicroNet net(base.config);
  const auto theta = net.layout().flatten(base.parameters);
  const auto dl = restrict_to_layer(net, net.layout().flatten(delta), layer);
  std::vector<ProbeLogProbs> probes;
  for (auto& p : uniform_token_sequences(base.config.vocab_size, n_probes, base.config.seq_len, seed)) {
    probes.push_back({&net, std::move(p)});
  }
  return nl_score(probes, theta, dl, alpha);
}

struct NlRecord {
  int layer_index = 0;
  std::optional<double> nl_score;
  std::optional<double> relative_merge_error;
};

struct NlAnalysis {
  std::vector<NlRecord> records;
  std::optional<double> pearson_r;
  double alpha = 0.5;
};

// Per-layer NL scores on random-token probes, and per-layer relative merging
// error on evaluation sequences: ||stacked interpolation errors|| divided by
// ||stacked output changes|| under the same layer-only perturbation.
inline NlAnalysis nl_analysis(const MicroModel& base, const MicroModel& tuned, double alpha,
                              int n_probes, std::uint64_t seed,
                              const std::vector<TokenSeq>& eval_sequences) {
  if (base.config != tuned.config) throw ValidationError("base/tuned micro configs differ");
  MicroNet net(base.config);
  const auto theta = net.layout().flatten(base.parameters);
  const auto theta1 = net.layout().flatten(tuned.parameters);
  Vector delta(theta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = theta1[i] - theta[i];

  std::vector<ProbeLogProbs> probes, evals;
  for (auto& p : uniform_token_sequences(base.config.vocab_size, n_probes, base.config.seq_len, seed)) {
    probes.push_back({&net, std::move(p)});
  }
  for (const auto& s : eval_sequences) evals.push_back({&net, s});

  NlAnalysis out;
  out.alpha = alpha;
  std::vector<double> xs, ys;
  for (int l = 0; l < base.config.n_layers; ++l) {
    const auto dl = restrict_to_layer(net, delta, l);
    NlRecord rec{l, nl_score(probes, theta, dl, alpha), std::nullopt};
    double num = 0.0, den = 0.0;
    for (const auto& e : evals) {
      const auto terms = interpolation_terms(e, theta, dl, alpha);
      num += terms.error_norm * terms.error_norm;
      den += terms.change_norm * terms.change_norm;
    }
    if (std::sqrt(den) >= kNlDenominatorFloor) rec.relative_merge_error = std::sqrt(num / den);
    if (rec.nl_score && rec.relative_merge_error) {
      xs.push_back(*rec.nl_score);
      ys.push_back(*rec.relative_merge_error);
    }
    out.records.push_back(rec);
  }
  if (xs.size() >= 2) {
    const double r = stats::pearson(xs, ys);
    if (std::isfinite(r)) out.pearson_r = r;
  }
  return out;
}

// ---- micro base / tuned pair ----

struct MicroPairOptions {
  MicroModelConfig config{};
  int corpus_size = 32;
  int corpus_len = 32;
  int base_steps = 300;
  int tune_steps = 150;
  double lr = 0.5;
  std::uint64_t seed = 42;
};

struct MicroPair {
  MicroModel base;
  MicroModel tuned;
  std::vector<TokenSeq> base_corpus;
  std::vector<TokenSeq> tune_corpus;
  TrainResult base_training;
  TrainResult tune_training;
};

// base: trained on one synthetic Markov corpus; tuned: base further trained
// on a second corpus from a different chain.
inline MicroPair train_micro_pair(const MicroPairOptions& o) {
  auto cfg = o.config;
  cfg.seed = o.seed;
  const auto init = MicroModel::init(cfg);
  MicroPair p{init, init, {}, {}, {}, {}};
  p.base_corpus = markov_corpus(cfg.vocab_size, o.corpus_size, o.corpus_len, o.seed + 1);
  p.tune_corpus = markov_corpus(cfg.vocab_size, o.corpus_size, o.corpus_len, o.seed + 2);
  p.base_training = train_to_convergence(init, p.base_corpus, o.base_steps, o.lr);
  p.base = p.base_training.model;
  p.tune_training = train_to_convergence(p.base, p.tune_corpus, o.tune_steps, o.lr);
  p.tuned = p.tune_training.model;
  return p;
}

}  // namespace fimmerge::theory
