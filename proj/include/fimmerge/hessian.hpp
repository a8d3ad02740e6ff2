#pragma once

// Dense Hessians of scalar objectives by central differences of their
// analytic gradients, and spectral norms of symmetric matrices.

#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fimmerge/common.hpp"

namespace fimmerge {

// Anything with value(theta) and gradient(theta, out) over flat f64 vectors.
template <typename F>
concept ScalarObjective = requires(const F& f, std::span<const double> x, std::span<double> g) {
  { f.value(x) } -> std::convertible_to<double>;
  f.gradient(x, g);
  { f.dimension() } -> std::convertible_to<std::size_t>;
};

struct HessianResult {
  Eigen::MatrixXd matrix;  // symmetrized
  double raw_asymmetry = 0.0;  // ||H_raw - H_raw^T||_F / ||H_raw||_F before symmetrizing
};

// Column j is (grad(x + h e_j) - grad(x - h e_j)) / 2h restricted to `subset`.
template <ScalarObjective F>
HessianResult finite_difference_hessian(const F& f, std::span<const double> theta,
                                        std::span<const std::size_t> subset, double h = 1e-4) {
  if (subset.size() > 2000) throw ValidationError("Hessian subset limited to 2000 coordinates");
  const std::size_t d = f.dimension();
  if (theta.size() != d) throw ValidationError("theta has wrong length for objective");
  for (auto i : subset) {
    if (i >= d) throw ValidationError("Hessian subset coordinate out of range: " + std::to_string(i));
  }
  const auto k = static_cast<Eigen::Index>(subset.size());
  Eigen::MatrixXd raw(k, k);
  parallel_for(subset.size(), [&](std::size_t j) {
    std::vector<double> x(theta.begin(), theta.end());
    std::vector<double> gp(d), gm(d);
    x[subset[j]] = theta[subset[j]] + h;
    f.gradient(x, gp);
    x[subset[j]] = theta[subset[j]] - h;
    f.gradient(x, gm);
    for (Eigen::Index i = 0; i < k; ++i) {
      raw(i, static_cast<Eigen::Index>(j)) = (gp[subset[i]] - gm[subset[i]]) / (2.0 * h);
    }
  });
  HessianResult res;
  const double n = raw.norm();
  res.raw_asymmetry = n > 0.0 ? (raw - raw.transpose()).norm() / n : 0.0;
  res.matrix = 0.5 * (raw + raw.transpose());
  return res;
}

// Largest absolute eigenvalue of a symmetric matrix (full eigensolve).
inline double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ValidationError("spectral_norm needs a square matrix");
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw ValidationError("eigensolver failed to converge");
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

struct PowerIterationResult {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Power iteration on m^2 with Rayleigh quotients; squaring folds the +/-
// pair of extreme eigenvalues onto the same dominant value so iteration
// does not oscillate when |lambda_min| ~ |lambda_max|.
inline PowerIterationResult power_iteration_norm(const Eigen::MatrixXd& m, double tol = 1e-12,
                                                 int max_iter = 100000, unsigned seed = 7) {
  if (m.rows() != m.cols()) throw ValidationError("power iteration needs a square matrix");
  PowerIterationResult r;
  if (m.size() == 0) {
    r.converged = true;
    return r;
  }
  Eigen::VectorXd v = Eigen::VectorXd::Ones(m.rows());
  // deterministic non-degenerate start
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += 0.01 * std::sin(1.0 + seed * (i + 1.0));
  v.normalize();
  double prev = 0.0;
  for (r.iterations = 1; r.iterations <= max_iter; ++r.iterations) {
    Eigen::VectorXd w = m * (m * v);
    const double rq = v.dot(w);  // Rayleigh quotient of m^2
    const double nw = w.norm();
    if (nw == 0.0) {
      r.value = 0.0;
      r.converged = true;
      return r;
    }
    v = w / nw;
    if (std::abs(rq - prev) <= tol * std::abs(rq)) {
      r.value = std::sqrt(std::max(rq, 0.0));
      r.converged = true;
      return r;
    }
    prev = rq;
  }
  r.value = std::sqrt(std::max(prev, 0.0));
  return r;
}

}  // namespace fimmerge
