#pragma once

// Reconstruction metrics and the two reference estimators.

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "stss/error.hpp"
#include "stss/kernel_algebra.hpp"

namespace stss {

struct Metrics {
  double nmse = 0.0;
  double f_measure = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// ||est - truth||_F^2 / ||truth||_F^2.
inline double nmse(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
    throw InputError("nmse: shape mismatch");
  }
  const double denom = truth.squaredNorm();
  if (!(denom > 0.0)) throw InputError("nmse: the true signal is all zero");
  return (estimate - truth).squaredNorm() / denom;
}

/// Support precision, recall and F-measure with predicted support probs > threshold.
/// Empty predicted and empty true support count as perfect agreement.
inline Metrics f_measure(const Eigen::MatrixXd& support_probs, const Eigen::MatrixXi& truth_support,
                         double threshold = 0.5) {
  if (support_probs.rows() != truth_support.rows() || support_probs.cols() != truth_support.cols()) {
    throw InputError("f_measure: shape mismatch");
  }
  long tp = 0, predicted = 0, actual = 0;
  for (Index k = 0; k < support_probs.size(); ++k) {
    const bool p = support_probs.data()[k] > threshold;
    const bool a = truth_support.data()[k] != 0;
    predicted += p;
    actual += a;
    tp += p && a;
  }
  Metrics m;
  if (predicted == 0 && actual == 0) {
    m.precision = m.recall = m.f_measure = 1.0;
    return m;
  }
  m.precision = predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
  m.recall = actual > 0 ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
  m.f_measure = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

/// Orthogonal matching pursuit with K greedy steps; ties go to the lowest column.
inline Eigen::VectorXd omp(const Eigen::MatrixXd& A, const Eigen::VectorXd& y, Index K) {
  const Index N = A.rows(), D = A.cols();
  if (y.size() != N) throw InputError("omp: y length does not match A");
  if (K < 0 || K > std::min(N, D)) throw InputError("omp: K must lie in [0, min(N, D)]");
  const Eigen::VectorXd norms = A.colwise().norm().transpose();
  if ((norms.array() <= 0.0).any()) throw InputError("omp: A has a zero column");

  std::vector<Index> selected;
  std::vector<bool> used(static_cast<std::size_t>(D), false);
  Eigen::VectorXd residual = y;
  Eigen::VectorXd coef;
  for (Index step = 0; step < K; ++step) {
    const Eigen::VectorXd corr = (A.transpose() * residual).cwiseAbs().cwiseQuotient(norms);
    Index best = -1;
    for (Index j = 0; j < D; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      if (best < 0 || corr(j) > corr(best)) best = j;
    }
    if (best < 0) break;
    used[static_cast<std::size_t>(best)] = true;
    selected.push_back(best);
    Eigen::MatrixXd As(N, static_cast<Index>(selected.size()));
    for (std::size_t c = 0; c < selected.size(); ++c) As.col(static_cast<Index>(c)) = A.col(selected[c]);
    // Minimum-norm least squares handles rank-deficient selections.
    coef = As.completeOrthogonalDecomposition().solve(y);
    residual = y - As * coef;
  }
  Eigen::VectorXd x = Eigen::VectorXd::Zero(D);
  for (std::size_t c = 0; c < selected.size(); ++c) x(selected[c]) = coef(static_cast<Index>(c));
  return x;
}

/// Ridge estimate restricted to the given support.
inline Eigen::VectorXd oracle_ridge(const Eigen::MatrixXd& A, const Eigen::VectorXd& y,
                                    const std::vector<Index>& support, double lambda = 1e-3) {
  const Index D = A.cols();
  if (y.size() != A.rows()) throw InputError("oracle_ridge: y length does not match A");
  if (lambda < 0.0) throw InputError("oracle_ridge: lambda must be nonnegative");
  Eigen::VectorXd x = Eigen::VectorXd::Zero(D);
  if (support.empty()) return x;
  Eigen::MatrixXd As(A.rows(), static_cast<Index>(support.size()));
  for (std::size_t c = 0; c < support.size(); ++c) {
    if (support[c] < 0 || support[c] >= D) throw InputError("oracle_ridge: support index out of range");
    As.col(static_cast<Index>(c)) = A.col(support[c]);
  }
  Eigen::MatrixXd G = As.transpose() * As;
  G.diagonal().array() += lambda;
  const Eigen::VectorXd coef = G.ldlt().solve(As.transpose() * y);
  for (std::size_t c = 0; c < support.size(); ++c) x(support[c]) = coef(static_cast<Index>(c));
  return x;
}

}  // namespace stss
