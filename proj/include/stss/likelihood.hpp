#pragma once

// Observation models and the global refresh of the x marginals.
//
// Both likelihoods enter the x update in the same way: a diagonal set of
// precisions tau_n and precision-times-means nu_n acting on the projections
// (A x)_n. For the Gaussian model these are 1/sigma^2 and y_n/sigma^2; for the
// probit model they are the EP site parameters.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "stss/error.hpp"
#include "stss/moments.hpp"
#include "stss/normal.hpp"

namespace stss {

enum class Likelihood { gaussian, probit };

inline const char* to_string(Likelihood l) { return l == Likelihood::gaussian ? "gaussian" : "probit"; }

struct Problem {
  Eigen::MatrixXd A;  // N x D, shared across columns
  Eigen::MatrixXd Y;  // N x T; +-1 labels for probit
  Likelihood likelihood = Likelihood::gaussian;
  double noise_variance = 1.0;
  std::optional<Eigen::VectorXd> noise_variance_per_column;  // length T, off by default

  Index N() const { return A.rows(); }
  Index D() const { return A.cols(); }
  Index T() const { return Y.cols(); }

  double noise_variance_at(Index t) const {
    return noise_variance_per_column ? (*noise_variance_per_column)(t) : noise_variance;
  }

  void validate() const {
    if (A.rows() < 1 || A.cols() < 1) throw InputError("Problem: forward model must be nonempty");
    if (Y.rows() != A.rows()) {
      throw InputError("Problem: Y has " + std::to_string(Y.rows()) + " rows but A has " +
                       std::to_string(A.rows()));
    }
    if (Y.cols() < 1) throw InputError("Problem: Y must have at least one column");
    if (!A.allFinite() || !Y.allFinite()) throw InputError("Problem: non-finite entries in A or Y");
    if (likelihood == Likelihood::gaussian) {
      if (!(noise_variance > 0.0) || !std::isfinite(noise_variance)) {
        throw InputError("Problem: noise variance must be positive");
      }
      if (noise_variance_per_column) {
        if (noise_variance_per_column->size() != Y.cols() || !(noise_variance_per_column->array() > 0.0).all()) {
          throw InputError("Problem: per-column noise variances must be positive, one per column");
        }
      }
    } else {
      for (Index k = 0; k < Y.size(); ++k) {
        const double y = Y.data()[k];
        if (y != 1.0 && y != -1.0) throw InputError("Problem: probit labels must be +1 or -1");
      }
    }
  }
};

/// Likelihood naturals on the projections of one column, plus the constant
/// that makes the Gaussian likelihood a normalized density in y.
struct F1Naturals {
  Eigen::VectorXd precision;             // tau_n
  Eigen::VectorXd precision_times_mean;  // nu_n
  double log_constant = 0.0;
};

/// A^T A / sigma^2 and A^T y / sigma^2 in factored form.
inline F1Naturals gaussian_f1_naturals(const Eigen::MatrixXd& A, const Eigen::VectorXd& y, double noise_variance) {
  if (!(noise_variance > 0.0)) throw InputError("gaussian_f1_naturals: noise variance must be positive");
  if (y.size() != A.rows()) throw InputError("gaussian_f1_naturals: y length does not match A");
  F1Naturals out;
  out.precision = Eigen::VectorXd::Constant(A.rows(), 1.0 / noise_variance);
  out.precision_times_mean = y / noise_variance;
  out.log_constant = -0.5 * y.squaredNorm() / noise_variance -
                     0.5 * static_cast<double>(A.rows()) * (kLog2Pi + std::log(noise_variance));
  return out;
}

/// Marginals of x_t under f1 * prod f2, with per-coordinate cavities with
/// respect to the f2 sites.
struct XColumn {
  Eigen::VectorXd mean, var;
  Eigen::VectorXd cavity_precision, cavity_ptm;
  double log_partition = 0.0;  // log of the integral of f1-site-form * prod f2 sites over x
  Eigen::VectorXd projection_mean, projection_var;  // of A x_t, filled on request
};

/// Exact Gaussian refresh of one column at O(N^2 D) via the matrix inversion
/// lemma. Only the diagonal of the covariance is formed.
inline XColumn update_global_x(const F1Naturals& f1, const Eigen::VectorXd& site_precision,
                               const Eigen::VectorXd& site_ptm, const Eigen::MatrixXd& A,
                               bool with_projection = false) {
  const Index N = A.rows(), D = A.cols();
  if (site_precision.size() != D || site_ptm.size() != D || f1.precision.size() != N) {
    throw InputError("update_global_x: inconsistent dimensions");
  }
  if (!(site_precision.array() > 0.0).all() || !site_precision.allFinite()) {
    throw NumericalError("update_global_x: f2 site precisions must be finite and positive");
  }
  const Eigen::VectorXd v2 = site_precision.cwiseInverse();
  const Eigen::VectorXd sqrt_tau = f1.precision.cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd At = sqrt_tau.asDiagonal() * A;

  Eigen::MatrixXd B = At * v2.asDiagonal() * At.transpose();
  B.diagonal().array() += 1.0;
  Eigen::LLT<Eigen::MatrixXd> llt(B);
  if (llt.info() != Eigen::Success) {
    B.diagonal().array() += 1e-10 * B.diagonal().maxCoeff();
    llt.compute(B);
    if (llt.info() != Eigen::Success) {
      throw NumericalError("update_global_x: Cholesky of I + A V2 A^T failed after jitter retry");
    }
  }
  const Eigen::MatrixXd R = llt.matrixL().solve(At);  // N x D
  const Eigen::VectorXd q = R.colwise().squaredNorm().transpose();

  XColumn out;
  const Eigen::VectorXd h = A.transpose() * f1.precision_times_mean + site_ptm;
  const Eigen::VectorXd vh = v2.cwiseProduct(h);
  const Eigen::VectorXd s = R.transpose() * (R * vh);
  out.mean = vh - v2.cwiseProduct(s);

  // 1 - v2 q is the variance ratio var / v2; it lies in (0, 1].
  const Eigen::VectorXd ratio = (1.0 - v2.cwiseProduct(q).array()).max(1e-14).matrix();
  out.var = v2.cwiseProduct(ratio);
  out.cavity_precision = q.cwiseQuotient(ratio);
  out.cavity_ptm = (h - site_ptm - s + site_ptm.cwiseProduct(v2).cwiseProduct(q)).cwiseQuotient(ratio);

  const Eigen::VectorXd lower = llt.matrixL().toDenseMatrix().diagonal();
  out.log_partition = 0.5 * h.dot(out.mean) -
                      0.5 * (site_precision.array().log().sum() + 2.0 * lower.array().log().sum()) +
                      0.5 * static_cast<double>(D) * kLog2Pi;

  if (with_projection) {
    // diag(A V A^T) = diag(K) - colsum(W o W), K = A V2 A^T, W = L^{-1} diag(sqrt tau) K.
    const Eigen::MatrixXd K = A * v2.asDiagonal() * A.transpose();
    const Eigen::MatrixXd W = llt.matrixL().solve(sqrt_tau.asDiagonal() * K);
    out.projection_mean = A * out.mean;
    out.projection_var = (K.diagonal() - W.colwise().squaredNorm().transpose()).cwiseMax(1e-14 * K.diagonal());
  }
  if (!out.mean.allFinite() || !out.var.allFinite() || !std::isfinite(out.log_partition)) {
    throw NumericalError("update_global_x: non-finite marginals");
  }
  return out;
}

struct ProbitMoments {
  double log_z = 0.0;
  double mean = 0.0;
  double var = 0.0;
};

/// Moments of N(u | m, v) Phi(label * u).
inline ProbitMoments probit_tilted_moments(double cav_mean, double cav_var, double label) {
  if (!(cav_var > 0.0)) throw InputError("probit_tilted_moments: cavity variance must be positive");
  const double s = std::sqrt(1.0 + cav_var);
  const double z = label * cav_mean / s;
  const double r = mills_ratio(z);
  ProbitMoments out;
  out.log_z = log_normal_cdf(z);
  out.mean = cav_mean + label * cav_var * r / s;
  out.var = cav_var - cav_var * cav_var * r * (z + r) / (1.0 + cav_var);
  out.var = std::max(out.var, 1e-300);
  return out;
}

/// Probit sites of one column: precision/ptm on each projection (A x_t)_n.
struct ProbitSiteColumn {
  Eigen::VectorXd precision;
  Eigen::VectorXd precision_times_mean;
};

/// Parallel refresh of one column of probit sites against the current
/// projection marginals. Sites with an improper cavity are left unchanged.
inline ProbitSiteColumn probit_sweep(const ProbitSiteColumn& sites, const Eigen::VectorXd& labels,
                                     const Eigen::VectorXd& projection_mean,
                                     const Eigen::VectorXd& projection_var, double damping) {
  ProbitSiteColumn out = sites;
  for (Index n = 0; n < labels.size(); ++n) {
    const GaussianSiteNat old{sites.precision(n), sites.precision_times_mean(n)};
    const double prec = 1.0 / projection_var(n);
    const auto cav = cavity_gaussian(prec, projection_mean(n) * prec, old);
    if (!cav) continue;
    const ProbitMoments m = probit_tilted_moments(cav->mean, cav->var, labels(n));
    const GaussianSiteNat upd =
        site_update_from_moments(m.mean, m.var, *cav, old, damping, std::numeric_limits<double>::infinity());
    out.precision(n) = upd.precision;
    out.precision_times_mean(n) = upd.precision_times_mean;
  }
  return out;
}

/// Likelihood naturals implied by a column of probit sites.
inline F1Naturals probit_f1_naturals(const ProbitSiteColumn& sites) {
  return {sites.precision, sites.precision_times_mean, 0.0};
}

}  // namespace stss
