#pragma once

// Covariance kernels and the Kronecker / low-rank linear algebra shared by the
// prior model and the Gamma updaters.
//
// Vectorization convention: a D x T matrix Gamma is flattened column-major, so
// entry (i, t) lives at flat index t * D + i. This matches the covariance
// Sigma_temporal (x) Sigma_spatial and Eigen's default storage order.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stss/error.hpp"

namespace stss {

using Index = Eigen::Index;

/// Relative jitter added to kernel diagonals before a Cholesky factorization.
inline constexpr double kKernelJitter = 1e-8;

/// Spatial (or temporal) coordinates, one row per point.
struct CoordinateGrid {
  Eigen::MatrixXd points;
  std::optional<double> spacing;  // set for regular 1D grids

  static CoordinateGrid regular_1d(Index count, double spacing = 1.0, double origin = 0.0) {
    if (count < 0) throw InputError("regular_1d: negative count");
    CoordinateGrid grid;
    grid.points.resize(count, 1);
    for (Index i = 0; i < count; ++i) grid.points(i, 0) = origin + spacing * static_cast<double>(i);
    grid.spacing = spacing;
    return grid;
  }

  Index size() const { return points.rows(); }
  Index dim() const { return points.cols(); }
};

/// Symmetric positive semi-definite matrix.
class DenseCovariance {
 public:
  DenseCovariance() = default;

  explicit DenseCovariance(Eigen::MatrixXd values) : values_(std::move(values)) {
    if (values_.rows() != values_.cols()) {
      throw InputError("DenseCovariance: matrix must be square");
    }
    if (!values_.allFinite()) throw InputError("DenseCovariance: non-finite entries");
    const double scale = std::max(1.0, values_.cwiseAbs().maxCoeff());
    if ((values_ - values_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw InputError("DenseCovariance: matrix is not symmetric");
    }
  }

  const Eigen::MatrixXd& values() const { return values_; }
  Index size() const { return values_.rows(); }
  Eigen::VectorXd diagonal() const { return values_.diagonal(); }

 private:
  Eigen::MatrixXd values_;
};

/// Sigma_temporal (x) Sigma_spatial, never materialized by the algorithms.
struct KroneckerCovariance {
  DenseCovariance temporal;
  DenseCovariance spatial;

  Index size() const { return temporal.size() * spatial.size(); }

  Eigen::VectorXd diagonal() const {
    const Eigen::VectorXd dt = temporal.diagonal();
    const Eigen::VectorXd ds = spatial.diagonal();
    Eigen::VectorXd out(size());
    for (Index t = 0; t < dt.size(); ++t) out.segment(t * ds.size(), ds.size()) = dt(t) * ds;
    return out;
  }

  /// Dense DT x DT product; for tests and small problems only.
  Eigen::MatrixXd materialize() const {
    const auto& a = temporal.values();
    const auto& b = spatial.values();
    Eigen::MatrixXd out(size(), size());
    for (Index r = 0; r < a.rows(); ++r)
      for (Index c = 0; c < a.cols(); ++c)
        out.block(r * b.rows(), c * b.cols(), b.rows(), b.cols()) = a(r, c) * b;
    return out;
  }
};

/// Orthonormal eigenbasis with eigenvalues in nonincreasing order.
struct EigenDecomposition {
  Eigen::MatrixXd basis;
  Eigen::VectorXd eigenvalues;
};

/// U diag(S) U^T + diag(Lambda).
struct LowRankPlusDiagonal {
  Eigen::MatrixXd basis;        // n x K
  Eigen::VectorXd eigenvalues;  // K
  Eigen::VectorXd diagonal;     // n, >= 0
  double preservation_residual = 0.0;  // max |diag error| caused by clamping
  Index clamped_count = 0;

  Index size() const { return diagonal.size(); }
  Index rank() const { return eigenvalues.size(); }

  Eigen::MatrixXd materialize() const {
    Eigen::MatrixXd out = basis * eigenvalues.asDiagonal() * basis.transpose();
    out.diagonal() += diagonal;
    return out;
  }
};

namespace detail {

inline void require_positive(double value, const char* what) {
  if (!(value > 0.0) || !std::isfinite(value)) {
    throw InputError(std::string(what) + " must be positive and finite");
  }
}

}  // namespace detail

/// magnitude * exp(-|d_i - d_j|^2 / (2 lengthscale^2)).
inline DenseCovariance squared_exponential(const CoordinateGrid& coords, double lengthscale,
                                           double magnitude) {
  detail::require_positive(lengthscale, "squared_exponential: lengthscale");
  detail::require_positive(magnitude, "squared_exponential: magnitude");
  if (!coords.points.allFinite()) throw InputError("squared_exponential: non-finite coordinates");
  const Index n = coords.size();
  Eigen::MatrixXd k(n, n);
  const double inv = 1.0 / (2.0 * lengthscale * lengthscale);
  for (Index j = 0; j < n; ++j) {
    k(j, j) = magnitude;
    for (Index i = j + 1; i < n; ++i) {
      const double d2 = (coords.points.row(i) - coords.points.row(j)).squaredNorm();
      k(i, j) = k(j, i) = magnitude * std::exp(-d2 * inv);
    }
  }
  return DenseCovariance(std::move(k));
}

/// Stationary covariance alpha^|t - t'| of the first-order process with
/// innovation variance 1 - alpha^2.
inline DenseCovariance ar1_temporal_kernel(double alpha, Index count) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw InputError(
        "ar1_temporal_kernel: alpha must lie in [0, 1); use temporal grouping for joint sparsity");
  }
  if (count < 1) throw InputError("ar1_temporal_kernel: count must be positive");
  Eigen::MatrixXd k(count, count);
  for (Index i = 0; i < count; ++i)
    for (Index j = 0; j < count; ++j) k(i, j) = std::pow(alpha, static_cast<double>(std::abs(i - j)));
  return DenseCovariance(std::move(k));
}

/// Cov + jitter * max(diag) * I.
inline Eigen::MatrixXd jittered(const Eigen::MatrixXd& cov, double relative = kKernelJitter) {
  Eigen::MatrixXd out = cov;
  const double scale = cov.size() > 0 ? std::max(cov.diagonal().maxCoeff(), 1e-300) : 1.0;
  out.diagonal().array() += relative * scale;
  return out;
}

/// Lower Cholesky factor with one jittered retry.
inline Eigen::MatrixXd cholesky_lower(const Eigen::MatrixXd& cov, const char* context) {
  Eigen::LLT<Eigen::MatrixXd> llt(jittered(cov));
  if (llt.info() != Eigen::Success) {
    llt.compute(jittered(cov, 1e-6));
    if (llt.info() != Eigen::Success) {
      throw NumericalError(std::string(context) +
                           ": Cholesky failed even with 1e-6 relative jitter; covariance is not PSD");
    }
  }
  return llt.matrixL();
}

inline EigenDecomposition eigendecompose(const DenseCovariance& cov) {
  if (cov.size() == 0) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov.values());
  if (solver.info() != Eigen::Success) {
    throw NumericalError("eigendecompose: eigensolver failed (n = " + std::to_string(cov.size()) +
                         ", max |entry| = " + std::to_string(cov.values().cwiseAbs().maxCoeff()) +
                         ")");
  }
  const Index n = cov.size();
  EigenDecomposition out;
  out.basis = solver.eigenvectors().rowwise().reverse();
  out.eigenvalues = solver.eigenvalues().reverse();
  const double top = std::max(out.eigenvalues(0), 0.0);
  for (Index k = 0; k < n; ++k) {
    double& s = out.eigenvalues(k);
    if (s < 0.0) {
      if (s < -1e-10 * std::max(top, 1.0)) {
        throw NumericalError("eigendecompose: matrix is indefinite (eigenvalue " +
                             std::to_string(s) + ", condition estimate " +
                             std::to_string(top / std::abs(s)) + ")");
      }
      s = 0.0;
    }
  }
  return out;
}

struct KroneckerEigen {
  EigenDecomposition temporal;
  EigenDecomposition spatial;

  /// Product eigenvalues in flat Kronecker order (a * D + b).
  Eigen::VectorXd product_eigenvalues() const {
    const Index nt = temporal.eigenvalues.size();
    const Index ns = spatial.eigenvalues.size();
    Eigen::VectorXd out(nt * ns);
    for (Index a = 0; a < nt; ++a)
      out.segment(a * ns, ns) = temporal.eigenvalues(a) * spatial.eigenvalues;
    return out;
  }
};

/// Eigendecomposition of Sigma_t (x) Sigma_s from its factors, O(D^3 + T^3).
inline KroneckerEigen kron_eigendecompose(const KroneckerCovariance& cov) {
  return {eigendecompose(cov.temporal), eigendecompose(cov.spatial)};
}

/// (temporal (x) spatial) v via vec(spatial * V * temporal^T); factors may be rectangular.
inline Eigen::VectorXd kron_matvec(const Eigen::MatrixXd& temporal_factor,
                                   const Eigen::MatrixXd& spatial_factor, const Eigen::VectorXd& v) {
  const Index t_in = temporal_factor.cols();
  const Index s_in = spatial_factor.cols();
  if (v.size() != t_in * s_in) {
    throw InputError("kron_matvec: vector length " + std::to_string(v.size()) +
                     " does not match factor shapes (" + std::to_string(s_in) + " x " +
                     std::to_string(t_in) + ")");
  }
  const Eigen::Map<const Eigen::MatrixXd> mat(v.data(), s_in, t_in);
  Eigen::MatrixXd out = spatial_factor * mat * temporal_factor.transpose();
  return Eigen::Map<const Eigen::VectorXd>(out.data(), out.size());
}

/// Target of a low-rank truncation: explicit rank or fraction of total variance.
struct RankTarget {
  std::variant<Index, double> value;

  static RankTarget rank(Index k) { return {k}; }
  static RankTarget fraction(double f) { return {f}; }
};

namespace detail {

/// Indices of retained eigenpairs: descending eigenvalue, ties broken by lower index.
inline std::vector<Index> select_top(const Eigen::VectorXd& eigenvalues, const RankTarget& target) {
  const Index n = eigenvalues.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return eigenvalues(a) > eigenvalues(b); });
  Index keep = 0;
  if (const auto* k = std::get_if<Index>(&target.value)) {
    if (*k < 0 || *k > n) throw InputError("low_rank_approximate: rank out of range [0, n]");
    keep = *k;
  } else {
    const double f = std::get<double>(target.value);
    if (!(f > 0.0 && f <= 1.0)) throw InputError("low_rank_approximate: fraction must lie in (0, 1]");
    const double total = eigenvalues.sum();
    double acc = 0.0;
    while (keep < n) {
      acc += eigenvalues(order[static_cast<std::size_t>(keep)]);
      ++keep;
      if (acc >= f * total * (1.0 - 1e-14)) break;
    }
  }
  order.resize(static_cast<std::size_t>(keep));
  return order;
}

inline LowRankPlusDiagonal finish_low_rank(Eigen::MatrixXd basis, Eigen::VectorXd eigenvalues,
                                           const Eigen::VectorXd& exact_diag) {
  LowRankPlusDiagonal out;
  Eigen::VectorXd lr_diag = (basis.array().square().matrix() * eigenvalues);
  out.diagonal = exact_diag - lr_diag;
  for (Index i = 0; i < out.diagonal.size(); ++i) {
    // Round-off below the preservation tolerance is not counted as clamping.
    const double tol = 1e-10 * std::max(1.0, exact_diag(i));
    if (out.diagonal(i) < 0.0) {
      if (out.diagonal(i) < -tol) {
        ++out.clamped_count;
        out.preservation_residual = std::max(out.preservation_residual, -out.diagonal(i));
      }
      out.diagonal(i) = 0.0;
    }
  }
  out.basis = std::move(basis);
  out.eigenvalues = std::move(eigenvalues);
  return out;
}

}  // namespace detail

/// Truncated Kronecker eigenbasis plus a diagonal that preserves the exact prior diagonal.
inline LowRankPlusDiagonal low_rank_approximate(const KroneckerCovariance& cov, const RankTarget& target) {
  const KroneckerEigen eig = kron_eigendecompose(cov);
  const Eigen::VectorXd products = eig.product_eigenvalues();
  const std::vector<Index> keep = detail::select_top(products, target);
  const Index ns = eig.spatial.eigenvalues.size();
  Eigen::MatrixXd basis(cov.size(), static_cast<Index>(keep.size()));
  Eigen::VectorXd values(static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const Index a = keep[k] / ns;
    const Index b = keep[k] % ns;
    const auto ut = eig.temporal.basis.col(a);
    const auto us = eig.spatial.basis.col(b);
    for (Index t = 0; t < ut.size(); ++t) basis.col(static_cast<Index>(k)).segment(t * ns, ns) = ut(t) * us;
    values(static_cast<Index>(k)) = products(keep[k]);
  }
  return detail::finish_low_rank(std::move(basis), std::move(values), cov.diagonal());
}

inline LowRankPlusDiagonal low_rank_approximate(const DenseCovariance& cov, const RankTarget& target) {
  const EigenDecomposition eig = eigendecompose(cov);
  const std::vector<Index> keep = detail::select_top(eig.eigenvalues, target);
  Eigen::MatrixXd basis(cov.size(), static_cast<Index>(keep.size()));
  Eigen::VectorXd values(static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    basis.col(static_cast<Index>(k)) = eig.basis.col(keep[k]);
    values(static_cast<Index>(k)) = eig.eigenvalues(keep[k]);
  }
  return detail::finish_low_rank(std::move(basis), std::move(values), cov.diagonal());
}

}  // namespace stss
