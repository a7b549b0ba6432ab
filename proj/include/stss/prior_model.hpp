#pragma once

// Hierarchical spike-and-slab prior: x | z ~ z * N(rho, tau), z | gamma ~ Ber(Phi(gamma)),
// gamma ~ N(nu * 1, Sigma0).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stss/error.hpp"
#include "stss/kernel_algebra.hpp"
#include "stss/normal.hpp"

namespace stss {

struct SlabParams {
  double mean = 0.0;      // rho0
  double variance = 1.0;  // tau0

  void validate() const {
    if (!std::isfinite(mean)) throw InputError("SlabParams: slab mean must be finite");
    if (!(variance > 0.0) || !std::isfinite(variance)) {
      throw InputError("SlabParams: slab variance must be positive");
    }
  }
};

/// Independent prior: Sigma0 = diag(values).
struct DiagonalCovariance {
  Eigen::VectorXd values;

  Index size() const { return values.size(); }
};

using PriorCovariance =
    std::variant<DenseCovariance, KroneckerCovariance, LowRankPlusDiagonal, DiagonalCovariance>;

inline Index covariance_size(const PriorCovariance& cov) {
  return std::visit([](const auto& c) { return c.size(); }, cov);
}

inline Eigen::VectorXd covariance_diagonal(const PriorCovariance& cov) {
  return std::visit(
      [](const auto& c) -> Eigen::VectorXd {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, DiagonalCovariance>) {
          return c.values;
        } else if constexpr (std::is_same_v<C, LowRankPlusDiagonal>) {
          return (c.basis.array().square().rowwise() * c.eigenvalues.transpose().array()).rowwise().sum().matrix() +
                 c.diagonal;
        } else {
          return c.diagonal();
        }
      },
      cov);
}

/// Single entry Sigma0(i, j) in flat indexing.
inline double covariance_entry(const PriorCovariance& cov, Index i, Index j) {
  return std::visit(
      [&](const auto& c) -> double {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, DenseCovariance>) {
          return c.values()(i, j);
        } else if constexpr (std::is_same_v<C, KroneckerCovariance>) {
          const Index d = c.spatial.size();
          return c.temporal.values()(i / d, j / d) * c.spatial.values()(i % d, j % d);
        } else if constexpr (std::is_same_v<C, LowRankPlusDiagonal>) {
          double v = (c.basis.row(i).array() * c.basis.row(j).array() * c.eigenvalues.transpose().array()).sum();
          if (i == j) v += c.diagonal(i);
          return v;
        } else {
          return i == j ? c.values(i) : 0.0;
        }
      },
      cov);
}

/// Dense Sigma0; intended for small systems and oracles.
inline Eigen::MatrixXd materialize(const PriorCovariance& cov) {
  return std::visit(
      [](const auto& c) -> Eigen::MatrixXd {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, DenseCovariance>) {
          return c.values();
        } else if constexpr (std::is_same_v<C, DiagonalCovariance>) {
          return c.values.asDiagonal();
        } else {
          return c.materialize();
        }
      },
      cov);
}

struct GammaPriorSpec {
  double mean_level = 0.0;  // nu0
  PriorCovariance covariance;
  Index rows = 0;  // spatial extent (D, or spatial group count)
  Index cols = 1;  // temporal extent (T, or temporal group count)

  Index size() const { return rows * cols; }

  void validate() const {
    if (!std::isfinite(mean_level)) throw InputError("GammaPriorSpec: mean level must be finite");
    if (rows < 1 || cols < 1) throw InputError("GammaPriorSpec: dimensions must be positive");
    if (covariance_size(covariance) != size()) {
      throw InputError("GammaPriorSpec: covariance dimension " +
                       std::to_string(covariance_size(covariance)) + " does not match " +
                       std::to_string(rows) + " x " + std::to_string(cols));
    }
    if (const auto* k = std::get_if<KroneckerCovariance>(&covariance)) {
      if (k->spatial.size() != rows || k->temporal.size() != cols) {
        throw InputError("GammaPriorSpec: Kronecker factor sizes do not match dimensions");
      }
    }
    if (const auto* d = std::get_if<DiagonalCovariance>(&covariance)) {
      if ((d->values.array() < 0.0).any()) throw InputError("GammaPriorSpec: negative prior variance");
    }
  }
};

/// Contiguous block grouping of the (i, t) grid.
struct GroupMap {
  Index D = 0, T = 0;
  Index spatial_group_size = 1, temporal_group_size = 1;
  Index spatial_groups = 0, temporal_groups = 0;
  std::vector<Index> group_of;  // flat (t * D + i) -> group index (tg * Gs + sg)

  Index G() const { return spatial_groups * temporal_groups; }
  Index operator()(Index i, Index t) const { return group_of[static_cast<std::size_t>(t * D + i)]; }
  bool is_identity() const { return spatial_group_size == 1 && temporal_group_size == 1; }

  /// Centroids of the member coordinates of each spatial group.
  CoordinateGrid spatial_centroids(const CoordinateGrid& coords) const {
    return centroids(coords, spatial_group_size, spatial_groups);
  }
  CoordinateGrid temporal_centroids(const CoordinateGrid& coords) const {
    return centroids(coords, temporal_group_size, temporal_groups);
  }

 private:
  static CoordinateGrid centroids(const CoordinateGrid& coords, Index block, Index count) {
    CoordinateGrid out;
    out.points = Eigen::MatrixXd::Zero(count, coords.dim());
    for (Index g = 0; g < count; ++g) {
      const Index lo = g * block;
      const Index hi = std::min(coords.size(), lo + block);
      out.points.row(g) = coords.points.middleRows(lo, hi - lo).colwise().mean();
    }
    return out;
  }
};

inline GroupMap build_group_map(Index D, Index T, Index spatial_group_size, Index temporal_group_size) {
  if (D < 1 || T < 1) throw InputError("build_group_map: D and T must be positive");
  if (spatial_group_size < 1 || temporal_group_size < 1) {
    throw InputError("build_group_map: group sizes must be >= 1");
  }
  GroupMap map;
  map.D = D;
  map.T = T;
  map.spatial_group_size = std::min(spatial_group_size, D);
  map.temporal_group_size = std::min(temporal_group_size, T);
  map.spatial_groups = (D + map.spatial_group_size - 1) / map.spatial_group_size;
  map.temporal_groups = (T + map.temporal_group_size - 1) / map.temporal_group_size;
  map.group_of.resize(static_cast<std::size_t>(D * T));
  for (Index t = 0; t < T; ++t)
    for (Index i = 0; i < D; ++i)
      map.group_of[static_cast<std::size_t>(t * D + i)] =
          (t / map.temporal_group_size) * map.spatial_groups + i / map.spatial_group_size;
  return map;
}

struct PriorSample {
  Eigen::MatrixXd gamma;         // D x T (or group grid when sampled for groups)
  Eigen::MatrixXi support;       // D x T
  Eigen::MatrixXd coefficients;  // D x T
  bool cardinality_exact = true;
  double mean_shift = 0.0;  // offset added to nu0 by conditioning
};

/// Phi(mu / sqrt(1 + var)).
inline double marginal_activation_prob(double mu, double var) {
  if (var < 0.0) throw InputError("marginal_activation_prob: variance must be nonnegative");
  if (std::isinf(mu)) return mu > 0 ? 1.0 : 0.0;
  return normal_cdf(mu / std::sqrt(1.0 + var));
}

struct McEstimate {
  double estimate = 0.0;
  double standard_error = 0.0;
};

/// Monte Carlo estimate of p(z_i = 1, z_j = 1) under the prior.
inline McEstimate joint_activation_prob_mc(const GammaPriorSpec& prior, Index i, Index j,
                                           std::size_t samples, std::uint64_t seed) {
  if (samples < 1000) throw InputError("joint_activation_prob_mc: need at least 1000 samples");
  const Index n = prior.size();
  if (i < 0 || j < 0 || i >= n || j >= n) throw InputError("joint_activation_prob_mc: index out of range");
  const double sii = covariance_entry(prior.covariance, i, i);
  const double sjj = covariance_entry(prior.covariance, j, j);
  const double sij = covariance_entry(prior.covariance, i, j);
  const double det = sii * sjj - sij * sij;
  if (sii < 0.0 || sjj < 0.0 || det < -1e-10 * std::max(1.0, sii * sjj)) {
    throw NumericalError("joint_activation_prob_mc: covariance block is not PSD (det = " +
                         std::to_string(det) + ")");
  }
  // 2x2 Cholesky, tolerant of exact singularity.
  const double l11 = std::sqrt(sii);
  const double l21 = l11 > 0.0 ? sij / l11 : 0.0;
  const double l22 = std::sqrt(std::max(sjj - l21 * l21, 0.0));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const double e1 = normal(rng);
    const double e2 = normal(rng);
    const double gi = prior.mean_level + l11 * e1;
    const double gj = prior.mean_level + l21 * e1 + l22 * e2;
    const double v = (i == j) ? normal_cdf(gi) : normal_cdf(gi) * normal_cdf(gj);
    sum += v;
    sum_sq += v * v;
  }
  const double m = sum / static_cast<double>(samples);
  const double var = std::max(sum_sq / static_cast<double>(samples) - m * m, 0.0);
  return {m, std::sqrt(var / static_cast<double>(samples))};
}

namespace detail {

/// Draws gamma - nu0 ~ N(0, Sigma0) as a flat vector.
class GammaSampler {
 public:
  explicit GammaSampler(const PriorCovariance& cov) : cov_(cov) {
    std::visit(
        [&](const auto& c) {
          using C = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<C, DenseCovariance>) {
            chol_a_ = cholesky_lower(c.values(), "sample_prior");
          } else if constexpr (std::is_same_v<C, KroneckerCovariance>) {
            chol_a_ = cholesky_lower(c.temporal.values(), "sample_prior (temporal factor)");
            chol_b_ = cholesky_lower(c.spatial.values(), "sample_prior (spatial factor)");
          } else if constexpr (std::is_same_v<C, LowRankPlusDiagonal>) {
            chol_a_ = c.basis * c.eigenvalues.cwiseMax(0.0).cwiseSqrt().asDiagonal();
          }
        },
        cov_);
  }

  template <class Rng>
  Eigen::VectorXd draw(Rng& rng) const {
    std::normal_distribution<double> normal;
    auto white = [&](Index n) {
      Eigen::VectorXd e(n);
      for (Index k = 0; k < n; ++k) e(k) = normal(rng);
      return e;
    };
    return std::visit(
        [&](const auto& c) -> Eigen::VectorXd {
          using C = std::decay_t<decltype(c)>;
          if constexpr (std::is_same_v<C, DenseCovariance>) {
            return chol_a_ * white(c.size());
          } else if constexpr (std::is_same_v<C, KroneckerCovariance>) {
            return kron_matvec(chol_a_, chol_b_, white(c.size()));
          } else if constexpr (std::is_same_v<C, LowRankPlusDiagonal>) {
            Eigen::VectorXd out = chol_a_ * white(c.rank());
            return out + (c.diagonal.cwiseSqrt().array() * white(c.size()).array()).matrix();
          } else {
            return (c.values.cwiseMax(0.0).cwiseSqrt().array() * white(c.size()).array()).matrix();
          }
        },
        cov_);
  }

 private:
  const PriorCovariance& cov_;
  Eigen::MatrixXd chol_a_, chol_b_;
};

template <class Rng>
PriorSample complete_sample(Eigen::VectorXd gamma, double level, const SlabParams& slab, Index D,
                            Index T, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::normal_distribution<double> normal;
  PriorSample s;
  gamma.array() += level;
  s.gamma = Eigen::Map<Eigen::MatrixXd>(gamma.data(), D, T);
  s.support = Eigen::MatrixXi::Zero(D, T);
  s.coefficients = Eigen::MatrixXd::Zero(D, T);
  const double sd = std::sqrt(slab.variance);
  for (Index t = 0; t < T; ++t) {
    for (Index i = 0; i < D; ++i) {
      if (uniform(rng) < normal_cdf(s.gamma(i, t))) {
        s.support(i, t) = 1;
        s.coefficients(i, t) = slab.mean + sd * normal(rng);
      }
    }
  }
  return s;
}

inline void check_sample_dims(const GammaPriorSpec& prior, Index D, Index T) {
  prior.validate();
  if (prior.size() != D * T) {
    throw InputError("sample_prior: prior dimension " + std::to_string(prior.size()) +
                     " does not match D*T = " + std::to_string(D * T));
  }
}

}  // namespace detail

/// Draws (gamma, z, x) from the prior; deterministic given the seed.
inline PriorSample sample_prior(const GammaPriorSpec& prior, const SlabParams& slab, Index D, Index T,
                                std::uint64_t seed) {
  detail::check_sample_dims(prior, D, T);
  slab.validate();
  std::mt19937_64 rng(seed);
  const detail::GammaSampler sampler(prior.covariance);
  return detail::complete_sample(sampler.draw(rng), prior.mean_level, slab, D, T, rng);
}

/// Prior sample with exactly K active coefficients.
///
/// A scalar shift of the prior mean is bisected so that the expected support
/// size equals K; samples are then drawn at that shift until one has exactly K
/// active entries. If max_tries runs out, the closest sample is returned with
/// cardinality_exact = false.
inline PriorSample sample_prior_conditioned(const GammaPriorSpec& prior, const SlabParams& slab, Index D,
                                            Index T, Index K, std::uint64_t seed,
                                            std::size_t max_tries = 10000) {
  detail::check_sample_dims(prior, D, T);
  slab.validate();
  if (K < 0 || K > D * T) throw InputError("sample_prior_conditioned: K must lie in [0, D*T]");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;

  auto fill_coefficients = [&](PriorSample& s) {
    s.coefficients.setZero();
    const double sd = std::sqrt(slab.variance);
    for (Index t = 0; t < T; ++t)
      for (Index i = 0; i < D; ++i)
        if (s.support(i, t) != 0) s.coefficients(i, t) = slab.mean + sd * normal(rng);
  };

  const detail::GammaSampler sampler(prior.covariance);
  if (K == 0 || K == D * T) {
    PriorSample s;
    Eigen::VectorXd g = sampler.draw(rng);
    g.array() += prior.mean_level;
    s.gamma = Eigen::Map<Eigen::MatrixXd>(g.data(), D, T);
    s.support = Eigen::MatrixXi::Constant(D, T, K == 0 ? 0 : 1);
    s.coefficients = Eigen::MatrixXd::Zero(D, T);
    fill_coefficients(s);
    return s;
  }

  const Eigen::VectorXd diag = covariance_diagonal(prior.covariance);
  auto expected = [&](double shift) {
    double acc = 0.0;
    for (Index k = 0; k < diag.size(); ++k) acc += marginal_activation_prob(prior.mean_level + shift, diag(k));
    return acc;
  };
  double lo = -1.0, hi = 1.0;
  while (expected(lo) > static_cast<double>(K)) lo *= 2.0;
  while (expected(hi) < static_cast<double>(K)) hi *= 2.0;
  for (int it = 0; it < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(lo)); ++it) {
    const double mid = 0.5 * (lo + hi);
    (expected(mid) < static_cast<double>(K) ? lo : hi) = mid;
  }
  const double shift = 0.5 * (lo + hi);

  PriorSample best;
  Index best_gap = -1;
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(max_tries, 1); ++attempt) {
    PriorSample s = detail::complete_sample(sampler.draw(rng), prior.mean_level + shift, slab, D, T, rng);
    const Index gap = std::abs(static_cast<Index>(s.support.sum()) - K);
    if (best_gap < 0 || gap < best_gap) {
      best = std::move(s);
      best_gap = gap;
    }
    if (gap == 0) break;
  }
  best.cardinality_exact = best_gap == 0;
  best.mean_shift = shift;
  return best;
}

}  // namespace stss
