#pragma once

// Scalar Gaussian / Bernoulli helpers evaluated in the log domain.

#include <algorithm>
#include <cmath>
#include <numbers>

namespace stss {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))
inline constexpr double kLog2Pi = 1.83787706640934548356;

/// Standard normal density.
inline double std_normal_pdf(double z) { return std::exp(-0.5 * z * z - kLogSqrt2Pi); }

/// Standard normal CDF.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// log Phi(z), accurate in both tails.
inline double log_normal_cdf(double z) {
  if (z > 0.0) {
    return std::log1p(-0.5 * std::erfc(z / std::numbers::sqrt2));
  }
  if (z > -37.0) {
    return std::log(0.5 * std::erfc(-z / std::numbers::sqrt2));
  }
  // Asymptotic series; relative error below 1e-12 for z < -37.
  const double r = 1.0 / (z * z);
  const double series = 1.0 - r * (1.0 - r * (3.0 - r * (15.0 - 105.0 * r)));
  return -0.5 * z * z - std::log(-z) - kLogSqrt2Pi + std::log(series);
}

/// Inverse Mills ratio N(z)/Phi(z).
inline double mills_ratio(double z) {
  return std::exp(-0.5 * z * z - kLogSqrt2Pi - log_normal_cdf(z));
}

/// log N(x | mean, var).
inline double log_normal_pdf(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * d * d / var - 0.5 * std::log(var) - kLogSqrt2Pi;
}

inline double logistic(double log_odds) {
  if (log_odds >= 0.0) {
    return 1.0 / (1.0 + std::exp(-log_odds));
  }
  const double e = std::exp(log_odds);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// log(1 + exp(x)).
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double log_sum_exp(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Log normalizer of the unnormalized scalar Gaussian exp(-prec*x^2/2 + ptm*x).
inline double gaussian_log_partition(double precision, double precision_times_mean) {
  return 0.5 * precision_times_mean * precision_times_mean / precision -
         0.5 * std::log(precision) + kLogSqrt2Pi;
}

}  // namespace stss
