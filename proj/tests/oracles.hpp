#pragma once

// Independent reference computations used by the unit suites and the
// acceptance binary: adaptive quadrature, dense linear algebra and exhaustive
// enumeration. Nothing here calls the closed forms under test.

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double log_gauss(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * M_PI * var) + d * d / var);
}

inline double std_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Integral of exp(log_f(c + s u)) * s du over the real line, with log_f
/// evaluated relative to `ref` to avoid underflow.
template <class F>
double integrate_line(F&& f, double center, double scale) {
  using boost::math::quadrature::gauss_kronrod;
  auto g = [&](double u) { return f(center + scale * u); };
  // Integrands carry a unit-width Gaussian factor in u. The outer panels hold
  // under 1e-13 of the mass so a loose relative tolerance is plenty there.
  const double core = gauss_kronrod<double, 61>::integrate(g, -8.0, 0.0, 15, 1e-14) +
                      gauss_kronrod<double, 61>::integrate(g, 0.0, 8.0, 15, 1e-14);
  const double tails = gauss_kronrod<double, 61>::integrate(g, -40.0, -8.0, 8, 1e-6) +
                       gauss_kronrod<double, 61>::integrate(g, 8.0, 40.0, 8, 1e-6);
  return scale * (core + tails);
}

struct Moments {
  double log_z = 0.0;
  double mean = 0.0;
  double var = 0.0;
  double prob = 0.0;  // posterior mass of the "active" branch
};

/// Tilted distribution (1 - p) N(x|m, v) delta(x) + p N(x|m, v) N(x|rho, tau).
/// The spike branch is a point mass and contributes in closed form; the slab
/// branch is integrated numerically.
inline Moments spike_slab_tilted(double m, double v, double p, double rho, double tau) {
  // Peak and width of the slab integrand locate the quadrature window.
  const double prec = 1.0 / v + 1.0 / tau;
  const double center = (m / v + rho / tau) / prec;
  const double scale = 1.0 / std::sqrt(prec);
  const double ref = log_gauss(center, m, v) + log_gauss(center, rho, tau);
  auto slab = [&](double x, int power, double shift) {
    return std::pow(x - shift, power) * std::exp(log_gauss(x, m, v) + log_gauss(x, rho, tau) - ref);
  };
  const double s0 = integrate_line([&](double x) { return slab(x, 0, 0.0); }, center, scale);
  const double s1 = integrate_line([&](double x) { return slab(x, 1, center); }, center, scale) + center * s0;
  // Work relative to exp(ref) throughout.
  const double spike = std::exp(log_gauss(0.0, m, v) - ref);
  const double z_rel = (1.0 - p) * spike + p * s0;
  Moments out;
  out.log_z = ref + std::log(z_rel);
  out.mean = p * s1 / z_rel;
  const double s2c = integrate_line([&](double x) { return slab(x, 2, out.mean); }, center, scale);
  out.var = (p * s2c + (1.0 - p) * spike * out.mean * out.mean) / z_rel;
  out.prob = p * s0 / z_rel;
  return out;
}

/// Tilted distribution N(g|m, v) [(1 - p) Phi(-g) + p Phi(g)].
inline Moments probit_mixture_tilted(double m, double v, double p) {
  const double scale = std::sqrt(v);
  auto branch = [&](double sign, int power, double shift) {
    return integrate_line(
        [&](double g) { return std::pow(g - shift, power) * std::exp(log_gauss(g, m, v)) * std_cdf(sign * g); }, m,
        scale);
  };
  const double zp = branch(1.0, 0, 0.0), zn = branch(-1.0, 0, 0.0);
  const double z = p * zp + (1.0 - p) * zn;
  Moments out;
  out.log_z = std::log(z);
  out.mean = (p * (branch(1.0, 1, m) + m * zp) + (1.0 - p) * (branch(-1.0, 1, m) + m * zn)) / z;
  out.var = (p * branch(1.0, 2, out.mean) + (1.0 - p) * branch(-1.0, 2, out.mean)) / z;
  out.prob = p * zp / z;
  return out;
}

/// Tilted distribution N(u|m, v) Phi(label u).
inline Moments probit_tilted(double m, double v, double label) {
  return probit_mixture_tilted(m, v, label > 0 ? 1.0 : 0.0);
}

/// Kronecker product by definition.
inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index r = 0; r < a.rows(); ++r)
    for (Index c = 0; c < a.cols(); ++c) out.block(r * b.rows(), c * b.cols(), b.rows(), b.cols()) = a(r, c) * b;
  return out;
}

inline MatrixXd random_matrix(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  MatrixXd m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = n01(rng);
  return m;
}

inline VectorXd random_vector(Index n, std::mt19937_64& rng) { return random_matrix(n, 1, rng); }

/// Well-conditioned symmetric positive definite matrix.
inline MatrixXd random_spd(Index n, std::mt19937_64& rng, double ridge = 0.5) {
  const MatrixXd g = random_matrix(n, n, rng);
  MatrixXd s = g * g.transpose() / static_cast<double>(n);
  s.diagonal().array() += ridge;
  return 0.5 * (s + s.transpose());
}

/// Marginals and log evidence of q(x) proportional to f1(x) prod_i N(x_i | m_i, 1/theta_i)
/// by dense inversion.
struct DenseGaussian {
  VectorXd mean, var;
  MatrixXd cov;
};

inline DenseGaussian dense_posterior(const MatrixXd& prior_precision, const VectorXd& prior_ptm) {
  DenseGaussian out;
  out.cov = prior_precision.inverse();
  out.mean = out.cov * prior_ptm;
  out.var = out.cov.diagonal();
  return out;
}

/// log N(y | mean, cov).
inline double log_mvn(const VectorXd& y, const VectorXd& mean, const MatrixXd& cov) {
  const Eigen::LLT<MatrixXd> llt(cov);
  const VectorXd r = llt.matrixL().solve(y - mean);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (r.squaredNorm() + logdet + static_cast<double>(y.size()) * std::log(2.0 * M_PI));
}

/// Exact posterior of the independent spike-and-slab linear model by
/// enumerating every support pattern.
struct Enumeration {
  VectorXd marginals;
  double log_evidence = 0.0;
};

inline Enumeration enumerate_support(const MatrixXd& A, const VectorXd& y, double noise_var, const VectorXd& p0,
                                     double rho, double tau) {
  const Index N = A.rows(), D = A.cols();
  const std::size_t patterns = std::size_t{1} << D;
  std::vector<double> logw(patterns);
  double best = -kInf;
  for (std::size_t mask = 0; mask < patterns; ++mask) {
    MatrixXd cov = noise_var * MatrixXd::Identity(N, N);
    VectorXd mean = VectorXd::Zero(N);
    double lp = 0.0;
    for (Index i = 0; i < D; ++i) {
      if (mask >> i & 1U) {
        cov += tau * A.col(i) * A.col(i).transpose();
        mean += rho * A.col(i);
        lp += std::log(p0(i));
      } else {
        lp += std::log1p(-p0(i));
      }
    }
    logw[mask] = lp + log_mvn(y, mean, cov);
    best = std::max(best, logw[mask]);
  }
  Enumeration out;
  out.marginals = VectorXd::Zero(D);
  double total = 0.0;
  for (std::size_t mask = 0; mask < patterns; ++mask) {
    const double w = std::exp(logw[mask] - best);
    total += w;
    for (Index i = 0; i < D; ++i)
      if (mask >> i & 1U) out.marginals(i) += w;
  }
  out.marginals /= total;
  out.log_evidence = best + std::log(total);
  return out;
}

/// |a - b| relative to max(|b|, floor).
inline double rel_err(double a, double b, double floor = 1e-300) {
  return std::abs(a - b) / std::max(std::abs(b), floor);
}

}  // namespace oracle
