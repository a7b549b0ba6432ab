#pragma once

// Site parameterizations, cavities and the closed-form tilted moments of the
// spike-and-slab (x, z) factor and the probit-link (gamma, z) factor.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>

#include "stss/error.hpp"
#include "stss/normal.hpp"
#include "stss/prior_model.hpp"

namespace stss {

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kLogOddsClamp = 35.0;
inline constexpr double kMinCavityPrecision = 1e-12;

/// Gaussian site exp(-precision * x^2 / 2 + precision_times_mean * x).
struct GaussianSiteNat {
  double precision = 0.0;
  double precision_times_mean = 0.0;
};

/// Bernoulli site stored as log-odds.
struct BernoulliSiteNat {
  double log_odds = 0.0;
};

struct Cavity {
  double mean = 0.0;
  double var = 0.0;
};

/// Removes one site from a scalar Gaussian marginal. Empty when the cavity is
/// not a proper Gaussian; callers then leave the site untouched.
inline std::optional<Cavity> cavity_gaussian(double global_prec, double global_ptm,
                                             const GaussianSiteNat& site) {
  const double prec = global_prec - site.precision;
  if (!(prec > kMinCavityPrecision) || !std::isfinite(prec)) return std::nullopt;
  const double ptm = global_ptm - site.precision_times_mean;
  return Cavity{ptm / prec, 1.0 / prec};
}

inline double clamp_log_odds(double l) { return std::clamp(l, -kLogOddsClamp, kLogOddsClamp); }

/// Log-odds of a probability clamped to (eps, 1 - eps).
inline double clamped_logit(double p) {
  return logit(std::clamp(p, kProbClamp, 1.0 - kProbClamp));
}

/// Probability of the product of two Bernoulli sites.
inline double combine(double log_odds_a, double log_odds_b) { return logistic(log_odds_a + log_odds_b); }

struct TiltedMoments {
  double mean = 0.0;
  double var = 0.0;
  double prob = 0.0;   // E[z]
  double log_z = 0.0;  // log normalizer of the tilted distribution
  double site_log_odds = 0.0;  // Bernoulli site implied by E[z] and the cavity
};

namespace detail {

[[noreturn]] inline void non_finite(const char* what, double m, double v, double l) {
  std::ostringstream os;
  os << what << ": non-finite moments for cavity mean " << m << ", variance " << v << ", log-odds " << l;
  throw NumericalError(os.str());
}

inline double bounded_cavity_log_odds(double l) {
  const double bound = logit(1.0 - kProbClamp);
  return std::clamp(l, -bound, bound);
}

}  // namespace detail

/// Moments of (1 - p) N(x|m, v) delta(x) + p N(x|m, v) N(x|rho, tau), with p
/// given as cavity log-odds.
inline TiltedMoments moments_f2_log_odds(double cav_mean, double cav_var, double cav_log_odds,
                                         const SlabParams& slab) {
  const double l = detail::bounded_cavity_log_odds(cav_log_odds);
  const double log_p = -softplus(-l);
  const double log_q = -softplus(l);
  const double rho = slab.mean, tau = slab.variance;

  const double site_l = log_normal_pdf(0.0, cav_mean - rho, cav_var + tau) - log_normal_pdf(0.0, cav_mean, cav_var);
  const double log_spike = log_q + log_normal_pdf(0.0, cav_mean, cav_var);
  const double log_slab = log_p + log_normal_pdf(0.0, cav_mean - rho, cav_var + tau);
  const double log_x0 = log_sum_exp(log_spike, log_slab);

  const double ez = logistic(l + site_l);
  const double slab_mean = (cav_mean * tau + rho * cav_var) / (tau + cav_var);
  const double slab_var = tau * cav_var / (tau + cav_var);

  TiltedMoments out;
  out.prob = ez;
  out.mean = ez * slab_mean;
  out.var = ez * slab_var + ez * (1.0 - ez) * slab_mean * slab_mean;
  out.log_z = log_x0;
  out.site_log_odds = site_l;
  if (!std::isfinite(out.mean) || !std::isfinite(out.var) || !std::isfinite(out.log_z)) {
    detail::non_finite("moments_f2", cav_mean, cav_var, cav_log_odds);
  }
  return out;
}

inline TiltedMoments moments_f2(double cav_mean, double cav_var, double cav_prob, const SlabParams& slab) {
  return moments_f2_log_odds(cav_mean, cav_var, clamped_logit(cav_prob), slab);
}

/// Moments of N(g|mu, s) [(1 - p) Phi(-g) + p Phi(g)], with p given as cavity log-odds.
inline TiltedMoments moments_f3_log_odds(double cav_mean, double cav_var, double cav_log_odds) {
  const double l = detail::bounded_cavity_log_odds(cav_log_odds);
  const double log_p = -softplus(-l);
  const double log_q = -softplus(l);
  const double s = std::sqrt(1.0 + cav_var);
  const double c = cav_mean / s;

  const double log_phi_pos = log_normal_cdf(c);
  const double log_phi_neg = log_normal_cdf(-c);
  const double site_l = log_phi_pos - log_phi_neg;

  // Each mixture component is a probit-tilted Gaussian.
  const double r_pos = mills_ratio(c);
  const double r_neg = mills_ratio(-c);
  const double k = cav_var / s;
  const double m_pos = cav_mean + k * r_pos;
  const double m_neg = cav_mean - k * r_neg;
  const double shrink = cav_var * cav_var / (1.0 + cav_var);
  const double v_pos = cav_var - shrink * r_pos * (c + r_pos);
  const double v_neg = cav_var - shrink * r_neg * (-c + r_neg);

  const double w_pos = logistic(l + site_l);
  const double w_neg = logistic(-(l + site_l));
  const double dm = m_pos - m_neg;

  TiltedMoments out;
  out.prob = w_pos;
  out.mean = w_pos * m_pos + w_neg * m_neg;
  out.var = w_pos * v_pos + w_neg * v_neg + w_pos * w_neg * dm * dm;
  out.log_z = log_sum_exp(log_q + log_phi_neg, log_p + log_phi_pos);
  out.site_log_odds = site_l;
  if (!std::isfinite(out.mean) || !std::isfinite(out.var) || !std::isfinite(out.log_z)) {
    detail::non_finite("moments_f3", cav_mean, cav_var, cav_log_odds);
  }
  if (!(out.var > 0.0)) {
    std::ostringstream os;
    os << "moments_f3: non-positive variance " << out.var << " for cavity mean " << cav_mean
       << ", variance " << cav_var;
    throw NumericalError(os.str());
  }
  return out;
}

inline TiltedMoments moments_f3(double cav_mean, double cav_var, double cav_prob) {
  return moments_f3_log_odds(cav_mean, cav_var, clamped_logit(cav_prob));
}

/// Damped natural-parameter update. A negative damped precision is replaced by
/// 1 / clamp_variance, keeping the site centred on the tilted mean.
inline GaussianSiteNat site_update_from_moments(double post_mean, double post_var, const Cavity& cavity,
                                                const GaussianSiteNat& old, double damping,
                                                double clamp_variance) {
  const double new_prec = 1.0 / post_var - 1.0 / cavity.var;
  const double new_ptm = post_mean / post_var - cavity.mean / cavity.var;
  GaussianSiteNat out;
  out.precision = (1.0 - damping) * old.precision + damping * new_prec;
  out.precision_times_mean = (1.0 - damping) * old.precision_times_mean + damping * new_ptm;
  if (out.precision < 0.0) {
    out.precision = 1.0 / clamp_variance;
    out.precision_times_mean = out.precision * post_mean;
  }
  return out;
}

/// Bernoulli site implied by the tilted E[z] and the cavity probability.
inline BernoulliSiteNat bernoulli_site_update_f2(double ez, double cav_prob) {
  return {clamp_log_odds(clamped_logit(ez) - clamped_logit(cav_prob))};
}

inline BernoulliSiteNat damp_bernoulli(const BernoulliSiteNat& old, double new_log_odds, double damping) {
  return {clamp_log_odds((1.0 - damping) * old.log_odds + damping * new_log_odds)};
}

}  // namespace stss
