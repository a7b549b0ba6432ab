#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "stss/moments.hpp"

using namespace stss;
using oracle::rel_err;

namespace {

struct Draw {
  double m, v, l, rho, tau;
};

Draw draw_f2(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {-3.0 + 6.0 * u(rng), std::pow(10.0, -2.0 + 4.0 * u(rng)), -6.0 + 12.0 * u(rng), -1.0 + 2.0 * u(rng),
          std::pow(10.0, -1.0 + 2.0 * u(rng))};
}

Draw draw_f3(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return {-4.0 + 8.0 * u(rng), std::pow(10.0, -2.0 + 4.0 * u(rng)), -6.0 + 12.0 * u(rng), 0.0, 0.0};
}

}  // namespace

TEST(F2Moments, MatchesQuadratureOnRandomCavities) {
  std::mt19937_64 rng(101);
  for (int k = 0; k < 200; ++k) {
    const Draw d = draw_f2(rng);
    const auto ours = moments_f2_log_odds(d.m, d.v, d.l, {d.rho, d.tau});
    const auto ref = oracle::spike_slab_tilted(d.m, d.v, logistic(d.l), d.rho, d.tau);
    SCOPED_TRACE(::testing::Message() << "m=" << d.m << " v=" << d.v << " l=" << d.l << " rho=" << d.rho
                                      << " tau=" << d.tau);
    EXPECT_LT(rel_err(ours.log_z, ref.log_z, 1.0), 1e-8);
    EXPECT_LT(rel_err(ours.mean, ref.mean, std::sqrt(ref.var)), 1e-8);
    EXPECT_LT(rel_err(ours.var, ref.var), 1e-8);
    EXPECT_LT(rel_err(ours.prob, ref.prob), 1e-8);
  }
}

TEST(F2Moments, CertainSlabIsGaussianProduct) {
  // p -> 1: the tilted distribution is N(m, v) N(rho, tau).
  const auto t = moments_f2(0.7, 2.0, 1.0, {0.5, 1.0});
  const double prec = 1.0 / 2.0 + 1.0;
  EXPECT_NEAR(t.mean, (0.7 / 2.0 + 0.5) / prec, 1e-10);
  EXPECT_NEAR(t.var, 1.0 / prec, 1e-10);
  EXPECT_NEAR(t.prob, 1.0, 1e-10);
}

TEST(F2Moments, CertainSpikeCollapsesToZero) {
  const auto t = moments_f2(0.7, 2.0, 0.0, {0.5, 1.0});
  EXPECT_NEAR(t.mean, 0.0, 1e-10);
  EXPECT_NEAR(t.var, 0.0, 1e-10);
  EXPECT_NEAR(t.prob, 0.0, 1e-10);
}

TEST(F2Moments, SiteLogOddsIsLikelihoodRatio) {
  const double m = 0.4, v = 0.3;
  const SlabParams slab{0.2, 1.5};
  const auto t = moments_f2_log_odds(m, v, 0.0, slab);
  const double expect = oracle::log_gauss(0.0, m - 0.2, v + 1.5) - oracle::log_gauss(0.0, m, v);
  EXPECT_NEAR(t.site_log_odds, expect, 1e-13);
  EXPECT_NEAR(logit(t.prob), t.site_log_odds, 1e-12);
}

TEST(F2Moments, ExtremeLogOddsStayFinite) {
  for (double l : {-1e6, -100.0, 100.0, 1e6}) {
    const auto t = moments_f2_log_odds(50.0, 1e-4, l, {});
    EXPECT_TRUE(std::isfinite(t.mean) && std::isfinite(t.var) && std::isfinite(t.log_z));
  }
}

TEST(F3Moments, MatchesQuadratureOnRandomCavities) {
  std::mt19937_64 rng(202);
  for (int k = 0; k < 200; ++k) {
    const Draw d = draw_f3(rng);
    const auto ours = moments_f3_log_odds(d.m, d.v, d.l);
    const auto ref = oracle::probit_mixture_tilted(d.m, d.v, logistic(d.l));
    SCOPED_TRACE(::testing::Message() << "m=" << d.m << " v=" << d.v << " l=" << d.l);
    EXPECT_LT(rel_err(ours.log_z, ref.log_z, 1.0), 1e-8);
    EXPECT_LT(rel_err(ours.mean, ref.mean, std::sqrt(ref.var)), 1e-8);
    EXPECT_LT(rel_err(ours.var, ref.var), 1e-8);
    EXPECT_LT(rel_err(ours.prob, ref.prob), 1e-8);
  }
}

TEST(F3Moments, HalfProbabilityIsUninformative) {
  // (Phi(g) + Phi(-g)) / 2 = 1/2, so the tilted distribution equals the cavity.
  const auto t = moments_f3(0.8, 2.5, 0.5);
  EXPECT_NEAR(t.mean, 0.8, 1e-12);
  EXPECT_NEAR(t.var, 2.5, 1e-12);
  EXPECT_NEAR(t.log_z, std::log(0.5), 1e-12);
}

TEST(F3Moments, ProbabilityIsMarginalActivation) {
  // With an uninformative Bernoulli cavity E[z] = Phi(m / sqrt(1 + v)).
  const auto t = moments_f3(-0.6, 1.7, 0.5);
  EXPECT_NEAR(t.prob, marginal_activation_prob(-0.6, 1.7), 1e-12);
}

TEST(F3Moments, FarTailsStayFiniteAndPositive) {
  for (double m : {-40.0, -12.0, 12.0, 40.0}) {
    for (double l : {-30.0, 0.0, 30.0}) {
      const auto t = moments_f3_log_odds(m, 0.5, l);
      EXPECT_TRUE(std::isfinite(t.mean) && std::isfinite(t.log_z)) << m << " " << l;
      EXPECT_GT(t.var, 0.0) << m << " " << l;
    }
  }
}

TEST(Cavity, RemovesSite) {
  const auto c = cavity_gaussian(3.0, 1.5, {1.0, 0.5});
  ASSERT_TRUE(c.has_value());
  EXPECT_DOUBLE_EQ(c->var, 0.5);
  EXPECT_DOUBLE_EQ(c->mean, 0.5);
}

TEST(Cavity, ImproperCavityIsEmpty) {
  EXPECT_FALSE(cavity_gaussian(1.0, 0.0, {1.0, 0.0}).has_value());
  EXPECT_FALSE(cavity_gaussian(1.0, 0.0, {2.0, 0.0}).has_value());
  EXPECT_FALSE(cavity_gaussian(std::nan(""), 0.0, {0.0, 0.0}).has_value());
}

TEST(SiteUpdate, FullStepRecoversTiltedMarginal) {
  const Cavity cav{0.3, 2.0};
  const auto s = site_update_from_moments(0.5, 0.8, cav, {}, 1.0, 1e2);
  // cavity times site should reproduce (0.5, 0.8)
  const double prec = 1.0 / cav.var + s.precision;
  const double ptm = cav.mean / cav.var + s.precision_times_mean;
  EXPECT_NEAR(1.0 / prec, 0.8, 1e-14);
  EXPECT_NEAR(ptm / prec, 0.5, 1e-14);
}

TEST(SiteUpdate, DampingInterpolatesNaturalParameters) {
  const Cavity cav{0.0, 1.0};
  const GaussianSiteNat old{2.0, 1.0};
  const auto full = site_update_from_moments(0.2, 0.5, cav, old, 1.0, 1e2);
  const auto half = site_update_from_moments(0.2, 0.5, cav, old, 0.5, 1e2);
  EXPECT_NEAR(half.precision, 0.5 * (2.0 + full.precision), 1e-14);
  EXPECT_NEAR(half.precision_times_mean, 0.5 * (1.0 + full.precision_times_mean), 1e-14);
}

TEST(SiteUpdate, NegativePrecisionIsClamped) {
  // Tilted variance larger than the cavity variance asks for a negative site.
  const auto s = site_update_from_moments(0.7, 3.0, {0.0, 1.0}, {}, 1.0, 1e2);
  EXPECT_DOUBLE_EQ(s.precision, 1e-2);
  EXPECT_DOUBLE_EQ(s.precision_times_mean, 1e-2 * 0.7);
}

TEST(Bernoulli, CombineIsProductOfSites) {
  const double a = 0.3, b = -1.2;
  const double pa = logistic(a), pb = logistic(b);
  EXPECT_NEAR(combine(a, b), pa * pb / (pa * pb + (1 - pa) * (1 - pb)), 1e-15);
}

TEST(Bernoulli, ClampsAtBoundaries) {
  EXPECT_DOUBLE_EQ(clamp_log_odds(1e9), kLogOddsClamp);
  EXPECT_DOUBLE_EQ(clamp_log_odds(-1e9), -kLogOddsClamp);
  EXPECT_TRUE(std::isfinite(clamped_logit(0.0)));
  EXPECT_TRUE(std::isfinite(clamped_logit(1.0)));
}

TEST(Bernoulli, SiteUpdateDividesOutCavity) {
  const auto s = bernoulli_site_update_f2(0.8, 0.4);
  EXPECT_NEAR(combine(s.log_odds, logit(0.4)), 0.8, 1e-14);
}

TEST(Bernoulli, DampingIsInLogOdds) {
  EXPECT_DOUBLE_EQ(damp_bernoulli({2.0}, 4.0, 0.25).log_odds, 2.5);
  EXPECT_DOUBLE_EQ(damp_bernoulli({30.0}, 100.0, 1.0).log_odds, kLogOddsClamp);
}

TEST(NormalHelpers, LogCdfInDeepTail) {
  // log Phi(-40) from the asymptotic expansion compared with erfc in long double.
  const long double z = -40.0L;
  const long double ref = std::log(0.5L * std::erfc(-z / std::sqrt(2.0L)));
  EXPECT_NEAR(log_normal_cdf(-40.0), static_cast<double>(ref), 1e-10 * std::abs(static_cast<double>(ref)));
  EXPECT_NEAR(log_normal_cdf(8.0), std::log1p(-0.5 * std::erfc(8.0 / std::sqrt(2.0))), 1e-16);
}

TEST(NormalHelpers, MillsRatioAgainstDirect) {
  for (double z : {-5.0, -1.0, 0.0, 2.0, 6.0}) {
    EXPECT_NEAR(mills_ratio(z), std::exp(oracle::log_gauss(z, 0, 1)) / oracle::std_cdf(z), 1e-12 * mills_ratio(z));
  }
}
