#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "stss/ep_engine.hpp"
#include "stss/gamma_updaters.hpp"

using namespace stss;
using oracle::rel_err;

namespace {

struct Sites {
  Eigen::VectorXd theta, eta;
};

Sites random_sites(Index n, std::mt19937_64& rng, double lo = -2.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Sites s;
  s.theta = Eigen::VectorXd::NullaryExpr(n, [&] { return std::pow(10.0, lo + (hi - lo) * u(rng)); });
  s.eta = oracle::random_vector(n, rng);
  return s;
}

/// Posterior of N(mu0 1, sigma) times diagonal sites, plus the log integral.
struct DenseRef {
  Eigen::VectorXd mean, var;
  double log_partition;
};

DenseRef dense_reference(const Eigen::MatrixXd& sigma, double mu0, const Eigen::VectorXd& theta,
                         const Eigen::VectorXd& eta) {
  const Index n = sigma.rows();
  const Eigen::MatrixXd Si = sigma.inverse();
  const Eigen::VectorXd mu = Eigen::VectorXd::Constant(n, mu0);
  Eigen::MatrixXd P = Si;
  P.diagonal() += theta;
  const Eigen::VectorXd h = Si * mu + eta;
  const auto post = oracle::dense_posterior(P, h);
  const double ld_sigma = Eigen::LLT<Eigen::MatrixXd>(sigma).matrixLLT().diagonal().array().log().sum() * 2.0;
  const double ld_p = Eigen::LLT<Eigen::MatrixXd>(P).matrixLLT().diagonal().array().log().sum() * 2.0;
  return {post.mean, post.var, -0.5 * mu.dot(Si * mu) - 0.5 * ld_sigma + 0.5 * h.dot(post.mean) - 0.5 * ld_p};
}

void expect_matches(const GammaPosterior& ours, const DenseRef& ref, double tol) {
  const double scale = std::max(1.0, ref.mean.cwiseAbs().maxCoeff());
  EXPECT_LT((ours.mean - ref.mean).cwiseAbs().maxCoeff() / scale, tol);
  for (Index i = 0; i < ref.var.size(); ++i) EXPECT_LT(rel_err(ours.var(i), ref.var(i)), tol) << i;
  EXPECT_LT(rel_err(ours.log_partition, ref.log_partition, 1.0), tol);
}

KroneckerCovariance random_kron(Index T, Index D, std::mt19937_64& rng) {
  return {DenseCovariance(oracle::random_spd(T, rng)), DenseCovariance(oracle::random_spd(D, rng))};
}

}  // namespace

TEST(FullUpdate, MatchesNaiveInverse) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const Index n = 2 + trial % 15;
    const Eigen::MatrixXd sigma = oracle::random_spd(n, rng);
    const Sites s = random_sites(n, rng);
    const double mu0 = -1.0 + 0.1 * trial;
    expect_matches(update_gamma_full(sigma, mu0, s.theta, s.eta), dense_reference(sigma, mu0, s.theta, s.eta), 1e-10);
  }
}

TEST(FullUpdate, VanishingSitesReturnPrior) {
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd sigma = oracle::random_spd(6, rng);
  const auto post = update_gamma_full(sigma, 0.3, Eigen::VectorXd::Constant(6, 1e-14), Eigen::VectorXd::Zero(6));
  EXPECT_LT((post.mean.array() - 0.3).abs().maxCoeff(), 1e-12);
  EXPECT_LT((post.var - sigma.diagonal()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FullUpdate, SiteValidation) {
  const Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(3, 3);
  EXPECT_THROW(update_gamma_full(sigma, 0.0, Eigen::VectorXd::Ones(2), Eigen::VectorXd::Zero(2)), InputError);
  EXPECT_THROW(update_gamma_full(sigma, 0.0, Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)), NumericalError);
}

TEST(DiagonalUpdate, AgreesWithFull) {
  std::mt19937_64 rng(3);
  const Eigen::VectorXd lam = Eigen::VectorXd::LinSpaced(8, 0.2, 3.0);
  const Sites s = random_sites(8, rng);
  const Eigen::MatrixXd sigma = lam.asDiagonal();
  expect_matches(update_gamma_diagonal(lam, 0.7, s.theta, s.eta), dense_reference(sigma, 0.7, s.theta, s.eta), 1e-12);
}

TEST(LowRankUpdate, FullRankEqualsFull) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cov = random_kron(2 + trial % 3, 3 + trial % 4, rng);
    const Index n = cov.size();
    const auto lr = low_rank_approximate(cov, RankTarget::rank(n));
    const Sites s = random_sites(n, rng);
    const auto ours = update_gamma_lowrank(lr, -0.4, s.theta, s.eta);
    expect_matches(ours, dense_reference(cov.materialize(), -0.4, s.theta, s.eta), 1e-8);
  }
}

TEST(LowRankUpdate, MatchesDenseOnReconstructedPrior) {
  // At any rank the update is exact for the prior it represents.
  std::mt19937_64 rng(5);
  for (Index k : {0, 1, 3, 7}) {
    const auto cov = random_kron(3, 4, rng);
    const auto lr = low_rank_approximate(cov, RankTarget::rank(k));
    const Sites s = random_sites(12, rng);
    expect_matches(update_gamma_lowrank(lr, 0.2, s.theta, s.eta), dense_reference(lr.materialize(), 0.2, s.theta, s.eta),
                   1e-9);
  }
}

TEST(CommonPrecision, EqualSitePrecisionsEqualFull) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cov = random_kron(1 + trial % 4, 2 + trial % 5, rng);
    const Index n = cov.size();
    auto state = CommonPrecisionState::from(cov);
    Sites s = random_sites(n, rng);
    s.theta.setConstant(0.3 + 0.2 * trial);
    const auto ours = update_gamma_common_precision(state, 0.5, s.theta, s.eta);
    expect_matches(ours, dense_reference(cov.materialize(), 0.5, s.theta, s.eta), 1e-9);
    EXPECT_DOUBLE_EQ(state.theta_bar, s.theta(0));
  }
}

TEST(CommonPrecision, HeterogeneousSitesMatchAveragedSurrogate) {
  std::mt19937_64 rng(7);
  const auto cov = random_kron(3, 5, rng);
  auto state = CommonPrecisionState::from(cov);
  const Sites s = random_sites(15, rng);
  const auto ours = update_gamma_common_precision(state, -0.2, s.theta, s.eta);
  const Eigen::VectorXd tbar = Eigen::VectorXd::Constant(15, s.theta.mean());
  expect_matches(ours, dense_reference(cov.materialize(), -0.2, tbar, s.eta), 1e-9);
}

TEST(Grouped, UnitGroupsEqualUngrouped) {
  std::mt19937_64 rng(8);
  const auto cov = random_kron(3, 4, rng);
  const GammaPriorSpec prior{0.1, cov, 4, 3};
  GammaUpdater a(prior, GammaScheme::parse("full"));
  GammaUpdater b(prior, GammaScheme::parse("full"));
  const Sites s = random_sites(12, rng);
  const auto grouped = update_gamma_grouped(a, build_group_map(4, 3, 1, 1), s.theta, s.eta);
  const auto plain = b(s.theta, s.eta);
  EXPECT_EQ(grouped.mean, plain.mean);
  EXPECT_EQ(grouped.var, plain.var);
}

TEST(Grouped, EqualsDuplicatedCovarianceSystem) {
  // Every member of a group shares one gamma: the member-level prior is
  // M Sigma_g M^T with M the membership matrix.
  std::mt19937_64 rng(9);
  const Index D = 6, T = 4;
  const auto map = build_group_map(D, T, 2, 2);
  const auto gcov = random_kron(map.temporal_groups, map.spatial_groups, rng);
  const GammaPriorSpec prior{-0.3, gcov, map.spatial_groups, map.temporal_groups};
  GammaUpdater inner(prior, GammaScheme::parse("full"));
  const Sites s = random_sites(D * T, rng);
  const auto grouped = update_gamma_grouped(inner, map, s.theta, s.eta);

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(D * T, map.G());
  for (Index k = 0; k < D * T; ++k) M(k, map.group_of[static_cast<std::size_t>(k)]) = 1.0;
  const Eigen::MatrixXd dup = M * gcov.materialize() * M.transpose();
  const auto member = update_gamma_full(dup, -0.3, s.theta, s.eta);
  for (Index k = 0; k < D * T; ++k) {
    const Index g = map.group_of[static_cast<std::size_t>(k)];
    EXPECT_NEAR(member.mean(k), grouped.mean(g), 1e-8);
    EXPECT_LT(rel_err(member.var(k), grouped.var(g)), 1e-7);
  }
  EXPECT_NEAR(member.log_partition, grouped.log_partition, 1e-8 * std::max(1.0, std::abs(member.log_partition)));
}

TEST(Grouped, ComposesWithCommonPrecision) {
  std::mt19937_64 rng(10);
  const auto map = build_group_map(6, 4, 3, 2);
  const auto gcov = random_kron(map.temporal_groups, map.spatial_groups, rng);
  const GammaPriorSpec prior{0.0, gcov, map.spatial_groups, map.temporal_groups};
  GammaUpdater cp(prior, GammaScheme::parse("group:3x2+cp"));
  const Sites s = random_sites(24, rng);
  const auto ours = update_gamma_grouped(cp, map, s.theta, s.eta);
  const auto [tg, eg] = aggregate_sites(map, s.theta, s.eta);
  const Eigen::VectorXd tbar = Eigen::VectorXd::Constant(map.G(), tg.mean());
  expect_matches(ours, dense_reference(gcov.materialize(), 0.0, tbar, eg), 1e-9);
}

TEST(Scheme, ParsesAndPrintsCanonicalForms) {
  EXPECT_EQ(GammaScheme::parse("full").to_string(), "full");
  EXPECT_EQ(GammaScheme::parse("cp").to_string(), "cp");
  EXPECT_EQ(GammaScheme::parse("lowrank:7").to_string(), "lowrank:7");
  EXPECT_EQ(GammaScheme::parse("lowrank:0.99").to_string(), "lowrank:0.98999999999999999");
  EXPECT_EQ(GammaScheme::parse("lowrank:1.0").to_string(), "lowrank:1.0");
  EXPECT_EQ(GammaScheme::parse("group:5x10").to_string(), "group:5x10");
  EXPECT_EQ(GammaScheme::parse("group:5x10+cp").to_string(), "group:5x10+cp");
  const auto g = GammaScheme::parse("group:2x3+lowrank:4");
  EXPECT_TRUE(g.grouped);
  EXPECT_EQ(g.spatial_group, 2);
  EXPECT_EQ(g.temporal_group, 3);
  EXPECT_EQ(g.kind, GammaScheme::Kind::lowrank);
}

TEST(Scheme, RejectsMalformed) {
  for (const char* bad : {"", "fast", "lowrank:", "lowrank:-1", "lowrank:1.5", "lowrank:0.0", "group:3",
                          "group:0x1", "group:2x2+bogus", "cp:2"}) {
    EXPECT_THROW(GammaScheme::parse(bad), InputError) << bad;
  }
}

TEST(Updater, CommonPrecisionRejectsLowRankPrior) {
  const auto k = KroneckerCovariance{DenseCovariance(Eigen::MatrixXd::Identity(2, 2)),
                                     DenseCovariance(Eigen::MatrixXd::Identity(2, 2))};
  const GammaPriorSpec prior{0.0, low_rank_approximate(k, RankTarget::rank(2)), 2, 2};
  EXPECT_THROW(GammaUpdater(prior, GammaScheme::parse("cp")), InputError);
}

namespace {

/// Smooth-prior recovery problem with D = 200, N = 100 at 20 dB.
struct SmoothProblem {
  Problem problem;
  GammaPriorSpec prior;
};

SmoothProblem smooth_problem(Index D, std::uint64_t seed) {
  const GammaPriorSpec prior{0.0, squared_exponential(CoordinateGrid::regular_1d(D), 75.0, 100.0), D, 1};
  // A smooth field at nu0 = 0 is often entirely inactive; take the next seed then.
  auto truth = sample_prior(prior, {0.0, 1.0}, D, 1, seed);
  while (truth.support.sum() == 0) truth = sample_prior(prior, {0.0, 1.0}, D, 1, ++seed);
  std::mt19937_64 rng(seed + 1);
  const Index N = D / 2;
  const Eigen::MatrixXd A = oracle::random_matrix(N, D, rng);
  const Eigen::VectorXd clean = A * truth.coefficients.col(0);
  const Eigen::VectorXd e = oracle::random_vector(N, rng);
  const double scale = std::sqrt(clean.squaredNorm() / 100.0 / e.squaredNorm());
  Problem p{A, clean + scale * e, Likelihood::gaussian, clean.squaredNorm() / 100.0 / static_cast<double>(N), {}};
  return {p, prior};
}

}  // namespace

TEST(LowRankEP, IndistinguishableFromFullOnSmoothPrior) {
  const auto sp = smooth_problem(500, 2);  // 99% of the variance is 7 eigenvectors at this size
  EPConfig full_cfg;
  full_cfg.max_iters = 300;
  full_cfg.scheme = GammaScheme::parse("full");
  const auto full = run_ep(sp.problem, sp.prior, {0.0, 1.0}, std::nullopt, full_cfg);
  const double bound = 0.05 * full.gamma_mean.cwiseAbs().maxCoeff();
  for (const char* scheme : {"lowrank:0.99", "lowrank:7"}) {
    EPConfig cfg = full_cfg;
    cfg.scheme = GammaScheme::parse(scheme);
    const auto lr = run_ep(sp.problem, sp.prior, {0.0, 1.0}, std::nullopt, cfg);
    EXPECT_LE((lr.gamma_mean - full.gamma_mean).cwiseAbs().maxCoeff(), bound) << scheme;
  }
}
