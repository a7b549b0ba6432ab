#pragma once

// Parallel expectation propagation for the spatio-temporal spike-and-slab model.
//
// Sites per (i, t), flat index t * D + i:
//   f2: Gaussian on x_it and Bernoulli on z_it (slab/spike factor)
//   f3: Gaussian on gamma_g(i,t) and Bernoulli on z_it (probit link)
// and, for the probit likelihood, Gaussian sites on each projection (A x_t)_n.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stss/error.hpp"
#include "stss/gamma_updaters.hpp"
#include "stss/likelihood.hpp"
#include "stss/moments.hpp"
#include "stss/normal.hpp"
#include "stss/prior_model.hpp"

namespace stss {

struct EPConfig {
  double damping = 0.5;
  int max_iters = 200;
  double tol = 1e-6;
  double evidence_tol = 1e-8;
  double v_inf = 1e2;
  double sigma_inf = 1e6;
  double init_site_var = 1e4;
  int cp_inner_repeats = 5;
  double cp_damping_decay = 0.9;
  int cp_decay_after = 100;
  GammaScheme scheme;

  void validate() const {
    if (!(damping > 0.0 && damping <= 1.0)) throw InputError("EPConfig: damping must lie in (0, 1]");
    if (max_iters < 1) throw InputError("EPConfig: max_iters must be positive");
    if (!(tol > 0.0)) throw InputError("EPConfig: tol must be positive");
    if (!(v_inf > 0.0) || !(sigma_inf > 0.0) || !(init_site_var > 0.0)) {
      throw InputError("EPConfig: site variances must be positive");
    }
    if (cp_inner_repeats < 1) throw InputError("EPConfig: cp_inner_repeats must be positive");
    if (!(cp_damping_decay > 0.0 && cp_damping_decay <= 1.0)) {
      throw InputError("EPConfig: cp_damping_decay must lie in (0, 1]");
    }
  }
};

struct SiteStore {
  Eigen::VectorXd f2_precision, f2_ptm, f2_log_odds;  // D*T
  Eigen::VectorXd f3_precision, f3_ptm, f3_log_odds;  // D*T, Gaussian part acts on the group of (i, t)
  Eigen::VectorXd f1_precision, f1_ptm;               // N*T, probit only
};

struct GlobalApprox {
  Eigen::VectorXd x_mean, x_var;            // D*T
  Eigen::VectorXd x_cav_precision, x_cav_ptm;  // cavities w.r.t. f2
  Eigen::VectorXd projection_mean, projection_var;  // N*T, probit only
  Eigen::VectorXd gamma_mean, gamma_var;    // G
  Eigen::VectorXd z_log_odds;               // D*T
  std::vector<double> x_log_partition;      // per column
  std::vector<double> f1_log_constant;      // per column
  double gamma_log_partition = 0.0;
};

struct EPResult {
  Eigen::MatrixXd x_mean, x_var;    // D x T
  Eigen::MatrixXd support_prob;     // D x T
  Eigen::VectorXd gamma_mean, gamma_var;  // G (= D*T without grouping)
  double log_evidence = 0.0;
  int iterations = 0;
  bool converged = false;
  double final_damping = 0.0;
  std::vector<double> evidence_trace;
};

class EPEngine {
 public:
  EPEngine(Problem problem, GammaPriorSpec prior, SlabParams slab, std::optional<GroupMap> groups, EPConfig config)
      : problem_(std::move(problem)),
        prior_(std::move(prior)),
        slab_(slab),
        config_(std::move(config)),
        updater_(prior_, config_.scheme) {
    problem_.validate();
    prior_.validate();
    slab_.validate();
    config_.validate();
    D_ = problem_.D();
    T_ = problem_.T();
    N_ = problem_.N();
    if (groups) {
      if (groups->D != D_ || groups->T != T_) throw InputError("EPEngine: group map does not match problem size");
      groups_ = std::move(*groups);
    } else {
      groups_ = build_group_map(D_, T_, 1, 1);
    }
    if (prior_.size() != groups_.G()) {
      throw InputError("EPEngine: prior has dimension " + std::to_string(prior_.size()) + " but the model needs " +
                       std::to_string(groups_.G()));
    }
    damping_ = config_.damping;
    if (problem_.likelihood == Likelihood::gaussian) {
      for (Index t = 0; t < T_; ++t) {
        gaussian_f1_.push_back(gaussian_f1_naturals(problem_.A, problem_.Y.col(t), problem_.noise_variance_at(t)));
      }
    }
    initialize();
  }

  const SiteStore& sites() const { return sites_; }
  const GlobalApprox& global() const { return global_; }
  const GroupMap& groups() const { return groups_; }
  double damping() const { return damping_; }
  Index size() const { return D_ * T_; }

  /// Resets every site to its uninformative initial value and refreshes the globals.
  void initialize() {
    const Index n = D_ * T_;
    const double p0 = 1.0 / config_.init_site_var;
    sites_.f2_precision = Eigen::VectorXd::Constant(n, p0);
    sites_.f2_ptm = Eigen::VectorXd::Zero(n);
    sites_.f2_log_odds = Eigen::VectorXd::Zero(n);
    sites_.f3_precision = Eigen::VectorXd::Constant(n, p0);
    sites_.f3_ptm = Eigen::VectorXd::Zero(n);
    sites_.f3_log_odds = Eigen::VectorXd::Zero(n);
    if (problem_.likelihood == Likelihood::probit) {
      sites_.f1_precision = Eigen::VectorXd::Zero(N_ * T_);
      sites_.f1_ptm = Eigen::VectorXd::Zero(N_ * T_);
    }
    refresh_x();
    refresh_gamma();
    refresh_z();
  }

  /// Probit sites against the current projection marginals.
  void sweep_f1(std::span<const Index> order = {}) {
    if (problem_.likelihood != Likelihood::probit) return;
    const Eigen::VectorXd prec = sites_.f1_precision, ptm = sites_.f1_ptm;
    for_each_index(N_ * T_, order, [&](Index k) {
      const Index t = k / N_, n = k % N_;
      const GaussianSiteNat old{prec(k), ptm(k)};
      const double gp = 1.0 / global_.projection_var(k);
      const auto cav = cavity_gaussian(gp, global_.projection_mean(k) * gp, old);
      if (!cav) return;
      const ProbitMoments m = probit_tilted_moments(cav->mean, cav->var, problem_.Y(n, t));
      const GaussianSiteNat upd =
          site_update_from_moments(m.mean, m.var, *cav, old, damping_, std::numeric_limits<double>::infinity());
      sites_.f1_precision(k) = upd.precision;
      sites_.f1_ptm(k) = upd.precision_times_mean;
    });
  }

  /// Spike-and-slab sites against the current x marginals and f3 Bernoulli sites.
  void sweep_f2(std::span<const Index> order = {}) {
    const Eigen::VectorXd prec = sites_.f2_precision, ptm = sites_.f2_ptm, lo = sites_.f2_log_odds;
    for_each_index(D_ * T_, order, [&](Index k) {
      const double cp = global_.x_cav_precision(k);
      if (!(cp > kMinCavityPrecision) || !std::isfinite(cp)) return;
      const Cavity cav{global_.x_cav_ptm(k) / cp, 1.0 / cp};
      const TiltedMoments m = moments_f2_log_odds(cav.mean, cav.var, sites_.f3_log_odds(k), slab_);
      const GaussianSiteNat upd =
          site_update_from_moments(m.mean, m.var, cav, {prec(k), ptm(k)}, damping_, config_.v_inf);
      sites_.f2_precision(k) = upd.precision;
      sites_.f2_ptm(k) = upd.precision_times_mean;
      sites_.f2_log_odds(k) = damp_bernoulli({lo(k)}, m.site_log_odds, damping_).log_odds;
    });
    refresh_z();
  }

  /// Probit-link sites against the current (group) gamma marginals and f2 Bernoulli sites.
  void sweep_f3(std::span<const Index> order = {}) {
    const Eigen::VectorXd prec = sites_.f3_precision, ptm = sites_.f3_ptm, lo = sites_.f3_log_odds;
    for_each_index(D_ * T_, order, [&](Index k) {
      const Index g = groups_.group_of[static_cast<std::size_t>(k)];
      const double gp = 1.0 / global_.gamma_var(g);
      const GaussianSiteNat old{prec(k), ptm(k)};
      const auto cav = cavity_gaussian(gp, global_.gamma_mean(g) * gp, old);
      if (!cav) return;
      const TiltedMoments m = moments_f3_log_odds(cav->mean, cav->var, sites_.f2_log_odds(k));
      const GaussianSiteNat upd = site_update_from_moments(m.mean, m.var, *cav, old, damping_, config_.sigma_inf);
      sites_.f3_precision(k) = upd.precision;
      sites_.f3_ptm(k) = upd.precision_times_mean;
      sites_.f3_log_odds(k) = damp_bernoulli({lo(k)}, m.site_log_odds, damping_).log_odds;
    });
    refresh_z();
  }

  void refresh_x() {
    const Index n = D_ * T_;
    global_.x_mean.resize(n);
    global_.x_var.resize(n);
    global_.x_cav_precision.resize(n);
    global_.x_cav_ptm.resize(n);
    global_.x_log_partition.assign(static_cast<std::size_t>(T_), 0.0);
    global_.f1_log_constant.assign(static_cast<std::size_t>(T_), 0.0);
    const bool probit = problem_.likelihood == Likelihood::probit;
    if (probit) {
      global_.projection_mean.resize(N_ * T_);
      global_.projection_var.resize(N_ * T_);
    }
    for (Index t = 0; t < T_; ++t) {
      F1Naturals f1 = probit ? F1Naturals{sites_.f1_precision.segment(t * N_, N_), sites_.f1_ptm.segment(t * N_, N_), 0.0}
                             : gaussian_f1_[static_cast<std::size_t>(t)];
      const XColumn col = update_global_x(f1, sites_.f2_precision.segment(t * D_, D_), sites_.f2_ptm.segment(t * D_, D_),
                                          problem_.A, probit);
      global_.x_mean.segment(t * D_, D_) = col.mean;
      global_.x_var.segment(t * D_, D_) = col.var;
      global_.x_cav_precision.segment(t * D_, D_) = col.cavity_precision;
      global_.x_cav_ptm.segment(t * D_, D_) = col.cavity_ptm;
      global_.x_log_partition[static_cast<std::size_t>(t)] = col.log_partition;
      global_.f1_log_constant[static_cast<std::size_t>(t)] = f1.log_constant;
      if (probit) {
        global_.projection_mean.segment(t * N_, N_) = col.projection_mean;
        global_.projection_var.segment(t * N_, N_) = col.projection_var;
      }
    }
  }

  void refresh_gamma() {
    const GammaPosterior post = update_gamma_grouped(updater_, groups_, sites_.f3_precision, sites_.f3_ptm);
    global_.gamma_mean = post.mean;
    global_.gamma_var = post.var;
    global_.gamma_log_partition = post.log_partition;
  }

  void refresh_z() { global_.z_log_odds = sites_.f2_log_odds + sites_.f3_log_odds; }

  /// One parallel EP iteration.
  void iterate() {
    sweep_f1();
    sweep_f2();
    refresh_x();
    const int repeats = updater_.is_common_precision() ? config_.cp_inner_repeats : 1;
    for (int r = 0; r < repeats; ++r) {
      sweep_f3();
      refresh_gamma();
    }
  }

  /// EP approximation of log p(Y) at the current sites.
  double log_marginal_likelihood() const {
    double total = 0.0;
    for (Index t = 0; t < T_; ++t) {
      total += global_.x_log_partition[static_cast<std::size_t>(t)] + global_.f1_log_constant[static_cast<std::size_t>(t)];
    }
    total += global_.gamma_log_partition;
    for (Index k = 0; k < D_ * T_; ++k) total += softplus(global_.z_log_odds(k));

    for (Index k = 0; k < D_ * T_; ++k) {
      // spike-and-slab sites
      const double cp = global_.x_cav_precision(k);
      if (cp > kMinCavityPrecision && std::isfinite(cp)) {
        const double ch = global_.x_cav_ptm(k);
        const TiltedMoments m = moments_f2_log_odds(ch / cp, 1.0 / cp, sites_.f3_log_odds(k), slab_);
        const double log_cx = gaussian_log_partition(cp + sites_.f2_precision(k), ch + sites_.f2_ptm(k)) -
                              gaussian_log_partition(cp, ch);
        const double log_cz = softplus(global_.z_log_odds(k)) - softplus(sites_.f3_log_odds(k));
        total += m.log_z - log_cx - log_cz;
      }
      // probit-link sites
      const Index g = groups_.group_of[static_cast<std::size_t>(k)];
      const double gp = 1.0 / global_.gamma_var(g);
      const double gh = global_.gamma_mean(g) * gp;
      const auto cav = cavity_gaussian(gp, gh, {sites_.f3_precision(k), sites_.f3_ptm(k)});
      if (cav) {
        const double cprec = gp - sites_.f3_precision(k);
        const double cptm = gh - sites_.f3_ptm(k);
        const TiltedMoments m = moments_f3_log_odds(cav->mean, cav->var, sites_.f2_log_odds(k));
        const double log_cg = gaussian_log_partition(gp, gh) - gaussian_log_partition(cprec, cptm);
        const double log_cz = softplus(global_.z_log_odds(k)) - softplus(sites_.f2_log_odds(k));
        total += m.log_z - log_cg - log_cz;
      }
    }
    if (problem_.likelihood == Likelihood::probit) {
      for (Index k = 0; k < N_ * T_; ++k) {
        const double gp = 1.0 / global_.projection_var(k);
        const double gh = global_.projection_mean(k) * gp;
        const auto cav = cavity_gaussian(gp, gh, {sites_.f1_precision(k), sites_.f1_ptm(k)});
        if (!cav) continue;
        const ProbitMoments m = probit_tilted_moments(cav->mean, cav->var, problem_.Y(k % N_, k / N_));
        total += m.log_z - (gaussian_log_partition(gp, gh) -
                            gaussian_log_partition(gp - sites_.f1_precision(k), gh - sites_.f1_ptm(k)));
      }
    }
    if (!std::isfinite(total)) throw NumericalError("log_marginal_likelihood: non-finite evidence");
    return total;
  }

  EPResult run() {
    EPResult res;
    double prev_evidence = std::numeric_limits<double>::quiet_NaN();
    for (int it = 1; it <= config_.max_iters; ++it) {
      const SiteStore before = sites_;
      iterate();
      const double ev = log_marginal_likelihood();
      res.evidence_trace.push_back(ev);
      res.iterations = it;
      const double change = max_relative_change(before, sites_);
      const bool evidence_flat = it > 1 && std::abs(ev - prev_evidence) < config_.evidence_tol;
      if (updater_.is_common_precision() && it > config_.cp_decay_after && ev < prev_evidence) {
        damping_ *= config_.cp_damping_decay;
      }
      prev_evidence = ev;
      if (change < config_.tol || evidence_flat) {
        res.converged = true;
        break;
      }
    }
    res.log_evidence = res.evidence_trace.empty() ? log_marginal_likelihood() : res.evidence_trace.back();
    res.x_mean = Eigen::Map<const Eigen::MatrixXd>(global_.x_mean.data(), D_, T_);
    res.x_var = Eigen::Map<const Eigen::MatrixXd>(global_.x_var.data(), D_, T_);
    Eigen::VectorXd probs = global_.z_log_odds.unaryExpr([](double l) { return logistic(l); });
    res.support_prob = Eigen::Map<const Eigen::MatrixXd>(probs.data(), D_, T_);
    res.gamma_mean = global_.gamma_mean;
    res.gamma_var = global_.gamma_var;
    res.final_damping = damping_;
    return res;
  }

  /// max |new - old| / max(1, |old|) over all site parameters.
  static double max_relative_change(const SiteStore& a, const SiteStore& b) {
    double worst = 0.0;
    auto scan = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
      for (Index k = 0; k < x.size(); ++k) {
        worst = std::max(worst, std::abs(y(k) - x(k)) / std::max(1.0, std::abs(x(k))));
      }
    };
    scan(a.f2_precision, b.f2_precision);
    scan(a.f2_ptm, b.f2_ptm);
    scan(a.f2_log_odds, b.f2_log_odds);
    scan(a.f3_precision, b.f3_precision);
    scan(a.f3_ptm, b.f3_ptm);
    scan(a.f3_log_odds, b.f3_log_odds);
    scan(a.f1_precision, b.f1_precision);
    scan(a.f1_ptm, b.f1_ptm);
    return worst;
  }

 private:
  template <class F>
  static void for_each_index(Index n, std::span<const Index> order, F&& f) {
    if (order.empty()) {
      for (Index k = 0; k < n; ++k) f(k);
      return;
    }
    if (static_cast<Index>(order.size()) != n) throw InputError("sweep order must list every site once");
    for (Index k : order) f(k);
  }

  Problem problem_;
  GammaPriorSpec prior_;
  SlabParams slab_;
  EPConfig config_;
  GroupMap groups_;
  GammaUpdater updater_;
  std::vector<F1Naturals> gaussian_f1_;
  SiteStore sites_;
  GlobalApprox global_;
  Index D_ = 0, T_ = 0, N_ = 0;
  double damping_ = 0.5;
};

inline EPResult run_ep(const Problem& problem, const GammaPriorSpec& prior, const SlabParams& slab,
                       const std::optional<GroupMap>& groups, const EPConfig& config) {
  EPEngine engine(problem, prior, slab, groups, config);
  return engine.run();
}

}  // namespace stss
