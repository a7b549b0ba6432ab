#pragma once

// Strategies for the global refresh of the Gamma posterior given the prior
// N(mu0, Sigma0) and diagonal Gaussian sites exp(-theta g^2 / 2 + eta g).
//
// Every strategy returns the marginal means, the marginal variances and the
// log of the integral of prior times sites, which enters the evidence.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>

#include "stss/error.hpp"
#include "stss/kernel_algebra.hpp"
#include "stss/normal.hpp"
#include "stss/prior_model.hpp"

namespace stss {

struct GammaPosterior {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;
  double log_partition = 0.0;
};

namespace detail {

inline void check_sites(const Eigen::VectorXd& theta, const Eigen::VectorXd& eta, Index n, const char* who) {
  if (theta.size() != n || eta.size() != n) {
    throw InputError(std::string(who) + ": site vectors have length " + std::to_string(theta.size()) +
                     ", expected " + std::to_string(n));
  }
  if (!(theta.array() > 0.0).all() || !theta.allFinite() || !eta.allFinite()) {
    throw NumericalError(std::string(who) + ": site precisions must be finite and positive");
  }
}

inline Eigen::LLT<Eigen::MatrixXd> robust_llt(Eigen::MatrixXd M, double jitter, const char* who) {
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  if (llt.info() == Eigen::Success) return llt;
  M.diagonal().array() += jitter * std::max(1.0, M.diagonal().cwiseAbs().maxCoeff());
  llt.compute(M);
  if (llt.info() != Eigen::Success) {
    throw NumericalError(std::string(who) + ": Cholesky failed after jitter retry");
  }
  return llt;
}

inline double log_det_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace detail

/// Exact update with a dense prior; O(n^3).
inline GammaPosterior update_gamma_full(const Eigen::MatrixXd& sigma0, double mean_level,
                                        const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
  const Index n = sigma0.rows();
  detail::check_sites(theta, eta, n, "update_gamma_full");
  const Eigen::VectorXd s = theta.cwiseSqrt();
  Eigen::MatrixXd B = s.asDiagonal() * sigma0 * s.asDiagonal();
  B.diagonal().array() += 1.0;
  const auto llt = detail::robust_llt(std::move(B), 1e-10, "update_gamma_full");

  const Eigen::VectorXd g = (eta - theta * mean_level).cwiseQuotient(s);
  const Eigen::VectorXd Lg = llt.matrixL().solve(g);
  const Eigen::VectorXd alpha = llt.matrixU().solve(Lg);

  GammaPosterior out;
  out.mean = Eigen::VectorXd::Constant(n, mean_level) + sigma0 * s.cwiseProduct(alpha);
  const Eigen::MatrixXd V = llt.matrixL().solve(s.asDiagonal() * sigma0);
  out.var = sigma0.diagonal() - V.colwise().squaredNorm().transpose();
  out.var = out.var.cwiseMax(1e-14 * sigma0.diagonal().cwiseAbs().maxCoeff()).cwiseMax(1e-300);
  out.log_partition = 0.5 * eta.cwiseAbs2().cwiseQuotient(theta).sum() - 0.5 * Lg.squaredNorm() -
                      0.5 * detail::log_det_from_llt(llt);
  return out;
}

inline GammaPosterior update_gamma_full(const DenseCovariance& prior, double mean_level,
                                        const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
  return update_gamma_full(prior.values(), mean_level, theta, eta);
}

/// Independent prior: elementwise Bayes rule.
inline GammaPosterior update_gamma_diagonal(const Eigen::VectorXd& prior_var, double mean_level,
                                            const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
  const Index n = prior_var.size();
  detail::check_sites(theta, eta, n, "update_gamma_diagonal");
  GammaPosterior out;
  out.mean.resize(n);
  out.var.resize(n);
  double lp = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double lam = prior_var(i), th = theta(i), et = eta(i);
    const double den = 1.0 + lam * th;
    out.var(i) = std::max(lam / den, 1e-300);
    out.mean(i) = (mean_level + lam * et) / den;
    lp += 0.5 * (et * et * lam + 2.0 * et * mean_level - th * mean_level * mean_level) / den - 0.5 * std::log(den);
  }
  out.log_partition = lp;
  return out;
}

/// Prior U S U^T + diag(Lambda), via the latent representation
/// gamma = mu0 + U S^{1/2} w + e, e ~ N(0, Lambda). Costs O(K^2 n).
inline GammaPosterior update_gamma_lowrank(const LowRankPlusDiagonal& prior, double mean_level,
                                           const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
  const Index n = prior.size();
  const Index K = prior.rank();
  detail::check_sites(theta, eta, n, "update_gamma_lowrank");
  const Eigen::ArrayXd lam = prior.diagonal.array();
  const Eigen::ArrayXd den = 1.0 + lam * theta.array();
  const Eigen::ArrayXd a = den.inverse();
  const Eigen::ArrayXd e_inv = theta.array() / den;
  const Eigen::ArrayXd g = (eta.array() - theta.array() * mean_level) / den;

  GammaPosterior out;
  const Eigen::ArrayXd cond_var = lam / den;
  const Eigen::ArrayXd cond_shift = lam * eta.array() / den;
  double lp = (0.5 * (eta.array().square() * lam + 2.0 * eta.array() * mean_level -
                      theta.array() * mean_level * mean_level) / den - 0.5 * den.log()).sum();
  if (K == 0) {
    out.mean = (a * mean_level + cond_shift).matrix();
    out.var = cond_var.max(1e-300).matrix();
    out.log_partition = lp;
    return out;
  }
  const Eigen::MatrixXd Phi = prior.basis * prior.eigenvalues.cwiseMax(0.0).cwiseSqrt().asDiagonal();
  Eigen::MatrixXd Cw = Phi.transpose() * e_inv.matrix().asDiagonal() * Phi;
  Cw.diagonal().array() += 1.0;
  const auto llt = detail::robust_llt(std::move(Cw), 1e-10, "update_gamma_lowrank");
  const Eigen::VectorXd b = Phi.transpose() * g.matrix();
  const Eigen::VectorXd Lb = llt.matrixL().solve(b);
  const Eigen::VectorXd w = llt.matrixU().solve(Lb);
  const Eigen::MatrixXd P = llt.matrixL().solve(Phi.transpose());  // K x n

  out.mean = (a * ((Phi * w).array() + mean_level) + cond_shift).matrix();
  out.var = (cond_var + a.square() * P.colwise().squaredNorm().transpose().array()).max(1e-300).matrix();
  lp += -0.5 * detail::log_det_from_llt(llt) + 0.5 * Lb.squaredNorm();
  out.log_partition = lp;
  return out;
}

/// Precomputed eigenbases for the common-precision update.
struct CommonPrecisionState {
  Eigen::MatrixXd Ut, Us;        // eigenvectors
  Eigen::MatrixXd Ut_sq, Us_sq;  // Hadamard squares
  Eigen::VectorXd lambda;        // flat St (x) Ss
  double theta_bar = 0.0;        // set on each call

  static CommonPrecisionState from(const KroneckerCovariance& cov) {
    const KroneckerEigen eig = kron_eigendecompose(cov);
    CommonPrecisionState st;
    st.Ut = eig.temporal.basis;
    st.Us = eig.spatial.basis;
    st.Ut_sq = st.Ut.cwiseAbs2();
    st.Us_sq = st.Us.cwiseAbs2();
    st.lambda = eig.product_eigenvalues();
    return st;
  }
};

/// Kronecker prior with every site precision replaced by their mean inside the
/// inverse; the information vector keeps the individual site values.
/// O(T D^2 + D T^2).
inline GammaPosterior update_gamma_common_precision(CommonPrecisionState& state, double mean_level,
                                                    const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
  const Index n = state.lambda.size();
  detail::check_sites(theta, eta, n, "update_gamma_common_precision");
  const double tb = theta.mean();
  state.theta_bar = tb;
  const Eigen::ArrayXd den = 1.0 + tb * state.lambda.array();
  const Eigen::ArrayXd m = state.lambda.array() / den;

  GammaPosterior out;
  out.var = kron_matvec(state.Ut_sq, state.Us_sq, m.matrix()).cwiseMax(1e-300);

  const Eigen::MatrixXd UtT = state.Ut.transpose();
  const Eigen::MatrixXd UsT = state.Us.transpose();
  const Eigen::VectorXd mu0 = Eigen::VectorXd::Constant(n, mean_level);
  const Eigen::VectorXd rot_mu0 = kron_matvec(UtT, UsT, mu0);
  const Eigen::VectorXd rot_eta = kron_matvec(UtT, UsT, eta);
  const Eigen::VectorXd inner = ((rot_mu0.array() + state.lambda.array() * rot_eta.array()) / den).matrix();
  out.mean = kron_matvec(state.Ut, state.Us, inner);

  // Log partition of the surrogate system with sites (theta_bar, eta_i).
  const Eigen::VectorXd r = kron_matvec(UtT, UsT, eta / tb - mu0);
  out.log_partition = 0.5 * eta.squaredNorm() / tb - 0.5 * den.log().sum() -
                      0.5 * (tb * r.array().square() / den).sum();
  return out;
}

/// Sums member (i, t) sites into group sites.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> aggregate_sites(const GroupMap& map,
                                                                   const Eigen::VectorXd& theta,
                                                                   const Eigen::VectorXd& eta) {
  Eigen::VectorXd tg = Eigen::VectorXd::Zero(map.G());
  Eigen::VectorXd eg = Eigen::VectorXd::Zero(map.G());
  for (std::size_t k = 0; k < map.group_of.size(); ++k) {
    tg(map.group_of[k]) += theta(static_cast<Index>(k));
    eg(map.group_of[k]) += eta(static_cast<Index>(k));
  }
  return {std::move(tg), std::move(eg)};
}

/// Strategy selected by a scheme string.
struct GammaScheme {
  enum class Kind { full, lowrank, common_precision };
  Kind kind = Kind::full;
  RankTarget rank = RankTarget::fraction(0.99);
  Index spatial_group = 1, temporal_group = 1;
  bool grouped = false;

  /// "full" | "lowrank:<K|frac>" | "cp" | "group:<gs>x<gt>[+inner]".
  static GammaScheme parse(std::string_view text) {
    GammaScheme out;
    std::string_view rest = text;
    auto fail = [&](const std::string& why) -> GammaScheme {
      throw InputError("invalid scheme '" + std::string(text) + "': " + why);
    };
    auto parse_index = [&](std::string_view s, Index& v) {
      long long tmp = 0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), tmp);
      if (ec != std::errc() || p != s.data() + s.size() || tmp < 1) fail("expected a positive integer");
      v = static_cast<Index>(tmp);
    };
    if (rest.rfind("group:", 0) == 0) {
      rest.remove_prefix(6);
      const auto plus = rest.find('+');
      const std::string_view sizes = rest.substr(0, plus);
      const auto x = sizes.find('x');
      if (x == std::string_view::npos) return fail("group sizes must look like <gs>x<gt>");
      parse_index(sizes.substr(0, x), out.spatial_group);
      parse_index(sizes.substr(x + 1), out.temporal_group);
      out.grouped = true;
      rest = plus == std::string_view::npos ? std::string_view("full") : rest.substr(plus + 1);
    }
    if (rest == "full") {
      out.kind = Kind::full;
    } else if (rest == "cp") {
      out.kind = Kind::common_precision;
    } else if (rest.rfind("lowrank:", 0) == 0) {
      out.kind = Kind::lowrank;
      const std::string arg(rest.substr(8));
      if (arg.find_first_of(".eE") != std::string::npos) {
        double f = 0.0;
        try {
          std::size_t used = 0;
          f = std::stod(arg, &used);
          if (used != arg.size()) fail("bad variance fraction");
        } catch (const std::logic_error&) {
          fail("bad variance fraction");
        }
        if (!(f > 0.0 && f <= 1.0)) fail("variance fraction must lie in (0, 1]");
        out.rank = RankTarget::fraction(f);
      } else {
        long long k = 0;
        const auto [p, ec] = std::from_chars(arg.data(), arg.data() + arg.size(), k);
        if (ec != std::errc() || p != arg.data() + arg.size() || k < 0) fail("bad rank");
        out.rank = RankTarget::rank(static_cast<Index>(k));
      }
    } else {
      return fail("unknown strategy");
    }
    return out;
  }

  std::string to_string() const {
    std::string inner;
    switch (kind) {
      case Kind::full: inner = "full"; break;
      case Kind::common_precision: inner = "cp"; break;
      case Kind::lowrank:
        if (const auto* k = std::get_if<Index>(&rank.value)) {
          inner = "lowrank:" + std::to_string(*k);
        } else {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.17g", std::get<double>(rank.value));
          inner = std::string("lowrank:") + buf;
          if (inner.find_first_of(".eE") == std::string::npos) inner += ".0";
        }
        break;
    }
    if (!grouped) return inner;
    return "group:" + std::to_string(spatial_group) + "x" + std::to_string(temporal_group) +
           (kind == Kind::full ? "" : "+" + inner);
  }
};

/// A configured Gamma refresh over the (possibly grouped) prior system.
class GammaUpdater {
 public:
  GammaUpdater(const GammaPriorSpec& prior, const GammaScheme& scheme) : mean_level_(prior.mean_level) {
    prior.validate();
    using K = GammaScheme::Kind;
    const auto& cov = prior.covariance;
    if (const auto* d = std::get_if<DiagonalCovariance>(&cov)) {
      impl_ = Diagonal{d->values};
      return;
    }
    if (const auto* lr = std::get_if<LowRankPlusDiagonal>(&cov)) {
      if (scheme.kind == K::common_precision) {
        throw InputError("the common-precision scheme needs a Kronecker or dense prior, not a low-rank one");
      }
      impl_ = *lr;
      return;
    }
    switch (scheme.kind) {
      case K::full:
        impl_ = Dense{materialize(cov)};
        break;
      case K::lowrank:
        if (const auto* k = std::get_if<KroneckerCovariance>(&cov)) {
          impl_ = low_rank_approximate(*k, scheme.rank);
        } else {
          impl_ = low_rank_approximate(std::get<DenseCovariance>(cov), scheme.rank);
        }
        break;
      case K::common_precision:
        if (const auto* k = std::get_if<KroneckerCovariance>(&cov)) {
          impl_ = CommonPrecisionState::from(*k);
        } else {
          const auto& dense = std::get<DenseCovariance>(cov);
          impl_ = CommonPrecisionState::from(
              KroneckerCovariance{DenseCovariance(Eigen::MatrixXd::Ones(1, 1)), dense});
        }
        break;
    }
  }

  GammaPosterior operator()(const Eigen::VectorXd& theta, const Eigen::VectorXd& eta) {
    return std::visit(
        [&](auto& impl) -> GammaPosterior {
          using I = std::decay_t<decltype(impl)>;
          if constexpr (std::is_same_v<I, Dense>) {
            return update_gamma_full(impl.sigma0, mean_level_, theta, eta);
          } else if constexpr (std::is_same_v<I, Diagonal>) {
            return update_gamma_diagonal(impl.values, mean_level_, theta, eta);
          } else if constexpr (std::is_same_v<I, LowRankPlusDiagonal>) {
            return update_gamma_lowrank(impl, mean_level_, theta, eta);
          } else {
            return update_gamma_common_precision(impl, mean_level_, theta, eta);
          }
        },
        impl_);
  }

  bool is_common_precision() const { return std::holds_alternative<CommonPrecisionState>(impl_); }
  const LowRankPlusDiagonal* low_rank() const { return std::get_if<LowRankPlusDiagonal>(&impl_); }

 private:
  struct Dense {
    Eigen::MatrixXd sigma0;
  };
  struct Diagonal {
    Eigen::VectorXd values;
  };
  double mean_level_;
  std::variant<Dense, Diagonal, LowRankPlusDiagonal, CommonPrecisionState> impl_;
};

/// Grouped refresh: member sites are summed per group and the inner strategy
/// runs on the G-dimensional system.
inline GammaPosterior update_gamma_grouped(GammaUpdater& inner, const GroupMap& map, const Eigen::VectorXd& theta,
                                           const Eigen::VectorXd& eta) {
  if (theta.size() != static_cast<Index>(map.group_of.size())) {
    throw InputError("update_gamma_grouped: site vectors do not match the group map");
  }
  const auto [tg, eg] = aggregate_sites(map, theta, eta);
  return inner(tg, eg);
}

}  // namespace stss
