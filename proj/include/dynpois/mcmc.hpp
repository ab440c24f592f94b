// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/conjugate_filter.hpp"
#include "dynpois/model.hpp"
#include "dynpois/prob_kernel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dynpois {

struct MhConfig {
  int iterations = 10000;
  int burn_in = 2000;
  int thinning = 1;
  double proposal_scale = 1.0;
  std::uint64_t seed = 0;

  static MhConfig dm5_defaults() { return {80000, 30000, 10, 1.0, 0}; }

  int retained() const { return (iterations - burn_in) / thinning; }

  void validate() const {
    if (iterations < 1) throw ValidationError("MhConfig: iterations must be positive");
    if (burn_in < 0 || burn_in >= iterations) throw ValidationError("MhConfig: burn-in must be in [0, iterations)");
    if (thinning < 1) throw ValidationError("MhConfig: thinning must be at least 1");
    if (!(proposal_scale > 0.0)) throw ValidationError("MhConfig: proposal scale must be positive");
    if (retained() < 1) throw ValidationError("MhConfig: no draws would be retained");
  }
};

using LogDensity = std::function<double(const Eigen::VectorXd&)>;

/// Output of any fitter. Unused blocks stay empty.
struct PosteriorDraws {
  ModelVariant variant = ModelVariant::DM1;
  std::vector<std::string> beta_names;
  Eigen::MatrixXd beta;                   // S x p (static coefficients)
  std::vector<Eigen::MatrixXd> beta_paths;  // DM5: S entries of T x p
  Eigen::VectorXd gamma;                  // S (empty for BPM)
  Eigen::MatrixXd tau;                    // S x p (DM5 only)
  std::optional<Eigen::MatrixXd> theta_paths;  // S x T
  double acceptance_rate = 1.0;
  std::map<std::string, std::string> metadata;

  Eigen::Index S() const {
    if (gamma.size() > 0) return gamma.size();
    return beta.rows();
  }
  bool dynamic_coefficients() const { return !beta_paths.empty(); }
  bool has_gamma() const { return gamma.size() > 0; }
};

// ---------------------------------------------------------------------------
// Targets

inline double log_prior_beta(const Eigen::VectorXd& beta, const PriorConfig& priors) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < beta.size(); ++i) lp += log_pdf_normal(beta(i), 0.0, priors.beta_prior_sd);
  return lp;
}

/// log p(N | beta, gamma) + log p(beta) + log p(gamma); -inf off support.
inline double log_target_static(const Eigen::VectorXd& beta, double gamma, const CountSeries& series,
                                const DesignMatrix& design, const PriorConfig& priors) {
  if (!(gamma > 0.0 && gamma < 1.0)) return kNegInf;
  const double lpg = priors.gamma_prior.log_density(gamma);
  if (!std::isfinite(lpg)) return kNegInf;
  const Eigen::VectorXd m = design.multipliers(beta);
  for (Eigen::Index t = 0; t < m.size(); ++t) {
    if (!(m(t) > 0.0) || !std::isfinite(m(t))) return kNegInf;
  }
  const double ll = log_likelihood(series.counts,
                                   std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                                   gamma, priors.initial());
  return ll + log_prior_beta(beta, priors) + lpg;
}

/// Target on x = (beta, logit gamma), including log |d gamma / d x|.
inline double log_target_unconstrained(const Eigen::VectorXd& x, const CountSeries& series,
                                       const DesignMatrix& design, const PriorConfig& priors) {
  const Eigen::Index p = x.size() - 1;
  const double gamma = inv_logit(x(p));
  if (!(gamma > 0.0 && gamma < 1.0)) return kNegInf;
  const double jac = std::log(gamma) + std::log1p(-gamma);
  return log_target_static(x.head(p), gamma, series, design, priors) + jac;
}

/// Poisson regression log posterior: sum_t N_t eta_t - exp(eta_t) - log N_t!.
inline double log_target_bpm(const Eigen::VectorXd& beta, const CountSeries& series,
                             const DesignMatrix& design, const PriorConfig& priors) {
  const Eigen::VectorXd eta = design.rows * beta;
  double ll = 0.0;
  for (Eigen::Index t = 0; t < eta.size(); ++t) {
    const double rate = std::exp(eta(t));
    if (!std::isfinite(rate)) return kNegInf;
    ll += log_pmf_poisson(series.counts[static_cast<std::size_t>(t)], rate);
  }
  return ll + log_prior_beta(beta, priors);
}

// ---------------------------------------------------------------------------
// Mode and curvature

struct ModeOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;
  double fd_step = 1e-5;
  double hessian_step = 1e-4;
  double max_step = 2.0;  // largest move per coordinate in one line search
};

struct ModeResult {
  Eigen::VectorXd mode;
  Eigen::MatrixXd hessian;     // of the log target at the mode
  Eigen::MatrixXd covariance;  // (-H)^{-1}, symmetrized
  double log_target = kNegInf;
  double diagonal_inflation = 0.0;  // added to -H before inversion, 0 if none
  int iterations = 0;
};

namespace detail {

inline Eigen::VectorXd fd_gradient(const LogDensity& f, const Eigen::VectorXd& x, double step) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = step * std::max(1.0, std::abs(x(i)));
    y(i) = x(i) + h;
    const double fp = f(y);
    y(i) = x(i) - h;
    const double fm = f(y);
    y(i) = x(i);
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Eigen::MatrixXd fd_hessian(const LogDensity& f, const Eigen::VectorXd& x, double step) {
  const Eigen::Index d = x.size();
  Eigen::MatrixXd H(d, d);
  Eigen::VectorXd h(d);
  for (Eigen::Index i = 0; i < d; ++i) h(i) = step * std::max(1.0, std::abs(x(i)));
  const double f0 = f(x);
  Eigen::VectorXd y = x;
  for (Eigen::Index i = 0; i < d; ++i) {
    y(i) = x(i) + h(i);
    const double fp = f(y);
    y(i) = x(i) - h(i);
    const double fm = f(y);
    y(i) = x(i);
    H(i, i) = (fp - 2.0 * f0 + fm) / (h(i) * h(i));
    for (Eigen::Index j = 0; j < i; ++j) {
      y(i) = x(i) + h(i);
      y(j) = x(j) + h(j);
      const double fpp = f(y);
      y(j) = x(j) - h(j);
      const double fpm = f(y);
      y(i) = x(i) - h(i);
      const double fmm = f(y);
      y(j) = x(j) + h(j);
      const double fmp = f(y);
      y(i) = x(i);
      y(j) = x(j);
      H(i, j) = H(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h(i) * h(j));
    }
  }
  return H;
}

}  // namespace detail

/// Maximizes `target` by BFGS with finite-difference gradients, then returns
/// the mode and (-H)^{-1} from a finite-difference Hessian. The initial
/// inverse-Hessian guess is the inverse FD curvature diagonal at `start`,
/// which keeps badly scaled coordinates (raw polynomial trends) tractable.
inline ModeResult find_mode_and_hessian(const LogDensity& target, const Eigen::VectorXd& start,
                                        const ModeOptions& opt = {}) {
  const Eigen::Index d = start.size();
  ModeResult res;
  if (d == 0) {
    res.mode = start;
    res.hessian = res.covariance = Eigen::MatrixXd(0, 0);
    res.log_target = target(start);
    return res;
  }
  auto f = [&](const Eigen::VectorXd& x) {
    const double v = target(x);
    return std::isnan(v) ? std::numeric_limits<double>::infinity() : -v;
  };
  LogDensity neg = f;

  Eigen::VectorXd x = start;
  double fx = f(x);
  if (!std::isfinite(fx)) throw NumericError("find_mode_and_hessian: target is not finite at the start point");

  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(d, d);
  {
    const Eigen::MatrixXd H0 = detail::fd_hessian(neg, x, opt.hessian_step);
    for (Eigen::Index i = 0; i < d; ++i) {
      const double c = H0(i, i);
      if (std::isfinite(c) && c > 1e-12) Hinv(i, i) = 1.0 / c;
    }
  }
  Eigen::VectorXd g = detail::fd_gradient(neg, x, opt.fd_step);
  std::vector<double> trace;
  int it = 0;
  int stalls = 0;
  for (; it < opt.max_iterations; ++it) {
    trace.push_back(fx);
    const double gnorm = g.cwiseAbs().maxCoeff();
    if (gnorm < opt.gradient_tolerance * std::max(1.0, std::abs(fx))) break;

    Eigen::VectorXd dir = -Hinv * g;
    if (dir.dot(g) >= 0.0) {  // not a descent direction; restart
      Hinv = Eigen::MatrixXd::Identity(d, d);
      dir = -g;
    }
    const double longest = dir.cwiseAbs().maxCoeff();
    double step = longest > opt.max_step ? opt.max_step / longest : 1.0;
    Eigen::VectorXd xn;
    double fn = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      xn = x + step * dir;
      fn = f(xn);
      if (std::isfinite(fn) && fn <= fx + 1e-4 * step * g.dot(dir)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (++stalls >= 2) break;  // no further decrease possible at FD precision
      Hinv = Eigen::MatrixXd::Identity(d, d);
      continue;
    }
    const Eigen::VectorXd gn = detail::fd_gradient(neg, xn, opt.fd_step);
    const Eigen::VectorXd s = xn - x;
    const Eigen::VectorXd yv = gn - g;
    const double sy = s.dot(yv);
    const double change = fx - fn;
    x = xn;
    g = gn;
    fx = fn;
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
      Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    if (change < 1e-13 * std::max(1.0, std::abs(fx)) && s.norm() < 1e-10 * std::max(1.0, x.norm())) {
      if (++stalls >= 2) break;
    } else {
      stalls = 0;
    }
  }
  if (it >= opt.max_iterations) {
    std::ostringstream os;
    os << "find_mode_and_hessian: no convergence after " << opt.max_iterations
       << " iterations; last objective values:";
    for (std::size_t k = trace.size() > 5 ? trace.size() - 5 : 0; k < trace.size(); ++k) os << ' ' << -trace[k];
    throw NumericError(os.str());
  }

  res.mode = x;
  res.log_target = -fx;
  res.iterations = it;
  res.hessian = detail::fd_hessian(target, x, opt.hessian_step);
  Eigen::MatrixXd neg_h = -0.5 * (res.hessian + res.hessian.transpose());
  double delta = 0.0;
  const double base = std::max(1e-8, 1e-8 * neg_h.diagonal().cwiseAbs().maxCoeff());
  for (int k = 0; k < 200; ++k) {
    Eigen::LLT<Eigen::MatrixXd> llt(neg_h + delta * Eigen::MatrixXd::Identity(d, d));
    if (llt.info() == Eigen::Success && neg_h.allFinite()) {
      Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(d, d));
      res.covariance = 0.5 * (cov + cov.transpose());
      res.diagonal_inflation = delta;
      return res;
    }
    delta = delta == 0.0 ? base : delta * 4.0;
  }
  std::ostringstream os;
  os << "find_mode_and_hessian: negative Hessian could not be made positive definite at mode ["
     << x.transpose() << "], log target " << -fx;
  throw NumericError(os.str());
}

// ---------------------------------------------------------------------------
// Random-walk Metropolis-Hastings

struct MhResult {
  Eigen::MatrixXd draws;  // S x d
  Eigen::VectorXd log_target;
  double acceptance_rate = 0.0;
  double proposal_scale = 1.0;
};

/// min(1, exp(proposed - current)).
inline double mh_acceptance_probability(double current_log_target, double proposed_log_target) {
  if (!std::isfinite(proposed_log_target)) return 0.0;
  const double d = proposed_log_target - current_log_target;
  return d >= 0.0 ? 1.0 : std::exp(d);
}

/// Symmetric N(x, scale * cov) proposals; keeps every `thinning`-th state after burn-in.
inline MhResult rw_metropolis(const LogDensity& target, const Eigen::VectorXd& init,
                              const Eigen::MatrixXd& proposal_covariance, const MhConfig& config,
                              RngStream& rng) {
  config.validate();
  const Eigen::Index d = init.size();
  double lp = target(init);
  if (!std::isfinite(lp)) throw NumericError("rw_metropolis: target is not finite at the initial point");

  const MvNormal proposal(Eigen::VectorXd::Zero(d), config.proposal_scale * proposal_covariance);
  MhResult out;
  out.proposal_scale = config.proposal_scale;
  out.draws.resize(config.retained(), d);
  out.log_target.resize(config.retained());

  Eigen::VectorXd x = init;
  long accepted = 0;
  Eigen::Index kept = 0;
  for (int it = 1; it <= config.iterations; ++it) {
    const Eigen::VectorXd y = proposal.around(x, rng);
    const double lpy = target(y);
    const double u = rng.uniform();
    if (std::isfinite(lpy) && std::log(u) < lpy - lp) {
      x = y;
      lp = lpy;
      ++accepted;
    }
    if (it > config.burn_in && (it - config.burn_in) % config.thinning == 0 && kept < out.draws.rows()) {
      out.draws.row(kept) = x.transpose();
      out.log_target(kept) = lp;
      ++kept;
    }
  }
  out.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(config.iterations);
  if (accepted == 0 && d > 0) {
    std::ostringstream os;
    os << "rw_metropolis: no proposal accepted in " << config.iterations
       << " iterations; reduce proposal_scale (currently " << config.proposal_scale << ")";
    throw NumericError(os.str());
  }
  return out;
}

/// Runs at the configured scale, then once more at 0.5x (acceptance < 0.1) or
/// 2x (acceptance > 0.6). The retry uses its own child stream.
inline MhResult rw_metropolis_with_retry(const LogDensity& target, const Eigen::VectorXd& init,
                                         const Eigen::MatrixXd& proposal_covariance,
                                         const MhConfig& config, RngStream& rng) {
  RngStream first = rng.split(1);
  MhResult res;
  bool failed = false;
  try {
    res = rw_metropolis(target, init, proposal_covariance, config, first);
  } catch (const NumericError&) {
    failed = true;
  }
  if (!failed && res.acceptance_rate >= 0.1 && res.acceptance_rate <= 0.6) return res;
  MhConfig retry = config;
  retry.proposal_scale *= (failed || res.acceptance_rate < 0.1) ? 0.5 : 2.0;
  RngStream second = rng.split(2);
  return rw_metropolis(target, init, proposal_covariance, retry, second);
}

// ---------------------------------------------------------------------------
// Fitters

struct FitOptions {
  bool smooth = true;                  // sample theta paths per retained draw
  std::optional<double> fixed_gamma;   // condition on a known discount factor
};

namespace detail {

inline void draw_theta_paths(PosteriorDraws& d, const CountSeries& series, const DesignMatrix& design,
                             const PriorConfig& priors, RngStream& rng) {
  const Eigen::Index S = d.S();
  const auto T = static_cast<Eigen::Index>(series.size());
  Eigen::MatrixXd paths(S, T);
  Eigen::VectorXd zero;
  if (design.p() == 0) zero = Eigen::VectorXd(0);
  for (Eigen::Index j = 0; j < S; ++j) {
    FilterTrajectory tr;
    if (d.dynamic_coefficients()) {
      tr = filter_pass_path(series, design, d.beta_paths[static_cast<std::size_t>(j)], d.gamma(j), priors);
    } else {
      const Eigen::VectorXd b = design.p() == 0 ? zero : Eigen::VectorXd(d.beta.row(j).transpose());
      tr = filter_pass(series, design, b, d.gamma(j), priors);
    }
    const std::vector<double> path = ffbs_sample(tr, rng);
    for (Eigen::Index t = 0; t < T; ++t) paths(j, t) = path[static_cast<std::size_t>(t)];
  }
  d.theta_paths = std::move(paths);
}

inline void check_fit_inputs(const CountSeries& series, const DesignMatrix& design,
                             const PriorConfig& priors, const MhConfig& config) {
  series.validate();
  priors.validate();
  config.validate();
  if (design.T() != static_cast<Eigen::Index>(series.size())) {
    throw ValidationError("fit: design rows do not match the series length");
  }
}

}  // namespace detail

/// DM1-DM4: joint random-walk MH on (beta, logit gamma) with a Hessian-based
/// proposal, then FFBS per retained draw. DM1 under a discrete gamma grid is
/// summed out exactly instead.
inline PosteriorDraws fit_dm_static(const CountSeries& series, const DesignMatrix& design,
                                    const ModelSpec& spec, const PriorConfig& priors,
                                    const MhConfig& config, RngStream& rng, const FitOptions& options = {}) {
  detail::check_fit_inputs(series, design, priors, config);
  if (spec.variant == ModelVariant::DM5 || spec.variant == ModelVariant::BPM ||
      spec.variant == ModelVariant::EWMA) {
    throw ValidationError("fit_dm_static: variant " + to_string(spec.variant) + " is not a static-coefficient dynamic model");
  }
  const Eigen::Index p = design.p();
  PosteriorDraws out;
  out.variant = spec.variant;
  out.beta_names = design.columns;
  const Eigen::Index S = config.retained();
  RngStream mh_rng = rng.split(10);
  RngStream smooth_rng = rng.split(11);

  const bool grid = priors.gamma_prior.kind == GammaPrior::Kind::DiscreteGrid;
  if (grid && p > 0 && !options.fixed_gamma) {
    throw ValidationError("fit_dm_static: a discrete gamma grid prior is only supported without covariates");
  }

  if (options.fixed_gamma) {
    const double g = *options.fixed_gamma;
    require_discount(g, "fit_dm_static");
    out.gamma = Eigen::VectorXd::Constant(S, g);
    out.metadata["sampler"] = "fixed_gamma";
    if (p == 0) {
      out.beta = Eigen::MatrixXd(S, 0);
      out.acceptance_rate = 1.0;
    } else {
      auto target = [&](const Eigen::VectorXd& b) {
        const Eigen::VectorXd m = design.multipliers(b);
        if (!m.allFinite()) return kNegInf;
        return log_likelihood(series.counts, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                              g, priors.initial()) +
               log_prior_beta(b, priors);
      };
      const ModeResult mode = find_mode_and_hessian(target, Eigen::VectorXd::Zero(p));
      const MhResult mh = rw_metropolis_with_retry(target, mode.mode, mode.covariance, config, mh_rng);
      out.beta = mh.draws;
      out.acceptance_rate = mh.acceptance_rate;
    }
  } else if (grid) {
    const GammaGridPosterior post =
        gamma_grid_posterior(series, design, Eigen::VectorXd(0), priors, priors.gamma_prior.grid_step);
    out.gamma.resize(S);
    for (Eigen::Index j = 0; j < S; ++j) out.gamma(j) = post.sample(mh_rng);
    out.beta = Eigen::MatrixXd(S, 0);
    out.acceptance_rate = 1.0;
    out.metadata["sampler"] = "gamma_grid";
    std::ostringstream os;
    os.precision(17);
    os << post.mean();
    out.metadata["gamma_grid_posterior_mean"] = os.str();
  } else {
    auto target = [&](const Eigen::VectorXd& x) {
      return log_target_unconstrained(x, series, design, priors);
    };
    Eigen::VectorXd start = Eigen::VectorXd::Zero(p + 1);
    const ModeResult mode = find_mode_and_hessian(target, start);
    const MhResult mh = rw_metropolis_with_retry(target, mode.mode, mode.covariance, config, mh_rng);
    out.beta = mh.draws.leftCols(p);
    out.gamma.resize(mh.draws.rows());
    for (Eigen::Index j = 0; j < mh.draws.rows(); ++j) out.gamma(j) = inv_logit(mh.draws(j, p));
    out.acceptance_rate = mh.acceptance_rate;
    out.metadata["sampler"] = "rw_metropolis";
    std::ostringstream os;
    os.precision(17);
    os << mh.proposal_scale;
    out.metadata["proposal_scale"] = os.str();
    if (mode.diagonal_inflation > 0.0) out.metadata["hessian_diagonal_inflated"] = "true";
  }
  if (options.smooth) detail::draw_theta_paths(out, series, design, priors, smooth_rng);
  return out;
}

/// Posterior Gamma(a_tau + (T-1)/2, b_tau + sum_t (beta_t - beta_{t-1})^2 / 2)
/// for the precision of one random-walk coefficient path.
inline GammaParams tau_full_conditional(std::span<const double> path, double a_tau, double b_tau) {
  if (path.empty()) throw ValidationError("tau_full_conditional: empty path");
  double ss = 0.0;
  for (std::size_t t = 1; t < path.size(); ++t) {
    const double d = path[t] - path[t - 1];
    ss += d * d;
  }
  return {a_tau + 0.5 * static_cast<double>(path.size() - 1), b_tau + 0.5 * ss};
}

struct Dm5Options {
  bool smooth = true;
  double site_scale = 1.0;  // multiplier on the per-site proposal sd
};

/// DM5: Metropolis-within-Gibbs over (beta_1..beta_T, tau, gamma).
///
/// beta_t is updated one month at a time. Its full conditional combines the
/// random-walk terms to beta_{t-1} and beta_{t+1} with the theta-free
/// likelihood; exp(beta_t' z_t) enters b_t and so every predictive term from
/// month t onward, all of which are recomputed. tau_i is drawn from its
/// conjugate gamma conditional and gamma by a random-walk step on the logit
/// scale.
inline PosteriorDraws fit_dm5(const CountSeries& series, const DesignMatrix& design,
                              const PriorConfig& priors, const MhConfig& config, RngStream& rng,
                              const Dm5Options& options = {}) {
  detail::check_fit_inputs(series, design, priors, config);
  const Eigen::Index p = design.p();
  const auto T = static_cast<Eigen::Index>(series.size());
  if (p < 1) throw ValidationError("fit_dm5: needs at least one covariate");
  if (priors.gamma_prior.kind == GammaPrior::Kind::DiscreteGrid) {
    throw ValidationError("fit_dm5: discrete gamma grid prior is not supported");
  }
  RngStream init_rng = rng.split(20);
  RngStream mh_rng = rng.split(21);
  RngStream smooth_rng = rng.split(22);

  // Start from the static-coefficient mode.
  auto static_target = [&](const Eigen::VectorXd& x) {
    return log_target_unconstrained(x, series, design, priors);
  };
  const ModeResult mode = find_mode_and_hessian(static_target, Eigen::VectorXd::Zero(p + 1));
  const double gamma_sd = std::sqrt(std::max(mode.covariance(p, p), 1e-6));

  Eigen::MatrixXd B = mode.mode.head(p).transpose().replicate(T, 1);  // T x p
  double gamma = inv_logit(mode.mode(p));
  Eigen::VectorXd tau = Eigen::VectorXd::Constant(p, 100.0);

  const std::vector<std::int64_t>& N = series.counts;
  std::vector<double> a(static_cast<std::size_t>(T) + 1), cst(static_cast<std::size_t>(T));
  std::vector<double> b(static_cast<std::size_t>(T) + 1), m(static_cast<std::size_t>(T));
  std::vector<double> terms(static_cast<std::size_t>(T));

  // With gamma fixed the shapes a_t, and so the lgamma parts of every
  // predictive term, do not depend on beta.
  auto refresh_shapes = [&](double g) {
    a[0] = priors.a0;
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto i = static_cast<std::size_t>(t);
      const double r = g * a[i];
      const double n = static_cast<double>(N[i]);
      cst[i] = N[i] > 0 ? std::lgamma(r + n) - std::lgamma(n + 1.0) - std::lgamma(r) : 0.0;
      a[i + 1] = r + n;
    }
  };
  auto step_term = [&](std::size_t i, double g, double b_prev, double mult, double& b_new) {
    const double rb = g * b_prev;
    b_new = rb + mult;
    const double r = g * a[i];
    double v = r * (std::log(rb) - std::log(b_new));
    if (N[i] > 0) v += cst[i] + static_cast<double>(N[i]) * (std::log(mult) - std::log(b_new));
    return v;
  };
  auto full_pass = [&](double g) {
    b[0] = priors.b0;
    double total = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto i = static_cast<std::size_t>(t);
      terms[i] = step_term(i, g, b[i], m[i], b[i + 1]);
      total += terms[i];
    }
    return total;
  };
  auto row_multiplier = [&](Eigen::Index t, const Eigen::VectorXd& beta_t) {
    return std::exp(design.rows.row(t).dot(beta_t));
  };

  for (Eigen::Index t = 0; t < T; ++t) m[static_cast<std::size_t>(t)] = row_multiplier(t, B.row(t).transpose());
  refresh_shapes(gamma);
  double loglik = full_pass(gamma);

  auto rw_prior_local = [&](Eigen::Index t, const Eigen::VectorXd& beta_t) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < p; ++i) {
      const double sd = 1.0 / std::sqrt(tau(i));
      if (t == 0) {
        lp += log_pdf_normal(beta_t(i), 0.0, priors.beta_prior_sd);
      } else {
        lp += log_pdf_normal(beta_t(i), B(t - 1, i), sd);
      }
      if (t + 1 < T) lp += log_pdf_normal(B(t + 1, i), beta_t(i), sd);
    }
    return lp;
  };

  const int S = config.retained();
  PosteriorDraws out;
  out.variant = ModelVariant::DM5;
  out.beta_names = design.columns;
  out.beta_paths.reserve(static_cast<std::size_t>(S));
  out.gamma.resize(S);
  out.tau.resize(S, p);
  out.beta.resize(S, p);

  std::vector<double> b_trial(static_cast<std::size_t>(T) + 1), terms_trial(static_cast<std::size_t>(T));
  long site_accepts = 0, site_props = 0, gamma_accepts = 0;
  const double site_base = options.site_scale * 2.38 / std::sqrt(static_cast<double>(p));
  int kept = 0;

  for (int it = 1; it <= config.iterations; ++it) {
    // (i) beta_t, one month at a time
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto i0 = static_cast<std::size_t>(t);
      const Eigen::VectorXd cur = B.row(t).transpose();
      Eigen::VectorXd prop = cur;
      for (Eigen::Index i = 0; i < p; ++i) {
        const double z = design.rows(t, i);
        const double info = 2.0 * tau(i) + (static_cast<double>(N[i0]) + 1.0) * z * z +
                            (t == 0 ? 1.0 / (priors.beta_prior_sd * priors.beta_prior_sd) : 0.0);
        prop(i) += site_base / std::sqrt(info) * mh_rng.normal();
      }
      const double m_new = row_multiplier(t, prop);
      const double u = mh_rng.uniform();
      ++site_props;
      if (!(m_new > 0.0) || !std::isfinite(m_new)) continue;
      double delta = 0.0;
      double bp = b[i0];
      double mm = m_new;
      for (Eigen::Index s = t; s < T; ++s) {
        const auto k = static_cast<std::size_t>(s);
        if (s > t) mm = m[k];
        terms_trial[k] = step_term(k, gamma, bp, mm, b_trial[k + 1]);
        delta += terms_trial[k] - terms[k];
        bp = b_trial[k + 1];
      }
      const double log_ratio = delta + rw_prior_local(t, prop) - rw_prior_local(t, cur);
      if (std::log(u) < log_ratio) {
        B.row(t) = prop.transpose();
        m[i0] = m_new;
        for (Eigen::Index s = t; s < T; ++s) {
          const auto k = static_cast<std::size_t>(s);
          terms[k] = terms_trial[k];
          b[k + 1] = b_trial[k + 1];
        }
        loglik += delta;
        ++site_accepts;
      }
    }
    // (ii) tau_i | beta path
    for (Eigen::Index i = 0; i < p; ++i) {
      std::vector<double> col(static_cast<std::size_t>(T));
      for (Eigen::Index t = 0; t < T; ++t) col[static_cast<std::size_t>(t)] = B(t, i);
      tau(i) = sample_gamma(tau_full_conditional(col, priors.tau_a, priors.tau_b), mh_rng);
      tau(i) = std::clamp(tau(i), 1e-10, 1e12);
    }
    // (iii) gamma | beta path, logit random walk
    {
      const double x = logit(gamma);
      const double xp = x + gamma_sd * mh_rng.normal();
      const double gp = inv_logit(xp);
      const double u = mh_rng.uniform();
      if (gp > 0.0 && gp < 1.0) {
        const double lp_cur = loglik + priors.gamma_prior.log_density(gamma) + std::log(gamma) + std::log1p(-gamma);
        const std::vector<double> a_keep = a, cst_keep = cst, b_keep = b, terms_keep = terms;
        refresh_shapes(gp);
        const double ll_new = full_pass(gp);
        const double lp_new = ll_new + priors.gamma_prior.log_density(gp) + std::log(gp) + std::log1p(-gp);
        if (std::isfinite(lp_new) && std::log(u) < lp_new - lp_cur) {
          gamma = gp;
          loglik = ll_new;
          ++gamma_accepts;
        } else {
          a = a_keep;
          cst = cst_keep;
          b = b_keep;
          terms = terms_keep;
        }
      }
    }
    if (it > config.burn_in && (it - config.burn_in) % config.thinning == 0 && kept < S) {
      out.beta_paths.push_back(B);
      out.beta.row(kept) = B.colwise().mean();
      out.gamma(kept) = gamma;
      out.tau.row(kept) = tau.transpose();
      ++kept;
    }
  }
  (void)init_rng;
  out.acceptance_rate = site_props > 0 ? static_cast<double>(site_accepts) / static_cast<double>(site_props) : 0.0;
  {
    std::ostringstream os;
    os.precision(17);
    os << static_cast<double>(gamma_accepts) / static_cast<double>(config.iterations);
    out.metadata["gamma_acceptance_rate"] = os.str();
  }
  out.metadata["sampler"] = "dm5_gibbs";
  if (site_accepts == 0) throw NumericError("fit_dm5: no coefficient proposal accepted; reduce site_scale");
  if (options.smooth) detail::draw_theta_paths(out, series, design, priors, smooth_rng);
  return out;
}

/// Bayesian Poisson regression exp(beta' z_t); the design carries its intercept.
inline PosteriorDraws fit_bpm(const CountSeries& series, const DesignMatrix& design,
                              const PriorConfig& priors, const MhConfig& config, RngStream& rng,
                              bool smooth = true) {
  detail::check_fit_inputs(series, design, priors, config);
  if (!design.has_intercept) throw ValidationError("fit_bpm: design must include an intercept column");
  const Eigen::Index p = design.p();
  auto target = [&](const Eigen::VectorXd& b) { return log_target_bpm(b, series, design, priors); };
  Eigen::VectorXd start = Eigen::VectorXd::Zero(p);
  double mean = 0.0;
  for (auto n : series.counts) mean += static_cast<double>(n);
  mean /= static_cast<double>(series.size());
  start(0) = std::log(mean + 0.5);
  const ModeResult mode = find_mode_and_hessian(target, start);
  RngStream mh_rng = rng.split(30);
  const MhResult mh = rw_metropolis_with_retry(target, mode.mode, mode.covariance, config, mh_rng);

  PosteriorDraws out;
  out.variant = ModelVariant::BPM;
  out.beta_names = design.columns;
  out.beta = mh.draws;
  out.acceptance_rate = mh.acceptance_rate;
  out.metadata["sampler"] = "rw_metropolis";
  out.metadata["intercept"] = "added";
  if (smooth) {
    Eigen::MatrixXd rates = (design.rows * mh.draws.transpose()).array().exp().matrix().transpose();
    out.theta_paths = std::move(rates);
  }
  return out;
}

/// Dispatches on the variant.
inline PosteriorDraws fit_model(const CountSeries& series, const DesignMatrix& design, const ModelSpec& spec,
                                const PriorConfig& priors, const MhConfig& config, RngStream& rng,
                                bool smooth = true) {
  switch (spec.variant) {
    case ModelVariant::DM5: return fit_dm5(series, design, priors, config, rng, {smooth, 1.0});
    case ModelVariant::BPM: return fit_bpm(series, design, priors, config, rng, smooth);
    case ModelVariant::EWMA: throw ValidationError("EWMA has no posterior; use the forecast command");
    default: return fit_dm_static(series, design, spec, priors, config, rng, {smooth, std::nullopt});
  }
}

// ---------------------------------------------------------------------------
// Summaries and diagnostics

/// Type-7 (linear interpolation) sample quantile.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ValidationError("quantile: empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct ParameterSummary {
  std::string name;
  double q25 = 0.0;
  double mean = 0.0;
  double q75 = 0.0;
  double sd = 0.0;
};

inline ParameterSummary summarize(const std::string& name, const std::vector<double>& v) {
  ParameterSummary s;
  s.name = name;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  s.q25 = quantile(v, 0.25);
  s.q75 = quantile(v, 0.75);
  return s;
}

/// Named scalar chains: static betas, gamma, tau_i.
inline std::vector<std::pair<std::string, std::vector<double>>> scalar_chains(const PosteriorDraws& d) {
  std::vector<std::pair<std::string, std::vector<double>>> out;
  auto column = [](const auto& m, Eigen::Index c) {
    std::vector<double> v(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index j = 0; j < m.rows(); ++j) v[static_cast<std::size_t>(j)] = m(j, c);
    return v;
  };
  const bool dyn = d.dynamic_coefficients();
  for (Eigen::Index i = 0; i < d.beta.cols(); ++i) {
    const std::string& nm = d.beta_names[static_cast<std::size_t>(i)];
    out.emplace_back(dyn ? "beta_mean[" + nm + "]" : "beta[" + nm + "]", column(d.beta, i));
  }
  if (d.has_gamma()) {
    std::vector<double> g(d.gamma.data(), d.gamma.data() + d.gamma.size());
    out.emplace_back("gamma", std::move(g));
  }
  for (Eigen::Index i = 0; i < d.tau.cols(); ++i) {
    out.emplace_back("tau[" + d.beta_names[static_cast<std::size_t>(i)] + "]", column(d.tau, i));
  }
  return out;
}

/// 25th / mean / 75th / sd for every scalar parameter.
inline std::vector<ParameterSummary> summarize_posterior(const PosteriorDraws& d) {
  std::vector<ParameterSummary> out;
  for (const auto& [name, v] : scalar_chains(d)) out.push_back(summarize(name, v));
  return out;
}

struct ParameterDiagnostics {
  std::string name;
  ParameterSummary summary;
  std::vector<double> autocorrelation;  // lags 0..K, K <= 50
  double ess = 0.0;
};

struct ChainDiagnostics {
  std::vector<ParameterDiagnostics> parameters;
};

/// Sample autocorrelation at `lag` (biased, normalized by lag-0 sum).
inline double autocorrelation(const std::vector<double>& v, std::size_t lag, double mean, double c0) {
  if (c0 <= 0.0) return 1.0;
  double c = 0.0;
  for (std::size_t t = 0; t + lag < v.size(); ++t) c += (v[t] - mean) * (v[t + lag] - mean);
  return c / c0;
}

/// ESS = S / (1 + 2 sum rho_k), truncated by Geyer's initial positive sequence.
inline double effective_sample_size(const std::vector<double>& v) {
  const std::size_t S = v.size();
  if (S < 2) return static_cast<double>(S);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(S);
  double c0 = 0.0;
  for (double x : v) c0 += (x - mean) * (x - mean);
  if (c0 <= 0.0) return 1.0;
  double tau = -1.0;
  for (std::size_t k = 0; k + 1 < S; k += 2) {
    const double pair = autocorrelation(v, k, mean, c0) + autocorrelation(v, k + 1, mean, c0);
    if (pair <= 0.0) break;
    tau += 2.0 * pair;
  }
  tau = std::max(tau, 1.0 / static_cast<double>(S));
  return std::clamp(static_cast<double>(S) / tau, 1.0, static_cast<double>(S));
}

inline ChainDiagnostics diagnostics(const PosteriorDraws& d, std::size_t max_lag = 50) {
  ChainDiagnostics out;
  for (const auto& [name, v] : scalar_chains(d)) {
    if (v.size() < 2) throw ValidationError("diagnostics: need at least two draws");
    ParameterDiagnostics pd;
    pd.name = name;
    pd.summary = summarize(name, v);
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double c0 = 0.0;
    for (double x : v) c0 += (x - mean) * (x - mean);
    const std::size_t K = std::min(max_lag, v.size() - 1);
    for (std::size_t k = 0; k <= K; ++k) pd.autocorrelation.push_back(autocorrelation(v, k, mean, c0));
    pd.ess = effective_sample_size(v);
    out.parameters.push_back(std::move(pd));
  }
  return out;
}

}  // namespace dynpois
