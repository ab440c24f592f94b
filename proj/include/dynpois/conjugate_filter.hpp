// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

// Exact inference conditional on (beta, gamma): gamma predict/update
// recursions, the one-step negative binomial predictive, the gamma grid
// posterior and forward-filtering backward-sampling of the rate path.

#include "dynpois/model.hpp"
#include "dynpois/prob_kernel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <span>
#include <vector>

namespace dynpois {

inline void require_discount(double gamma, const char* where) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    std::ostringstream os;
    os << where << ": discount factor must lie in (0,1], got " << gamma;
    throw ValidationError(os.str());
  }
}

/// (a, b) -> (gamma a, gamma b): same mean, variance scaled by 1/gamma.
inline GammaParams predict_step(const GammaParams& state, double gamma) {
  require_discount(gamma, "predict_step");
  return {gamma * state.shape, gamma * state.rate};
}

inline GammaParams update_step(const GammaParams& predicted, std::int64_t n, double multiplier) {
  if (!(multiplier > 0.0) || !std::isfinite(multiplier)) {
    throw ValidationError("update_step: multiplier must be positive and finite");
  }
  if (n < 0) throw ValidationError("update_step: negative count");
  return {predicted.shape + static_cast<double>(n), predicted.rate + multiplier};
}

/// NegBin(r = gamma a_{t-1}, p = gamma b_{t-1} / (gamma b_{t-1} + m_t)).
inline NegBinParams one_step_predictive(const GammaParams& predicted, double multiplier) {
  if (!(multiplier > 0.0) || !std::isfinite(multiplier)) {
    throw ValidationError("one_step_predictive: multiplier must be positive and finite");
  }
  return {predicted.shape, predicted.rate / (predicted.rate + multiplier)};
}

/// log NegBin(n; r, rb / (rb + m)) written in terms of (r, rb, m), so it
/// stays finite when m << rb or r is tiny.
inline double log_predictive_term(std::int64_t n, double r, double rb, double m) {
  const double log_total = std::log(rb + m);
  double v = r * (std::log(rb) - log_total);
  if (n > 0) {
    const double dn = static_cast<double>(n);
    v += std::lgamma(r + dn) - std::lgamma(dn + 1.0) - std::lgamma(r) + dn * (std::log(m) - log_total);
  }
  return v;
}

/// States (a_t, b_t) for t = 0..T plus cached per-step log predictives.
struct FilterTrajectory {
  double gamma = 1.0;
  std::vector<GammaParams> states;  // states[0] = (a0, b0)
  std::vector<double> log_predictive;
  std::vector<double> multipliers;

  std::size_t T() const { return log_predictive.size(); }
  const GammaParams& final_state() const { return states.back(); }

  double total_log_likelihood() const {
    double s = 0.0;
    for (double v : log_predictive) s += v;
    return s;
  }
};

inline FilterTrajectory filter_pass(std::span<const std::int64_t> counts,
                                    std::span<const double> multipliers, double gamma,
                                    const GammaParams& initial) {
  require_discount(gamma, "filter_pass");
  detail::require_gamma(initial, "filter_pass");
  if (counts.size() != multipliers.size()) {
    throw ValidationError("filter_pass: counts and multipliers differ in length");
  }
  FilterTrajectory tr;
  tr.gamma = gamma;
  tr.states.reserve(counts.size() + 1);
  tr.log_predictive.reserve(counts.size());
  tr.multipliers.assign(multipliers.begin(), multipliers.end());
  tr.states.push_back(initial);
  for (std::size_t t = 0; t < counts.size(); ++t) {
    const GammaParams pred = predict_step(tr.states.back(), gamma);
    tr.states.push_back(update_step(pred, counts[t], multipliers[t]));
    tr.log_predictive.push_back(log_predictive_term(counts[t], pred.shape, pred.rate, multipliers[t]));
  }
  return tr;
}

inline FilterTrajectory filter_pass(const CountSeries& series, const DesignMatrix& design,
                                    const Eigen::VectorXd& beta, double gamma,
                                    const PriorConfig& priors) {
  if (design.T() != static_cast<Eigen::Index>(series.size())) {
    throw ValidationError("filter_pass: design rows do not match the series length");
  }
  const Eigen::VectorXd m = design.multipliers(beta);
  return filter_pass(series.counts, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                     gamma, priors.initial());
}

/// Dynamic-coefficient variant: beta_path is T x p.
inline FilterTrajectory filter_pass_path(const CountSeries& series, const DesignMatrix& design,
                                         const Eigen::MatrixXd& beta_path, double gamma,
                                         const PriorConfig& priors) {
  if (design.T() != static_cast<Eigen::Index>(series.size())) {
    throw ValidationError("filter_pass: design rows do not match the series length");
  }
  const Eigen::VectorXd m = design.multipliers_path(beta_path);
  return filter_pass(series.counts, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())),
                     gamma, priors.initial());
}

/// Total theta-free log-likelihood without keeping the trajectory.
inline double log_likelihood(std::span<const std::int64_t> counts, std::span<const double> multipliers,
                             double gamma, const GammaParams& initial) {
  double a = initial.shape;
  double b = initial.rate;
  double total = 0.0;
  for (std::size_t t = 0; t < counts.size(); ++t) {
    const double ra = gamma * a;
    const double rb = gamma * b;
    total += log_predictive_term(counts[t], ra, rb, multipliers[t]);
    a = ra + static_cast<double>(counts[t]);
    b = rb + multipliers[t];
  }
  return total;
}

/// Normalized posterior over a discrete gamma grid.
struct GammaGridPosterior {
  std::vector<double> grid;
  std::vector<double> log_unnormalized;
  std::vector<double> mass;
  double log_evidence = 0.0;  // log sum_g prior(g) L(g) with prior weights normalized

  double mean() const {
    double m = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) m += grid[i] * mass[i];
    return m;
  }

  double sample(RngStream& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      acc += mass[i];
      if (u <= acc) return grid[i];
    }
    return grid.back();
  }
};

/// Posterior mass proportional to prior weight times exp(total log predictive).
/// `log_prior_weights` need not be normalized.
inline GammaGridPosterior gamma_grid_posterior(const CountSeries& series, const DesignMatrix& design,
                                               const Eigen::VectorXd& beta, const PriorConfig& priors,
                                               std::span<const double> grid,
                                               std::span<const double> log_prior_weights) {
  if (grid.empty()) throw ValidationError("gamma_grid_posterior: empty grid");
  if (log_prior_weights.size() != grid.size()) {
    throw ValidationError("gamma_grid_posterior: prior weights do not match the grid");
  }
  for (double g : grid) {
    if (!(g > 0.0 && g < 1.0)) throw ValidationError("gamma_grid_posterior: grid points must lie in (0,1)");
  }
  const Eigen::VectorXd m = design.multipliers(beta);
  const std::span<const double> mult(m.data(), static_cast<std::size_t>(m.size()));

  GammaGridPosterior post;
  post.grid.assign(grid.begin(), grid.end());
  post.log_unnormalized.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    post.log_unnormalized[i] =
        log_prior_weights[i] + log_likelihood(series.counts, mult, grid[i], priors.initial());
  }
  const double norm = log_sum_exp(post.log_unnormalized.data(), grid.size());
  if (!std::isfinite(norm)) {
    throw NumericError("gamma_grid_posterior: likelihood vanishes on the whole grid");
  }
  const double prior_norm = log_sum_exp(log_prior_weights.data(), grid.size());
  post.log_evidence = norm - prior_norm;
  post.mass.resize(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) post.mass[i] = std::exp(post.log_unnormalized[i] - norm);
  return post;
}

/// Grid of step, 2*step, ..., 1-step with prior weights from priors.gamma_prior.
inline GammaGridPosterior gamma_grid_posterior(const CountSeries& series, const DesignMatrix& design,
                                               const Eigen::VectorXd& beta, const PriorConfig& priors,
                                               double grid_step) {
  GammaPrior gp = priors.gamma_prior;
  gp.grid_step = grid_step;
  PriorConfig check = priors;
  check.gamma_prior = GammaPrior::discrete_grid(grid_step);
  check.validate();
  const std::vector<double> grid = gp.grid();
  std::vector<double> w(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) w[i] = gp.log_density(grid[i]);
  return gamma_grid_posterior(series, design, beta, priors, grid, w);
}

/// One draw of theta_1..theta_T given (beta, gamma).
///
/// theta_T ~ Gamma(a_T, b_T); then backwards
///   theta_{n-1} = gamma theta_n + G,  G ~ Gamma((1 - gamma) a_{n-1}, b_{n-1}),
/// which is the backward kernel obtained by combining the scaled-beta state
/// transition with the Gamma(a_{n-1}, b_{n-1}) filtering density. Its support
/// is (gamma theta_n, inf).
inline std::vector<double> ffbs_sample(const FilterTrajectory& tr, RngStream& rng) {
  const std::size_t T = tr.T();
  if (T == 0 || tr.states.size() != T + 1) throw ValidationError("ffbs_sample: incomplete trajectory");
  std::vector<double> path(T);
  path[T - 1] = sample_gamma(tr.states[T], rng);
  const double g = tr.gamma;
  for (std::size_t n = T - 1; n >= 1; --n) {
    const double floor_value = g * path[n];
    if (g == 1.0) {
      path[n - 1] = path[n];
      continue;
    }
    const GammaParams& prev = tr.states[n];  // (a_{n-1}, b_{n-1}) in 1-based months
    const GammaParams increment{(1.0 - g) * prev.shape, prev.rate};
    if (!increment.valid()) {
      std::ostringstream os;
      os << "ffbs_sample: degenerate backward kernel at month " << n;
      throw NumericError(os.str());
    }
    double v = floor_value + sample_gamma(increment, rng);
    if (!(v > floor_value)) v = std::nextafter(floor_value, std::numeric_limits<double>::infinity());
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "ffbs_sample: non-finite draw at month " << n;
      throw NumericError(os.str());
    }
    path[n - 1] = v;
  }
  return path;
}

/// S x T matrix of rate paths.
struct SmoothingDraws {
  Eigen::MatrixXd paths;
  std::string source;

  Eigen::Index S() const { return paths.rows(); }
  Eigen::Index T() const { return paths.cols(); }
};

/// Fraction of paths with theta_s >= theta_u (1-based months).
inline double exceedance_probability(const SmoothingDraws& draws, Eigen::Index s, Eigen::Index u) {
  if (s < 1 || u < 1 || s > draws.T() || u > draws.T()) {
    throw ValidationError("exceedance_probability: month index out of range");
  }
  if (draws.S() == 0) throw ValidationError("exceedance_probability: no draws");
  Eigen::Index hits = 0;
  for (Eigen::Index j = 0; j < draws.S(); ++j) {
    if (draws.paths(j, s - 1) >= draws.paths(j, u - 1)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(draws.S());
}

}  // namespace dynpois
