// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/conjugate_filter.hpp"
#include "dynpois/mcmc.hpp"
#include "dynpois/model.hpp"
#include "dynpois/prob_kernel.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace dynpois {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using ForecastComponent = std::variant<NegBinParams, PoissonParams>;

inline double component_cdf(const ForecastComponent& c, std::int64_t n) {
  if (const auto* nb = std::get_if<NegBinParams>(&c)) return cdf_negbin(n, *nb);
  return cdf_poisson(n, std::get<PoissonParams>(c).rate);
}

inline double component_log_pmf(const ForecastComponent& c, std::int64_t n) {
  if (const auto* nb = std::get_if<NegBinParams>(&c)) return log_pmf_negbin(n, *nb);
  return log_pmf_poisson(n, std::get<PoissonParams>(c).rate);
}

inline double component_mean(const ForecastComponent& c) {
  if (const auto* nb = std::get_if<NegBinParams>(&c)) return nb->mean();
  return std::get<PoissonParams>(c).rate;
}

/// Equal-weight mixture of one-step predictives, one component per draw.
struct ForecastDistribution {
  int origin = 0;
  std::vector<ForecastComponent> components;

  double weight() const { return 1.0 / static_cast<double>(components.size()); }

  double pmf(std::int64_t n) const {
    std::vector<double> lp(components.size());
    for (std::size_t j = 0; j < components.size(); ++j) lp[j] = component_log_pmf(components[j], n);
    return std::exp(log_sum_exp(lp.data(), lp.size())) * weight();
  }

  double cdf(std::int64_t n) const {
    if (n < 0) return 0.0;
    double s = 0.0;
    for (const auto& c : components) s += component_cdf(c, n);
    return std::min(1.0, s * weight());
  }

  double mean() const {
    double s = 0.0;
    for (const auto& c : components) s += component_mean(c);
    return s * weight();
  }

  /// Smallest n with cdf(n) >= q.
  std::int64_t quantile(double q) const {
    if (!(q > 0.0 && q < 1.0)) throw ValidationError("ForecastDistribution::quantile: q must lie in (0,1)");
    if (cdf(0) >= q) return 0;
    std::int64_t lo = 0;
    std::int64_t hi = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(mean())));
    while (cdf(hi) < q) {
      lo = hi;
      if (hi > (std::int64_t{1} << 52)) throw NumericError("ForecastDistribution::quantile: quantile beyond 2^52");
      hi *= 2;
    }
    while (hi - lo > 1) {
      const std::int64_t mid = lo + (hi - lo) / 2;
      if (cdf(mid) >= q) hi = mid;
      else lo = mid;
    }
    return hi;
  }

  double point() const { return mean(); }
  std::pair<std::int64_t, std::int64_t> interval95() const { return {quantile(0.025), quantile(0.975)}; }
};

/// Mixture from per-draw predicted states (gamma a_{o-1}, gamma b_{o-1}) and multipliers.
inline ForecastDistribution forecast_from_states(int origin, const std::vector<GammaParams>& predicted,
                                                 const std::vector<double>& multipliers) {
  if (predicted.empty()) throw ValidationError("forecast: empty draw set");
  if (predicted.size() != multipliers.size()) throw ValidationError("forecast: states and multipliers differ in length");
  ForecastDistribution f;
  f.origin = origin;
  f.components.reserve(predicted.size());
  for (std::size_t j = 0; j < predicted.size(); ++j) {
    f.components.emplace_back(one_step_predictive(predicted[j], multipliers[j]));
  }
  return f;
}

/// One-month-ahead forecast of month `origin` from draws fitted on months
/// 1..origin-1. `design` must contain at least `origin` rows.
inline ForecastDistribution forecast_one_step(const PosteriorDraws& draws, const CountSeries& train,
                                              const DesignMatrix& design, const PriorConfig& priors,
                                              int origin, RngStream& rng) {
  const Eigen::Index S = draws.S();
  if (S == 0) throw ValidationError("forecast_one_step: empty draw set");
  const auto n_train = static_cast<Eigen::Index>(train.size());
  if (origin != n_train + 1) throw ValidationError("forecast_one_step: origin must follow the training months");
  if (design.T() < origin) throw ValidationError("forecast_one_step: design has no row for the origin month");
  const DesignMatrix dtrain = design.head(n_train);
  const Eigen::Index p = design.p();
  const Eigen::VectorXd z = design.rows.row(origin - 1).transpose();

  ForecastDistribution f;
  f.origin = origin;
  f.components.reserve(static_cast<std::size_t>(S));
  for (Eigen::Index j = 0; j < S; ++j) {
    if (draws.variant == ModelVariant::BPM) {
      const double rate = std::exp(z.dot(draws.beta.row(j).transpose()));
      f.components.emplace_back(PoissonParams{rate});
      continue;
    }
    const double g = draws.gamma(j);
    FilterTrajectory tr;
    Eigen::VectorXd beta_next(p);
    if (draws.dynamic_coefficients()) {
      const Eigen::MatrixXd& path = draws.beta_paths[static_cast<std::size_t>(j)];
      tr = filter_pass_path(train, dtrain, path, g, priors);
      for (Eigen::Index i = 0; i < p; ++i) {
        beta_next(i) = path(n_train - 1, i) + rng.normal() / std::sqrt(draws.tau(j, i));
      }
    } else {
      beta_next = p == 0 ? Eigen::VectorXd(0) : Eigen::VectorXd(draws.beta.row(j).transpose());
      tr = filter_pass(train, dtrain, beta_next, g, priors);
    }
    const double mult = p == 0 ? 1.0 : std::exp(z.dot(beta_next));
    f.components.emplace_back(one_step_predictive(predict_step(tr.final_state(), g), mult));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Accuracy metrics

struct ForecastRow {
  int origin = 0;
  double actual = 0.0;
  double point = 0.0;
  double lo95 = kNaN;
  double hi95 = kNaN;
};

struct ForecastReport {
  std::string model;
  std::vector<ForecastRow> rows;
  double mape = kNaN;
  double rmse = kNaN;
  double mcov = kNaN;
  double mwid = kNaN;
  int zero_actuals_skipped = 0;
  std::vector<std::string> flags;
  std::vector<double> ewma_nu;  // selected smoothing constant per origin (EWMA only)
};

/// MAPE (fraction, zero actuals skipped), RMSE, and, when intervals exist,
/// MCov = mean 1{lo < N < hi} and MWid = mean (hi - lo).
inline void compute_metrics(ForecastReport& r) {
  if (r.rows.empty()) return;
  double ape = 0.0, se = 0.0;
  int n_ape = 0;
  r.zero_actuals_skipped = 0;
  for (const auto& row : r.rows) {
    se += (row.actual - row.point) * (row.actual - row.point);
    if (row.actual == 0.0) {
      ++r.zero_actuals_skipped;
      continue;
    }
    ape += std::abs(row.actual - row.point) / row.actual;
    ++n_ape;
  }
  const double H = static_cast<double>(r.rows.size());
  r.rmse = std::sqrt(se / H);
  r.mape = n_ape > 0 ? ape / n_ape : kNaN;
  if (r.zero_actuals_skipped > 0) r.flags.push_back("mape_skipped_zero_actuals");

  bool intervals = true;
  for (const auto& row : r.rows) intervals = intervals && !std::isnan(row.lo95) && !std::isnan(row.hi95);
  if (!intervals) {
    r.mcov = r.mwid = kNaN;
    return;
  }
  double cov = 0.0, wid = 0.0;
  for (const auto& row : r.rows) {
    if (row.lo95 < row.actual && row.actual < row.hi95) cov += 1.0;
    wid += row.hi95 - row.lo95;
  }
  r.mcov = cov / H;
  r.mwid = wid / H;
}

inline ForecastReport make_report(const std::vector<double>& actual, const std::vector<double>& point,
                                  const std::vector<std::pair<double, double>>& intervals = {}) {
  if (actual.size() != point.size() || (!intervals.empty() && intervals.size() != actual.size())) {
    throw ValidationError("make_report: input lengths differ");
  }
  ForecastReport r;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    ForecastRow row{static_cast<int>(i) + 1, actual[i], point[i], kNaN, kNaN};
    if (!intervals.empty()) {
      row.lo95 = intervals[i].first;
      row.hi95 = intervals[i].second;
    }
    r.rows.push_back(row);
  }
  compute_metrics(r);
  return r;
}

// ---------------------------------------------------------------------------
// Sequential out-of-sample harness

struct ForecastWindow {
  int start_origin = 2;
  int end_origin = 2;

  void validate(std::size_t T) const {
    if (start_origin < 2) throw ValidationError("forecast window: start origin must be at least 2");
    if (end_origin > static_cast<int>(T)) throw ValidationError("forecast window: end origin exceeds the series length");
  }
  bool empty() const { return end_origin < start_origin; }
};

/// Refits on months 1..o-1 for every origin o and forecasts month o.
/// Each origin draws from RngStream(seed, o).
inline ForecastReport sequential_harness(const CountSeries& series, const DesignMatrix& design,
                                         const ModelSpec& spec, const PriorConfig& priors,
                                         const MhConfig& config, const ForecastWindow& window) {
  series.validate();
  window.validate(series.size());
  if (spec.variant == ModelVariant::EWMA) throw ValidationError("sequential_harness: use ewma_forecast for EWMA");
  ForecastReport r;
  r.model = to_string(spec.variant);
  for (int o = window.start_origin; o <= window.end_origin; ++o) {
    RngStream rng(config.seed, static_cast<std::uint64_t>(o));
    const CountSeries train = series.head(static_cast<std::size_t>(o - 1));
    const DesignMatrix dtrain = design.head(o - 1);
    try {
      RngStream fit_rng = rng.split(1);
      RngStream fc_rng = rng.split(2);
      const PosteriorDraws draws = fit_model(train, dtrain, spec, priors, config, fit_rng, false);
      const ForecastDistribution f = forecast_one_step(draws, train, design, priors, o, fc_rng);
      const auto [lo, hi] = f.interval95();
      r.rows.push_back({o, static_cast<double>(series.counts[static_cast<std::size_t>(o - 1)]), f.point(),
                        static_cast<double>(lo), static_cast<double>(hi)});
    } catch (const ValidationError& e) {
      throw ValidationError("origin " + std::to_string(o) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("origin " + std::to_string(o) + ": " + e.what());
    }
  }
  compute_metrics(r);
  return r;
}

// ---------------------------------------------------------------------------
// EWMA benchmark

/// N~_1 = N_1, N~_{t+1} = nu N_t + (1 - nu) N~_t; returns N~_1..N~_{n+1}.
inline std::vector<double> ewma_path(std::span<const std::int64_t> counts, double nu) {
  if (counts.empty()) throw ValidationError("ewma_path: empty series");
  std::vector<double> s(counts.size() + 1);
  s[0] = static_cast<double>(counts[0]);
  for (std::size_t t = 0; t < counts.size(); ++t) {
    s[t + 1] = nu * static_cast<double>(counts[t]) + (1.0 - nu) * s[t];
  }
  return s;
}

struct EwmaSelection {
  double nu = 0.0;
  double criterion = 0.0;
  bool rmse_fallback = false;
};

/// Grid search for nu in [0,1] minimizing in-sample MAPE of N~_t against N_t,
/// t = 2..n. Ties go to the smallest nu. Without nonzero actuals, RMSE is used.
inline EwmaSelection ewma_select_nu(std::span<const std::int64_t> counts, double step = 0.01) {
  if (counts.empty()) throw ValidationError("ewma_select_nu: empty series");
  if (!(step > 0.0 && step <= 1.0)) throw ValidationError("ewma_select_nu: step must lie in (0,1]");
  const auto K = static_cast<long>(std::llround(1.0 / step));
  bool any_nonzero = false;
  for (std::size_t t = 1; t < counts.size(); ++t) any_nonzero = any_nonzero || counts[t] != 0;
  EwmaSelection best;
  best.rmse_fallback = !any_nonzero;
  best.criterion = std::numeric_limits<double>::infinity();
  for (long k = 0; k <= K; ++k) {
    const double nu = std::min(1.0, static_cast<double>(k) * step);
    const std::vector<double> s = ewma_path(counts, nu);
    double crit = 0.0;
    int n = 0;
    for (std::size_t t = 1; t < counts.size(); ++t) {
      const double a = static_cast<double>(counts[t]);
      if (best.rmse_fallback) {
        crit += (a - s[t]) * (a - s[t]);
        ++n;
      } else if (a != 0.0) {
        crit += std::abs(a - s[t]) / a;
        ++n;
      }
    }
    crit = n > 0 ? crit / n : 0.0;
    if (best.rmse_fallback) crit = std::sqrt(crit);
    if (crit < best.criterion) {
      best.criterion = crit;
      best.nu = nu;
    }
  }
  return best;
}

/// Point forecasts only; interval columns are NaN.
inline ForecastReport ewma_forecast(const CountSeries& series, const ForecastWindow& window, double step = 0.01) {
  series.validate();
  window.validate(series.size());
  ForecastReport r;
  r.model = "EWMA";
  bool fallback = false;
  for (int o = window.start_origin; o <= window.end_origin; ++o) {
    const std::span<const std::int64_t> past(series.counts.data(), static_cast<std::size_t>(o - 1));
    const EwmaSelection sel = ewma_select_nu(past, step);
    fallback = fallback || sel.rmse_fallback;
    const std::vector<double> s = ewma_path(past, sel.nu);
    r.rows.push_back({o, static_cast<double>(series.counts[static_cast<std::size_t>(o - 1)]), s.back(), kNaN, kNaN});
    r.ewma_nu.push_back(sel.nu);
  }
  compute_metrics(r);
  if (fallback) r.flags.push_back("ewma_rmse_criterion_fallback");
  return r;
}

// ---------------------------------------------------------------------------
// Model comparison

/// -log[(1/S) sum_j exp(-l_j)].
inline double harmonic_mean_logml(std::span<const double> loglik) {
  if (loglik.empty()) throw ValidationError("harmonic_mean_logml: no draws");
  std::vector<double> neg(loglik.size());
  for (std::size_t j = 0; j < loglik.size(); ++j) neg[j] = -loglik[j];
  return -(log_sum_exp(neg.data(), neg.size()) - std::log(static_cast<double>(neg.size())));
}

/// log_f is S x n with log f(N_i | Theta_j); returns sum_i log CPO_i with CPO_i
/// the harmonic mean over draws.
inline double cpo_log_sum(const Eigen::MatrixXd& log_f) {
  if (log_f.rows() == 0) throw ValidationError("cpo_log_sum: no draws");
  double total = 0.0;
  std::vector<double> col(static_cast<std::size_t>(log_f.rows()));
  for (Eigen::Index i = 0; i < log_f.cols(); ++i) {
    for (Eigen::Index j = 0; j < log_f.rows(); ++j) col[static_cast<std::size_t>(j)] = log_f(j, i);
    total += harmonic_mean_logml(col);
  }
  return total;
}

/// S x T matrix of per-draw, per-month log likelihood terms: the one-step
/// negative binomial predictive for the dynamic models, the Poisson pmf for BPM.
inline Eigen::MatrixXd pointwise_log_likelihood(const PosteriorDraws& draws, const CountSeries& series,
                                                const DesignMatrix& design, const PriorConfig& priors) {
  const Eigen::Index S = draws.S();
  const auto T = static_cast<Eigen::Index>(series.size());
  Eigen::MatrixXd out(S, T);
  for (Eigen::Index j = 0; j < S; ++j) {
    if (draws.variant == ModelVariant::BPM) {
      const Eigen::VectorXd eta = design.rows * draws.beta.row(j).transpose();
      for (Eigen::Index t = 0; t < T; ++t) {
        out(j, t) = log_pmf_poisson(series.counts[static_cast<std::size_t>(t)], std::exp(eta(t)));
      }
      continue;
    }
    FilterTrajectory tr;
    if (draws.dynamic_coefficients()) {
      tr = filter_pass_path(series, design, draws.beta_paths[static_cast<std::size_t>(j)], draws.gamma(j), priors);
    } else {
      const Eigen::VectorXd b = design.p() == 0 ? Eigen::VectorXd(0) : Eigen::VectorXd(draws.beta.row(j).transpose());
      tr = filter_pass(series, design, b, draws.gamma(j), priors);
    }
    for (Eigen::Index t = 0; t < T; ++t) out(j, t) = tr.log_predictive[static_cast<std::size_t>(t)];
  }
  return out;
}

struct ModelScore {
  double log_marginal_likelihood = kNaN;
  double log_cpo = kNaN;
};

inline ModelScore score_model(const PosteriorDraws& draws, const CountSeries& series, const DesignMatrix& design,
                              const PriorConfig& priors) {
  const Eigen::MatrixXd lf = pointwise_log_likelihood(draws, series, design, priors);
  const Eigen::VectorXd total = lf.rowwise().sum();
  ModelScore s;
  s.log_marginal_likelihood =
      harmonic_mean_logml(std::span<const double>(total.data(), static_cast<std::size_t>(total.size())));
  s.log_cpo = cpo_log_sum(lf);
  return s;
}

struct ComparisonReport {
  std::vector<std::string> models;  // insertion order
  std::map<std::string, ModelScore> scores;

  void add(const std::string& model, const ModelScore& s) {
    if (!scores.count(model)) models.push_back(model);
    scores[model] = s;
  }

  const ModelScore& at(const std::string& model) const {
    const auto it = scores.find(model);
    if (it == scores.end()) throw ValidationError("comparison report has no model '" + model + "'");
    return it->second;
  }

  double log_bayes_factor(const std::string& m1, const std::string& m2) const {
    const ModelScore& a = at(m1);
    const ModelScore& b = at(m2);
    if (m1 == m2) return 0.0;
    return a.log_marginal_likelihood - b.log_marginal_likelihood;
  }
};

/// exp(logML(m1) - logML(m2)).
inline double bayes_factor(const ComparisonReport& report, const std::string& m1, const std::string& m2) {
  return std::exp(report.log_bayes_factor(m1, m2));
}

/// Fits every spec on the full series and scores it. Model i draws from
/// RngStream(seed, 100 + i).
inline ComparisonReport compare_models(const CountSeries& series, const CovariateTable& raw,
                                       const std::vector<ModelSpec>& roster, const PriorConfig& priors,
                                       const MhConfig& config, const MhConfig& dm5_config) {
  ComparisonReport rep;
  const auto T = static_cast<Eigen::Index>(series.size());
  for (std::size_t i = 0; i < roster.size(); ++i) {
    const ModelSpec& spec = roster[i];
    if (spec.variant == ModelVariant::EWMA) throw ValidationError("compare: EWMA has no likelihood");
    const DesignMatrix design = build_design(raw, spec, T);
    RngStream rng(config.seed, 100 + i);
    PriorConfig pr = priors;
    if (spec.variant != ModelVariant::DM1 && pr.gamma_prior.kind == GammaPrior::Kind::DiscreteGrid) {
      pr.gamma_prior = GammaPrior::uniform();
    }
    const MhConfig& cfg = spec.variant == ModelVariant::DM5 ? dm5_config : config;
    const PosteriorDraws draws = fit_model(series, design, spec, pr, cfg, rng, false);
    rep.add(to_string(spec.variant), score_model(draws, series, design, pr));
  }
  return rep;
}

}  // namespace dynpois
