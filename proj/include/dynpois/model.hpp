// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/prob_kernel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dynpois {

/// Monthly default counts of one cohort, months t = 1..T.
struct CountSeries {
  std::vector<int> months;
  std::vector<std::int64_t> counts;

  static CountSeries from_counts(std::vector<std::int64_t> counts) {
    CountSeries s;
    s.months.resize(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) s.months[i] = static_cast<int>(i) + 1;
    s.counts = std::move(counts);
    s.validate();
    return s;
  }

  std::size_t size() const { return counts.size(); }

  /// The first `n` months.
  CountSeries head(std::size_t n) const {
    if (n > size()) throw ValidationError("CountSeries::head: not enough months");
    CountSeries s;
    s.months.assign(months.begin(), months.begin() + static_cast<std::ptrdiff_t>(n));
    s.counts.assign(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(n));
    return s;
  }

  void validate() const {
    if (counts.empty()) throw ValidationError("CountSeries: need at least one month");
    if (months.size() != counts.size()) {
      throw ValidationError("CountSeries: months and counts differ in length");
    }
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] < 0) throw ValidationError("CountSeries: negative count");
      if (i > 0 && months[i] <= months[i - 1]) {
        throw ValidationError("CountSeries: months must be strictly increasing");
      }
    }
  }
};

/// Named covariate columns as read from input, before model-specific shaping.
struct CovariateTable {
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;

  const std::vector<double>* find(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return &columns[i];
    }
    return nullptr;
  }

  void add(std::string name, std::vector<double> column) {
    names.push_back(std::move(name));
    columns.push_back(std::move(column));
  }
};

/// Per-month covariate rows z_t; p == 0 means no covariates.
struct DesignMatrix {
  std::vector<std::string> columns;
  Eigen::MatrixXd rows;  // T x p
  bool standardized = false;
  bool has_intercept = false;

  Eigen::Index p() const { return rows.cols(); }
  Eigen::Index T() const { return rows.rows(); }

  DesignMatrix head(Eigen::Index n) const {
    DesignMatrix d = *this;
    d.rows = rows.topRows(n);
    return d;
  }

  /// exp(beta' z_t) for every month.
  Eigen::VectorXd multipliers(const Eigen::VectorXd& beta) const {
    if (beta.size() != p()) throw ValidationError("DesignMatrix: beta dimension mismatch");
    if (p() == 0) return Eigen::VectorXd::Ones(T());
    return (rows * beta).array().exp().matrix();
  }

  /// exp(beta_t' z_t) with a per-month coefficient path (T x p).
  Eigen::VectorXd multipliers_path(const Eigen::MatrixXd& beta_path) const {
    if (beta_path.rows() != T() || beta_path.cols() != p()) {
      throw ValidationError("DesignMatrix: coefficient path dimension mismatch");
    }
    if (p() == 0) return Eigen::VectorXd::Ones(T());
    return rows.cwiseProduct(beta_path).rowwise().sum().array().exp().matrix();
  }

  static DesignMatrix empty(Eigen::Index T) {
    DesignMatrix d;
    d.rows = Eigen::MatrixXd(T, 0);
    return d;
  }
};

enum class ModelVariant { DM1, DM2, DM3, DM4, DM5, BPM, EWMA };

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::DM1: return "DM1";
    case ModelVariant::DM2: return "DM2";
    case ModelVariant::DM3: return "DM3";
    case ModelVariant::DM4: return "DM4";
    case ModelVariant::DM5: return "DM5";
    case ModelVariant::BPM: return "BPM";
    case ModelVariant::EWMA: return "EWMA";
  }
  return "?";
}

inline ModelVariant parse_variant(std::string_view s) {
  for (auto v : {ModelVariant::DM1, ModelVariant::DM2, ModelVariant::DM3, ModelVariant::DM4,
                 ModelVariant::DM5, ModelVariant::BPM, ModelVariant::EWMA}) {
    if (to_string(v) == s) return v;
  }
  throw ValidationError("unknown model variant '" + std::string(s) + "'");
}

struct ModelSpec {
  ModelVariant variant = ModelVariant::DM1;
  std::vector<std::string> covariates;
  int trend_order = 0;
  bool seasonal = false;
  bool standardize = false;
  // Calendar month (1..12) of t = 1; December is the seasonal reference.
  int first_calendar_month = 1;

  /// The roster's conventional shape for each variant.
  static ModelSpec for_variant(ModelVariant v, std::vector<std::string> covariates = {}) {
    ModelSpec s;
    s.variant = v;
    if (v != ModelVariant::DM1 && v != ModelVariant::EWMA) s.covariates = std::move(covariates);
    if (v == ModelVariant::DM3) s.trend_order = 2;
    if (v == ModelVariant::DM4) s.seasonal = true;
    return s;
  }

  void validate() const {
    if (trend_order < 0 || trend_order > 2) throw ValidationError("ModelSpec: trend order must be 0, 1 or 2");
    if (first_calendar_month < 1 || first_calendar_month > 12) {
      throw ValidationError("ModelSpec: first calendar month must be in 1..12");
    }
    const bool any_columns = !covariates.empty() || trend_order > 0 || seasonal;
    switch (variant) {
      case ModelVariant::DM1:
        if (any_columns) throw ValidationError("ModelSpec: DM1 takes no covariates");
        break;
      case ModelVariant::DM3:
        if (trend_order != 2) throw ValidationError("ModelSpec: DM3 requires a second-order trend");
        break;
      case ModelVariant::DM4:
        if (!seasonal) throw ValidationError("ModelSpec: DM4 requires seasonal dummies");
        break;
      case ModelVariant::DM5:
        if (!any_columns) throw ValidationError("ModelSpec: DM5 needs at least one covariate");
        break;
      default:
        break;
    }
  }
};

struct GammaPrior {
  enum class Kind { DiscreteGrid, Uniform, Beta };

  Kind kind = Kind::Uniform;
  double grid_step = 0.01;
  double alpha = 3.0;
  double beta = 3.0;

  static GammaPrior discrete_grid(double step = 0.01) { return {Kind::DiscreteGrid, step, 3.0, 3.0}; }
  static GammaPrior uniform() { return {Kind::Uniform, 0.01, 3.0, 3.0}; }
  static GammaPrior beta_prior(double a = 3.0, double b = 3.0) { return {Kind::Beta, 0.01, a, b}; }

  /// Log density on (0,1); the discrete grid is uniform over its points.
  double log_density(double g) const {
    if (!(g > 0.0 && g < 1.0)) return kNegInf;
    if (kind == Kind::Beta) return log_pdf_beta(g, BetaParams{alpha, beta});
    return 0.0;
  }

  /// Grid points step, 2*step, ..., 1-step.
  std::vector<double> grid() const {
    const long n = std::lround(1.0 / grid_step);
    std::vector<double> out;
    for (long i = 1; i < n; ++i) out.push_back(static_cast<double>(i) / static_cast<double>(n));
    return out;
  }
};

inline std::string to_string(GammaPrior::Kind k) {
  switch (k) {
    case GammaPrior::Kind::DiscreteGrid: return "discrete_grid";
    case GammaPrior::Kind::Uniform: return "uniform";
    case GammaPrior::Kind::Beta: return "beta";
  }
  return "?";
}

struct PriorConfig {
  double a0 = 1.0;
  double b0 = 1.0;
  GammaPrior gamma_prior;
  double beta_prior_sd = 10.0;  // N(0, 100) read as variance 100
  double tau_a = 0.001;
  double tau_b = 0.001;

  GammaParams initial() const { return {a0, b0}; }

  void validate() const {
    if (!(a0 > 0.0 && b0 > 0.0)) throw ValidationError("PriorConfig: a0 and b0 must be positive");
    if (!(beta_prior_sd > 0.0)) throw ValidationError("PriorConfig: beta prior sd must be positive");
    if (!(tau_a > 0.0 && tau_b > 0.0)) throw ValidationError("PriorConfig: tau prior must be positive");
    if (gamma_prior.kind == GammaPrior::Kind::Beta &&
        !(gamma_prior.alpha > 0.0 && gamma_prior.beta > 0.0)) {
      throw ValidationError("PriorConfig: beta prior on gamma needs positive parameters");
    }
    if (gamma_prior.kind == GammaPrior::Kind::DiscreteGrid) {
      const double s = gamma_prior.grid_step;
      const double n = 1.0 / s;
      if (!(s > 0.0 && s < 1.0) || std::abs(n - std::round(n)) > 1e-9 || std::round(n) < 2) {
        throw ValidationError("PriorConfig: gamma grid step must divide 1 evenly");
      }
    }
  }
};

/// Builds z_t: selected covariates, then trend (t, t^2), then 11 monthly
/// dummies with December as reference. BPM gets a leading intercept column.
inline DesignMatrix build_design(const CovariateTable& raw, const ModelSpec& spec, Eigen::Index T) {
  spec.validate();
  if (T < 1) throw ValidationError("build_design: T must be at least 1");

  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;

  if (spec.variant == ModelVariant::BPM) {
    names.emplace_back("intercept");
    cols.emplace_back(static_cast<std::size_t>(T), 1.0);
  }
  std::vector<std::size_t> scalable;
  for (const auto& name : spec.covariates) {
    const auto* col = raw.find(name);
    if (col == nullptr) throw ValidationError("build_design: unknown covariate column '" + name + "'");
    if (static_cast<Eigen::Index>(col->size()) != T) {
      throw ValidationError("build_design: covariate '" + name + "' has wrong length");
    }
    scalable.push_back(cols.size());
    names.push_back(name);
    cols.push_back(*col);
  }
  for (int k = 1; k <= spec.trend_order; ++k) {
    std::vector<double> c(static_cast<std::size_t>(T));
    for (Eigen::Index t = 1; t <= T; ++t) c[static_cast<std::size_t>(t - 1)] = std::pow(static_cast<double>(t), k);
    scalable.push_back(cols.size());
    names.push_back(k == 1 ? "trend" : "trend2");
    cols.push_back(std::move(c));
  }
  if (spec.seasonal) {
    for (int m = 1; m <= 11; ++m) {
      std::vector<double> c(static_cast<std::size_t>(T), 0.0);
      for (Eigen::Index t = 1; t <= T; ++t) {
        const int cal = static_cast<int>((spec.first_calendar_month - 1 + (t - 1)) % 12) + 1;
        if (cal == m) c[static_cast<std::size_t>(t - 1)] = 1.0;
      }
      names.push_back("month" + std::to_string(m));
      cols.push_back(std::move(c));
    }
  }

  if (spec.standardize) {
    for (std::size_t j : scalable) {
      auto& c = cols[j];
      double mean = 0.0;
      for (double v : c) mean += v;
      mean /= static_cast<double>(c.size());
      double ss = 0.0;
      for (double v : c) ss += (v - mean) * (v - mean);
      const double sd = c.size() > 1 ? std::sqrt(ss / static_cast<double>(c.size() - 1)) : 0.0;
      for (double& v : c) v = sd > 0.0 ? (v - mean) / sd : 0.0;
    }
  }

  DesignMatrix d;
  d.columns = std::move(names);
  d.standardized = spec.standardize;
  d.has_intercept = spec.variant == ModelVariant::BPM;
  d.rows = Eigen::MatrixXd(T, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const double v = cols[j][static_cast<std::size_t>(t)];
      if (!std::isfinite(v)) throw ValidationError("build_design: non-finite covariate value in '" + d.columns[j] + "'");
      d.rows(t, static_cast<Eigen::Index>(j)) = v;
    }
  }
  return d;
}

/// Ground truth of one simulated cohort.
struct SimTruth {
  double theta0 = 0.0;
  std::vector<double> theta;           // theta_1..theta_T
  std::vector<double> innovations;     // epsilon_t
  std::vector<double> shape_before;    // a_{t-1} used for epsilon_t
  Eigen::MatrixXd beta_path;           // T x p (rows identical for static models)
  double gamma = 0.5;
  CountSeries counts;
};

/// Simulates theta_t = theta_{t-1} eps_t / gamma with
/// eps_t ~ Beta(gamma a_{t-1}, (1-gamma) a_{t-1}) and
/// N_t ~ Pois(theta_t exp(beta_t' z_t)).
///
/// a_{t-1} is a filter quantity (a_t = gamma a_{t-1} + N_t, a_0 = a0), so
/// generation and filtering are interleaved month by month. `theta0_override`
/// replaces the Gamma(a0, b0) draw of theta_0.
inline SimTruth simulate_cohort(const ModelSpec& spec, const PriorConfig& priors, double true_gamma,
                                const Eigen::MatrixXd& beta_path, const DesignMatrix& design,
                                Eigen::Index T, RngStream& rng,
                                std::optional<double> theta0_override = std::nullopt) {
  priors.validate();
  if (!(true_gamma > 0.0 && true_gamma < 1.0)) {
    throw ValidationError("simulate_cohort: gamma must lie in (0,1)");
  }
  if (design.T() != T || beta_path.rows() != T || beta_path.cols() != design.p()) {
    throw ValidationError("simulate_cohort: design / coefficient dimensions do not match T");
  }
  if (spec.variant == ModelVariant::DM1 && design.p() != 0) {
    throw ValidationError("simulate_cohort: DM1 takes no covariates");
  }

  SimTruth out;
  out.gamma = true_gamma;
  out.beta_path = beta_path;
  out.theta0 = theta0_override ? *theta0_override : sample_gamma(priors.initial(), rng);
  if (!(out.theta0 >= 0.0)) throw ValidationError("simulate_cohort: theta0 must be nonnegative");

  const Eigen::VectorXd mult = design.multipliers_path(beta_path);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(T));
  out.theta.resize(static_cast<std::size_t>(T));
  out.innovations.resize(static_cast<std::size_t>(T));
  out.shape_before.resize(static_cast<std::size_t>(T));

  double theta = out.theta0;
  double shape = priors.a0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const auto i = static_cast<std::size_t>(t);
    const double eps = sample_beta({true_gamma * shape, (1.0 - true_gamma) * shape}, rng);
    out.innovations[i] = eps;
    out.shape_before[i] = shape;
    theta = theta * eps / true_gamma;
    out.theta[i] = theta;
    counts[i] = sample_poisson(theta * mult(t), rng);
    shape = true_gamma * shape + static_cast<double>(counts[i]);
  }
  out.counts = CountSeries::from_counts(std::move(counts));
  return out;
}

/// Static-coefficient convenience: the same beta every month.
inline SimTruth simulate_cohort(const ModelSpec& spec, const PriorConfig& priors, double true_gamma,
                                const Eigen::VectorXd& beta, const DesignMatrix& design,
                                Eigen::Index T, RngStream& rng,
                                std::optional<double> theta0_override = std::nullopt) {
  if (beta.size() != design.p()) throw ValidationError("simulate_cohort: beta dimension mismatch");
  Eigen::MatrixXd path = beta.transpose().replicate(T, 1);
  return simulate_cohort(spec, priors, true_gamma, path, design, T, rng, theta0_override);
}

/// Gaussian random walk beta_t = beta_{t-1} + N(0, 1/tau_i) per coefficient,
/// starting at `initial` for t = 1. tau may be +inf (frozen coefficient).
inline Eigen::MatrixXd simulate_dm5_coefficients(const Eigen::VectorXd& initial,
                                                 const Eigen::VectorXd& tau, Eigen::Index T,
                                                 RngStream& rng) {
  if (tau.size() != initial.size()) throw ValidationError("simulate_dm5_coefficients: tau dimension mismatch");
  if (T < 1) throw ValidationError("simulate_dm5_coefficients: T must be at least 1");
  for (Eigen::Index i = 0; i < tau.size(); ++i) {
    if (!(tau(i) > 0.0)) throw ValidationError("simulate_dm5_coefficients: tau must be positive");
  }
  Eigen::MatrixXd path(T, initial.size());
  path.row(0) = initial.transpose();
  for (Eigen::Index t = 1; t < T; ++t) {
    for (Eigen::Index i = 0; i < initial.size(); ++i) {
      const double sd = std::isinf(tau(i)) ? 0.0 : 1.0 / std::sqrt(tau(i));
      path(t, i) = path(t - 1, i) + sd * rng.normal();
    }
  }
  return path;
}

}  // namespace dynpois
