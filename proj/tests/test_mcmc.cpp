// Apache License, Version 2.0, refer to LICENSE.txt

#include "dynpois/mcmc.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace dynpois;

namespace {

CovariateTable ar_covariates(int T, int k, RngStream& rng) {
  CovariateTable c;
  for (int i = 0; i < k; ++i) {
    std::vector<double> x(static_cast<std::size_t>(T));
    x[0] = rng.normal();
    for (int t = 1; t < T; ++t) x[static_cast<std::size_t>(t)] = 0.5 * x[static_cast<std::size_t>(t - 1)] + 0.8 * rng.normal();
    c.add("x" + std::to_string(i + 1), x);
  }
  return c;
}

}  // namespace

TEST(Mode, GaussianTarget) {
  auto f = [](const Eigen::VectorXd& x) { return -0.5 * (x(0) - 3.0) * (x(0) - 3.0) / 4.0; };
  const ModeResult r = find_mode_and_hessian(f, Eigen::VectorXd::Zero(1));
  EXPECT_NEAR(r.mode(0), 3.0, 1e-4);
  EXPECT_NEAR(r.covariance(0, 0), 4.0, 1e-4);
}

TEST(Mode, GammaTarget) {
  auto f = [](const Eigen::VectorXd& x) { return x(0) > 0.0 ? log_pdf_gamma(x(0), {5.0, 2.0}) : kNegInf; };
  Eigen::VectorXd s(1);
  s << 1.0;
  EXPECT_NEAR(find_mode_and_hessian(f, s).mode(0), 2.0, 1e-4);
}

TEST(Mode, CorrelatedQuadratic) {
  Eigen::MatrixXd P(2, 2);
  P << 2.0, 0.9, 0.9, 1.0;
  Eigen::VectorXd mu(2);
  mu << -1.0, 4.0;
  auto f = [&](const Eigen::VectorXd& x) { return -0.5 * (x - mu).dot(P * (x - mu)); };
  const ModeResult r = find_mode_and_hessian(f, Eigen::VectorXd::Zero(2));
  EXPECT_NEAR((r.mode - mu).norm(), 0.0, 1e-4);
  EXPECT_NEAR((r.covariance - P.inverse()).norm(), 0.0, 1e-3);
}

TEST(Mode, NonFiniteStart) {
  auto f = [](const Eigen::VectorXd&) { return kNegInf; };
  EXPECT_THROW(find_mode_and_hessian(f, Eigen::VectorXd::Zero(1)), NumericError);
}

TEST(Metropolis, AcceptanceProbability) {
  EXPECT_EQ(mh_acceptance_probability(-3.0, -3.0 + std::log(2.0)), 1.0);
  EXPECT_NEAR(mh_acceptance_probability(0.0, std::log(0.25)), 0.25, 1e-15);
  EXPECT_EQ(mh_acceptance_probability(0.0, kNegInf), 0.0);
}

TEST(Metropolis, StandardNormal) {
  auto f = [](const Eigen::VectorXd& x) { return -0.5 * x.squaredNorm(); };
  RngStream rng(1, 1);
  const MhResult r = rw_metropolis(f, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 5.0),
                                   {101000, 1000, 1, 1.0, 1}, rng);
  ASSERT_EQ(r.draws.rows(), 100000);
  const double mean = r.draws.col(0).mean();
  const double var = (r.draws.col(0).array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 0.03);
  EXPECT_NEAR(var, 1.0, 0.03);
  EXPECT_GT(r.acceptance_rate, 0.2);
  EXPECT_LT(r.acceptance_rate, 0.7);
}

TEST(Metropolis, ThinningAndBurnIn) {
  auto f = [](const Eigen::VectorXd& x) { return -0.5 * x.squaredNorm(); };
  RngStream rng(1, 2);
  const MhResult r = rw_metropolis(f, Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), {1000, 100, 9, 1.0, 1}, rng);
  EXPECT_EQ(r.draws.rows(), 100);
  EXPECT_THROW(MhConfig({10, 10, 1, 1.0, 0}).validate(), ValidationError);
}

TEST(Metropolis, ZeroAcceptanceIsReported) {
  // proposals far outside the support are always rejected
  auto f = [](const Eigen::VectorXd& x) { return std::abs(x(0)) < 1e-6 ? 0.0 : kNegInf; };
  RngStream rng(1, 3);
  try {
    rw_metropolis(f, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1), {200, 0, 1, 1.0, 1}, rng);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("proposal_scale"), std::string::npos);
  }
}

TEST(Metropolis, RetryRescales) {
  auto f = [](const Eigen::VectorXd& x) { return -0.5 * x.squaredNorm() / 1e-4; };
  RngStream rng(2, 1);
  // far too wide a proposal: first run accepts rarely, retry halves the scale
  const MhResult r = rw_metropolis_with_retry(f, Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1),
                                              {2000, 100, 1, 1.0, 1}, rng);
  EXPECT_EQ(r.proposal_scale, 0.5);
}

TEST(Tau, FullConditional) {
  const std::vector<double> path{0.2, 0.5, 0.1};
  const GammaParams g = tau_full_conditional(path, 0.001, 0.002);
  EXPECT_EQ(g.shape, 0.001 + 1.0);
  EXPECT_EQ(g.rate, 0.002 + 0.5 * ((0.5 - 0.2) * (0.5 - 0.2) + (0.1 - 0.5) * (0.1 - 0.5)));
  const std::vector<double> flat(50, 0.7);
  const GammaParams h = tau_full_conditional(flat, 0.001, 0.001);
  EXPECT_EQ(h.rate, 0.001);
  EXPECT_GT(h.mean(), 1e4);
}

TEST(FitStatic, GridRouteForDm1) {
  RngStream rng(3, 1);
  PriorConfig p;
  p.gamma_prior = GammaPrior::discrete_grid(0.05);
  const CountSeries s = CountSeries::from_counts({3, 5, 2, 8, 4, 6, 9, 3});
  const PosteriorDraws d =
      fit_dm_static(s, DesignMatrix::empty(8), ModelSpec::for_variant(ModelVariant::DM1), p, {2000, 500, 1, 1.0, 3}, rng);
  EXPECT_EQ(d.S(), 1500);
  EXPECT_EQ(d.metadata.at("sampler"), "gamma_grid");
  EXPECT_TRUE(d.theta_paths.has_value());
  for (Eigen::Index j = 0; j < d.S(); ++j) {
    const double k = d.gamma(j) / 0.05;
    EXPECT_NEAR(k, std::round(k), 1e-9);
  }
  const double post_mean = std::stod(d.metadata.at("gamma_grid_posterior_mean"));
  EXPECT_NEAR(d.gamma.mean(), post_mean, 0.03);
}

TEST(FitStatic, RejectsGridWithCovariates) {
  RngStream rng(3, 2);
  const CovariateTable cov = ar_covariates(10, 1, rng);
  const ModelSpec spec = ModelSpec::for_variant(ModelVariant::DM2, cov.names);
  PriorConfig p;
  p.gamma_prior = GammaPrior::discrete_grid();
  EXPECT_THROW(fit_dm_static(CountSeries::from_counts(std::vector<std::int64_t>(10, 2)), build_design(cov, spec, 10), spec, p,
                             MhConfig{}, rng),
               ValidationError);
}

TEST(FitStatic, RecoversDm2) {
  RngStream rng(4, 1);
  const int T = 200;
  const CovariateTable cov = ar_covariates(T, 2, rng);
  const ModelSpec spec = ModelSpec::for_variant(ModelVariant::DM2, cov.names);
  const DesignMatrix d = build_design(cov, spec, T);
  PriorConfig gen;
  gen.a0 = 20.0;
  Eigen::VectorXd b(2);
  b << 0.6, -0.4;
  const SimTruth truth = simulate_cohort(spec, gen, 0.5, b, d, T, rng);
  const PosteriorDraws post = fit_dm_static(truth.counts, d, spec, gen, {6000, 1000, 1, 1.0, 4}, rng, {false, std::nullopt});
  EXPECT_NEAR(post.beta.col(0).mean(), 0.6, 0.1);
  EXPECT_NEAR(post.beta.col(1).mean(), -0.4, 0.1);
  EXPECT_NEAR(post.gamma.mean(), 0.5, 0.15);
  EXPECT_FALSE(post.theta_paths.has_value());
  const auto names = scalar_chains(post);
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0].first, "beta[x1]");
  EXPECT_EQ(names[2].first, "gamma");
}

TEST(FitStatic, GammaPriorRobustness) {
  RngStream rng(4, 3);
  const int T = 200;
  const CovariateTable cov = ar_covariates(T, 1, rng);
  const ModelSpec spec = ModelSpec::for_variant(ModelVariant::DM2, cov.names);
  const DesignMatrix d = build_design(cov, spec, T);
  PriorConfig gen;
  gen.a0 = 20.0;
  Eigen::VectorXd b(1);
  b << 0.5;
  const SimTruth truth = simulate_cohort(spec, gen, 0.5, b, d, T, rng);
  PriorConfig flat = gen, peaked = gen;
  flat.gamma_prior = GammaPrior::uniform();
  peaked.gamma_prior = GammaPrior::beta_prior();
  RngStream r1(11, 1), r2(11, 2);
  const PosteriorDraws p1 = fit_dm_static(truth.counts, d, spec, flat, {6000, 1000, 1, 1.0, 4}, r1, {false, std::nullopt});
  const PosteriorDraws p2 = fit_dm_static(truth.counts, d, spec, peaked, {6000, 1000, 1, 1.0, 4}, r2, {false, std::nullopt});
  EXPECT_NEAR(p1.gamma.mean(), p2.gamma.mean(), 0.05);
  EXPECT_NEAR(p1.beta.col(0).mean(), p2.beta.col(0).mean(), 0.05);
}

TEST(FitStatic, FixedGammaCarriesThrough) {
  RngStream rng(4, 2);
  const PosteriorDraws d = fit_dm_static(CountSeries::from_counts({1, 2, 3, 4}), DesignMatrix::empty(4),
                                         ModelSpec::for_variant(ModelVariant::DM1), PriorConfig{}, {100, 0, 1, 1.0, 0},
                                         rng, {true, 0.35});
  EXPECT_EQ(d.gamma.minCoeff(), 0.35);
  EXPECT_EQ(d.gamma.maxCoeff(), 0.35);
}

TEST(FitBpm, InterceptOnlyRecoversMean) {
  RngStream rng(5, 1);
  std::vector<std::int64_t> N(300);
  for (auto& n : N) n = sample_poisson(12.0, rng);
  const CountSeries s = CountSeries::from_counts(N);
  const DesignMatrix d = build_design({}, ModelSpec::for_variant(ModelVariant::BPM), 300);
  PriorConfig p;
  p.beta_prior_sd = 1e3;
  const PosteriorDraws post = fit_bpm(s, d, p, {4000, 1000, 1, 1.0, 5}, rng);
  double mean = 0.0;
  for (auto n : N) mean += static_cast<double>(n);
  mean /= 300.0;
  EXPECT_NEAR(std::exp(post.beta.col(0).mean()), mean, 0.05 * mean);
  EXPECT_FALSE(post.has_gamma());
  EXPECT_THROW(fit_bpm(s, DesignMatrix::empty(300), p, MhConfig{}, rng), ValidationError);
}

TEST(FitDm5, ConstantPathDrivesTauUp) {
  RngStream rng(6, 1);
  const int T = 80;
  const CovariateTable cov = ar_covariates(T, 1, rng);
  const ModelSpec spec = ModelSpec::for_variant(ModelVariant::DM5, cov.names);
  const DesignMatrix d = build_design(cov, spec, T);
  PriorConfig gen;
  gen.a0 = 20.0;
  Eigen::VectorXd b(1);
  b << 0.5;
  const SimTruth truth = simulate_cohort(spec, gen, 0.6, b, d, T, rng);
  const PosteriorDraws post = fit_dm5(truth.counts, d, gen, {6000, 2000, 4, 1.0, 6}, rng, {false, 1.0});
  EXPECT_EQ(post.S(), 1000);
  EXPECT_EQ(post.beta_paths.size(), 1000u);
  EXPECT_EQ(post.beta_paths.front().rows(), T);
  EXPECT_GT(post.tau.col(0).mean(), 100.0);
  EXPECT_NEAR(post.beta.col(0).mean(), 0.5, 0.2);
  EXPECT_EQ(scalar_chains(post)[0].first, "beta_mean[x1]");
  EXPECT_EQ(scalar_chains(post).back().first, "tau[x1]");
}

TEST(FitModel, EwmaHasNoPosterior) {
  RngStream rng(1, 1);
  EXPECT_THROW(fit_model(CountSeries::from_counts({1, 2}), DesignMatrix::empty(2), ModelSpec::for_variant(ModelVariant::EWMA),
                         PriorConfig{}, MhConfig{}, rng),
               ValidationError);
}

TEST(Summary, QuantileType7) {
  const std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(quantile(v, 0.0), 1.0);
  EXPECT_EQ(quantile(v, 1.0), 4.0);
  EXPECT_EQ(quantile(v, 0.25), 1.75);
  EXPECT_EQ(quantile(v, 0.5), 2.5);
  const ParameterSummary s = summarize("x", v);
  EXPECT_EQ(s.mean, 2.5);
  EXPECT_EQ(s.q75, 3.25);
  EXPECT_NEAR(s.sd, std::sqrt(5.0 / 3.0), 1e-15);
}

TEST(Diagnostics, IidDraws) {
  RngStream rng(7, 1);
  std::vector<double> v(20000);
  for (auto& x : v) x = rng.normal();
  const double ess = effective_sample_size(v);
  EXPECT_GT(ess, 15000.0);
  double mean = 0.0, c0 = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) c0 += (x - mean) * (x - mean);
  EXPECT_NEAR(autocorrelation(v, 1, mean, c0), 0.0, 0.03);
  EXPECT_EQ(autocorrelation(v, 0, mean, c0), 1.0);
}

TEST(Diagnostics, RepeatedDraws) {
  EXPECT_EQ(effective_sample_size(std::vector<double>(500, 2.0)), 1.0);
  std::vector<double> ar(20000);
  RngStream rng(7, 2);
  ar[0] = 0.0;
  for (std::size_t i = 1; i < ar.size(); ++i) ar[i] = 0.9 * ar[i - 1] + rng.normal();
  // AR(1) with phi = 0.9: ESS ~ S (1 - phi) / (1 + phi)
  EXPECT_NEAR(effective_sample_size(ar) / (20000.0 * 0.1 / 1.9), 1.0, 0.25);
}

TEST(Diagnostics, PerParameter) {
  PosteriorDraws d;
  d.beta_names = {"x"};
  d.beta = Eigen::MatrixXd::Zero(100, 1);
  RngStream rng(7, 3);
  for (Eigen::Index j = 0; j < 100; ++j) d.beta(j, 0) = rng.normal();
  d.gamma = Eigen::VectorXd::Constant(100, 0.4);
  const ChainDiagnostics c = diagnostics(d);
  ASSERT_EQ(c.parameters.size(), 2u);
  EXPECT_EQ(c.parameters[0].autocorrelation.size(), 51u);
  EXPECT_EQ(c.parameters[1].ess, 1.0);
}
