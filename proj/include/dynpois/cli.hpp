// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/evaluation.hpp"
#include "dynpois/io.hpp"
#include "dynpois/mcmc.hpp"
#include "dynpois/model.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace dynpois {

struct CommandResult {
  int exit_code = 0;
  std::string error_json;           // empty on success
  std::vector<std::string> files;   // written, relative to the output directory
};

namespace cli_detail {

struct Args {
  std::string command;
  std::optional<std::string> config;
  std::optional<std::string> data;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> model;
};

inline std::vector<std::string> data_covariate_names(const CovariateTable& t) { return t.names; }

/// Config file, then --seed and --model; fills data-dependent defaults.
inline RunConfig resolve(const Args& a, const CovariateTable* data_covariates) {
  RunConfig c = a.config ? load_run_config(*a.config) : RunConfig{};
  if (!a.seed) throw ValidationError("--seed is required");
  c.seed = *a.seed;
  if (a.model) {
    const ModelVariant v = parse_variant(*a.model);
    if (v != c.model.variant) {
      ModelSpec s = ModelSpec::for_variant(v, c.model.covariates);
      s.standardize = c.model.standardize;
      s.first_calendar_month = c.model.first_calendar_month;
      c.model = s;
    }
  }
  const ModelVariant v = c.model.variant;
  const bool takes_covariates = v != ModelVariant::DM1 && v != ModelVariant::EWMA;
  if (takes_covariates && !c.covariates_given && c.model.covariates.empty()) {
    if (data_covariates) {
      c.model.covariates = data_covariate_names(*data_covariates);
    } else if (a.command == "simulate") {
      if (c.simulate.beta.empty()) c.simulate.beta = {0.5, -0.5};
      for (std::size_t i = 0; i < c.simulate.beta.size(); ++i) c.model.covariates.push_back("x" + std::to_string(i + 1));
    }
  }
  if (!takes_covariates) c.model.covariates.clear();
  if (!c.gamma_prior_given) {
    c.priors.gamma_prior = v == ModelVariant::DM1 ? GammaPrior::discrete_grid(0.01) : GammaPrior::uniform();
  }
  c.model.validate();
  c.priors.validate();
  for (MhConfig* m : {&c.mcmc, &c.mcmc_dm5, &c.forecast_mcmc, &c.forecast_mcmc_dm5}) {
    m->seed = c.seed;
    m->validate();
  }
  return c;
}

inline CohortData load_data(const Args& a) {
  if (!a.data) throw ValidationError("--data is required for '" + a.command + "'");
  return ingest_csv(*a.data);
}

class Output {
 public:
  explicit Output(const std::string& dir) : dir_(dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir_.string() + "': " + ec.message());
  }
  void text(const std::string& name, const std::string& body) {
    write_text(dir_ / name, body);
    files.push_back(name);
  }
  void json_file(const std::string& name, const json& j) {
    write_json(dir_ / name, j);
    files.push_back(name);
  }
  std::vector<std::string> files;

 private:
  std::filesystem::path dir_;
};

inline PriorConfig fit_priors(const RunConfig& c) {
  PriorConfig p = c.priors;
  if (c.model.variant != ModelVariant::DM1 && p.gamma_prior.kind == GammaPrior::Kind::DiscreteGrid) {
    throw ValidationError("the discrete gamma grid prior is only available for DM1");
  }
  return p;
}

// -- simulate ---------------------------------------------------------------

inline void cmd_simulate(const RunConfig& c, Output& out) {
  const ModelVariant v = c.model.variant;
  if (v == ModelVariant::BPM || v == ModelVariant::EWMA) {
    throw ValidationError("simulate supports DM1 to DM5 only");
  }
  const SimulateConfig& s = c.simulate;
  if (s.T < 1) throw ValidationError("simulate: T must be at least 1");
  if (!(s.covariate_ar > -1.0 && s.covariate_ar < 1.0)) throw ValidationError("simulate: covariate_ar must lie in (-1,1)");
  const std::size_t k = c.model.covariates.size();
  if (s.beta.size() != k) {
    throw ValidationError("simulate: beta has " + std::to_string(s.beta.size()) + " entries for " +
                          std::to_string(k) + " covariates");
  }
  RngStream root(c.seed, 0);
  RngStream cov_rng = root.split(1);
  RngStream coef_rng = root.split(2);
  RngStream sim_rng = root.split(3);

  const Eigen::Index T = s.T;
  CovariateTable table;
  const double phi = s.covariate_ar;
  for (const auto& name : c.model.covariates) {
    std::vector<double> x(static_cast<std::size_t>(T));
    x[0] = cov_rng.normal();
    for (std::size_t t = 1; t < x.size(); ++t) x[t] = phi * x[t - 1] + std::sqrt(1.0 - phi * phi) * cov_rng.normal();
    table.add(name, std::move(x));
  }
  const DesignMatrix design = build_design(table, c.model, T);
  const Eigen::Index p = design.p();
  Eigen::VectorXd start = Eigen::VectorXd::Zero(p);
  for (std::size_t i = 0; i < k; ++i) start(static_cast<Eigen::Index>(i)) = s.beta[i];

  Eigen::MatrixXd path = start.transpose().replicate(T, 1);
  if (v == ModelVariant::DM5) {
    if (s.beta_end) {
      if (s.beta_end->size() != k) throw ValidationError("simulate: beta_end must match beta");
      for (Eigen::Index t = 0; t < T; ++t) {
        const double w = T > 1 ? static_cast<double>(t) / static_cast<double>(T - 1) : 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          path(t, static_cast<Eigen::Index>(i)) = (1.0 - w) * s.beta[i] + w * (*s.beta_end)[i];
        }
      }
    } else if (s.tau) {
      if (s.tau->size() != k) throw ValidationError("simulate: tau must match beta");
      Eigen::VectorXd tau = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < k; ++i) tau(static_cast<Eigen::Index>(i)) = (*s.tau)[i];
      path = simulate_dm5_coefficients(start, tau, T, coef_rng);
    }
  } else if (s.beta_end || s.tau) {
    throw ValidationError("simulate: beta_end and tau apply to DM5 only");
  }
  PriorConfig gen = c.priors;
  gen.a0 = s.a0;
  gen.b0 = s.b0;
  const SimTruth truth = simulate_cohort(c.model, gen, s.gamma, path, design, T, sim_rng, s.theta0);

  out.text("cohort.csv", cohort_csv(truth.counts, table));
  json beta_path = json::array();
  for (Eigen::Index t = 0; t < T; ++t) {
    json row = json::array();
    for (Eigen::Index i = 0; i < p; ++i) row.push_back(path(t, i));
    beta_path.push_back(row);
  }
  json truth_j{{"model", to_string(v)},
               {"T", T},
               {"gamma", truth.gamma},
               {"theta0", truth.theta0},
               {"theta", truth.theta},
               {"columns", design.columns},
               {"beta", std::vector<double>(start.data(), start.data() + start.size())},
               {"counts", truth.counts.counts}};
  if (v == ModelVariant::DM5) truth_j["beta_path"] = beta_path;
  out.json_file("truth.json", truth_j);
}

// -- fit / report -----------------------------------------------------------

struct FitBundle {
  CohortData data;
  DesignMatrix design;
  PriorConfig priors;
  PosteriorDraws draws;
};

inline FitBundle run_fit(const RunConfig& c, const Args& a) {
  if (c.model.variant == ModelVariant::EWMA) throw ValidationError("EWMA has no posterior; use 'forecast'");
  FitBundle b{load_data(a), {}, fit_priors(c), {}};
  b.design = build_design(b.data.covariates, c.model, static_cast<Eigen::Index>(b.data.series.size()));
  RngStream rng(c.seed, 1);
  b.draws = fit_model(b.data.series, b.design, c.model, b.priors, c.fit_config(), rng, true);
  return b;
}

inline void cmd_fit(const RunConfig& c, const Args& a, Output& out) {
  const FitBundle b = run_fit(c, a);
  const auto summary = summarize_posterior(b.draws);
  out.text("summary.csv", summary_csv(summary));
  json sj = summary_json(b.draws, summary);
  {
    const ModelScore score = score_model(b.draws, b.data.series, b.design, b.priors);
    sj["log_marginal_likelihood"] = json_number(score.log_marginal_likelihood);
    sj["log_cpo"] = json_number(score.log_cpo);
  }
  out.json_file("summary.json", sj);
  out.text("fit.csv", fit_csv(b.data.series, *b.draws.theta_paths));
  out.text("diagnostics.csv", diagnostics_csv(diagnostics(b.draws)));
  if (b.draws.dynamic_coefficients()) {
    std::vector<std::string> header{"t"};
    for (const auto& n : b.draws.beta_names) {
      header.push_back(n + "_mean");
      header.push_back(n + "_q2.5");
      header.push_back(n + "_q97.5");
    }
    CsvWriter w(header);
    const auto T = b.design.T();
    const auto S = static_cast<Eigen::Index>(b.draws.beta_paths.size());
    std::vector<std::vector<std::array<double, 3>>> bands;
    for (Eigen::Index i = 0; i < b.design.p(); ++i) {
      Eigen::MatrixXd m(S, T);
      for (Eigen::Index j = 0; j < S; ++j) m.row(j) = b.draws.beta_paths[static_cast<std::size_t>(j)].col(i).transpose();
      bands.push_back(band(m));
    }
    for (Eigen::Index t = 0; t < T; ++t) {
      std::vector<std::string> r{std::to_string(t + 1)};
      for (const auto& bd : bands) {
        for (double v : bd[static_cast<std::size_t>(t)]) r.push_back(format_double(v));
      }
      w.row(r);
    }
    out.text("beta_path.csv", w.str());
  }
}

inline void cmd_report(const RunConfig& c, const Args& a, Output& out) {
  const FitBundle b = run_fit(c, a);
  const PosteriorDraws& d = b.draws;
  const Eigen::MatrixXd& theta = *d.theta_paths;
  const Eigen::Index S = theta.rows();
  const Eigen::Index T = theta.cols();

  // Expected count lambda_t = theta_t exp(beta_t' z_t) per draw.
  Eigen::MatrixXd lambda = theta;
  if (d.variant != ModelVariant::BPM && b.design.p() > 0) {
    for (Eigen::Index j = 0; j < S; ++j) {
      const Eigen::VectorXd m = d.dynamic_coefficients()
                                    ? b.design.multipliers_path(d.beta_paths[static_cast<std::size_t>(j)])
                                    : b.design.multipliers(d.beta.row(j).transpose());
      lambda.row(j) = lambda.row(j).cwiseProduct(m.transpose());
    }
  }
  {
    CsvWriter w({"t", "observed", "expected_mean", "expected_q2.5", "expected_q97.5"});
    const auto bd = band(lambda);
    for (Eigen::Index t = 0; t < T; ++t) {
      const auto i = static_cast<std::size_t>(t);
      w.row({std::to_string(t + 1), std::to_string(b.data.series.counts[i]), format_double(bd[i][0]),
             format_double(bd[i][1]), format_double(bd[i][2])});
    }
    out.text("overlay.csv", w.str());
  }
  {
    CsvWriter w({"t", "q2.5", "q25", "median", "q75", "q97.5"});
    for (Eigen::Index t = 0; t < T; ++t) {
      std::vector<double> col(theta.col(t).data(), theta.col(t).data() + S);
      std::vector<std::string> r{std::to_string(t + 1)};
      for (double q : {0.025, 0.25, 0.5, 0.75, 0.975}) r.push_back(format_double(quantile(col, q)));
      w.row(r);
    }
    out.text("theta_boxplot.csv", w.str());
  }
  const auto chains = scalar_chains(d);
  {
    std::vector<std::string> header{"iteration"};
    for (const auto& ch : chains) header.push_back(ch.first);
    CsvWriter w(header);
    for (Eigen::Index j = 0; j < S; ++j) {
      std::vector<std::string> r{std::to_string(j + 1)};
      for (const auto& ch : chains) r.push_back(format_double(ch.second[static_cast<std::size_t>(j)]));
      w.row(r);
    }
    out.text("trace.csv", w.str());
  }
  {
    const ChainDiagnostics diag = diagnostics(d);
    std::vector<std::string> header{"lag"};
    std::size_t K = 0;
    for (const auto& p : diag.parameters) {
      header.push_back(p.name);
      K = std::max(K, p.autocorrelation.size());
    }
    CsvWriter w(header);
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::string> r{std::to_string(k)};
      for (const auto& p : diag.parameters) {
        r.push_back(k < p.autocorrelation.size() ? format_double(p.autocorrelation[k]) : "NA");
      }
      w.row(r);
    }
    out.text("acf.csv", w.str());
  }
}

// -- forecast / compare -----------------------------------------------------

inline void cmd_forecast(const RunConfig& c, const Args& a, Output& out) {
  const CohortData data = load_data(a);
  const auto T = data.series.size();
  ForecastWindow w = c.window.value_or(ForecastWindow{std::max(2, static_cast<int>(T) - 9), static_cast<int>(T)});
  if (w.start_origin < 2) throw ValidationError("forecast window: start origin must be at least 2");
  ForecastReport r;
  if (c.model.variant == ModelVariant::EWMA) {
    r = w.empty() ? ForecastReport{} : ewma_forecast(data.series, w);
    r.model = "EWMA";
  } else {
    const DesignMatrix design = build_design(data.covariates, c.model, static_cast<Eigen::Index>(T));
    const PriorConfig pr = fit_priors(c);
    if (w.empty()) {
      r.model = to_string(c.model.variant);
    } else {
      r = sequential_harness(data.series, design, c.model, pr, c.harness_config(), w);
    }
  }
  out.text("forecast.csv", forecast_csv(r));
  json j = forecast_json(r);
  j["start_origin"] = w.start_origin;
  j["end_origin"] = w.end_origin;
  out.json_file("summary.json", j);
}

inline void cmd_compare(const RunConfig& c, const Args& a, Output& out) {
  const CohortData data = load_data(a);
  std::vector<std::string> names = c.compare_models;
  if (names.empty()) {
    names = {"DM1"};
    if (!data.covariates.names.empty()) names.push_back("DM2");
  }
  std::vector<ModelSpec> roster;
  for (const auto& n : names) {
    const ModelVariant v = parse_variant(n);
    ModelSpec s = ModelSpec::for_variant(v, c.covariates_given ? c.model.covariates : data.covariates.names);
    s.standardize = c.model.standardize;
    s.first_calendar_month = c.model.first_calendar_month;
    s.validate();
    roster.push_back(s);
  }
  PriorConfig pr = c.priors;
  if (!c.gamma_prior_given) pr.gamma_prior = GammaPrior::uniform();
  const ComparisonReport rep = compare_models(data.series, data.covariates, roster, pr, c.mcmc, c.mcmc_dm5);
  out.json_file("comparison.json", comparison_json(rep));
}

inline json error_json(const std::string& kind, int code, const std::string& message) {
  return json{{"error", json{{"kind", kind}, {"exit_code", code}, {"message", message}}}};
}

}  // namespace cli_detail

/// Parses argv (argv[0] is the program name), runs one subcommand and writes
/// its artifacts. Never throws; failures produce an exit code and error JSON.
inline CommandResult run_command(const std::vector<std::string>& argv) {
  using namespace cli_detail;
  CommandResult res;
  Args a;
  CLI::App app{"Bayesian dynamic Poisson models for monthly default counts", "dynpois"};
  app.require_subcommand(1, 1);
  auto add_common = [&](CLI::App* sub, bool needs_data) {
    sub->add_option("--config", a.config, "JSON run configuration");
    auto* d = sub->add_option("--data", a.data, "input CSV (month_index, count, covariates...)");
    if (needs_data) d->required();
    sub->add_option("--out", a.out, "output directory")->capture_default_str();
    sub->add_option("--seed", a.seed, "random seed (required)")->required();
    sub->add_option("--model", a.model, "DM1|DM2|DM3|DM4|DM5|BPM|EWMA");
  };
  add_common(app.add_subcommand("simulate", "simulate a synthetic cohort"), false);
  add_common(app.add_subcommand("fit", "posterior summary, smoothed rates and diagnostics"), true);
  add_common(app.add_subcommand("forecast", "sequential one-month-ahead forecasts"), true);
  add_common(app.add_subcommand("compare", "log marginal likelihood, log CPO and Bayes factors"), true);
  add_common(app.add_subcommand("report", "plot-ready CSV tables"), true);

  std::vector<std::string> rev(argv.rbegin(), argv.rend());
  if (!rev.empty()) rev.pop_back();
  try {
    try {
      app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
      std::cout << app.help();
      return res;
    } catch (const CLI::ParseError& e) {
      throw ValidationError(std::string("arguments: ") + e.what());
    }
    a.command = app.get_subcommands().front()->get_name();
    std::optional<CohortData> peek;
    if (a.data && a.command != "simulate") peek = ingest_csv(*a.data);
    const RunConfig cfg = resolve(a, peek ? &peek->covariates : nullptr);
    Output out(a.out);
    out.json_file("resolved_config.json", resolved_config_json(cfg));
    if (a.command == "simulate") cmd_simulate(cfg, out);
    else if (a.command == "fit") cmd_fit(cfg, a, out);
    else if (a.command == "forecast") cmd_forecast(cfg, a, out);
    else if (a.command == "compare") cmd_compare(cfg, a, out);
    else if (a.command == "report") cmd_report(cfg, a, out);
    res.files = out.files;
  } catch (const ValidationError& e) {
    res.exit_code = 2;
    res.error_json = error_json("validation", 2, e.what()).dump();
  } catch (const std::domain_error& e) {
    res.exit_code = 2;
    res.error_json = error_json("validation", 2, e.what()).dump();
  } catch (const NumericError& e) {
    res.exit_code = 3;
    res.error_json = error_json("numeric", 3, e.what()).dump();
  } catch (const IoError& e) {
    res.exit_code = 4;
    res.error_json = error_json("io", 4, e.what()).dump();
  } catch (const std::filesystem::filesystem_error& e) {
    res.exit_code = 4;
    res.error_json = error_json("io", 4, e.what()).dump();
  } catch (const std::exception& e) {
    res.exit_code = 3;
    res.error_json = error_json("numeric", 3, e.what()).dump();
  }
  return res;
}

}  // namespace dynpois
