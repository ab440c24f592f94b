// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include "dynpois/evaluation.hpp"
#include "dynpois/mcmc.hpp"
#include "dynpois/model.hpp"

#include "json.hpp"

#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace dynpois {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Number formatting

/// 17 significant digits; NaN as "NA".
inline std::string format_double(double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json json_number(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

// ---------------------------------------------------------------------------
// CSV input

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return out;
}

inline bool parse_int64(const std::string& s, std::int64_t& v) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  return ec == std::errc() && ptr == last && first != last;
}

inline bool parse_double(const std::string& s, double& v) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  return ec == std::errc() && ptr == last && first != last;
}

inline std::string row_label(std::size_t data_row) {
  return "data row " + std::to_string(data_row) + " (line " + std::to_string(data_row + 1) + ")";
}

}  // namespace detail

struct CohortData {
  CountSeries series;
  CovariateTable covariates;
};

/// Parses a header + rows CSV with `month_index` and `count`; every other
/// column is a numeric covariate.
inline CohortData parse_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("csv: empty input");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_csv_line(line);
  int month_col = -1, count_col = -1;
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j].empty()) throw ValidationError("csv: empty column name in header");
    for (std::size_t k = 0; k < j; ++k) {
      if (header[k] == header[j]) throw ValidationError("csv: duplicate column '" + header[j] + "'");
    }
    if (header[j] == "month_index") month_col = static_cast<int>(j);
    if (header[j] == "count") count_col = static_cast<int>(j);
  }
  if (month_col < 0) throw ValidationError("csv: missing required column 'month_index'");
  if (count_col < 0) throw ValidationError("csv: missing required column 'count'");

  CohortData d;
  std::vector<std::vector<double>> cov(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ++row;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw ValidationError("csv: " + detail::row_label(row) + " has " + std::to_string(cells.size()) +
                            " fields, expected " + std::to_string(header.size()));
    }
    std::int64_t month = 0;
    if (!detail::parse_int64(cells[static_cast<std::size_t>(month_col)], month)) {
      throw ValidationError("csv: " + detail::row_label(row) + ": month_index '" +
                            cells[static_cast<std::size_t>(month_col)] + "' is not an integer");
    }
    const std::int64_t expected = static_cast<std::int64_t>(row);
    if (month != expected) {
      throw ValidationError("csv: " + detail::row_label(row) + ": month_index " + std::to_string(month) +
                            " breaks the consecutive sequence (expected " + std::to_string(expected) + ")");
    }
    std::int64_t count = 0;
    const std::string& cs = cells[static_cast<std::size_t>(count_col)];
    if (!detail::parse_int64(cs, count)) {
      throw ValidationError("csv: " + detail::row_label(row) + ": count '" + cs + "' is not an integer");
    }
    if (count < 0) {
      throw ValidationError("csv: " + detail::row_label(row) + ": count " + std::to_string(count) + " is negative");
    }
    d.series.months.push_back(static_cast<int>(month));
    d.series.counts.push_back(count);
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (static_cast<int>(j) == month_col || static_cast<int>(j) == count_col) continue;
      double v = 0.0;
      if (!detail::parse_double(cells[j], v) || !std::isfinite(v)) {
        throw ValidationError("csv: " + detail::row_label(row) + ": covariate '" + header[j] + "' value '" +
                              cells[j] + "' is not a finite number");
      }
      cov[j].push_back(v);
    }
  }
  if (row == 0) throw ValidationError("csv: no data rows");
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (static_cast<int>(j) == month_col || static_cast<int>(j) == count_col) continue;
    d.covariates.add(header[j], std::move(cov[j]));
  }
  d.series.validate();
  return d;
}

inline CohortData ingest_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return parse_csv(in);
}

// ---------------------------------------------------------------------------
// CSV / JSON output

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) { row(header); }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) buf_ << ',';
      buf_ << cells[i];
    }
    buf_ << '\n';
  }

  std::string str() const { return buf_.str(); }

 private:
  std::ostringstream buf_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Writes a cohort in the ingestion schema.
inline std::string cohort_csv(const CountSeries& series, const CovariateTable& cov) {
  std::vector<std::string> header{"month_index", "count"};
  for (const auto& n : cov.names) header.push_back(n);
  CsvWriter w(header);
  for (std::size_t t = 0; t < series.size(); ++t) {
    std::vector<std::string> r{std::to_string(series.months[t]), std::to_string(series.counts[t])};
    for (const auto& c : cov.columns) r.push_back(format_double(c[t]));
    w.row(r);
  }
  return w.str();
}

// ---------------------------------------------------------------------------
// Run configuration

struct SimulateConfig {
  int T = 150;
  double gamma = 0.5;
  std::vector<double> beta;                      // one per named covariate
  std::optional<std::vector<double>> beta_end;   // DM5: linear drift to these values
  std::optional<std::vector<double>> tau;        // DM5: random walk precision
  std::optional<double> theta0;
  double a0 = 20.0;                              // generating Gamma(a0, b0) for theta_0 and a_0
  double b0 = 1.0;
  double covariate_ar = 0.5;                     // AR(1) coefficient of generated covariates
};

struct RunConfig {
  ModelSpec model;
  bool covariates_given = false;
  PriorConfig priors;
  bool gamma_prior_given = false;
  MhConfig mcmc;
  MhConfig mcmc_dm5 = MhConfig::dm5_defaults();
  MhConfig forecast_mcmc{4000, 1000, 1, 1.0, 0};
  MhConfig forecast_mcmc_dm5{20000, 10000, 10, 1.0, 0};
  std::optional<ForecastWindow> window;
  std::vector<std::string> compare_models;
  SimulateConfig simulate;
  std::uint64_t seed = 0;

  const MhConfig& fit_config() const { return model.variant == ModelVariant::DM5 ? mcmc_dm5 : mcmc; }
  const MhConfig& harness_config() const {
    return model.variant == ModelVariant::DM5 ? forecast_mcmc_dm5 : forecast_mcmc;
  }
};

namespace detail {

template <class F>
void for_keys(const json& obj, const char* section, std::initializer_list<const char*> allowed, F&& f) {
  if (!obj.is_object()) throw ValidationError(std::string("config: '") + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ValidationError(std::string("config: unknown key '") + it.key() + "' in '" + section + "'");
    f(it.key(), it.value());
  }
}

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: key '" + key + "' has the wrong type");
  }
}

inline MhConfig parse_mh(const json& j, const char* section, MhConfig base) {
  for_keys(j, section, {"iterations", "burn_in", "thinning", "proposal_scale"}, [&](const std::string& k, const json& v) {
    if (k == "iterations") base.iterations = get_as<int>(v, k);
    if (k == "burn_in") base.burn_in = get_as<int>(v, k);
    if (k == "thinning") base.thinning = get_as<int>(v, k);
    if (k == "proposal_scale") base.proposal_scale = get_as<double>(v, k);
  });
  return base;
}

inline json mh_json(const MhConfig& c) {
  return json{{"iterations", c.iterations}, {"burn_in", c.burn_in}, {"thinning", c.thinning},
              {"proposal_scale", c.proposal_scale}};
}

inline GammaPrior::Kind parse_gamma_kind(const std::string& s) {
  if (s == "discrete_grid") return GammaPrior::Kind::DiscreteGrid;
  if (s == "uniform") return GammaPrior::Kind::Uniform;
  if (s == "beta") return GammaPrior::Kind::Beta;
  throw ValidationError("config: gamma prior kind must be one of discrete_grid, uniform, beta");
}

}  // namespace detail

/// Parses a JSON config; unknown keys are rejected. The variant may be
/// overridden afterwards by the caller.
inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  if (j.is_null()) return c;
  ModelVariant variant = ModelVariant::DM1;
  std::optional<std::vector<std::string>> covariates;
  std::optional<int> trend;
  std::optional<bool> seasonal;
  detail::for_keys(j, "config",
                   {"model", "priors", "mcmc", "mcmc_dm5", "forecast", "compare", "simulate", "seed"},
                   [&](const std::string& k, const json& v) {
    if (k == "seed") c.seed = detail::get_as<std::uint64_t>(v, k);
    if (k == "model") {
      detail::for_keys(v, "model", {"variant", "covariates", "trend_order", "seasonal", "standardize", "first_calendar_month"},
                       [&](const std::string& mk, const json& mv) {
        if (mk == "variant") variant = parse_variant(detail::get_as<std::string>(mv, mk));
        if (mk == "covariates") covariates = detail::get_as<std::vector<std::string>>(mv, mk);
        if (mk == "trend_order") trend = detail::get_as<int>(mv, mk);
        if (mk == "seasonal") seasonal = detail::get_as<bool>(mv, mk);
        if (mk == "standardize") c.model.standardize = detail::get_as<bool>(mv, mk);
        if (mk == "first_calendar_month") c.model.first_calendar_month = detail::get_as<int>(mv, mk);
      });
    }
    if (k == "priors") {
      detail::for_keys(v, "priors", {"a0", "b0", "gamma_prior", "beta_prior_sd", "tau_a", "tau_b"},
                       [&](const std::string& pk, const json& pv) {
        if (pk == "a0") c.priors.a0 = detail::get_as<double>(pv, pk);
        if (pk == "b0") c.priors.b0 = detail::get_as<double>(pv, pk);
        if (pk == "beta_prior_sd") c.priors.beta_prior_sd = detail::get_as<double>(pv, pk);
        if (pk == "tau_a") c.priors.tau_a = detail::get_as<double>(pv, pk);
        if (pk == "tau_b") c.priors.tau_b = detail::get_as<double>(pv, pk);
        if (pk == "gamma_prior") {
          c.gamma_prior_given = true;
          detail::for_keys(pv, "gamma_prior", {"kind", "grid_step", "alpha", "beta"},
                           [&](const std::string& gk, const json& gv) {
            if (gk == "kind") c.priors.gamma_prior.kind = detail::parse_gamma_kind(detail::get_as<std::string>(gv, gk));
            if (gk == "grid_step") c.priors.gamma_prior.grid_step = detail::get_as<double>(gv, gk);
            if (gk == "alpha") c.priors.gamma_prior.alpha = detail::get_as<double>(gv, gk);
            if (gk == "beta") c.priors.gamma_prior.beta = detail::get_as<double>(gv, gk);
          });
        }
      });
    }
    if (k == "mcmc") c.mcmc = detail::parse_mh(v, "mcmc", c.mcmc);
    if (k == "mcmc_dm5") c.mcmc_dm5 = detail::parse_mh(v, "mcmc_dm5", c.mcmc_dm5);
    if (k == "forecast") {
      detail::for_keys(v, "forecast", {"start_origin", "end_origin", "mcmc", "mcmc_dm5"},
                       [&](const std::string& fk, const json& fv) {
        if (fk == "start_origin" || fk == "end_origin") {
          if (!c.window) c.window = ForecastWindow{};
          if (fk == "start_origin") c.window->start_origin = detail::get_as<int>(fv, fk);
          else c.window->end_origin = detail::get_as<int>(fv, fk);
        }
        if (fk == "mcmc") c.forecast_mcmc = detail::parse_mh(fv, "forecast.mcmc", c.forecast_mcmc);
        if (fk == "mcmc_dm5") c.forecast_mcmc_dm5 = detail::parse_mh(fv, "forecast.mcmc_dm5", c.forecast_mcmc_dm5);
      });
      if (c.window && (!v.contains("start_origin") || !v.contains("end_origin"))) {
        throw ValidationError("config: forecast window needs both start_origin and end_origin");
      }
    }
    if (k == "compare") {
      detail::for_keys(v, "compare", {"models"}, [&](const std::string& ck, const json& cv) {
        c.compare_models = detail::get_as<std::vector<std::string>>(cv, ck);
      });
    }
    if (k == "simulate") {
      detail::for_keys(v, "simulate", {"T", "gamma", "beta", "beta_end", "tau", "theta0", "a0", "b0", "covariate_ar"},
                       [&](const std::string& sk, const json& sv) {
        SimulateConfig& s = c.simulate;
        if (sk == "T") s.T = detail::get_as<int>(sv, sk);
        if (sk == "gamma") s.gamma = detail::get_as<double>(sv, sk);
        if (sk == "beta") s.beta = detail::get_as<std::vector<double>>(sv, sk);
        if (sk == "beta_end") s.beta_end = detail::get_as<std::vector<double>>(sv, sk);
        if (sk == "tau") s.tau = detail::get_as<std::vector<double>>(sv, sk);
        if (sk == "theta0") s.theta0 = detail::get_as<double>(sv, sk);
        if (sk == "a0") s.a0 = detail::get_as<double>(sv, sk);
        if (sk == "b0") s.b0 = detail::get_as<double>(sv, sk);
        if (sk == "covariate_ar") s.covariate_ar = detail::get_as<double>(sv, sk);
      });
    }
  });
  c.model = [&] {
    ModelSpec s = ModelSpec::for_variant(variant, covariates.value_or(std::vector<std::string>{}));
    s.standardize = c.model.standardize;
    s.first_calendar_month = c.model.first_calendar_month;
    if (trend) s.trend_order = *trend;
    if (seasonal) s.seasonal = *seasonal;
    return s;
  }();
  c.covariates_given = covariates.has_value();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline json gamma_prior_json(const GammaPrior& g) {
  json j{{"kind", to_string(g.kind)}};
  if (g.kind == GammaPrior::Kind::DiscreteGrid) j["grid_step"] = g.grid_step;
  if (g.kind == GammaPrior::Kind::Beta) {
    j["alpha"] = g.alpha;
    j["beta"] = g.beta;
  }
  return j;
}

/// Every field, defaults included.
inline json resolved_config_json(const RunConfig& c) {
  json model{{"variant", to_string(c.model.variant)},
             {"covariates", c.model.covariates},
             {"trend_order", c.model.trend_order},
             {"seasonal", c.model.seasonal},
             {"standardize", c.model.standardize},
             {"first_calendar_month", c.model.first_calendar_month}};
  json priors{{"a0", c.priors.a0},
              {"b0", c.priors.b0},
              {"gamma_prior", gamma_prior_json(c.priors.gamma_prior)},
              {"beta_prior_sd", c.priors.beta_prior_sd},
              {"tau_a", c.priors.tau_a},
              {"tau_b", c.priors.tau_b}};
  json forecast{{"mcmc", detail::mh_json(c.forecast_mcmc)}, {"mcmc_dm5", detail::mh_json(c.forecast_mcmc_dm5)}};
  if (c.window) {
    forecast["start_origin"] = c.window->start_origin;
    forecast["end_origin"] = c.window->end_origin;
  }
  json sim{{"T", c.simulate.T}, {"gamma", c.simulate.gamma}, {"beta", c.simulate.beta},
           {"a0", c.simulate.a0}, {"b0", c.simulate.b0},
           {"covariate_ar", c.simulate.covariate_ar}};
  sim["beta_end"] = c.simulate.beta_end ? json(*c.simulate.beta_end) : json(nullptr);
  sim["tau"] = c.simulate.tau ? json(*c.simulate.tau) : json(nullptr);
  sim["theta0"] = c.simulate.theta0 ? json(*c.simulate.theta0) : json(nullptr);
  return json{{"seed", c.seed},
              {"model", model},
              {"priors", priors},
              {"mcmc", detail::mh_json(c.mcmc)},
              {"mcmc_dm5", detail::mh_json(c.mcmc_dm5)},
              {"forecast", forecast},
              {"compare", json{{"models", c.compare_models}}},
              {"simulate", sim}};
}

// ---------------------------------------------------------------------------
// Report tables

inline std::string summary_csv(const std::vector<ParameterSummary>& rows) {
  CsvWriter w({"parameter", "q25", "mean", "q75", "sd"});
  for (const auto& r : rows) {
    w.row({r.name, format_double(r.q25), format_double(r.mean), format_double(r.q75), format_double(r.sd)});
  }
  return w.str();
}

inline json summary_json(const PosteriorDraws& d, const std::vector<ParameterSummary>& rows) {
  json params = json::array();
  for (const auto& r : rows) {
    params.push_back(json{{"parameter", r.name}, {"q25", json_number(r.q25)}, {"mean", json_number(r.mean)},
                          {"q75", json_number(r.q75)}, {"sd", json_number(r.sd)}});
  }
  json meta = json::object();
  for (const auto& [k, v] : d.metadata) meta[k] = v;
  return json{{"model", to_string(d.variant)},
              {"draws", d.S()},
              {"acceptance_rate", json_number(d.acceptance_rate)},
              {"parameters", params},
              {"metadata", meta}};
}

/// Column-wise (mean, q2.5, q97.5) of an S x T matrix.
inline std::vector<std::array<double, 3>> band(const Eigen::MatrixXd& m) {
  std::vector<std::array<double, 3>> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index t = 0; t < m.cols(); ++t) {
    std::vector<double> c(m.col(t).data(), m.col(t).data() + m.rows());
    out[static_cast<std::size_t>(t)] = {m.col(t).mean(), quantile(c, 0.025), quantile(c, 0.975)};
  }
  return out;
}

inline std::string fit_csv(const CountSeries& series, const Eigen::MatrixXd& theta) {
  CsvWriter w({"t", "observed", "theta_mean", "theta_q2.5", "theta_q97.5"});
  const auto b = band(theta);
  for (std::size_t t = 0; t < series.size(); ++t) {
    w.row({std::to_string(series.months[t]), std::to_string(series.counts[t]), format_double(b[t][0]),
           format_double(b[t][1]), format_double(b[t][2])});
  }
  return w.str();
}

inline std::string diagnostics_csv(const ChainDiagnostics& diag) {
  CsvWriter w({"parameter", "ess", "lag", "autocorrelation"});
  for (const auto& p : diag.parameters) {
    for (std::size_t k = 0; k < p.autocorrelation.size(); ++k) {
      w.row({p.name, format_double(p.ess), std::to_string(k), format_double(p.autocorrelation[k])});
    }
  }
  return w.str();
}

inline std::string forecast_csv(const ForecastReport& r) {
  CsvWriter w({"origin", "actual", "point", "lo95", "hi95"});
  for (const auto& row : r.rows) {
    w.row({std::to_string(row.origin), format_double(row.actual), format_double(row.point),
           format_double(row.lo95), format_double(row.hi95)});
  }
  return w.str();
}

inline json forecast_json(const ForecastReport& r) {
  json j{{"model", r.model},
         {"horizon_months", json::array()},
         {"mape", json_number(r.mape)},
         {"rmse", json_number(r.rmse)},
         {"mcov", json_number(r.mcov)},
         {"mwid", json_number(r.mwid)},
         {"zero_actuals_skipped", r.zero_actuals_skipped},
         {"flags", r.flags}};
  for (const auto& row : r.rows) j["horizon_months"].push_back(row.origin);
  if (!r.ewma_nu.empty()) j["ewma_nu"] = r.ewma_nu;
  return j;
}

inline json comparison_json(const ComparisonReport& rep) {
  json lml = json::object(), cpo = json::object(), bf = json::object();
  for (const auto& m : rep.models) {
    lml[m] = json_number(rep.at(m).log_marginal_likelihood);
    cpo[m] = json_number(rep.at(m).log_cpo);
    json row = json::object();
    for (const auto& m2 : rep.models) row[m2] = json_number(rep.log_bayes_factor(m, m2));
    bf[m] = row;
  }
  return json{{"log_marginal_likelihood", lml}, {"log_cpo", cpo}, {"log_bayes_factors", bf}};
}

}  // namespace dynpois
