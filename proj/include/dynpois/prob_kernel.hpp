// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

// Seedable probability primitives: log densities, samplers and the few special
// functions the filtering and MCMC code needs. Everything is exposed in log
// space; probabilities are exponentiated only at reporting boundaries.

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dynpois {

/// Invalid input: bad parameters, malformed data, inconsistent dimensions.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation hit a numerical dead end (underflowed tail mass, non-PD
/// matrix, optimizer failure, zero MH acceptance).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct GammaParams {
  double shape = 1.0;
  double rate = 1.0;

  double mean() const { return shape / rate; }
  double variance() const { return shape / (rate * rate); }
  bool valid() const {
    return shape > 0.0 && rate > 0.0 && std::isfinite(shape) && std::isfinite(rate);
  }
};

struct BetaParams {
  double alpha = 1.0;
  double beta = 1.0;

  double mean() const { return alpha / (alpha + beta); }
  bool valid() const {
    return alpha > 0.0 && beta > 0.0 && std::isfinite(alpha) && std::isfinite(beta);
  }
};

/// Negative binomial counting failures before the r-th success, success
/// probability p. r may be any positive real.
struct NegBinParams {
  double r = 1.0;
  double p = 0.5;

  double mean() const { return r * (1.0 - p) / p; }
  double variance() const { return r * (1.0 - p) / (p * p); }
  bool valid() const { return r > 0.0 && std::isfinite(r) && p > 0.0 && p < 1.0; }
};

struct PoissonParams {
  double rate = 1.0;

  double mean() const { return rate; }
};

/// Gamma law restricted to (lower, inf).
struct TruncatedGammaParams {
  GammaParams base;
  double lower = 0.0;
};

namespace detail {

inline void require_gamma(const GammaParams& g, const char* where) {
  if (!g.valid()) {
    std::ostringstream os;
    os << where << ": gamma parameters must be positive and finite (shape=" << g.shape
       << ", rate=" << g.rate << ")";
    throw ValidationError(os.str());
  }
}

inline void require_beta(const BetaParams& b, const char* where) {
  if (!b.valid()) {
    std::ostringstream os;
    os << where << ": beta parameters must be positive and finite (alpha=" << b.alpha
       << ", beta=" << b.beta << ")";
    throw ValidationError(os.str());
  }
}

inline void require_negbin(const NegBinParams& nb, const char* where) {
  if (!nb.valid()) {
    std::ostringstream os;
    os << where << ": negative binomial needs r > 0 and p in (0,1) (r=" << nb.r
       << ", p=" << nb.p << ")";
    throw std::domain_error(os.str());
  }
}

inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Deterministic random stream identified by (seed, stream id).
///
/// Backed by std::mt19937_64 seeded through std::seed_seq, both of which have
/// fully specified algorithms, so a (seed, stream) pair yields the same draws
/// on every conforming standard library. Uniform and normal variates are
/// produced here rather than by the <random> distributions, whose algorithms
/// are implementation-defined. Not shareable across concurrent callers.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), engine_(make_engine(seed, stream)) {}

  static constexpr result_type min() { return std::mt19937_64::min(); }
  static constexpr result_type max() { return std::mt19937_64::max(); }
  result_type operator()() { return engine_(); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  /// Independent child stream; same (parent, id) always gives the same child.
  RngStream split(std::uint64_t id) const {
    std::uint64_t mix = stream_ ^ 0xD1B54A32D192ED03ULL;
    std::uint64_t child = detail::splitmix64(mix) ^ (id * 0x9E3779B97F4A7C15ULL + 1);
    return RngStream(seed_, child);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    // 53 random mantissa bits, offset by half an ulp so 0 is never returned.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

 private:
  static std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32), 0x5eedU};
    return std::mt19937_64(seq);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Log densities

inline double log_pmf_poisson(std::int64_t n, double rate) {
  if (rate < 0.0 || std::isnan(rate)) throw std::domain_error("log_pmf_poisson: negative rate");
  if (n < 0) return kNegInf;
  if (rate == 0.0) return n == 0 ? 0.0 : kNegInf;
  const double nd = static_cast<double>(n);
  return nd * std::log(rate) - rate - std::lgamma(nd + 1.0);
}

inline double log_pmf_negbin(std::int64_t n, const NegBinParams& nb) {
  detail::require_negbin(nb, "log_pmf_negbin");
  if (n < 0) return kNegInf;
  const double nd = static_cast<double>(n);
  double out = nb.r * std::log(nb.p);
  if (n > 0) {
    out += std::lgamma(nb.r + nd) - std::lgamma(nd + 1.0) - std::lgamma(nb.r) +
           nd * std::log1p(-nb.p);
  }
  return out;
}

/// P(N <= n) via the regularized incomplete beta I_p(r, n+1).
inline double cdf_negbin(std::int64_t n, const NegBinParams& nb) {
  detail::require_negbin(nb, "cdf_negbin");
  if (n < 0) return 0.0;
  return boost::math::ibeta(nb.r, static_cast<double>(n) + 1.0, nb.p);
}

inline double cdf_poisson(std::int64_t n, double rate) {
  if (rate < 0.0) throw std::domain_error("cdf_poisson: negative rate");
  if (n < 0) return 0.0;
  if (rate == 0.0) return 1.0;
  return boost::math::gamma_q(static_cast<double>(n) + 1.0, rate);
}

/// Shape-rate gamma log density; -inf outside the support.
inline double log_pdf_gamma(double x, const GammaParams& g) {
  detail::require_gamma(g, "log_pdf_gamma");
  if (!(x > 0.0)) return kNegInf;
  return g.shape * std::log(g.rate) - std::lgamma(g.shape) + (g.shape - 1.0) * std::log(x) -
         g.rate * x;
}

inline double log_pdf_beta(double x, const BetaParams& b) {
  detail::require_beta(b, "log_pdf_beta");
  if (!(x > 0.0 && x < 1.0)) return kNegInf;
  return (b.alpha - 1.0) * std::log(x) + (b.beta - 1.0) * std::log1p(-x) -
         (std::lgamma(b.alpha) + std::lgamma(b.beta) - std::lgamma(b.alpha + b.beta));
}

inline double log_pdf_normal(double x, double mean, double sd) {
  constexpr double kLogSqrt2Pi = 0.91893853320467274178;
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - kLogSqrt2Pi;
}

/// Smallest n with CDF(n) >= q.
inline std::int64_t negbin_quantile(double q, const NegBinParams& nb) {
  detail::require_negbin(nb, "negbin_quantile");
  if (!(q > 0.0)) return 0;
  if (q >= 1.0) throw ValidationError("negbin_quantile: q must lie in (0,1)");
  if (cdf_negbin(0, nb) >= q) return 0;
  std::int64_t lo = 0;  // CDF(lo) < q
  std::int64_t hi = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(nb.mean())));
  while (cdf_negbin(hi, nb) < q) {
    lo = hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::int64_t mid = lo + (hi - lo) / 2;
    if (cdf_negbin(mid, nb) >= q) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

// ---------------------------------------------------------------------------
// Samplers

namespace detail {

// Marsaglia-Tsang for shape >= 1, unit rate.
inline double gamma_unit_mt(double shape, RngStream& rng) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * (x * x) * (x * x)) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

}  // namespace detail

/// log of a Gamma(shape, 1) draw; stays finite for tiny shapes whose draws
/// underflow in linear scale.
inline double sample_log_gamma_unit(double shape, RngStream& rng) {
  if (shape >= 1.0) return std::log(detail::gamma_unit_mt(shape, rng));
  const double g = detail::gamma_unit_mt(shape + 1.0, rng);
  return std::log(g) + std::log(rng.uniform()) / shape;
}

inline double sample_gamma(const GammaParams& g, RngStream& rng) {
  detail::require_gamma(g, "sample_gamma");
  if (g.shape >= 1.0) return detail::gamma_unit_mt(g.shape, rng) / g.rate;
  return std::exp(sample_log_gamma_unit(g.shape, rng)) / g.rate;
}

inline double sample_beta(const BetaParams& b, RngStream& rng) {
  detail::require_beta(b, "sample_beta");
  const double lx = sample_log_gamma_unit(b.alpha, rng);
  const double ly = sample_log_gamma_unit(b.beta, rng);
  double x = 1.0 / (1.0 + std::exp(ly - lx));
  // Keep the open support when one gamma draw dominates beyond double range.
  if (x >= 1.0) x = std::nextafter(1.0, 0.0);
  if (x <= 0.0) x = std::numeric_limits<double>::denorm_min();
  return x;
}

/// Gamma restricted to (lower, inf).
///
/// Inverse CDF on the renormalized tail while the tail mass is at least 1e-12;
/// below that a shifted-exponential rejection envelope takes over, which stays
/// efficient however deep in the tail the truncation point is.
inline double sample_truncated_gamma(const TruncatedGammaParams& tg, RngStream& rng) {
  const GammaParams& g = tg.base;
  detail::require_gamma(g, "sample_truncated_gamma");
  if (!(tg.lower >= 0.0) || !std::isfinite(tg.lower)) {
    throw ValidationError("sample_truncated_gamma: lower bound must be finite and >= 0");
  }
  if (tg.lower == 0.0) return sample_gamma(g, rng);

  const double a = g.shape;
  const double b = g.rate;
  const double L = tg.lower;
  const double scaled = b * L;

  const double tail = boost::math::gamma_q(a, scaled);
  const double u = rng.uniform();
  if (tail >= 1e-12) {
    double x;
    if (tail > 0.5) {
      const double head = boost::math::gamma_p(a, scaled);
      x = boost::math::gamma_p_inv(a, head + u * tail) / b;
    } else {
      x = boost::math::gamma_q_inv(a, u * tail) / b;
    }
    if (!(x > L)) x = std::nextafter(L, std::numeric_limits<double>::infinity());
    return x;
  }

  // Deep tail. For a > 1 the envelope L + Exp(b - (a-1)/L) dominates the target
  // once L is past the mode, which a tail mass this small guarantees.
  const double lambda = a > 1.0 ? b - (a - 1.0) / L : b;
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    std::ostringstream os;
    os << "sample_truncated_gamma: degenerate tail (shape=" << a << ", rate=" << b
       << ", lower=" << L << ")";
    throw NumericError(os.str());
  }
  constexpr int kMaxTries = 100000;
  for (int i = 0; i < kMaxTries; ++i) {
    const double x = L - std::log(rng.uniform()) / lambda;
    const double log_ratio =
        a > 1.0 ? (a - 1.0) * (std::log(x / L) - (x - L) / L) : (a - 1.0) * std::log(x / L);
    if (std::log(rng.uniform()) <= log_ratio && x > L) return x;
  }
  std::ostringstream os;
  os << "sample_truncated_gamma: rejection sampler failed to accept (shape=" << a
     << ", rate=" << b << ", lower=" << L << ", tail mass=" << tail << ")";
  throw NumericError(os.str());
}

/// Poisson draw: inversion for small rates, Hormann's PTRS otherwise.
inline std::int64_t sample_poisson(double rate, RngStream& rng) {
  if (rate < 0.0 || !std::isfinite(rate)) throw std::domain_error("sample_poisson: bad rate");
  if (rate == 0.0) return 0;
  if (rate < 10.0) {
    double p = std::exp(-rate);
    double cdf = p;
    const double u = rng.uniform();
    std::int64_t k = 0;
    while (u > cdf) {
      ++k;
      p *= rate / static_cast<double>(k);
      cdf += p;
      if (p == 0.0 && cdf < u) break;  // rounding; u sits in the lost ulps
    }
    return k;
  }
  const double slam = std::sqrt(rate);
  const double loglam = std::log(rate);
  const double b = 0.931 + 2.53 * slam;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  for (;;) {
    const double u = rng.uniform() - 0.5;
    const double v = rng.uniform();
    const double us = 0.5 - std::abs(u);
    const double k = std::floor((2.0 * a / us + b) * u + rate + 0.43);
    if (us >= 0.07 && v <= vr) return static_cast<std::int64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <=
        -rate + k * loglam - std::lgamma(k + 1.0)) {
      return static_cast<std::int64_t>(k);
    }
  }
}

/// Multivariate normal sampler holding the Cholesky factor of its covariance.
class MvNormal {
 public:
  MvNormal(Eigen::VectorXd mean, const Eigen::MatrixXd& covariance) : mean_(std::move(mean)) {
    if (covariance.rows() != covariance.cols() || covariance.rows() != mean_.size()) {
      throw ValidationError("MvNormal: covariance must be square and match the mean");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(covariance);
    if (llt.info() != Eigen::Success) {
      std::ostringstream os;
      os << "MvNormal: covariance is not positive definite:\n" << covariance;
      throw NumericError(os.str());
    }
    lower_ = llt.matrixL();
  }

  Eigen::VectorXd operator()(RngStream& rng) const { return mean_ + lower_ * std_normal(rng); }

  /// Draw centred at `centre` with the stored covariance.
  Eigen::VectorXd around(const Eigen::VectorXd& centre, RngStream& rng) const {
    return centre + lower_ * std_normal(rng);
  }

  Eigen::Index dim() const { return mean_.size(); }
  const Eigen::MatrixXd& lower() const { return lower_; }

 private:
  Eigen::VectorXd std_normal(RngStream& rng) const {
    Eigen::VectorXd z(mean_.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    return z;
  }

  Eigen::VectorXd mean_;
  Eigen::MatrixXd lower_;
};

inline Eigen::VectorXd sample_mv_normal(const Eigen::VectorXd& mean,
                                        const Eigen::MatrixXd& covariance, RngStream& rng) {
  return MvNormal(mean, covariance)(rng);
}

// ---------------------------------------------------------------------------
// Small numerics shared by the other modules

inline double log_sum_exp(const double* values, std::size_t n) {
  double hi = kNegInf;
  for (std::size_t i = 0; i < n; ++i) hi = std::max(hi, values[i]);
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::exp(values[i] - hi);
  return hi + std::log(acc);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double inv_logit(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace dynpois
