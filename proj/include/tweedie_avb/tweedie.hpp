#pragma once

// Tweedie compound Poisson-Gamma distribution for index parameter in (1, 2).
//
// Y = sum_{k=1}^{N} G_k with N ~ Poisson(lambda) and G_k ~ Gamma(alpha, beta),
// beta being the Gamma *scale*. Equivalently an exponential dispersion model
// with mean mu, dispersion phi and variance phi * mu^p.

#include <algorithm>
#include <array>
#include <span>
#include <vector>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>

#include "tweedie_avb/autodiff.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/special_functions.hpp"

namespace tweedie_avb {

struct CompoundParams {
  double lambda = 1.0;  ///< Poisson rate
  double alpha = 1.0;   ///< Gamma shape
  double beta = 1.0;    ///< Gamma scale

  void validate() const {
    auto ok = [](double v) { return std::isfinite(v) && v > 0.0; };
    if (!ok(lambda) || !ok(alpha) || !ok(beta)) {
      throw InvalidParameter("compound parameters must be finite and positive: lambda=" +
                             std::to_string(lambda) + " alpha=" + std::to_string(alpha) +
                             " beta=" + std::to_string(beta));
    }
  }
};

struct EdmParams {
  double mu = 1.0;          ///< mean
  double p_index = 1.5;     ///< variance power, strictly inside (1, 2)
  double dispersion = 1.0;  ///< phi

  void validate() const {
    if (!std::isfinite(mu) || !(mu > 0.0)) {
      throw InvalidParameter("mean must be finite and positive, got " + std::to_string(mu));
    }
    if (!std::isfinite(dispersion) || !(dispersion > 0.0)) {
      throw InvalidParameter("dispersion must be finite and positive, got " +
                             std::to_string(dispersion));
    }
    if (!(p_index > 1.0 && p_index < 2.0)) {
      throw InvalidParameter("index parameter must lie in (1, 2), got " +
                             std::to_string(p_index));
    }
  }
};

/// Number of Poisson-count terms kept in the truncated marginal.
struct TruncationConfig {
  int n_max = 10;
  /// Centre the window on the dominant count instead of summing 1..n_max.
  bool adaptive = true;

  void validate() const {
    if (n_max < 1) throw ConfigError("truncation n_max must be >= 1");
  }
};

inline EdmParams to_edm(const CompoundParams& c) {
  c.validate();
  EdmParams e;
  e.mu = c.lambda * c.alpha * c.beta;
  e.p_index = (c.alpha + 2.0) / (c.alpha + 1.0);
  const double two_minus_p = c.alpha / (c.alpha + 1.0);
  e.dispersion = std::pow(c.lambda, 1.0 - e.p_index) *
                 std::pow(c.alpha * c.beta, two_minus_p) / two_minus_p;
  return e;
}

inline CompoundParams to_compound(const EdmParams& e) {
  e.validate();
  const double two_minus_p = 2.0 - e.p_index;
  const double p_minus_one = e.p_index - 1.0;
  CompoundParams c;
  c.lambda = std::pow(e.mu, two_minus_p) / (e.dispersion * two_minus_p);
  c.alpha = two_minus_p / p_minus_one;
  c.beta = e.dispersion * p_minus_one * std::pow(e.mu, p_minus_one);
  return c;
}

/// Mean and variance phi * mu^p.
inline std::pair<double, double> tweedie_moments(const EdmParams& e) {
  e.validate();
  return {e.mu, e.dispersion * std::pow(e.mu, e.p_index)};
}

/// log P(Y = y, N = n). Mismatched zero branches give -inf.
inline double joint_log_density(double y, long n, const CompoundParams& c) {
  if (!(y >= 0.0)) throw DomainError("response must be non-negative, got " + std::to_string(y));
  if (n < 0) throw DomainError("count must be non-negative");
  c.validate();
  if (n == 0) {
    return y == 0.0 ? -c.lambda : -std::numeric_limits<double>::infinity();
  }
  if (y == 0.0) return -std::numeric_limits<double>::infinity();
  const double nd = static_cast<double>(n);
  const double shape = nd * c.alpha;
  const double log_gamma_part = (shape - 1.0) * std::log(y) - y / c.beta -
                                shape * std::log(c.beta) - log_gamma(shape);
  const double log_poisson_part = nd * std::log(c.lambda) - c.lambda - log_gamma(nd + 1.0);
  return log_gamma_part + log_poisson_part;
}

namespace detail {

/// log summand for count n >= 1, without the shared -lambda.
inline double count_log_term(double n, double log_y, double y, double log_lambda,
                             double alpha, double log_beta, double inv_beta) {
  const double shape = n * alpha;
  return (shape - 1.0) * log_y - y * inv_beta - shape * log_beta - log_gamma(shape) +
         n * log_lambda - log_gamma(n + 1.0);
}

/// Scratch space for window terms; stack storage for the usual small windows.
class TermBuffer {
 public:
  explicit TermBuffer(std::size_t n) : size_(n) {
    if (n > local_.size()) heap_.resize(n);
  }
  std::span<double> span() {
    return heap_.empty() ? std::span<double>(local_.data(), size_) : std::span<double>(heap_);
  }

 private:
  std::array<double, 32> local_{};
  std::vector<double> heap_;
  std::size_t size_;
};

/// argmax over n >= 1 of the summand. The summand is log-concave in n, so a
/// hill climb from the usual y^(2-p) / (phi (2-p)) estimate finds it.
inline long dominant_count(double y, double log_lambda, double alpha, double log_beta) {
  const double log_y = std::log(y);
  const double inv_beta = std::exp(-log_beta);
  auto f = [&](long n) {
    return count_log_term(static_cast<double>(n), log_y, y, log_lambda, alpha, log_beta,
                          inv_beta);
  };
  // lambda * (y / mu)^(2 - p) with 2 - p = alpha / (alpha + 1)
  const double log_mu = log_lambda + std::log(alpha) + log_beta;
  const double guess = std::exp(log_lambda + (log_y - log_mu) * alpha / (alpha + 1.0));
  constexpr long kCap = 100'000'000;
  long n = std::clamp<long>(static_cast<long>(std::llround(std::min(guess, 1e8))), 1, kCap);
  double fn = f(n);
  while (n < kCap) {
    const double up = f(n + 1);
    if (!(up > fn)) break;
    ++n;
    fn = up;
  }
  while (n > 1) {
    const double down = f(n - 1);
    if (!(down > fn)) break;
    --n;
    fn = down;
  }
  return n;
}

}  // namespace detail

/// Inclusive range [first, last] of counts summed by the truncated marginal.
inline std::pair<long, long> truncation_window(double y, double log_lambda, double alpha,
                                               double log_beta, const TruncationConfig& t) {
  t.validate();
  if (!t.adaptive) return {1, t.n_max};
  const long mode = detail::dominant_count(y, log_lambda, alpha, log_beta);
  const long first = std::max<long>(1, mode - (t.n_max - 1) / 2);
  return {first, first + t.n_max - 1};
}

/// Truncated marginal log P(Y = y) with log-lambda / alpha / log-beta inputs.
inline double marginal_log_likelihood_logspace(double y, double log_lambda, double alpha,
                                               double log_beta, const TruncationConfig& t) {
  if (!(y >= 0.0)) throw DomainError("response must be non-negative, got " + std::to_string(y));
  t.validate();
  const double lambda = std::exp(log_lambda);
  if (y == 0.0) return -lambda;
  const auto [first, last] = truncation_window(y, log_lambda, alpha, log_beta, t);
  const double log_y = std::log(y);
  const double inv_beta = std::exp(-log_beta);
  double m = -std::numeric_limits<double>::infinity();
  detail::TermBuffer buffer(static_cast<std::size_t>(last - first + 1));
  std::span<double> terms = buffer.span();
  for (long n = first; n <= last; ++n) {
    const double v = detail::count_log_term(static_cast<double>(n), log_y, y, log_lambda,
                                            alpha, log_beta, inv_beta);
    terms[static_cast<std::size_t>(n - first)] = v;
    m = std::max(m, v);
  }
  double s = 0.0;
  for (double v : terms) s += std::exp(v - m);
  return -lambda + m + std::log(s);
}

inline double marginal_log_likelihood(double y, const CompoundParams& c,
                                      const TruncationConfig& t) {
  c.validate();
  return marginal_log_likelihood_logspace(y, std::log(c.lambda), c.alpha, std::log(c.beta), t);
}

/// Tape version of the truncated marginal as a single fused node with inputs
/// (log lambda, alpha, log beta). Partials are the softmax-weighted partials
/// of the individual count terms.
inline ad::Var marginal_log_likelihood_logspace(double y, ad::Var log_lambda, ad::Var alpha,
                                                ad::Var log_beta, const TruncationConfig& t) {
  if (!(y >= 0.0)) throw DomainError("response must be non-negative, got " + std::to_string(y));
  t.validate();
  ad::Tape& tape = ad::detail::same_tape(log_lambda, alpha);
  ad::detail::same_tape(alpha, log_beta);
  const double ll = log_lambda.value();
  const double a = alpha.value();
  const double lb = log_beta.value();
  const double lambda = std::exp(ll);
  if (y == 0.0) {
    return tape.push_node(ad::OpTag::log_sum_exp, -lambda, {{log_lambda.id(), -lambda}});
  }
  const auto [first, last] = truncation_window(y, ll, a, lb, t);
  const double log_y = std::log(y);
  const double inv_beta = std::exp(-lb);
  const std::size_t count = static_cast<std::size_t>(last - first + 1);
  detail::TermBuffer buffer(count);
  std::span<double> terms = buffer.span();
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < count; ++k) {
    terms[k] = detail::count_log_term(static_cast<double>(first) + static_cast<double>(k),
                                      log_y, y, ll, a, lb, inv_beta);
    m = std::max(m, terms[k]);
  }
  double s = 0.0;
  for (double& v : terms) {
    v = std::exp(v - m);
    s += v;
  }
  double d_log_lambda = -lambda;
  double d_alpha = 0.0;
  double d_log_beta = 0.0;
  for (std::size_t k = 0; k < count; ++k) {
    const double w = terms[k] / s;
    const double n = static_cast<double>(first) + static_cast<double>(k);
    d_log_lambda += w * n;
    d_alpha += w * n * (log_y - lb - digamma(n * a));
    d_log_beta += w * (y * inv_beta - n * a);
  }
  return tape.push_node(ad::OpTag::log_sum_exp, -lambda + m + std::log(s),
                        {{log_lambda.id(), d_log_lambda},
                         {alpha.id(), d_alpha},
                         {log_beta.id(), d_log_beta}});
}

/// High-precision log density: the same count series summed from n = 1
/// until past the dominant count and the next term is below `rel_tol` of
/// the running sum.
inline double series_log_density_oracle(double y, const EdmParams& e, double rel_tol = 1e-15) {
  if (!(y >= 0.0)) throw DomainError("response must be non-negative, got " + std::to_string(y));
  if (!(rel_tol > 0.0 && rel_tol <= 1e-3)) {
    throw ConfigError("series oracle tolerance must lie in (0, 1e-3]");
  }
  const CompoundParams c = to_compound(e);
  if (y == 0.0) return -c.lambda;
  const double log_lambda = std::log(c.lambda);
  const double log_beta = std::log(c.beta);
  const double log_y = std::log(y);
  const double inv_beta = 1.0 / c.beta;
  const long mode = detail::dominant_count(y, log_lambda, c.alpha, log_beta);
  const double ref = detail::count_log_term(static_cast<double>(mode), log_y, y, log_lambda,
                                            c.alpha, log_beta, inv_beta);
  constexpr long kMaxTerms = 100'000;
  long double sum = 0.0L;
  for (long n = 1; n <= kMaxTerms; ++n) {
    const double term = std::exp(detail::count_log_term(static_cast<double>(n), log_y, y,
                                                        log_lambda, c.alpha, log_beta,
                                                        inv_beta) -
                                 ref);
    sum += term;
    if (n > mode && term < rel_tol * static_cast<double>(sum)) {
      return -c.lambda + ref + std::log(static_cast<double>(sum));
    }
  }
  throw NonConvergence("series density did not converge within 1e5 terms",
                       -c.lambda + ref + std::log(static_cast<double>(sum)));
}

/// One draw of Y. A sum of n iid Gamma(alpha, beta) draws is drawn directly
/// as Gamma(n alpha, beta).
template <class Rng>
double tweedie_sample(const CompoundParams& c, Rng& rng) {
  c.validate();
  std::poisson_distribution<long> count(c.lambda);
  const long n = count(rng);
  if (n == 0) return 0.0;
  std::gamma_distribution<double> total(static_cast<double>(n) * c.alpha, c.beta);
  double y = total(rng);
  // A positive count must give a positive, normal amount.
  while (!(y >= std::numeric_limits<double>::min())) y = total(rng);
  return y;
}

}  // namespace tweedie_avb
