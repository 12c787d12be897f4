#pragma once

// Tweedie random-intercept model:
//   log mu_i = w_0 + X_i . w_{1:D} + b_{g(i)},   b_g = sigma_b * u_g
// with a shared index parameter p and dispersion phi.
//
// Functions are templated on the scalar type so the same code runs on plain
// doubles (MCMC, prediction) and on tape variables (training).

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "tweedie_avb/autodiff.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/special_functions.hpp"
#include "tweedie_avb/tweedie.hpp"

namespace tweedie_avb {

/// Responses, fixed-effect design (row-major, no intercept column) and the
/// random-intercept group of each row.
struct Dataset {
  std::vector<double> responses;
  std::vector<double> fixed_design;
  std::vector<int> group_index;
  int group_count = 0;
  std::vector<std::string> column_names;
  /// True for 0/1 dummy columns produced by one-hot encoding.
  std::vector<bool> indicator_columns;
  /// Original group labels, index = group id (may be empty).
  std::vector<std::string> group_labels;

  /// group_count == 0 means no random intercept; group_index is then empty.
  bool has_groups() const noexcept { return group_count > 0; }

  std::size_t rows() const noexcept { return responses.size(); }
  std::size_t cols() const noexcept { return column_names.size(); }

  std::span<const double> row(std::size_t i) const {
    return {fixed_design.data() + i * cols(), cols()};
  }
  double& at(std::size_t i, std::size_t j) { return fixed_design[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return fixed_design[i * cols() + j]; }

  void validate() const {
    const std::size_t m = rows();
    if (fixed_design.size() != m * cols()) {
      throw ShapeError("design matrix has " + std::to_string(fixed_design.size()) +
                       " entries, expected " + std::to_string(m * cols()));
    }
    if (group_count < 0) throw ShapeError("group count must be >= 0");
    if (group_index.size() != (has_groups() ? m : 0)) {
      throw ShapeError("group index length differs from responses");
    }
    if (indicator_columns.size() != cols()) {
      throw ShapeError("indicator flags length differs from column count");
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (!(responses[i] >= 0.0) || !std::isfinite(responses[i])) {
        throw DataError("response at row " + std::to_string(i) + " is negative or non-finite");
      }
      if (has_groups() && (group_index[i] < 0 || group_index[i] >= group_count)) {
        throw ShapeError("group id out of range at row " + std::to_string(i));
      }
    }
  }

  /// Rows `idx` in the given order.
  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.group_count = group_count;
    out.column_names = column_names;
    out.indicator_columns = indicator_columns;
    out.group_labels = group_labels;
    out.responses.reserve(idx.size());
    out.group_index.reserve(idx.size());
    out.fixed_design.reserve(idx.size() * cols());
    for (std::size_t i : idx) {
      out.responses.push_back(responses.at(i));
      if (!group_index.empty()) out.group_index.push_back(group_index.at(i));
      auto r = row(i);
      out.fixed_design.insert(out.fixed_design.end(), r.begin(), r.end());
    }
    return out;
  }
};

/// One draw of every latent quantity. `group_noise` holds the standardised
/// random effects u_g, so b_g = sigma_b * u_g.
template <class T>
struct BasicLatent {
  std::vector<T> fixed_weights;  ///< intercept first, then one per column
  T raw_p{};
  T raw_log_dispersion{};
  T raw_log_sigma_b{};
  std::vector<T> group_noise;
};

struct LatentAssignment : BasicLatent<double> {
  /// p = 1 + sigmoid(raw_p)
  double p_index() const { return 1.0 + sigmoid(raw_p); }
  double dispersion() const { return std::exp(raw_log_dispersion); }
  double sigma_b() const { return std::exp(raw_log_sigma_b); }

  void validate() const {
    const double p = p_index();
    if (!(p > 1.0 && p < 2.0) || !(dispersion() > 0.0) || !(sigma_b() > 0.0)) {
      throw InvalidParameter("latent assignment violates constraint maps");
    }
  }
};

enum class LinkKind { log };

struct LinkSpec {
  LinkKind kind = LinkKind::log;
};

inline double raw_from_p_index(double p) {
  if (!(p > 1.0 && p < 2.0)) throw InvalidParameter("index parameter must lie in (1, 2)");
  return std::log((p - 1.0) / (2.0 - p));
}

/// b_g = sigma_b * noise_g.
template <class T, class S>
std::vector<T> reparam_random_effects(const S& sigma_b, std::span<const T> noise) {
  if constexpr (std::is_same_v<S, double>) {
    if (!(sigma_b >= 0.0)) throw InvalidParameter("sigma_b must be non-negative");
  }
  std::vector<T> b;
  b.reserve(noise.size());
  for (const T& e : noise) b.push_back(sigma_b * e);
  return b;
}

inline std::vector<double> reparam_random_effects(double sigma_b, std::span<const double> noise) {
  return reparam_random_effects<double, double>(sigma_b, noise);
}

namespace detail {

inline void check_dims(const Dataset& data, std::size_t n_weights, std::size_t n_groups) {
  if (n_weights != data.cols() + 1) {
    throw ShapeError("expected " + std::to_string(data.cols() + 1) +
                     " fixed weights (intercept + columns), got " + std::to_string(n_weights));
  }
  if (n_groups != static_cast<std::size_t>(data.group_count)) {
    throw ShapeError("expected " + std::to_string(data.group_count) +
                     " random effects, got " + std::to_string(n_groups));
  }
}

inline double eta_value(double v) { return v; }
inline double eta_value(const ad::Var& v) { return v.value(); }

inline double linear_term(std::span<const double> w, std::span<const double> x) {
  double v = w[0];
  for (std::size_t j = 0; j < x.size(); ++j) v += w[j + 1] * x[j];
  return v;
}

inline ad::Var linear_term(std::span<const ad::Var> w, std::span<const double> x) {
  return ad::affine(w.subspan(1), x, w[0]);
}

constexpr double kEtaLimit = 30.0;

}  // namespace detail

/// eta_i = w_0 + X_i . w_{1:D} + b[group_i] for the given rows (all rows
/// when `rows` is empty).
template <class T>
std::vector<T> linear_predictor(const Dataset& data, std::span<const T> w, std::span<const T> b,
                                std::span<const std::size_t> rows = {}) {
  detail::check_dims(data, w.size(), b.size());
  const std::size_t n = rows.empty() ? data.rows() : rows.size();
  std::vector<T> eta;
  eta.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = rows.empty() ? k : rows[k];
    T v = detail::linear_term(w, data.row(i));
    if (data.has_groups()) v = v + b[static_cast<std::size_t>(data.group_index[i])];
    eta.push_back(v);
  }
  return eta;
}

inline std::vector<double> linear_predictor(const Dataset& data, std::span<const double> w,
                                            std::span<const double> b) {
  return linear_predictor<double>(data, w, b);
}

/// Pieces of the (mu, p, phi) -> (lambda, alpha, beta) map that do not
/// depend on the observation, written in terms of the raw latents:
///   alpha = e^{-raw_p},  log lambda_i = (2 - p) eta_i - log phi - log(2 - p),
///   log beta_i = log phi + log(p - 1) + (p - 1) eta_i.
template <class T>
struct SharedTweedieTerms {
  T p_minus_one;     ///< sigmoid(raw_p)
  T two_minus_p;     ///< 1 - sigmoid(raw_p)
  T alpha;           ///< (2 - p) / (p - 1)
  T lambda_offset;   ///< -log phi - log(2 - p)
  T beta_offset;     ///< log phi + log(p - 1)

  SharedTweedieTerms(const T& raw_p, const T& raw_log_dispersion) {
    if constexpr (std::is_same_v<T, double>) {
      p_minus_one = sigmoid(raw_p);
      two_minus_p = sigmoid(-raw_p);
      alpha = std::exp(-raw_p);
      lambda_offset = softplus(raw_p) - raw_log_dispersion;
      beta_offset = raw_log_dispersion - softplus(-raw_p);
    } else {
      p_minus_one = ad::sigmoid(raw_p);
      two_minus_p = ad::sigmoid(-raw_p);
      alpha = ad::exp(-raw_p);
      lambda_offset = ad::softplus(raw_p) - raw_log_dispersion;
      beta_offset = raw_log_dispersion - ad::softplus(-raw_p);
    }
  }
};

/// Compound parameters per observation for a log link with shared p, phi.
inline std::vector<CompoundParams> per_obs_params(std::span<const double> eta, double p_index,
                                                  double dispersion) {
  EdmParams probe{1.0, p_index, dispersion};
  probe.validate();
  const SharedTweedieTerms<double> s(raw_from_p_index(p_index), std::log(dispersion));
  std::vector<CompoundParams> out;
  out.reserve(eta.size());
  for (std::size_t i = 0; i < eta.size(); ++i) {
    if (!(std::abs(eta[i]) <= detail::kEtaLimit)) {
      throw ObservationError("linear predictor " + std::to_string(eta[i]) + " at row " +
                                 std::to_string(i) + " overflows the log link",
                             i);
    }
    CompoundParams c;
    c.lambda = std::exp(s.two_minus_p * eta[i] + s.lambda_offset);
    c.alpha = s.alpha;
    c.beta = std::exp(s.p_minus_one * eta[i] + s.beta_offset);
    out.push_back(c);
  }
  return out;
}

struct LikelihoodOptions {
  /// Rows entering the data term; empty means every row.
  std::span<const std::size_t> rows{};
  /// Multiplier on the data term (M / batch size for minibatches).
  double data_scale = 1.0;
  bool include_random_effect_prior = true;
};

/// sum_i log P(y_i | z) + sum_g log N(b_g; 0, sigma_b^2).
///
/// With b_g = sigma_b u_g the prior term is -u_g^2/2 - log sigma_b - log(2 pi)/2.
template <class T>
T model_log_likelihood(const Dataset& data, const BasicLatent<T>& z, const TruncationConfig& t,
                       const LikelihoodOptions& opt = {}) {
  detail::check_dims(data, z.fixed_weights.size(), z.group_noise.size());
  t.validate();
  const SharedTweedieTerms<T> shared(z.raw_p, z.raw_log_dispersion);
  T sigma_b;
  if constexpr (std::is_same_v<T, double>) {
    sigma_b = std::exp(z.raw_log_sigma_b);
  } else {
    sigma_b = ad::exp(z.raw_log_sigma_b);
  }
  const std::vector<T> b =
      reparam_random_effects<T, T>(sigma_b, std::span<const T>(z.group_noise));
  const std::span<const T> w(z.fixed_weights);

  const std::size_t n = opt.rows.empty() ? data.rows() : opt.rows.size();
  std::vector<T> terms;
  terms.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = opt.rows.empty() ? k : opt.rows[k];
    T eta = detail::linear_term(w, data.row(i));
    if (data.has_groups()) eta = eta + b[static_cast<std::size_t>(data.group_index[i])];
    const double eta_v = detail::eta_value(eta);
    if (!(std::abs(eta_v) <= detail::kEtaLimit)) {
      throw ObservationError("linear predictor " + std::to_string(eta_v) + " at row " +
                                 std::to_string(i) + " overflows the log link",
                             i);
    }
    const T log_lambda = shared.two_minus_p * eta + shared.lambda_offset;
    const T log_beta = shared.p_minus_one * eta + shared.beta_offset;
    terms.push_back(
        marginal_log_likelihood_logspace(data.responses[i], log_lambda, shared.alpha, log_beta, t));
  }

  T total{};
  if constexpr (std::is_same_v<T, double>) {
    double s = 0.0;
    for (double v : terms) s += v;
    total = opt.data_scale * s;
  } else {
    ad::Var s = terms.empty() ? ad::detail::tape_of(z.raw_p).constant(0.0) : ad::sum(terms);
    total = s * opt.data_scale;
  }

  if (opt.include_random_effect_prior && !z.group_noise.empty()) {
    const double g = static_cast<double>(z.group_noise.size());
    const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
    if constexpr (std::is_same_v<T, double>) {
      double sq = 0.0;
      for (double u : z.group_noise) sq += u * u;
      total += -0.5 * sq - g * (z.raw_log_sigma_b + half_log_2pi);
    } else {
      std::vector<ad::Var> sq;
      sq.reserve(z.group_noise.size());
      for (const ad::Var& u : z.group_noise) sq.push_back(u * u);
      total = total - 0.5 * ad::sum(sq) - g * z.raw_log_sigma_b - g * half_log_2pi;
    }
  }
  return total;
}

/// log P(y_i | z) for every row, without the random-effect prior.
inline std::vector<double> pointwise_log_likelihood(const Dataset& data, const LatentAssignment& z,
                                                    const TruncationConfig& t) {
  detail::check_dims(data, z.fixed_weights.size(), z.group_noise.size());
  t.validate();
  const SharedTweedieTerms<double> shared(z.raw_p, z.raw_log_dispersion);
  const double sigma_b = z.sigma_b();
  std::vector<double> out;
  out.reserve(data.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    double eta = detail::linear_term(z.fixed_weights, data.row(i));
    if (data.has_groups()) eta += sigma_b * z.group_noise[static_cast<std::size_t>(data.group_index[i])];
    if (!(std::abs(eta) <= detail::kEtaLimit)) {
      throw ObservationError("linear predictor " + std::to_string(eta) + " at row " +
                                 std::to_string(i) + " overflows the log link",
                             i);
    }
    out.push_back(marginal_log_likelihood_logspace(data.responses[i],
                                                   shared.two_minus_p * eta + shared.lambda_offset,
                                                   shared.alpha,
                                                   shared.p_minus_one * eta + shared.beta_offset, t));
  }
  return out;
}

}  // namespace tweedie_avb
