#pragma once

// Blockwise random-walk Metropolis over (w, raw_p, raw_log_dispersion,
// raw_log_sigma_b, b). Used only as a reference for the variational fit.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tweedie_avb/avb.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/mixed_model.hpp"

namespace tweedie_avb {

enum class ChainBlock : std::size_t { weights, raw_p, raw_log_dispersion, raw_log_sigma_b, random_effects };

inline constexpr std::size_t kChainBlocks = 5;

inline const char* block_name(ChainBlock b) {
  switch (b) {
    case ChainBlock::weights: return "weights";
    case ChainBlock::raw_p: return "raw_p";
    case ChainBlock::raw_log_dispersion: return "raw_log_dispersion";
    case ChainBlock::raw_log_sigma_b: return "raw_log_sigma_b";
    case ChainBlock::random_effects: return "random_effects";
  }
  return "?";
}

/// Proposal standard deviations. Random effects are proposed one group at a
/// time with a shared scale.
struct StepSizes {
  double weights = 0.05;
  double raw_p = 0.1;
  double raw_log_dispersion = 0.05;
  double raw_log_sigma_b = 0.3;
  double random_effects = 0.1;

  double& operator[](ChainBlock b) {
    switch (b) {
      case ChainBlock::weights: return weights;
      case ChainBlock::raw_p: return raw_p;
      case ChainBlock::raw_log_dispersion: return raw_log_dispersion;
      case ChainBlock::raw_log_sigma_b: return raw_log_sigma_b;
      case ChainBlock::random_effects: return random_effects;
    }
    return weights;
  }
  double operator[](ChainBlock b) const { return const_cast<StepSizes&>(*this)[b]; }

  void validate() const {
    for (std::size_t k = 0; k < kChainBlocks; ++k) {
      const auto b = static_cast<ChainBlock>(k);
      const double s = (*this)[b];
      if (!(s > 0.0) || !std::isfinite(s)) {
        throw ConfigError(std::string("step size for ") + block_name(b) + " must be positive");
      }
    }
  }
};

struct ChainConfig {
  StepSizes step_sizes;
  long iterations = 20000;
  long burn_in = 5000;
  long thinning = 5;
  std::uint64_t seed = 0;
  bool use_likelihood = true;
  /// Rescale steps during burn-in towards `target_acceptance`.
  bool adapt = true;
  long adapt_interval = 50;
  double target_acceptance = 0.25;
  TruncationConfig truncation;
  /// Gaussian prior on the global latents; standard normal when unset.
  std::optional<HyperPrior> prior;
  std::optional<LatentAssignment> initial;

  void validate() const {
    step_sizes.validate();
    if (iterations <= 0) throw ConfigError("iterations must be positive");
    if (burn_in < 0 || burn_in >= iterations) throw ConfigError("burn_in must lie in [0, iterations)");
    if (thinning <= 0) throw ConfigError("thinning must be positive");
    if (adapt_interval <= 0) throw ConfigError("adapt_interval must be positive");
    if (!(target_acceptance > 0.0 && target_acceptance < 1.0)) {
      throw ConfigError("target_acceptance must lie in (0, 1)");
    }
    truncation.validate();
  }

  long retained() const { return (iterations - burn_in) / thinning; }
};

struct ChainResult {
  std::vector<LatentAssignment> draws;
  /// Post burn-in acceptance rate per block, indexed by ChainBlock.
  std::array<double, kChainBlocks> acceptance{};
  StepSizes tuned_steps;
  std::vector<std::string> warnings;
  std::vector<std::string> column_names;
  std::vector<std::string> group_labels;
  int group_count = 0;
  ChainConfig config;

  double acceptance_of(ChainBlock b) const { return acceptance[static_cast<std::size_t>(b)]; }

  std::vector<double> p_index_draws() const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.p_index());
    return v;
  }
  std::vector<double> dispersion_draws() const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.dispersion());
    return v;
  }
  std::vector<double> sigma_b_draws() const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.sigma_b());
    return v;
  }
  std::vector<double> weight_draws(std::size_t k) const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.fixed_weights.at(k));
    return v;
  }
  std::vector<double> random_effect_draws(std::size_t g) const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.sigma_b() * z.group_noise.at(g));
    return v;
  }
};

inline HyperPrior standard_normal_prior(std::size_t covariates) {
  return HyperPrior(global_latent_dim(covariates));
}

/// model_log_likelihood (data term plus random-effect prior) plus the Gaussian
/// log-prior of the global latents.
inline double log_unnormalized_posterior(const Dataset& data, const LatentAssignment& z, const HyperPrior& prior,
                                         const TruncationConfig& t) {
  return model_log_likelihood<double>(data, z, t) + prior.log_density(global_vector(z));
}

namespace detail {

/// Chain state with random effects held on their natural scale b.
class ChainState {
 public:
  ChainState(const Dataset& data, const TruncationConfig& t, bool use_likelihood)
      : data_(data), t_(t), use_likelihood_(use_likelihood) {
    if (data.has_groups()) {
      rows_of_group_.resize(static_cast<std::size_t>(data.group_count));
      for (std::size_t i = 0; i < data.rows(); ++i) {
        rows_of_group_[static_cast<std::size_t>(data.group_index[i])].push_back(i);
      }
    }
  }

  std::vector<double> w;
  double raw_p = 0.0, raw_log_dispersion = 0.0, raw_log_sigma_b = 0.0;
  std::vector<double> b;

  const std::vector<std::size_t>& rows_of(std::size_t g) const { return rows_of_group_[g]; }

  double row_loglik(std::size_t i, const SharedTweedieTerms<double>& s, std::span<const double> w_in,
                    std::span<const double> b_in) const {
    double eta = linear_term(w_in, data_.row(i));
    if (data_.has_groups()) eta += b_in[static_cast<std::size_t>(data_.group_index[i])];
    if (!(std::abs(eta) <= kEtaLimit)) return -std::numeric_limits<double>::infinity();
    return marginal_log_likelihood_logspace(data_.responses[i], s.two_minus_p * eta + s.lambda_offset, s.alpha,
                                            s.p_minus_one * eta + s.beta_offset, t_);
  }

  /// Per-row log-likelihood for the supplied state; -inf rows mark overflow.
  std::vector<double> all_rows(std::span<const double> w_in, double rp, double rld,
                               std::span<const double> b_in) const {
    std::vector<double> out(data_.rows(), 0.0);
    if (!use_likelihood_) return out;
    const SharedTweedieTerms<double> s(rp, rld);
    for (std::size_t i = 0; i < data_.rows(); ++i) out[i] = row_loglik(i, s, w_in, b_in);
    return out;
  }

  bool use_likelihood() const { return use_likelihood_; }

  LatentAssignment assignment() const {
    LatentAssignment z;
    z.fixed_weights = w;
    z.raw_p = raw_p;
    z.raw_log_dispersion = raw_log_dispersion;
    z.raw_log_sigma_b = raw_log_sigma_b;
    const double sb = std::exp(raw_log_sigma_b);
    for (double v : b) z.group_noise.push_back(v / sb);
    return z;
  }

 private:
  const Dataset& data_;
  TruncationConfig t_;
  bool use_likelihood_;
  std::vector<std::vector<std::size_t>> rows_of_group_;
};

inline double sum_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

/// log N(b; 0, sigma_b^2) summed over groups.
inline double random_effect_log_prior(std::span<const double> b, double raw_log_sigma_b) {
  const double inv = std::exp(-raw_log_sigma_b);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double s = 0.0;
  for (double v : b) s += -0.5 * (v * inv) * (v * inv) - raw_log_sigma_b - half_log_2pi;
  return s;
}

inline std::vector<double> globals_of(std::span<const double> w, double rp, double rld, double rls) {
  std::vector<double> g(w.begin(), w.end());
  g.push_back(rp);
  g.push_back(rld);
  g.push_back(rls);
  return g;
}

}  // namespace detail

inline ChainResult run_chain(const Dataset& data, const ChainConfig& cfg) {
  data.validate();
  cfg.validate();
  const std::size_t d = data.cols();
  const HyperPrior prior = cfg.prior ? *cfg.prior : standard_normal_prior(d);
  if (prior.dim() != global_latent_dim(d)) throw ShapeError("prior dimension does not match the design");
  const auto groups = static_cast<std::size_t>(data.group_count);

  detail::ChainState st(data, cfg.truncation, cfg.use_likelihood);
  if (cfg.initial) {
    const LatentAssignment& z0 = *cfg.initial;
    detail::check_dims(data, z0.fixed_weights.size(), z0.group_noise.size());
    st.w = z0.fixed_weights;
    st.raw_p = z0.raw_p;
    st.raw_log_dispersion = z0.raw_log_dispersion;
    st.raw_log_sigma_b = z0.raw_log_sigma_b;
    for (double u : z0.group_noise) st.b.push_back(u * z0.sigma_b());
  } else {
    st.w.assign(d + 1, 0.0);
    const double ybar = detail::sum_of(data.responses) / static_cast<double>(data.rows());
    if (cfg.use_likelihood && ybar > 0.0) st.w[0] = std::log(ybar);
    st.b.assign(groups, 0.0);
  }

  auto global_prior = [&](std::span<const double> w, double rp, double rld, double rls) {
    return prior.log_density(detail::globals_of(w, rp, rld, rls));
  };

  std::vector<double> rows = st.all_rows(st.w, st.raw_p, st.raw_log_dispersion, st.b);
  double data_term = detail::sum_of(rows);
  if (!std::isfinite(data_term)) throw ObservationError("initial chain state has non-finite likelihood", 0);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  auto accept = [&](double delta) { return delta >= 0.0 || std::log(unif(rng)) < delta; };

  StepSizes steps = cfg.step_sizes;
  std::array<long, kChainBlocks> tried{}, taken{}, window_tried{}, window_taken{};
  long adapt_round = 0;
  auto record = [&](ChainBlock blk, bool ok, bool burning) {
    const auto k = static_cast<std::size_t>(blk);
    if (burning) {
      window_tried[k] += 1;
      window_taken[k] += ok;
    } else {
      tried[k] += 1;
      taken[k] += ok;
    }
  };

  ChainResult out;
  out.column_names = data.column_names;
  out.group_labels = data.group_labels;
  out.group_count = data.group_count;
  out.config = cfg;
  out.draws.reserve(static_cast<std::size_t>(cfg.retained()));

  for (long it = 0; it < cfg.iterations; ++it) {
    const bool burning = it < cfg.burn_in;

    // weights, jointly
    {
      std::vector<double> w = st.w;
      for (double& v : w) v += steps.weights * normal(rng);
      auto cand = st.all_rows(w, st.raw_p, st.raw_log_dispersion, st.b);
      const double cand_data = detail::sum_of(cand);
      const double delta = cand_data - data_term + global_prior(w, st.raw_p, st.raw_log_dispersion, st.raw_log_sigma_b) -
                           global_prior(st.w, st.raw_p, st.raw_log_dispersion, st.raw_log_sigma_b);
      const bool ok = std::isfinite(cand_data) && accept(delta);
      if (ok) {
        st.w = std::move(w);
        rows = std::move(cand);
        data_term = cand_data;
      }
      record(ChainBlock::weights, ok, burning);
    }

    // raw_p and raw_log_dispersion, one at a time
    for (ChainBlock blk : {ChainBlock::raw_p, ChainBlock::raw_log_dispersion}) {
      double rp = st.raw_p, rld = st.raw_log_dispersion;
      (blk == ChainBlock::raw_p ? rp : rld) += steps[blk] * normal(rng);
      auto cand = st.all_rows(st.w, rp, rld, st.b);
      const double cand_data = detail::sum_of(cand);
      const double delta = cand_data - data_term + global_prior(st.w, rp, rld, st.raw_log_sigma_b) -
                           global_prior(st.w, st.raw_p, st.raw_log_dispersion, st.raw_log_sigma_b);
      const bool ok = std::isfinite(cand_data) && accept(delta);
      if (ok) {
        st.raw_p = rp;
        st.raw_log_dispersion = rld;
        rows = std::move(cand);
        data_term = cand_data;
      }
      record(blk, ok, burning);
    }

    // raw_log_sigma_b touches only the priors
    {
      const double rls = st.raw_log_sigma_b + steps.raw_log_sigma_b * normal(rng);
      const double delta = detail::random_effect_log_prior(st.b, rls) -
                           detail::random_effect_log_prior(st.b, st.raw_log_sigma_b) +
                           global_prior(st.w, st.raw_p, st.raw_log_dispersion, rls) -
                           global_prior(st.w, st.raw_p, st.raw_log_dispersion, st.raw_log_sigma_b);
      const bool ok = accept(delta);
      if (ok) st.raw_log_sigma_b = rls;
      record(ChainBlock::raw_log_sigma_b, ok, burning);
    }

    // random effects, one group at a time
    if (groups > 0) {
      const SharedTweedieTerms<double> shared(st.raw_p, st.raw_log_dispersion);
      const double inv = std::exp(-st.raw_log_sigma_b);
      for (std::size_t g = 0; g < groups; ++g) {
        std::vector<double> b = st.b;
        b[g] += steps.random_effects * normal(rng);
        double old_rows = 0.0, new_rows = 0.0;
        std::vector<double> fresh;
        if (st.use_likelihood()) {
          fresh.reserve(st.rows_of(g).size());
          for (std::size_t i : st.rows_of(g)) {
            old_rows += rows[i];
            fresh.push_back(st.row_loglik(i, shared, st.w, b));
            new_rows += fresh.back();
          }
        }
        const double delta =
            new_rows - old_rows - 0.5 * ((b[g] * inv) * (b[g] * inv) - (st.b[g] * inv) * (st.b[g] * inv));
        const bool ok = std::isfinite(new_rows) && accept(delta);
        if (ok) {
          st.b[g] = b[g];
          for (std::size_t k = 0; k < fresh.size(); ++k) rows[st.rows_of(g)[k]] = fresh[k];
        }
        record(ChainBlock::random_effects, ok, burning);
      }
      data_term = detail::sum_of(rows);
    }

    if (burning && cfg.adapt && (it + 1) % cfg.adapt_interval == 0) {
      adapt_round += 1;
      const double gain = 1.0 / std::sqrt(static_cast<double>(adapt_round));
      for (std::size_t k = 0; k < kChainBlocks; ++k) {
        if (window_tried[k] == 0) continue;
        const double rate = static_cast<double>(window_taken[k]) / static_cast<double>(window_tried[k]);
        steps[static_cast<ChainBlock>(k)] *= std::exp(2.0 * gain * (rate - cfg.target_acceptance));
        window_tried[k] = window_taken[k] = 0;
      }
    }

    if (!burning && (it - cfg.burn_in + 1) % cfg.thinning == 0) out.draws.push_back(st.assignment());
  }

  for (std::size_t k = 0; k < kChainBlocks; ++k) {
    const auto blk = static_cast<ChainBlock>(k);
    out.acceptance[k] = tried[k] > 0 ? static_cast<double>(taken[k]) / static_cast<double>(tried[k]) : 0.0;
    if (tried[k] > 0 && out.acceptance[k] < 0.01) {
      out.warnings.push_back(std::string("block '") + block_name(blk) + "' accepted " +
                             std::to_string(out.acceptance[k] * 100.0) + "% of proposals; try a step size near " +
                             std::to_string(steps[blk] * 0.1) + " (currently " + std::to_string(steps[blk]) + ")");
    }
  }
  out.tuned_steps = steps;
  return out;
}

}  // namespace tweedie_avb
