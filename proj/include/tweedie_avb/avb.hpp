#pragma once

// Adversarial variational Bayes for the Tweedie random-intercept model.
//
//   q_theta : noise e -> global latents z = (w, raw_p, raw_log_phi, raw_log_sigma_b)
//             through a tanh network; random effects get an independent
//             Gaussian factor b_g = m_g + s_g e_g, stored as u_g = b_g / sigma_b.
//   T       : critic on z, trained to separate q from the hyper-prior, so
//             that at its optimum T(z) = log q(z) - log p_psi(z).
//   p_psi   : Gaussian hyper-prior N(mu_psi, diag sigma_psi^2) over z.
//
// Generator objective per draw (minimised):
//   T(z) - (M/B) sum_batch log P(y|z,u) - log N(b; 0, sigma_b^2) - H[q(b)]
// plus a zero-valued term carrying -d/dpsi log p_psi(z).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tweedie_avb/autodiff.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/mixed_model.hpp"
#include "tweedie_avb/statistics.hpp"
#include "tweedie_avb/tweedie.hpp"

namespace tweedie_avb {

struct NetworkShape {
  std::size_t noise_dim = 8;
  std::size_t inference_hidden = 32;
  std::size_t critic_hidden = 32;

  void validate() const {
    if (noise_dim == 0 || inference_hidden == 0 || critic_hidden == 0) {
      throw ConfigError("network dimensions must be positive");
    }
  }
};

/// Fully connected network, tanh on hidden layers, linear output. Layer k
/// owns "<prefix>.<k>.weight" (out x in, row-major) and "<prefix>.<k>.bias".
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, std::vector<std::size_t> sizes)
      : prefix_(std::move(prefix)), sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ConfigError("network needs an input and an output layer");
    for (std::size_t s : sizes_) {
      if (s == 0) throw ConfigError("network layer of width zero");
    }
  }

  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  std::size_t layers() const { return sizes_.size() - 1; }
  const std::vector<std::size_t>& sizes() const { return sizes_; }

  std::string weight_name(std::size_t k) const { return prefix_ + "." + std::to_string(k) + ".weight"; }
  std::string bias_name(std::size_t k) const { return prefix_ + "." + std::to_string(k) + ".bias"; }

  /// Glorot-normal hidden weights; output weights N(0, output_scale^2); zero biases.
  void register_params(ad::ParamStore& store, std::mt19937_64& rng, double output_scale) const {
    std::normal_distribution<double> normal;
    for (std::size_t k = 0; k < layers(); ++k) {
      const std::size_t in = sizes_[k], out = sizes_[k + 1];
      const double sd = k + 1 == layers() ? output_scale
                                          : std::sqrt(2.0 / static_cast<double>(in + out));
      for (double& v : store.add(weight_name(k), in * out)) v = sd * normal(rng);
      store.add(bias_name(k), out);
    }
  }

  std::vector<double> forward(const ad::ParamStore& store, std::span<const double> x) const {
    check_input(x.size());
    std::vector<double> a(x.begin(), x.end());
    for (std::size_t k = 0; k < layers(); ++k) {
      const auto w = store.block(weight_name(k));
      const auto b = store.block(bias_name(k));
      const std::size_t in = sizes_[k];
      std::vector<double> next(sizes_[k + 1]);
      for (std::size_t o = 0; o < next.size(); ++o) {
        double s = b[o];
        for (std::size_t j = 0; j < in; ++j) s += w[o * in + j] * a[j];
        next[o] = k + 1 == layers() ? s : std::tanh(s);
      }
      a = std::move(next);
    }
    return a;
  }

  /// Post-activation values of every layer, input first.
  using Activations = std::vector<std::vector<double>>;

  std::vector<double> forward(const ad::ParamStore& store, std::span<const double> x,
                              Activations& acts) const {
    check_input(x.size());
    acts.resize(layers() + 1);
    acts[0].assign(x.begin(), x.end());
    for (std::size_t k = 0; k < layers(); ++k) {
      const auto w = store.block(weight_name(k));
      const auto b = store.block(bias_name(k));
      const std::size_t in = sizes_[k];
      auto& next = acts[k + 1];
      next.resize(sizes_[k + 1]);
      for (std::size_t o = 0; o < next.size(); ++o) {
        double s = b[o];
        for (std::size_t j = 0; j < in; ++j) s += w[o * in + j] * acts[k][j];
        next[o] = k + 1 == layers() ? s : std::tanh(s);
      }
    }
    return acts.back();
  }

  /// Adds upstream^T d(output)/d(params) into `grad` (flat store order).
  void backward(const ad::ParamStore& store, const Activations& acts, std::span<const double> upstream,
                std::span<double> grad) const {
    if (grad.size() != store.size() || upstream.size() != output_dim()) {
      throw ShapeError("backward buffer sizes do not match the network");
    }
    std::vector<double> delta(upstream.begin(), upstream.end()), prev;
    for (std::size_t k = layers(); k-- > 0;) {
      const auto& ws = store.slot(weight_name(k));
      const auto& bs = store.slot(bias_name(k));
      const auto w = store.block(weight_name(k));
      const std::size_t in = sizes_[k];
      const auto& a = acts[k];
      for (std::size_t o = 0; o < delta.size(); ++o) {
        grad[bs.offset + o] += delta[o];
        for (std::size_t j = 0; j < in; ++j) grad[ws.offset + o * in + j] += delta[o] * a[j];
      }
      if (k == 0) break;
      prev.assign(in, 0.0);
      for (std::size_t o = 0; o < delta.size(); ++o) {
        for (std::size_t j = 0; j < in; ++j) prev[j] += w[o * in + j] * delta[o];
      }
      for (std::size_t j = 0; j < in; ++j) prev[j] *= 1.0 - a[j] * a[j];
      delta.swap(prev);
    }
  }

  /// Tape forward pass; `bound` holds leaf variables for every coordinate of
  /// `store` in flat order.
  template <class In>
  std::vector<ad::Var> forward(const ad::ParamStore& store, std::span<const ad::Var> bound,
                               std::span<const In> x) const {
    check_input(x.size());
    if (bound.size() != store.size()) throw ShapeError("bound parameters do not match store");
    std::vector<ad::Var> a = layer(store, bound, 0, x);
    for (std::size_t k = 1; k < layers(); ++k) a = layer(store, bound, k, std::span<const ad::Var>(a));
    return a;
  }

 private:
  void check_input(std::size_t n) const {
    if (n != input_dim()) {
      throw ShapeError("network input has " + std::to_string(n) + " entries, expected " +
                       std::to_string(input_dim()));
    }
  }

  template <class In>
  std::vector<ad::Var> layer(const ad::ParamStore& store, std::span<const ad::Var> bound,
                             std::size_t k, std::span<const In> x) const {
    const auto& ws = store.slot(weight_name(k));
    const auto& bs = store.slot(bias_name(k));
    const std::size_t in = sizes_[k];
    std::vector<ad::Var> out;
    out.reserve(sizes_[k + 1]);
    for (std::size_t o = 0; o < sizes_[k + 1]; ++o) {
      ad::Var s = ad::affine(bound.subspan(ws.offset + o * in, in), x, bound[bs.offset + o]);
      out.push_back(k + 1 == layers() ? s : ad::tanh(s));
    }
    return out;
  }

  std::string prefix_;
  std::vector<std::size_t> sizes_;
};

/// Global latent layout: [w_0 .. w_D, raw_p, raw_log_dispersion, raw_log_sigma_b].
inline std::size_t global_latent_dim(std::size_t covariates) { return covariates + 4; }

template <class T>
BasicLatent<T> assemble_latent(std::span<const T> global, std::vector<T> group_noise) {
  if (global.size() < 4) throw ShapeError("global latent vector too short");
  const std::size_t nw = global.size() - 3;
  BasicLatent<T> z;
  z.fixed_weights.assign(global.begin(), global.begin() + static_cast<long>(nw));
  z.raw_p = global[nw];
  z.raw_log_dispersion = global[nw + 1];
  z.raw_log_sigma_b = global[nw + 2];
  z.group_noise = std::move(group_noise);
  return z;
}

inline LatentAssignment to_assignment(BasicLatent<double> z) {
  LatentAssignment out;
  static_cast<BasicLatent<double>&>(out) = std::move(z);
  return out;
}

inline std::vector<double> global_vector(const BasicLatent<double>& z) {
  std::vector<double> g = z.fixed_weights;
  g.push_back(z.raw_p);
  g.push_back(z.raw_log_dispersion);
  g.push_back(z.raw_log_sigma_b);
  return g;
}

inline std::vector<double> standard_normal_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

/// Q_theta. Parameters: the network plus "group.loc" and "group.log_scale",
/// a Gaussian over the random effects b that does not depend on the global draw.
class InferenceNet {
 public:
  InferenceNet() = default;
  InferenceNet(std::size_t covariates, int groups, const NetworkShape& shape, std::mt19937_64& rng,
               double output_scale = 0.01, double intercept_init = 0.0)
      : covariates_(covariates),
        groups_(groups),
        net_("inference", {shape.noise_dim, shape.inference_hidden, global_latent_dim(covariates)}) {
    shape.validate();
    if (groups < 0) throw ConfigError("group count must be >= 0");
    net_.register_params(params, rng, output_scale);
    params.block(net_.bias_name(net_.layers() - 1))[0] = intercept_init;
    params.add("group.loc", static_cast<std::size_t>(groups));
    params.add("group.log_scale", static_cast<std::size_t>(groups));
  }

  ad::ParamStore params;

  std::size_t covariates() const { return covariates_; }
  int group_count() const { return groups_; }
  std::size_t noise_dim() const { return net_.input_dim(); }
  std::size_t latent_dim() const { return net_.output_dim(); }
  const Mlp& network() const { return net_; }

  std::vector<double> global(std::span<const double> noise) const { return net_.forward(params, noise); }

  std::vector<ad::Var> global(std::span<const ad::Var> bound, std::span<const double> noise) const {
    return net_.forward(params, bound, noise);
  }

  /// b_g = m_g + s_g e_g.
  std::vector<double> group_effects(std::span<const double> e) const {
    check_group_noise(e.size());
    const auto m = params.block("group.loc");
    const auto ls = params.block("group.log_scale");
    std::vector<double> b(e.size());
    for (std::size_t g = 0; g < b.size(); ++g) b[g] = m[g] + std::exp(ls[g]) * e[g];
    return b;
  }

  std::vector<ad::Var> group_effects(std::span<const ad::Var> bound, std::span<const double> e) const {
    check_group_noise(e.size());
    const auto m = ad::block_of(bound, params, "group.loc");
    const auto ls = ad::block_of(bound, params, "group.log_scale");
    std::vector<ad::Var> b;
    b.reserve(e.size());
    for (std::size_t g = 0; g < e.size(); ++g) b.push_back(m[g] + ad::exp(ls[g]) * e[g]);
    return b;
  }

  /// Standardised effects u_g = b_g / sigma_b.
  std::vector<double> group_noise(double raw_log_sigma_b, std::span<const double> e) const {
    auto u = group_effects(e);
    const double inv = std::exp(-raw_log_sigma_b);
    for (double& v : u) v *= inv;
    return u;
  }

  std::vector<ad::Var> group_noise(std::span<const ad::Var> bound, const ad::Var& raw_log_sigma_b,
                                   std::span<const double> e) const {
    auto u = group_effects(bound, e);
    const ad::Var inv = ad::exp(-raw_log_sigma_b);
    for (ad::Var& v : u) v = v * inv;
    return u;
  }

  /// -E log q(b | z) = sum_g log s_g + G/2 log(2 pi e).
  template <class S>
  static auto group_entropy(std::span<const S> log_scale) {
    const double g = static_cast<double>(log_scale.size());
    const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
    if constexpr (std::is_same_v<S, double>) {
      double s = 0.0;
      for (double v : log_scale) s += v;
      return g * c + s;
    } else {
      if (log_scale.empty()) throw UsageError("entropy of an empty group block");
      return ad::sum(log_scale) + g * c;
    }
  }

 private:
  void check_group_noise(std::size_t n) const {
    if (n != static_cast<std::size_t>(groups_)) {
      throw ShapeError("group noise has " + std::to_string(n) + " entries, expected " +
                       std::to_string(groups_));
    }
  }

  std::size_t covariates_ = 0;
  int groups_ = 0;
  Mlp net_;
};

/// T: latent vector -> logit.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(std::size_t latent_dim, std::size_t hidden, std::mt19937_64& rng)
      : net_("critic", {latent_dim, hidden, hidden, 1}) {
    net_.register_params(params, rng, std::sqrt(2.0 / static_cast<double>(hidden + 1)));
  }

  ad::ParamStore params;

  std::size_t latent_dim() const { return net_.input_dim(); }
  const Mlp& network() const { return net_; }

  double logit(std::span<const double> z) const { return net_.forward(params, z)[0]; }

  template <class In>
  ad::Var logit(std::span<const ad::Var> bound, std::span<const In> z) const {
    return net_.forward(params, bound, z)[0];
  }

 private:
  Mlp net_;
};

/// p_psi: independent Gaussians, "hyper.loc" and "hyper.log_scale".
class HyperPrior {
 public:
  HyperPrior() = default;
  explicit HyperPrior(std::size_t dim) {
    params.add("hyper.loc", dim, 0.0);
    params.add("hyper.log_scale", dim, 0.0);
  }

  ad::ParamStore params;

  std::size_t dim() const { return params.size() / 2; }
  std::span<const double> loc() const { return params.block("hyper.loc"); }
  std::span<const double> log_scale() const { return params.block("hyper.log_scale"); }

  std::vector<double> draw(std::span<const double> e) const {
    check(e.size());
    std::vector<double> z(e.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = loc()[i] + std::exp(log_scale()[i]) * e[i];
    return z;
  }

  std::vector<ad::Var> draw(std::span<const ad::Var> bound, std::span<const double> e) const {
    check(e.size());
    const auto mu = ad::block_of(bound, params, "hyper.loc");
    const auto ls = ad::block_of(bound, params, "hyper.log_scale");
    std::vector<ad::Var> z;
    z.reserve(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) z.push_back(mu[i] + ad::exp(ls[i]) * e[i]);
    return z;
  }

  double log_density(std::span<const double> z) const {
    check(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double r = (z[i] - loc()[i]) * std::exp(-log_scale()[i]);
      s += -0.5 * r * r - log_scale()[i] - half_log_2pi();
    }
    return s;
  }

  ad::Var log_density(std::span<const ad::Var> bound, std::span<const ad::Var> z) const {
    check(z.size());
    const auto mu = ad::block_of(bound, params, "hyper.loc");
    const auto ls = ad::block_of(bound, params, "hyper.log_scale");
    std::vector<ad::Var> terms;
    terms.reserve(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      ad::Var r = (z[i] - mu[i]) * ad::exp(-ls[i]);
      terms.push_back(-0.5 * (r * r) - ls[i] - half_log_2pi());
    }
    return ad::sum(terms);
  }

 private:
  static double half_log_2pi() { return 0.5 * std::log(2.0 * std::numbers::pi); }
  void check(std::size_t n) const {
    if (n != dim()) throw ShapeError("hyper-prior dimension mismatch");
  }
};

struct TrainConfig {
  int n_critic = 3;
  std::size_t minibatch_size = 256;
  long outer_steps = 5000;
  TruncationConfig truncation{};
  ad::AdamConfig inference_optimizer{};
  ad::AdamConfig critic_optimizer{};
  ad::AdamConfig hyper_optimizer{};
  std::uint64_t seed = 0;
  /// Posterior draws stored in the fit.
  std::size_t latent_sample_count = 1000;
  /// Latent draws per generator step; the minibatch is split between them.
  std::size_t latent_draws_per_step = 8;
  /// Draws per side in each critic update.
  std::size_t critic_batch_size = 64;
  /// Validation cadence in outer steps and patience in evaluations (0 = off).
  long eval_every = 100;
  int patience = 10;
  std::size_t validation_draws = 8;
  NetworkShape shape{};
  double output_init_scale = 0.01;
  bool freeze_critic = false;
  bool freeze_hyper_prior = false;

  void validate() const {
    truncation.validate();
    shape.validate();
    if (n_critic < 1) throw ConfigError("n_critic must be >= 1");
    if (outer_steps < 1) throw ConfigError("outer_steps must be >= 1");
    if (minibatch_size == 0) throw ConfigError("minibatch_size must be >= 1");
    if (latent_draws_per_step == 0) throw ConfigError("latent_draws_per_step must be >= 1");
    if (critic_batch_size == 0) throw ConfigError("critic_batch_size must be >= 1");
    if (latent_sample_count == 0) throw ConfigError("latent_sample_count must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (patience < 0) throw ConfigError("patience must be >= 0");
    if (validation_draws == 0) throw ConfigError("validation_draws must be >= 1");
    for (const auto* a : {&inference_optimizer, &critic_optimizer, &hyper_optimizer}) {
      if (!(a->learning_rate > 0.0) || !(a->beta1 >= 0.0 && a->beta1 < 1.0) ||
          !(a->beta2 >= 0.0 && a->beta2 < 1.0) || !(a->epsilon > 0.0)) {
        throw ConfigError("invalid optimizer hyperparameters");
      }
    }
  }
};

struct ValidationPoint {
  long step = 0;
  double nll = 0.0;
};

struct LossTrace {
  /// Critic loss after the last critic update of each outer step.
  std::vector<double> discriminator;
  std::vector<double> generator;
  std::vector<ValidationPoint> validation;
};

struct FitResult {
  std::vector<LatentAssignment> draws;
  LossTrace trace;
  InferenceNet inference;
  Discriminator critic;
  HyperPrior hyper_prior;
  TrainConfig config;
  std::vector<std::string> column_names;
  std::vector<std::string> group_labels;
  int group_count = 0;
  long steps_completed = 0;
  long best_step = -1;
  bool early_stopped = false;
  bool aborted = false;
  long abort_step = -1;
  std::string abort_reason;

  std::size_t covariate_count() const {
    return draws.empty() ? column_names.size() : draws.front().fixed_weights.size() - 1;
  }

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
  /// b_g = sigma_b u_g per draw.
  std::vector<double> random_effect_draws(std::size_t g) const {
    std::vector<double> v;
    for (const auto& z : draws) v.push_back(z.sigma_b() * z.group_noise.at(g));
    return v;
  }

  void validate() const {
    for (const auto& z : draws) z.validate();
  }
};

// --- sampling ---------------------------------------------------------------

/// One draw from q: fresh model noise and fresh group noise.
inline LatentAssignment sample_posterior(const InferenceNet& q, std::mt19937_64& rng) {
  const auto e = standard_normal_vector(q.noise_dim(), rng);
  const auto eg = standard_normal_vector(static_cast<std::size_t>(q.group_count()), rng);
  const auto global = q.global(e);
  return to_assignment(assemble_latent<double>(global, q.group_noise(global.back(), eg)));
}

inline std::vector<double> sample_prior(const HyperPrior& h, std::mt19937_64& rng) {
  return h.draw(standard_normal_vector(h.dim(), rng));
}

// --- losses -----------------------------------------------------------------

/// mean softplus(-T(z_Q)) + mean softplus(T(z_P)).
inline ad::Var discriminator_loss_from_logits(std::span<const ad::Var> q_logits,
                                              std::span<const ad::Var> p_logits) {
  if (q_logits.empty() || p_logits.empty()) throw UsageError("critic batches must be non-empty");
  std::vector<ad::Var> q_terms, p_terms;
  for (const ad::Var& t : q_logits) q_terms.push_back(ad::softplus(-t));
  for (const ad::Var& t : p_logits) p_terms.push_back(ad::softplus(t));
  return ad::sum(q_terms) / static_cast<double>(q_terms.size()) +
         ad::sum(p_terms) / static_cast<double>(p_terms.size());
}

/// Critic loss with the latent batches entering as constants.
inline ad::Var discriminator_loss(ad::Tape& tape, const Discriminator& t,
                                  std::span<const ad::Var> critic_bound,
                                  const std::vector<std::vector<double>>& posterior_batch,
                                  const std::vector<std::vector<double>>& prior_batch) {
  if (posterior_batch.empty() || prior_batch.empty()) {
    throw UsageError("critic batches must be non-empty");
  }
  auto logits = [&](const std::vector<std::vector<double>>& batch) {
    std::vector<ad::Var> out;
    out.reserve(batch.size());
    for (const auto& z : batch) {
      const auto c = ad::bind_constants(tape, z);
      out.push_back(t.logit(critic_bound, std::span<const ad::Var>(c)));
    }
    return out;
  };
  const auto lq = logits(posterior_batch);
  const auto lp = logits(prior_batch);
  return discriminator_loss_from_logits(lq, lp);
}

/// Noise and rows for one latent draw of a generator step.
struct GeneratorDraw {
  std::vector<double> model_noise;
  std::vector<double> group_noise;
  std::vector<std::size_t> rows;
};

/// Samples a minibatch without replacement and splits it across the draws.
inline std::vector<GeneratorDraw> draw_generator_noise(const InferenceNet& q, const Dataset& data,
                                                       const TrainConfig& cfg,
                                                       std::mt19937_64& rng) {
  const std::size_t m = data.rows();
  if (m == 0) throw UsageError("empty dataset");
  const std::size_t batch = std::min(cfg.minibatch_size, m);
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < batch; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, m - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  const std::size_t draws = std::min(cfg.latent_draws_per_step, batch);
  std::vector<GeneratorDraw> out(draws);
  for (std::size_t l = 0; l < draws; ++l) {
    const std::size_t lo = l * batch / draws, hi = (l + 1) * batch / draws;
    out[l].rows.assign(idx.begin() + static_cast<long>(lo), idx.begin() + static_cast<long>(hi));
    out[l].model_noise = standard_normal_vector(q.noise_dim(), rng);
    out[l].group_noise = standard_normal_vector(static_cast<std::size_t>(q.group_count()), rng);
  }
  return out;
}

struct GeneratorBinding {
  std::span<const ad::Var> inference;
  std::span<const ad::Var> critic;
  std::span<const ad::Var> hyper;
};

/// Negative ELBO estimate with the log-ratio replaced by the critic output.
/// Value: mean over draws of T(z) - loglik - log N(b) - H[q(b)]. The
/// hyper-prior enters through a term of value zero whose gradient is
/// -d/dpsi log p_psi(z).
inline ad::Var generator_loss(ad::Tape& tape, const Dataset& data, const InferenceNet& q,
                              const Discriminator& t, const HyperPrior& h,
                              const GeneratorBinding& bound, std::span<const GeneratorDraw> draws,
                              const TruncationConfig& truncation) {
  if (draws.empty()) throw UsageError("generator step needs at least one latent draw");
  const double m = static_cast<double>(data.rows());
  const auto log_scale = ad::block_of(bound.inference, q.params, "group.log_scale");
  std::vector<ad::Var> per_draw;
  per_draw.reserve(draws.size());
  for (const GeneratorDraw& d : draws) {
    auto global = q.global(bound.inference, d.model_noise);
    BasicLatent<ad::Var> z =
        assemble_latent<ad::Var>(global, q.group_noise(bound.inference, global.back(), d.group_noise));
    LikelihoodOptions opt;
    opt.rows = d.rows;
    if (d.rows.empty()) throw UsageError("latent draw without minibatch rows");
    opt.data_scale = m / static_cast<double>(d.rows.size());
    ad::Var loglik = model_log_likelihood(data, z, truncation, opt);
    ad::Var entropy = log_scale.empty() ? tape.constant(0.0) : InferenceNet::group_entropy(log_scale);
    ad::Var critic = t.logit(bound.critic, std::span<const ad::Var>(global));

    std::vector<ad::Var> frozen;
    frozen.reserve(global.size());
    for (const ad::Var& g : global) frozen.push_back(ad::detach(g));
    ad::Var lp = h.log_density(bound.hyper, frozen);
    ad::Var psi_term = tape.constant(lp.value()) - lp;

    per_draw.push_back(critic - loglik - entropy + psi_term);
  }
  return ad::sum(per_draw) / static_cast<double>(per_draw.size());
}

/// Gradients of one phase with respect to all three parameter sets.
struct PhaseGradients {
  double loss = 0.0;
  std::vector<double> inference;
  std::vector<double> critic;
  std::vector<double> hyper;
};

enum class Phase { critic, generator };

/// All three parameter sets on one tape. The sets a phase must not update
/// are bound as constants, so their gradient buffers read exactly zero.
struct BoundModel {
  std::vector<ad::Var> inference, critic, hyper;

  BoundModel(ad::Tape& tape, const InferenceNet& q, const Discriminator& t, const HyperPrior& h,
             Phase phase) {
    auto bind = [&](const ad::ParamStore& s, bool leaf) {
      return leaf ? ad::bind(tape, s) : ad::bind_constants(tape, s.values());
    };
    inference = bind(q.params, phase == Phase::generator);
    critic = bind(t.params, phase == Phase::critic);
    hyper = bind(h.params, phase == Phase::generator);
  }

  GeneratorBinding view() const { return {inference, critic, hyper}; }

  PhaseGradients gradients(const ad::Tape& tape, double loss) const {
    return {loss, ad::gradients(tape, inference), ad::gradients(tape, critic), ad::gradients(tape, hyper)};
  }
};

/// Critic-phase gradients by direct backpropagation through the critic
/// network. Equal to differentiating discriminator_loss on a tape; the
/// inference and hyper-prior buffers are zero by construction.
inline PhaseGradients critic_gradients(const InferenceNet& q, const Discriminator& t,
                                       const HyperPrior& h,
                                       const std::vector<std::vector<double>>& posterior_batch,
                                       const std::vector<std::vector<double>>& prior_batch) {
  if (posterior_batch.empty() || prior_batch.empty()) {
    throw UsageError("critic batches must be non-empty");
  }
  PhaseGradients g;
  g.inference.assign(q.params.size(), 0.0);
  g.critic.assign(t.params.size(), 0.0);
  g.hyper.assign(h.params.size(), 0.0);
  Mlp::Activations acts;
  auto side = [&](const std::vector<std::vector<double>>& batch, double sign) {
    const double n = static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& z : batch) {
      const double logit = t.network().forward(t.params, z, acts)[0];
      // d softplus(sign * T) / dT = sign * sigmoid(sign * T)
      loss += softplus(sign * logit);
      const double up = sign * sigmoid(sign * logit) / n;
      t.network().backward(t.params, acts, std::span<const double>(&up, 1), g.critic);
    }
    return loss / n;
  };
  g.loss = side(posterior_batch, -1.0) + side(prior_batch, 1.0);
  return g;
}

/// Tape reference for critic_gradients.
inline PhaseGradients critic_gradients_on_tape(const InferenceNet& q, const Discriminator& t,
                                               const HyperPrior& h,
                                               const std::vector<std::vector<double>>& posterior_batch,
                                               const std::vector<std::vector<double>>& prior_batch) {
  ad::Tape tape;
  const BoundModel bound(tape, q, t, h, Phase::critic);
  ad::Var loss = discriminator_loss(tape, t, bound.critic, posterior_batch, prior_batch);
  tape.backward(loss);
  return bound.gradients(tape, loss.value());
}

inline PhaseGradients generator_gradients(const Dataset& data, const InferenceNet& q,
                                          const Discriminator& t, const HyperPrior& h,
                                          std::span<const GeneratorDraw> draws,
                                          const TruncationConfig& truncation) {
  ad::Tape tape;
  const BoundModel bound(tape, q, t, h, Phase::generator);
  ad::Var loss = generator_loss(tape, data, q, t, h, bound.view(), draws, truncation);
  tape.backward(loss);
  return bound.gradients(tape, loss.value());
}

/// Trains `t` alone to separate draws of `sample_q` (label 1) from draws of
/// `sample_p` (label 0). Returns the loss per step. With final_lr_fraction < 1
/// the rate stays put for the first half and then follows a cosine down to
/// final_lr_fraction times its start.
inline std::vector<double> train_critic(Discriminator& t,
                                        const std::function<std::vector<double>(std::mt19937_64&)>& sample_q,
                                        const std::function<std::vector<double>(std::mt19937_64&)>& sample_p,
                                        long steps, std::size_t batch, const ad::AdamConfig& adam,
                                        std::mt19937_64& rng, double final_lr_fraction = 1.0) {
  if (steps < 1 || batch == 0) throw ConfigError("critic training needs steps >= 1 and batch >= 1");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("final_lr_fraction must lie in (0, 1]");
  }
  ad::AdamState state(t.params.size(), adam);
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(steps));
  const InferenceNet no_q;
  const HyperPrior no_h;
  for (long s = 0; s < steps; ++s) {
    const double frac = static_cast<double>(s) / static_cast<double>(steps);
    if (frac >= 0.5) {
      const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * (frac - 0.5) / 0.5));
      state.learning_rate = adam.learning_rate * (final_lr_fraction + (1.0 - final_lr_fraction) * c);
    }
    std::vector<std::vector<double>> zq, zp;
    for (std::size_t i = 0; i < batch; ++i) zq.push_back(sample_q(rng));
    for (std::size_t i = 0; i < batch; ++i) zp.push_back(sample_p(rng));
    const PhaseGradients g = critic_gradients(no_q, t, no_h, zq, zp);
    ad::adam_step(t.params, g.critic, state);
    trace.push_back(g.loss);
  }
  return trace;
}

/// Random-effect noise for groups the fit never saw is drawn from N(0, 1).
inline LatentAssignment extend_groups(LatentAssignment z, int groups, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  while (static_cast<int>(z.group_noise.size()) < groups) z.group_noise.push_back(normal(rng));
  if (static_cast<int>(z.group_noise.size()) > groups) z.group_noise.resize(static_cast<std::size_t>(groups));
  return z;
}

/// -1/M sum_i log( 1/K sum_k P(y_i | z_k) ) with K draws from q.
inline double validation_nll(const Dataset& data, const InferenceNet& q, const TruncationConfig& t,
                             std::size_t draws, std::mt19937_64& rng) {
  if (data.rows() == 0) throw UsageError("empty validation set");
  std::vector<std::vector<double>> ll;
  ll.reserve(draws);
  for (std::size_t k = 0; k < draws; ++k) {
    LatentAssignment z = extend_groups(sample_posterior(q, rng), data.group_count, rng);
    ll.push_back(pointwise_log_likelihood(data, z, t));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const auto& v : ll) mx = std::max(mx, v[i]);
    double s = 0.0;
    for (const auto& v : ll) s += std::exp(v[i] - mx);
    total += mx + std::log(s / static_cast<double>(draws));
  }
  return -total / static_cast<double>(data.rows());
}

/// Per-step progress hook: (step, critic loss, generator loss).
using TrainObserver = std::function<void(long, double, double)>;

namespace detail {

struct Snapshot {
  std::vector<double> inference, critic, hyper;
};

inline Snapshot snapshot(const InferenceNet& q, const Discriminator& t, const HyperPrior& h) {
  return {q.params.values(), t.params.values(), h.params.values()};
}

inline void restore(const Snapshot& s, InferenceNet& q, Discriminator& t, HyperPrior& h) {
  q.params.values() = s.inference;
  t.params.values() = s.critic;
  h.params.values() = s.hyper;
}

}  // namespace detail

/// Alternates n_critic critic updates with one (theta, psi) update per outer
/// step, then stores `latent_sample_count` draws from q. With a validation
/// set the best parameters by validation NLL are kept and training stops
/// after `patience` evaluations without improvement. A non-finite loss or
/// gradient stops training; the fit then holds the parameters from before
/// the failing step and `aborted` is set.
inline FitResult train(const Dataset& data, const TrainConfig& cfg,
                       const Dataset* validation = nullptr, const TrainObserver& observer = {}) {
  cfg.validate();
  data.validate();
  if (data.rows() == 0) throw UsageError("training set is empty");
  if (validation != nullptr) {
    validation->validate();
    if (validation->cols() != data.cols()) throw ShapeError("validation columns differ from training");
    if (validation->rows() == 0) throw UsageError("validation set is empty");
  }

  std::mt19937_64 rng(cfg.seed);
  double mean_y = 0.0;
  for (double y : data.responses) mean_y += y;
  mean_y /= static_cast<double>(data.rows());
  const double intercept = mean_y > 0.0 ? std::log(mean_y) : 0.0;

  FitResult fit;
  fit.config = cfg;
  fit.column_names = data.column_names;
  fit.group_labels = data.group_labels;
  fit.group_count = data.group_count;
  fit.inference = InferenceNet(data.cols(), data.group_count, cfg.shape, rng, cfg.output_init_scale, intercept);
  const std::size_t latent_dim = global_latent_dim(data.cols());
  fit.critic = Discriminator(latent_dim, cfg.shape.critic_hidden, rng);
  if (cfg.freeze_critic) std::fill(fit.critic.params.values().begin(), fit.critic.params.values().end(), 0.0);
  fit.hyper_prior = HyperPrior(latent_dim);

  InferenceNet& q = fit.inference;
  Discriminator& t = fit.critic;
  HyperPrior& h = fit.hyper_prior;
  ad::AdamState q_state(q.params.size(), cfg.inference_optimizer);
  ad::AdamState t_state(t.params.size(), cfg.critic_optimizer);
  ad::AdamState h_state(h.params.size(), cfg.hyper_optimizer);

  const bool use_validation = validation != nullptr && cfg.patience > 0;
  double best_nll = std::numeric_limits<double>::infinity();
  detail::Snapshot best = detail::snapshot(q, t, h);
  int stale = 0;
  const std::uint64_t eval_seed = cfg.seed ^ 0x9e3779b97f4a7c15ULL;

  for (long step = 0; step < cfg.outer_steps; ++step) {
    const detail::Snapshot last_good = detail::snapshot(q, t, h);
    try {
      double critic_loss = 2.0 * std::numbers::ln2;
      if (!cfg.freeze_critic) {
        for (int k = 0; k < cfg.n_critic; ++k) {
          std::vector<std::vector<double>> zq, zp;
          zq.reserve(cfg.critic_batch_size);
          zp.reserve(cfg.critic_batch_size);
          for (std::size_t i = 0; i < cfg.critic_batch_size; ++i) {
            zq.push_back(q.global(standard_normal_vector(q.noise_dim(), rng)));
          }
          for (std::size_t i = 0; i < cfg.critic_batch_size; ++i) zp.push_back(sample_prior(h, rng));
          const PhaseGradients g = critic_gradients(q, t, h, zq, zp);
          if (!std::isfinite(g.loss)) throw NumericalAbort("non-finite critic loss", step);
          ad::adam_step(t.params, g.critic, t_state);
          critic_loss = g.loss;
        }
      }
      const auto draws = draw_generator_noise(q, data, cfg, rng);
      const PhaseGradients g = generator_gradients(data, q, t, h, draws, cfg.truncation);
      if (!std::isfinite(g.loss)) throw NumericalAbort("non-finite generator loss", step);
      ad::adam_step(q.params, g.inference, q_state);
      if (!cfg.freeze_hyper_prior) ad::adam_step(h.params, g.hyper, h_state);

      fit.trace.discriminator.push_back(critic_loss);
      fit.trace.generator.push_back(g.loss);
      fit.steps_completed = step + 1;
      if (observer) observer(step, critic_loss, g.loss);
    } catch (const NumericalAbort& e) {
      detail::restore(last_good, q, t, h);
      fit.aborted = true;
      fit.abort_step = step;
      fit.abort_reason = e.what();
      break;
    } catch (const NonFiniteGradient& e) {
      detail::restore(last_good, q, t, h);
      fit.aborted = true;
      fit.abort_step = step;
      fit.abort_reason = e.what();
      break;
    } catch (const ObservationError& e) {
      detail::restore(last_good, q, t, h);
      fit.aborted = true;
      fit.abort_step = step;
      fit.abort_reason = e.what();
      break;
    }

    if (use_validation && (step + 1) % cfg.eval_every == 0) {
      std::mt19937_64 eval_rng(eval_seed);
      double nll = std::numeric_limits<double>::infinity();
      try {
        nll = validation_nll(*validation, q, cfg.truncation, cfg.validation_draws, eval_rng);
      } catch (const ObservationError&) {
      }
      fit.trace.validation.push_back({step + 1, nll});
      if (nll < best_nll) {
        best_nll = nll;
        best = detail::snapshot(q, t, h);
        fit.best_step = step + 1;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        fit.early_stopped = true;
        break;
      }
    }
  }

  if (use_validation && fit.best_step > 0 && !fit.aborted) detail::restore(best, q, t, h);

  fit.draws.reserve(cfg.latent_sample_count);
  for (std::size_t s = 0; s < cfg.latent_sample_count; ++s) fit.draws.push_back(sample_posterior(q, rng));
  return fit;
}

// --- prediction -------------------------------------------------------------

struct PredictiveSummary {
  std::vector<double> mean;
  std::vector<double> q05;
  std::vector<double> q50;
  std::vector<double> q95;
};

/// Predictive mean E[mu | x] averaged over the stored draws, and quantiles
/// of one compound Poisson-Gamma draw per posterior draw. Rows whose group
/// id is beyond the fitted groups (or that carry no group) get a fresh
/// b = sigma_b e per draw.
inline PredictiveSummary posterior_predict(const FitResult& fit, const Dataset& rows,
                                           std::mt19937_64& rng) {
  if (fit.draws.empty()) throw UsageError("fit holds no posterior draws");
  const std::size_t d = fit.draws.front().fixed_weights.size();
  if (rows.cols() + 1 != d) {
    throw ShapeError("prediction rows have " + std::to_string(rows.cols()) + " covariates, fit expects " +
                     std::to_string(d - 1));
  }
  std::normal_distribution<double> normal;
  const std::size_t n = rows.rows();
  const std::size_t s_count = fit.draws.size();
  PredictiveSummary out;
  out.mean.assign(n, 0.0);
  std::vector<std::vector<double>> sims(n, std::vector<double>(s_count));
  for (std::size_t s = 0; s < s_count; ++s) {
    const LatentAssignment& z = fit.draws[s];
    const double p = z.p_index(), phi = z.dispersion(), sigma_b = z.sigma_b();
    for (std::size_t i = 0; i < n; ++i) {
      double eta = detail::linear_term(z.fixed_weights, rows.row(i));
      if (fit.group_count > 0) {
        const int g = rows.has_groups() ? rows.group_index[i] : -1;
        eta += g >= 0 && g < static_cast<int>(z.group_noise.size())
                   ? sigma_b * z.group_noise[static_cast<std::size_t>(g)]
                   : sigma_b * normal(rng);
      }
      if (!(std::abs(eta) <= detail::kEtaLimit)) {
        throw ObservationError("linear predictor overflows the log link at row " + std::to_string(i), i);
      }
      const double mu = std::exp(eta);
      out.mean[i] += mu;
      sims[i][s] = tweedie_sample(to_compound({mu, p, phi}), rng);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.mean[i] /= static_cast<double>(s_count);
    std::sort(sims[i].begin(), sims[i].end());
    out.q05.push_back(stats::quantile_sorted(sims[i], 0.05));
    out.q50.push_back(stats::quantile_sorted(sims[i], 0.50));
    out.q95.push_back(stats::quantile_sorted(sims[i], 0.95));
  }
  return out;
}

}  // namespace tweedie_avb
