#pragma once

// JSON documents for configs, fits and chains (nlohmann::json).
//
// Readers fill missing keys with defaults and reject unknown keys, so an
// echoed config is always the complete, resolved one.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "tweedie_avb/avb.hpp"
#include "tweedie_avb/data_io.hpp"
#include "tweedie_avb/errors.hpp"
#include "tweedie_avb/mcmc.hpp"

namespace tweedie_avb {

using json = nlohmann::json;

namespace detail {

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  template <class T>
  ObjectReader& opt(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return *this;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  template <class T>
  ObjectReader& req(const char* key, T& out) {
    if (!j_.contains(key)) throw ConfigError(where_ + ": missing key '" + key + "'");
    return opt(key, out);
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.contains(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

// --- leaf configs -----------------------------------------------------------------

inline void to_json(json& j, const TruncationConfig& t) { j = {{"n_max", t.n_max}, {"adaptive", t.adaptive}}; }
inline void from_json(const json& j, TruncationConfig& t) {
  detail::ObjectReader r(j, "truncation");
  r.opt("n_max", t.n_max).opt("adaptive", t.adaptive).finish();
  t.validate();
}

namespace ad {
inline void to_json(json& j, const AdamConfig& a) {
  j = {{"learning_rate", a.learning_rate},
       {"beta1", a.beta1},
       {"beta2", a.beta2},
       {"epsilon", a.epsilon},
       {"clip_norm", a.clip_norm}};
}
inline void from_json(const json& j, AdamConfig& a) {
  tweedie_avb::detail::ObjectReader r(j, "optimizer");
  r.opt("learning_rate", a.learning_rate)
      .opt("beta1", a.beta1)
      .opt("beta2", a.beta2)
      .opt("epsilon", a.epsilon)
      .opt("clip_norm", a.clip_norm)
      .finish();
}
}  // namespace ad

inline void to_json(json& j, const NetworkShape& s) {
  j = {{"noise_dim", s.noise_dim}, {"inference_hidden", s.inference_hidden}, {"critic_hidden", s.critic_hidden}};
}
inline void from_json(const json& j, NetworkShape& s) {
  detail::ObjectReader r(j, "shape");
  r.opt("noise_dim", s.noise_dim).opt("inference_hidden", s.inference_hidden).opt("critic_hidden", s.critic_hidden);
  r.finish();
  s.validate();
}

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"n_critic", c.n_critic},
       {"minibatch_size", c.minibatch_size},
       {"outer_steps", c.outer_steps},
       {"truncation", c.truncation},
       {"inference_optimizer", c.inference_optimizer},
       {"critic_optimizer", c.critic_optimizer},
       {"hyper_optimizer", c.hyper_optimizer},
       {"seed", c.seed},
       {"latent_sample_count", c.latent_sample_count},
       {"latent_draws_per_step", c.latent_draws_per_step},
       {"critic_batch_size", c.critic_batch_size},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"validation_draws", c.validation_draws},
       {"shape", c.shape},
       {"output_init_scale", c.output_init_scale},
       {"freeze_critic", c.freeze_critic},
       {"freeze_hyper_prior", c.freeze_hyper_prior}};
}
inline void from_json(const json& j, TrainConfig& c) {
  detail::ObjectReader r(j, "train");
  r.opt("n_critic", c.n_critic)
      .opt("minibatch_size", c.minibatch_size)
      .opt("outer_steps", c.outer_steps)
      .opt("truncation", c.truncation)
      .opt("inference_optimizer", c.inference_optimizer)
      .opt("critic_optimizer", c.critic_optimizer)
      .opt("hyper_optimizer", c.hyper_optimizer)
      .opt("seed", c.seed)
      .opt("latent_sample_count", c.latent_sample_count)
      .opt("latent_draws_per_step", c.latent_draws_per_step)
      .opt("critic_batch_size", c.critic_batch_size)
      .opt("eval_every", c.eval_every)
      .opt("patience", c.patience)
      .opt("validation_draws", c.validation_draws)
      .opt("shape", c.shape)
      .opt("output_init_scale", c.output_init_scale)
      .opt("freeze_critic", c.freeze_critic)
      .opt("freeze_hyper_prior", c.freeze_hyper_prior)
      .finish();
  c.validate();
}

inline void to_json(json& j, const StepSizes& s) {
  j = json::object();
  for (std::size_t k = 0; k < kChainBlocks; ++k) {
    const auto b = static_cast<ChainBlock>(k);
    j[block_name(b)] = s[b];
  }
}
inline void from_json(const json& j, StepSizes& s) {
  detail::ObjectReader r(j, "step_sizes");
  for (std::size_t k = 0; k < kChainBlocks; ++k) {
    const auto b = static_cast<ChainBlock>(k);
    r.opt(block_name(b), s[b]);
  }
  r.finish();
}

inline json hyper_prior_json(const HyperPrior& h) {
  return {{"loc", std::vector<double>(h.loc().begin(), h.loc().end())},
          {"log_scale", std::vector<double>(h.log_scale().begin(), h.log_scale().end())}};
}

inline HyperPrior hyper_prior_from_json(const json& j) {
  std::vector<double> loc, log_scale;
  detail::ObjectReader r(j, "prior");
  r.req("loc", loc).req("log_scale", log_scale).finish();
  if (loc.size() != log_scale.size()) throw ConfigError("prior: loc and log_scale lengths differ");
  HyperPrior h(loc.size());
  std::copy(loc.begin(), loc.end(), h.params.block("hyper.loc").begin());
  std::copy(log_scale.begin(), log_scale.end(), h.params.block("hyper.log_scale").begin());
  return h;
}

inline void to_json(json& j, const ChainConfig& c) {
  j = {{"step_sizes", c.step_sizes},
       {"iterations", c.iterations},
       {"burn_in", c.burn_in},
       {"thinning", c.thinning},
       {"seed", c.seed},
       {"use_likelihood", c.use_likelihood},
       {"adapt", c.adapt},
       {"adapt_interval", c.adapt_interval},
       {"target_acceptance", c.target_acceptance},
       {"truncation", c.truncation},
       {"prior", c.prior ? hyper_prior_json(*c.prior) : json(nullptr)}};
}
inline void from_json(const json& j, ChainConfig& c) {
  detail::ObjectReader r(j, "mcmc");
  r.opt("step_sizes", c.step_sizes)
      .opt("iterations", c.iterations)
      .opt("burn_in", c.burn_in)
      .opt("thinning", c.thinning)
      .opt("seed", c.seed)
      .opt("use_likelihood", c.use_likelihood)
      .opt("adapt", c.adapt)
      .opt("adapt_interval", c.adapt_interval)
      .opt("target_acceptance", c.target_acceptance)
      .opt("truncation", c.truncation);
  if (const json* p = r.sub("prior")) c.prior = hyper_prior_from_json(*p);
  r.finish();
  c.validate();
}

inline void to_json(json& j, const SplitSpec& s) {
  j = {{"train", s.train}, {"valid", s.valid}, {"test", s.test}, {"seed", s.seed}};
}
inline void from_json(const json& j, SplitSpec& s) {
  detail::ObjectReader r(j, "split");
  r.opt("train", s.train).opt("valid", s.valid).opt("test", s.test).opt("seed", s.seed).finish();
  s.validate();
}

inline void to_json(json& j, const SchemaConfig& s) {
  j = {{"response_column", s.response_column},
       {"fixed_columns", s.fixed_columns},
       {"group_column", s.group_column ? json(*s.group_column) : json(nullptr)},
       {"categorical_columns", s.categorical_columns},
       {"response_scale", s.response_scale}};
}
inline void from_json(const json& j, SchemaConfig& s) {
  detail::ObjectReader r(j, "schema");
  r.req("response_column", s.response_column)
      .opt("fixed_columns", s.fixed_columns)
      .opt("categorical_columns", s.categorical_columns)
      .opt("response_scale", s.response_scale);
  if (const json* g = r.sub("group_column")) s.group_column = g->get<std::string>();
  r.finish();
  s.validate();
}

inline void to_json(json& j, const SimTruth& t) {
  j = {{"fixed_weights", t.fixed_weights},
       {"p_index", t.p_index},
       {"dispersion", t.dispersion},
       {"sigma_b", t.sigma_b},
       {"group_effects", t.group_effects},
       {"rows", t.rows},
       {"groups", t.groups},
       {"covariate_mean", t.covariate_mean},
       {"covariate_sd", t.covariate_sd}};
}
inline void from_json(const json& j, SimTruth& t) {
  detail::ObjectReader r(j, "simulate");
  r.opt("fixed_weights", t.fixed_weights)
      .opt("p_index", t.p_index)
      .opt("dispersion", t.dispersion)
      .opt("sigma_b", t.sigma_b)
      .opt("group_effects", t.group_effects)
      .opt("rows", t.rows)
      .opt("groups", t.groups)
      .opt("covariate_mean", t.covariate_mean)
      .opt("covariate_sd", t.covariate_sd)
      .finish();
  t.validate();
}

inline void to_json(json& j, const DataEncoding& e) {
  json cats = json::array();
  for (const auto& c : e.categoricals) cats.push_back({{"column", c.column}, {"levels", c.levels}});
  j = {{"categoricals", cats}, {"group_labels", e.group_labels}};
}
inline void from_json(const json& j, DataEncoding& e) {
  detail::ObjectReader r(j, "encoding");
  r.opt("group_labels", e.group_labels);
  e.categoricals.clear();
  if (const json* cats = r.sub("categoricals")) {
    for (const json& c : *cats) {
      CategoricalEncoding ce;
      detail::ObjectReader rc(c, "encoding.categoricals");
      rc.req("column", ce.column).req("levels", ce.levels).finish();
      e.categoricals.push_back(std::move(ce));
    }
  }
  r.finish();
}

inline void to_json(json& j, const Standardization& s) {
  j = {{"means", s.means}, {"scales", s.scales}, {"applied", s.applied}};
}
inline void from_json(const json& j, Standardization& s) {
  detail::ObjectReader r(j, "standardization");
  r.req("means", s.means).req("scales", s.scales).req("applied", s.applied).finish();
  if (s.scales.size() != s.means.size() || s.applied.size() != s.means.size()) {
    throw ConfigError("standardization: vector lengths differ");
  }
}

// --- draws and parameters ---------------------------------------------------------

/// Column-oriented draws; the constrained values are written alongside the raw
/// latents for readability and ignored on read.
inline json draws_to_json(const std::vector<LatentAssignment>& draws) {
  std::vector<std::vector<double>> w, u;
  std::vector<double> rp, rld, rls, p, phi, sb;
  for (const auto& z : draws) {
    w.push_back(z.fixed_weights);
    u.push_back(z.group_noise);
    rp.push_back(z.raw_p);
    rld.push_back(z.raw_log_dispersion);
    rls.push_back(z.raw_log_sigma_b);
    p.push_back(z.p_index());
    phi.push_back(z.dispersion());
    sb.push_back(z.sigma_b());
  }
  return {{"count", draws.size()}, {"fixed_weights", w},         {"raw_p", rp},     {"raw_log_dispersion", rld},
          {"raw_log_sigma_b", rls}, {"group_noise", u},          {"p_index", p},    {"dispersion", phi},
          {"sigma_b", sb}};
}

inline std::vector<LatentAssignment> draws_from_json(const json& j) {
  std::size_t count = 0;
  std::vector<std::vector<double>> w, u;
  std::vector<double> rp, rld, rls, ignored;
  detail::ObjectReader r(j, "draws");
  r.req("count", count)
      .req("fixed_weights", w)
      .req("raw_p", rp)
      .req("raw_log_dispersion", rld)
      .req("raw_log_sigma_b", rls)
      .req("group_noise", u)
      .opt("p_index", ignored)
      .opt("dispersion", ignored)
      .opt("sigma_b", ignored)
      .finish();
  if (w.size() != count || u.size() != count || rp.size() != count || rld.size() != count || rls.size() != count) {
    throw ConfigError("draws: column lengths disagree with count");
  }
  std::vector<LatentAssignment> out(count);
  for (std::size_t s = 0; s < count; ++s) {
    out[s].fixed_weights = std::move(w[s]);
    out[s].group_noise = std::move(u[s]);
    out[s].raw_p = rp[s];
    out[s].raw_log_dispersion = rld[s];
    out[s].raw_log_sigma_b = rls[s];
    out[s].validate();
  }
  return out;
}

inline json params_to_json(const ad::ParamStore& store) {
  json j = json::object();
  for (const auto& name : store.names()) {
    const auto b = store.block(name);
    j[name] = std::vector<double>(b.begin(), b.end());
  }
  return j;
}

/// Overwrites every block of `store`; names and lengths must match exactly.
inline void params_from_json(const json& j, ad::ParamStore& store, const std::string& where) {
  detail::ObjectReader r(j, where);
  for (const auto& name : store.names()) {
    std::vector<double> v;
    r.req(name.c_str(), v);
    auto b = store.block(name);
    if (v.size() != b.size()) throw ConfigError(where + "." + name + ": length mismatch");
    std::copy(v.begin(), v.end(), b.begin());
  }
  r.finish();
}

// --- fits and chains --------------------------------------------------------------

namespace detail {
inline void check_dims_for_fit(const LatentAssignment& z, std::size_t covariates, int groups) {
  if (z.fixed_weights.size() != covariates + 1 || z.group_noise.size() != static_cast<std::size_t>(groups)) {
    throw ConfigError("fit: draw dimensions do not match the stored columns and groups");
  }
}
}  // namespace detail

inline json fit_to_json(const FitResult& f) {
  json valid = json::array();
  for (const auto& v : f.trace.validation) valid.push_back({{"step", v.step}, {"nll", v.nll}});
  return {{"kind", "avb_fit"},
          {"config", f.config},
          {"column_names", f.column_names},
          {"group_labels", f.group_labels},
          {"group_count", f.group_count},
          {"status",
           {{"steps_completed", f.steps_completed},
            {"best_step", f.best_step},
            {"early_stopped", f.early_stopped},
            {"aborted", f.aborted},
            {"abort_step", f.abort_step},
            {"abort_reason", f.abort_reason}}},
          {"trace", {{"discriminator", f.trace.discriminator}, {"generator", f.trace.generator}, {"validation", valid}}},
          {"parameters",
           {{"inference", params_to_json(f.inference.params)},
            {"critic", params_to_json(f.critic.params)},
            {"hyper_prior", params_to_json(f.hyper_prior.params)}}},
          {"draws", draws_to_json(f.draws)}};
}

inline FitResult fit_from_json(const json& j) {
  FitResult f;
  std::string kind;
  detail::ObjectReader r(j, "fit");
  r.req("kind", kind);
  if (kind != "avb_fit") throw ConfigError("fit: document kind is '" + kind + "', expected 'avb_fit'");
  r.req("config", f.config).req("column_names", f.column_names).req("group_labels", f.group_labels);
  r.req("group_count", f.group_count);

  if (const json* s = r.sub("status")) {
    detail::ObjectReader rs(*s, "fit.status");
    rs.opt("steps_completed", f.steps_completed)
        .opt("best_step", f.best_step)
        .opt("early_stopped", f.early_stopped)
        .opt("aborted", f.aborted)
        .opt("abort_step", f.abort_step)
        .opt("abort_reason", f.abort_reason)
        .finish();
  }
  if (const json* t = r.sub("trace")) {
    detail::ObjectReader rt(*t, "fit.trace");
    rt.opt("discriminator", f.trace.discriminator).opt("generator", f.trace.generator);
    if (const json* v = rt.sub("validation")) {
      for (const json& pt : *v) f.trace.validation.push_back({pt.at("step").get<long>(), pt.at("nll").get<double>()});
    }
    rt.finish();
  }

  const std::size_t d = f.column_names.size();
  std::mt19937_64 scratch(0);
  f.inference = InferenceNet(d, f.group_count, f.config.shape, scratch);
  f.critic = Discriminator(global_latent_dim(d), f.config.shape.critic_hidden, scratch);
  f.hyper_prior = HyperPrior(global_latent_dim(d));
  const json* params = r.sub("parameters");
  if (params == nullptr) throw ConfigError("fit: missing key 'parameters'");
  detail::ObjectReader rp(*params, "fit.parameters");
  if (const json* q = rp.sub("inference")) params_from_json(*q, f.inference.params, "fit.parameters.inference");
  if (const json* c = rp.sub("critic")) params_from_json(*c, f.critic.params, "fit.parameters.critic");
  if (const json* h = rp.sub("hyper_prior")) params_from_json(*h, f.hyper_prior.params, "fit.parameters.hyper_prior");
  rp.finish();

  const json* draws = r.sub("draws");
  if (draws == nullptr) throw ConfigError("fit: missing key 'draws'");
  f.draws = draws_from_json(*draws);
  r.finish();
  for (const auto& z : f.draws) detail::check_dims_for_fit(z, d, f.group_count);
  return f;
}

inline json chain_to_json(const ChainResult& c) {
  json acc = json::object();
  for (std::size_t k = 0; k < kChainBlocks; ++k) acc[block_name(static_cast<ChainBlock>(k))] = c.acceptance[k];
  return {{"kind", "mcmc_chain"},
          {"config", c.config},
          {"column_names", c.column_names},
          {"group_labels", c.group_labels},
          {"group_count", c.group_count},
          {"acceptance", acc},
          {"tuned_step_sizes", c.tuned_steps},
          {"warnings", c.warnings},
          {"draws", draws_to_json(c.draws)}};
}

inline ChainResult chain_from_json(const json& j) {
  ChainResult c;
  std::string kind;
  detail::ObjectReader r(j, "chain");
  r.req("kind", kind);
  if (kind != "mcmc_chain") throw ConfigError("chain: document kind is '" + kind + "', expected 'mcmc_chain'");
  r.req("config", c.config)
      .req("column_names", c.column_names)
      .req("group_labels", c.group_labels)
      .req("group_count", c.group_count)
      .opt("tuned_step_sizes", c.tuned_steps)
      .opt("warnings", c.warnings);
  if (const json* acc = r.sub("acceptance")) {
    detail::ObjectReader ra(*acc, "chain.acceptance");
    for (std::size_t k = 0; k < kChainBlocks; ++k) ra.opt(block_name(static_cast<ChainBlock>(k)), c.acceptance[k]);
    ra.finish();
  }
  const json* draws = r.sub("draws");
  if (draws == nullptr) throw ConfigError("chain: missing key 'draws'");
  c.draws = draws_from_json(*draws);
  r.finish();
  return c;
}

// --- files -------------------------------------------------------------------------

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) throw DataError("write to '" + path + "' failed");
}

}  // namespace tweedie_avb
