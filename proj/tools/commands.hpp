#pragma once

// simulate / fit / evaluate / predict, as called by the tweedie-avb executable.

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "tweedie_avb.hpp"

namespace tweedie_avb::cli {

namespace fs = std::filesystem;

// --- logging ----------------------------------------------------------------------

enum class LogLevel { quiet = 0, info = 1, debug = 2 };

/// TWEEDIE_AVB_LOG = quiet | info | debug (default info).
inline LogLevel log_level() {
  const char* v = std::getenv("TWEEDIE_AVB_LOG");
  if (v == nullptr) return LogLevel::info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return LogLevel::quiet;
  if (s == "debug" || s == "2") return LogLevel::debug;
  return LogLevel::info;
}

inline void log(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) <= static_cast<int>(log_level())) std::cerr << "tweedie-avb: " << msg << '\n';
}

// --- configuration ----------------------------------------------------------------

struct NamedPath {
  std::string name;
  std::string path;
};

struct EvaluateSettings {
  /// Fits compared in the Gini matrix; defaults to {"avb", <output>/fit.json}.
  std::vector<NamedPath> fits;
  std::optional<std::string> chain;
  std::optional<std::string> truth;
  /// Overrides the data path recorded in the fit.
  std::optional<std::string> data;
  std::size_t bins = 30;
  std::size_t splits = 20;
  double split_fraction = 0.5;
};

struct PredictSettings {
  std::optional<std::string> fit;
  std::optional<std::string> input;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output = "out";
  std::optional<std::string> data;
  std::optional<SchemaConfig> schema;
  SplitSpec split;
  bool standardize = true;
  TrainConfig train;
  bool run_mcmc = false;
  ChainConfig mcmc;
  SimTruth simulate;
  EvaluateSettings evaluate;
  PredictSettings predict;

  /// The global seed drives every seeded component.
  void apply_seed() {
    split.seed = seed;
    train.seed = seed;
    mcmc.seed = seed;
  }

  SchemaConfig schema_or_default() const {
    if (schema) return *schema;
    SchemaConfig s;
    s.response_column = "y";
    for (std::size_t j = 0; j < simulate.covariates(); ++j) s.fixed_columns.push_back("x" + std::to_string(j + 1));
    if (simulate.groups > 0) s.group_column = "group";
    return s;
  }

  fs::path out_path(const std::string& name) const { return fs::path(output) / name; }
};

inline void to_json(json& j, const NamedPath& n) { j = {{"name", n.name}, {"path", n.path}}; }
inline void from_json(const json& j, NamedPath& n) {
  detail::ObjectReader r(j, "evaluate.fits");
  r.req("name", n.name).req("path", n.path).finish();
}

inline json optional_json(const std::optional<std::string>& v) { return v ? json(*v) : json(nullptr); }

inline void to_json(json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"output", c.output},
       {"data", optional_json(c.data)},
       {"schema", c.schema_or_default()},
       {"split", c.split},
       {"standardize", c.standardize},
       {"train", c.train},
       {"run_mcmc", c.run_mcmc},
       {"mcmc", c.mcmc},
       {"simulate", c.simulate},
       {"evaluate",
        {{"fits", c.evaluate.fits},
         {"chain", optional_json(c.evaluate.chain)},
         {"truth", optional_json(c.evaluate.truth)},
         {"data", optional_json(c.evaluate.data)},
         {"bins", c.evaluate.bins},
         {"splits", c.evaluate.splits},
         {"split_fraction", c.evaluate.split_fraction}}},
       {"predict", {{"fit", optional_json(c.predict.fit)}, {"input", optional_json(c.predict.input)}}}};
}

inline void read_optional_string(detail::ObjectReader& r, const char* key, std::optional<std::string>& out) {
  if (const json* v = r.sub(key)) {
    if (!v->is_string()) throw ConfigError(r.where() + "." + key + ": expected a string");
    out = v->get<std::string>();
  }
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  detail::ObjectReader r(j, "config");
  r.opt("seed", c.seed)
      .opt("output", c.output)
      .opt("split", c.split)
      .opt("standardize", c.standardize)
      .opt("train", c.train)
      .opt("run_mcmc", c.run_mcmc)
      .opt("mcmc", c.mcmc)
      .opt("simulate", c.simulate);
  read_optional_string(r, "data", c.data);
  if (const json* s = r.sub("schema")) c.schema = s->get<SchemaConfig>();
  if (const json* e = r.sub("evaluate")) {
    detail::ObjectReader re(*e, "config.evaluate");
    re.opt("fits", c.evaluate.fits)
        .opt("bins", c.evaluate.bins)
        .opt("splits", c.evaluate.splits)
        .opt("split_fraction", c.evaluate.split_fraction);
    read_optional_string(re, "chain", c.evaluate.chain);
    read_optional_string(re, "truth", c.evaluate.truth);
    read_optional_string(re, "data", c.evaluate.data);
    re.finish();
  }
  if (const json* p = r.sub("predict")) {
    detail::ObjectReader rp(*p, "config.predict");
    read_optional_string(rp, "fit", c.predict.fit);
    read_optional_string(rp, "input", c.predict.input);
    rp.finish();
  }
  r.finish();
  return c;
}

struct Overrides {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> n_max;
  std::optional<long> steps;
  bool mcmc = false;
};

/// Config file (if any), then command-line overrides, then validation.
inline RunConfig resolve_config(const Overrides& o) {
  RunConfig c = o.config_path ? run_config_from_json(read_json_file(*o.config_path)) : RunConfig{};
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output = *o.out;
  if (o.n_max) {
    c.train.truncation.n_max = *o.n_max;
    c.mcmc.truncation.n_max = *o.n_max;
  }
  if (o.steps) c.train.outer_steps = *o.steps;
  if (o.mcmc) c.run_mcmc = true;
  c.apply_seed();
  c.train.validate();
  c.mcmc.validate();
  c.split.validate();
  c.simulate.validate();
  if (c.schema) c.schema->validate();
  if (c.evaluate.bins == 0) throw ConfigError("evaluate.bins must be >= 1");
  if (c.evaluate.splits < 2) throw ConfigError("evaluate.splits must be >= 2");
  if (!(c.evaluate.split_fraction > 0.0 && c.evaluate.split_fraction <= 1.0)) {
    throw ConfigError("evaluate.split_fraction must lie in (0, 1]");
  }
  return c;
}

inline void prepare_output(const RunConfig& c, const std::string& command) {
  std::error_code ec;
  fs::create_directories(c.output, ec);
  if (ec || !fs::is_directory(c.output)) throw DataError("cannot create output directory '" + c.output + "'");
  write_json_file(c.out_path(command + "_config.json").string(), json(c));
}

// --- fit artifact -------------------------------------------------------------------

/// Everything needed to rebuild the design of new rows the way the fit saw it.
struct Preprocessing {
  std::string data_path;
  SchemaConfig schema;
  DataEncoding encoding;
  std::optional<Standardization> standardization;
  SplitSpec split_spec;
  SplitIndices split;
  double train_response_mean = 0.0;

  Dataset prepare(const Dataset& raw) const { return standardization ? standardization->apply(raw) : raw; }
};

inline json preprocessing_json(const Preprocessing& p) {
  return {{"data_path", p.data_path},
          {"schema", p.schema},
          {"encoding", p.encoding},
          {"standardization", p.standardization ? json(*p.standardization) : json(nullptr)},
          {"split", {{"spec", p.split_spec}, {"train", p.split.train}, {"valid", p.split.valid}, {"test", p.split.test}}},
          {"train_response_mean", p.train_response_mean}};
}

inline Preprocessing preprocessing_from_json(const json& j) {
  Preprocessing p;
  detail::ObjectReader r(j, "preprocessing");
  r.req("data_path", p.data_path).req("schema", p.schema).req("encoding", p.encoding);
  r.req("train_response_mean", p.train_response_mean);
  if (const json* s = r.sub("standardization")) p.standardization = s->get<Standardization>();
  const json* split = r.sub("split");
  if (split == nullptr) throw ConfigError("preprocessing: missing key 'split'");
  detail::ObjectReader rs(*split, "preprocessing.split");
  rs.req("spec", p.split_spec).req("train", p.split.train).req("valid", p.split.valid).req("test", p.split.test);
  rs.finish();
  r.finish();
  return p;
}

struct FitArtifact {
  FitResult fit;
  Preprocessing prep;
};

inline FitArtifact read_fit_artifact(const std::string& path) {
  if (!fs::exists(path)) throw DataError("fit artifact '" + path + "' not found");
  const json j = read_json_file(path);
  if (!j.is_object() || !j.contains("preprocessing")) {
    throw ConfigError("'" + path + "' is not a fit artifact (no 'preprocessing' section)");
  }
  json fit_part = j;
  fit_part.erase("preprocessing");
  return {fit_from_json(fit_part), preprocessing_from_json(j.at("preprocessing"))};
}

// --- commands --------------------------------------------------------------------------

inline int cmd_simulate(const RunConfig& c) {
  prepare_output(c, "simulate");
  std::mt19937_64 rng(c.seed);
  const Simulation sim = simulate_dataset(c.simulate, rng);
  write_csv(c.out_path("data.csv"), sim.data);
  write_json_file(c.out_path("truth.json").string(), json(sim.truth));
  log(LogLevel::info, "wrote " + std::to_string(sim.data.rows()) + " rows to " + c.out_path("data.csv").string());
  return 0;
}

inline void write_trace_csv(const fs::path& path, const LossTrace& t) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "step,discriminator,generator,validation_nll\n";
  std::size_t v = 0;
  for (std::size_t s = 0; s < t.generator.size(); ++s) {
    out << s + 1 << ',' << detail::format_double(t.discriminator.at(s)) << ','
        << detail::format_double(t.generator[s]) << ',';
    if (v < t.validation.size() && t.validation[v].step == static_cast<long>(s + 1)) {
      out << detail::format_double(t.validation[v].nll);
      ++v;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline int cmd_fit(const RunConfig& c) {
  if (!c.data) throw ConfigError("fit needs a data path ('data' in the config)");
  prepare_output(c, "fit");
  Preprocessing prep;
  prep.data_path = *c.data;
  prep.schema = c.schema_or_default();
  LoadedCsv loaded = read_csv_dataset(*c.data, prep.schema);
  prep.encoding = loaded.encoding;
  prep.split_spec = c.split;
  prep.split = split_indices(loaded.data.rows(), c.split);

  Dataset train_rows = loaded.data.subset(prep.split.train);
  Dataset valid_rows = loaded.data.subset(prep.split.valid);
  if (c.standardize) {
    std::vector<std::string> warnings;
    prep.standardization = fit_standardization(train_rows, &warnings);
    for (const auto& w : warnings) log(LogLevel::info, "warning: " + w);
  }
  train_rows = prep.prepare(train_rows);
  valid_rows = prep.prepare(valid_rows);
  prep.train_response_mean = stats::mean(train_rows.responses);

  log(LogLevel::info, "fitting on " + std::to_string(train_rows.rows()) + " rows, " +
                          std::to_string(train_rows.cols()) + " covariates, " +
                          std::to_string(train_rows.group_count) + " groups");
  const TrainObserver observer = [](long step, double critic, double generator) {
    if ((step + 1) % 500 == 0) {
      log(LogLevel::debug, "step " + std::to_string(step + 1) + " critic " + std::to_string(critic) + " generator " +
                               std::to_string(generator));
    }
  };
  const FitResult fit = train(train_rows, c.train, &valid_rows, observer);

  json doc = fit_to_json(fit);
  doc["preprocessing"] = preprocessing_json(prep);
  const fs::path fit_path = c.out_path("fit.json");
  write_json_file(fit_path.string(), doc);
  write_trace_csv(c.out_path("trace.csv"), fit.trace);

  if (c.run_mcmc) {
    log(LogLevel::info, "running reference chain");
    const ChainResult chain = run_chain(train_rows, c.mcmc);
    for (const auto& w : chain.warnings) log(LogLevel::info, "warning: " + w);
    write_json_file(c.out_path("chain.json").string(), chain_to_json(chain));
  }

  if (fit.aborted) {
    log(LogLevel::quiet, "training aborted at step " + std::to_string(fit.abort_step) + ": " + fit.abort_reason +
                             "; last good state saved to " + fit_path.string());
    return 2;
  }
  log(LogLevel::info, "wrote " + fit_path.string());
  return 0;
}

namespace detail_cli {

inline Dataset load_rows(const Preprocessing& prep, const std::string& path, bool response_optional) {
  LoadOptions opt;
  opt.encoding = &prep.encoding;
  opt.response_optional = response_optional;
  return read_csv_dataset(path, prep.schema, opt).data;
}

inline void write_lorenz_csv(const fs::path& path, const LorenzCurve& curve) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "share_baseline,share_outcome\n";
  for (const auto& pt : curve.points) {
    out << detail::format_double(pt.share_baseline) << ',' << detail::format_double(pt.share_outcome) << '\n';
  }
}

inline json summary_json(const PosteriorSummary& s) {
  return {{"mean", s.mean}, {"variance", s.variance}, {"q05", s.q05}, {"q50", s.q50}, {"q95", s.q95}};
}

template <class R>
json parameter_summaries(const R& r, std::size_t bins) {
  std::vector<double> s2;
  for (double s : r.sigma_b_draws()) s2.push_back(s * s);
  json weights = json::array();
  for (std::size_t k = 0; k <= r.column_names.size(); ++k) {
    weights.push_back(summary_json(posterior_summary(r.weight_draws(k), bins)));
  }
  return {{"draws", r.draws.size()},
          {"p_index", summary_json(posterior_summary(r.p_index_draws(), bins))},
          {"dispersion", summary_json(posterior_summary(r.dispersion_draws(), bins))},
          {"sigma_b2", summary_json(posterior_summary(s2, bins))},
          {"fixed_weights", weights}};
}

inline std::string safe_name(const std::string& s) {
  std::string out;
  for (char ch : s) out += std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' ? ch : '_';
  return out;
}

}  // namespace detail_cli

inline int cmd_evaluate(const RunConfig& c) {
  prepare_output(c, "evaluate");
  std::vector<NamedPath> fits = c.evaluate.fits;
  if (fits.empty()) fits.push_back({"avb", c.out_path("fit.json").string()});

  std::vector<FitArtifact> artifacts;
  for (const auto& f : fits) artifacts.push_back(read_fit_artifact(f.path));
  const Preprocessing& prep = artifacts.front().prep;
  const std::string data_path = c.evaluate.data.value_or(prep.data_path);
  if (!fs::exists(data_path)) throw DataError("test data '" + data_path + "' not found");
  const Dataset all = detail_cli::load_rows(prep, data_path, false);
  for (std::size_t i : prep.split.test) {
    if (i >= all.rows()) throw DataError("'" + data_path + "' has fewer rows than the recorded split");
  }
  const Dataset test_raw = all.subset(prep.split.test);
  const std::vector<double>& y = test_raw.responses;

  std::vector<NamedPredictions> models;
  models.push_back({"intercept", std::vector<double>(y.size(), prep.train_response_mean)});
  for (std::size_t k = 0; k < fits.size(); ++k) {
    std::mt19937_64 rng(c.seed);
    const Dataset rows = artifacts[k].prep.prepare(test_raw);
    models.push_back({fits[k].name, posterior_predict(artifacts[k].fit, rows, rng).mean});
  }
  std::optional<ChainResult> chain;
  if (c.evaluate.chain) {
    if (!fs::exists(*c.evaluate.chain)) throw DataError("chain artifact '" + *c.evaluate.chain + "' not found");
    chain = chain_from_json(read_json_file(*c.evaluate.chain));
    FitResult as_fit;
    as_fit.draws = chain->draws;
    as_fit.group_count = chain->group_count;
    as_fit.column_names = chain->column_names;
    std::mt19937_64 rng(c.seed);
    models.push_back({"mcmc", posterior_predict(as_fit, prep.prepare(test_raw), rng).mean});
  }

  GiniMatrix m = pairwise_gini_matrix(y, models);
  m.standard_errors = gini_split_standard_errors(y, models, c.evaluate.splits, c.evaluate.split_fraction, c.seed);

  {
    std::ofstream out(c.out_path("gini_matrix.csv"));
    if (!out) throw DataError("cannot write gini_matrix.csv");
    out << "baseline";
    for (const auto& n : m.names) out << ',' << detail::quote_csv(n);
    out << '\n';
    for (std::size_t i = 0; i < m.names.size(); ++i) {
      out << detail::quote_csv(m.names[i]);
      for (std::size_t j = 0; j < m.names.size(); ++j) {
        out << ',';
        if (m.entries[i][j]) out << detail::format_double(*m.entries[i][j]);
      }
      out << '\n';
    }
  }
  json entries = json::array(), errors = json::array();
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    json row = json::array(), se_row = json::array();
    for (std::size_t j = 0; j < m.names.size(); ++j) {
      row.push_back(m.entries[i][j] ? json(*m.entries[i][j]) : json(nullptr));
      se_row.push_back(m.standard_errors[i][j] ? json(*m.standard_errors[i][j]) : json(nullptr));
    }
    entries.push_back(row);
    errors.push_back(se_row);
  }
  write_json_file(c.out_path("gini_matrix.json").string(),
                  {{"names", m.names},
                   {"rows_are", "baseline"},
                   {"gini", entries},
                   {"standard_error", errors},
                   {"splits", c.evaluate.splits},
                   {"split_fraction", c.evaluate.split_fraction},
                   {"test_rows", y.size()}});
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t j = 0; j < models.size(); ++j) {
      if (i == j) continue;
      detail_cli::write_lorenz_csv(c.out_path("lorenz_" + detail_cli::safe_name(models[i].name) + "_" +
                                              detail_cli::safe_name(models[j].name) + ".csv"),
                                   ordered_lorenz(y, models[i].values, models[j].values));
    }
  }

  const FitResult& primary = artifacts.front().fit;
  json summary = {{fits.front().name, detail_cli::parameter_summaries(primary, c.evaluate.bins)}};
  if (chain) summary["mcmc"] = detail_cli::parameter_summaries(*chain, c.evaluate.bins);
  if (c.evaluate.truth) {
    const SimTruth truth = read_json_file(*c.evaluate.truth).get<SimTruth>();
    const RandomEffectBias bias = random_effect_bias(primary, truth.group_effects);
    summary["random_effect_bias"] = {
        {"per_group", bias.per_group}, {"mean_abs", bias.mean_abs}, {"max_abs", bias.max_abs}};
  }
  write_json_file(c.out_path("posterior_summary.json").string(), summary);

  const Histogram h = posterior_summary(primary.p_index_draws(), c.evaluate.bins).histogram;
  std::ofstream hist(c.out_path("posterior_p_hist.csv"));
  if (!hist) throw DataError("cannot write posterior_p_hist.csv");
  hist << "bin_lower,bin_upper,count\n";
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    hist << detail::format_double(h.edges[b]) << ',' << detail::format_double(h.edges[b + 1]) << ',' << h.counts[b]
         << '\n';
  }
  log(LogLevel::info, "evaluated " + std::to_string(models.size()) + " models on " + std::to_string(y.size()) +
                          " test rows");
  return 0;
}

/// Names the schema expects that the header of `path` lacks.
inline std::vector<std::string> missing_columns(const std::string& path, const SchemaConfig& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + path + "' is empty (header row required)");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  std::set<std::string> have;
  for (const auto& h : detail::split_csv_line(line, 1)) have.insert(detail::trim(h));
  std::vector<std::string> expected = schema.fixed_columns;
  expected.insert(expected.end(), schema.categorical_columns.begin(), schema.categorical_columns.end());
  if (schema.group_column) expected.push_back(*schema.group_column);
  std::vector<std::string> missing;
  for (const auto& e : expected) {
    if (!have.contains(e)) missing.push_back(e);
  }
  return missing;
}

inline int cmd_predict(const RunConfig& c) {
  if (!c.predict.input) throw ConfigError("predict needs an input path ('predict.input' in the config)");
  prepare_output(c, "predict");
  const std::string fit_path = c.predict.fit.value_or(c.out_path("fit.json").string());
  const FitArtifact art = read_fit_artifact(fit_path);
  const auto missing = missing_columns(*c.predict.input, art.prep.schema);
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw DataError("'" + *c.predict.input + "' lacks training columns: " + list);
  }
  const Dataset rows = art.prep.prepare(detail_cli::load_rows(art.prep, *c.predict.input, true));
  std::mt19937_64 rng(c.seed);
  const PredictiveSummary p = posterior_predict(art.fit, rows, rng);
  std::ofstream out(c.out_path("predictions.csv"));
  if (!out) throw DataError("cannot write predictions.csv");
  out << "row,mean,q05,q50,q95\n";
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    out << i << ',' << detail::format_double(p.mean[i]) << ',' << detail::format_double(p.q05[i]) << ','
        << detail::format_double(p.q50[i]) << ',' << detail::format_double(p.q95[i]) << '\n';
  }
  log(LogLevel::info, "wrote " + std::to_string(rows.rows()) + " predictions");
  return 0;
}

}  // namespace tweedie_avb::cli
