#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "commands.hpp"

using namespace tweedie_avb;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("tweedie_avb_cli_" + std::string(
                                             ::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  std::string str() const { return path_.string(); }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

struct CliRun {
  int code;
  std::string err;
};

/// Runs the executable with `args`, capturing stderr and the exit status.
CliRun run_cli(const std::string& args, const TempDir& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("TWEEDIE_AVB_LOG=info '") + TWEEDIE_AVB_CLI_PATH + "' " + args + " 2> '" +
                          err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

FitResult tiny_fit() {
  SimTruth t;
  t.rows = 120;
  t.groups = 3;
  std::mt19937_64 rng(4);
  const Dataset data = simulate_dataset(t, rng).data;
  TrainConfig c;
  c.outer_steps = 20;
  c.latent_sample_count = 15;
  c.seed = 2;
  return train(data, c);
}

}  // namespace

// --- configuration ------------------------------------------------------------------

TEST(RunConfig, JsonRoundTrip) {
  cli::RunConfig c;
  c.seed = 42;
  c.output = "o";
  c.data = "d.csv";
  c.train.outer_steps = 77;
  c.train.critic_optimizer.learning_rate = 3e-4;
  c.mcmc.step_sizes.raw_p = 0.17;
  c.mcmc.prior = standard_normal_prior(2);
  c.simulate.rows = 321;
  c.evaluate.fits = {{"a", "a.json"}, {"b", "b.json"}};
  c.evaluate.truth = "t.json";
  c.predict.input = "new.csv";
  const json j = c;
  const cli::RunConfig back = cli::run_config_from_json(j);
  EXPECT_EQ(json(back), j);
  EXPECT_EQ(back.train.outer_steps, 77);
  EXPECT_EQ(back.evaluate.fits[1].path, "b.json");
  ASSERT_TRUE(back.mcmc.prior.has_value());
}

TEST(RunConfig, UnknownKeysAreRejectedWithTheirPath) {
  try {
    cli::run_config_from_json(json::parse(R"({"train": {"outer_stpes": 3}})"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("outer_stpes"), std::string::npos);
  }
  EXPECT_THROW(cli::run_config_from_json(json::parse(R"({"evaluate": {"bins": 3, "colour": 1}})")), ConfigError);
  EXPECT_THROW(cli::run_config_from_json(json::parse(R"({"seed": "seven"})")), ConfigError);
  EXPECT_THROW(cli::run_config_from_json(json::parse("[1, 2]")), ConfigError);
}

TEST(RunConfig, GlobalSeedAndOverridesWin) {
  TempDir dir;
  write_text(dir / "c.json", R"({"seed": 1, "split": {"seed": 99}, "train": {"outer_steps": 10, "seed": 5}})");
  cli::Overrides o;
  o.config_path = (dir / "c.json").string();
  o.seed = 13;
  o.steps = 4;
  o.n_max = 6;
  o.mcmc = true;
  const cli::RunConfig c = cli::resolve_config(o);
  EXPECT_EQ(c.seed, 13u);
  EXPECT_EQ(c.split.seed, 13u);
  EXPECT_EQ(c.train.seed, 13u);
  EXPECT_EQ(c.mcmc.seed, 13u);
  EXPECT_EQ(c.train.outer_steps, 4);
  EXPECT_EQ(c.train.truncation.n_max, 6);
  EXPECT_EQ(c.mcmc.truncation.n_max, 6);
  EXPECT_TRUE(c.run_mcmc);
}

TEST(RunConfig, NestedInvariantsAreChecked) {
  TempDir dir;
  auto resolve = [&](const std::string& text) {
    write_text(dir / "c.json", text);
    cli::Overrides o;
    o.config_path = (dir / "c.json").string();
    return cli::resolve_config(o);
  };
  EXPECT_THROW(resolve(R"({"split": {"train": 0.5, "valid": 0.3, "test": 0.3}})"), ConfigError);
  EXPECT_THROW(resolve(R"({"train": {"n_critic": 0}})"), ConfigError);
  EXPECT_THROW(resolve(R"({"mcmc": {"burn_in": 30000}})"), ConfigError);
  EXPECT_THROW(resolve(R"({"evaluate": {"splits": 1}})"), ConfigError);
  EXPECT_THROW(resolve(R"({"schema": {"response_column": "y", "fixed_columns": ["y"]}})"), ConfigError);
  EXPECT_NO_THROW(resolve("{}"));
}

TEST(RunConfig, DefaultSchemaFollowsTheSimulator) {
  cli::RunConfig c;
  const SchemaConfig s = c.schema_or_default();
  EXPECT_EQ(s.response_column, "y");
  EXPECT_EQ(s.fixed_columns, (std::vector<std::string>{"x1", "x2"}));
  EXPECT_EQ(s.group_column, std::optional<std::string>("group"));
}

// --- artifacts -----------------------------------------------------------------------

TEST(Serialization, FitRoundTripPreservesDrawsAndNetworks) {
  const FitResult f = tiny_fit();
  const FitResult back = fit_from_json(json::parse(fit_to_json(f).dump()));
  ASSERT_EQ(back.draws.size(), f.draws.size());
  for (std::size_t s = 0; s < f.draws.size(); ++s) {
    EXPECT_EQ(global_vector(back.draws[s]), global_vector(f.draws[s]));
    EXPECT_EQ(back.draws[s].group_noise, f.draws[s].group_noise);
  }
  EXPECT_EQ(back.inference.params.values(), f.inference.params.values());
  EXPECT_EQ(back.critic.params.values(), f.critic.params.values());
  EXPECT_EQ(back.hyper_prior.params.values(), f.hyper_prior.params.values());
  EXPECT_EQ(back.trace.generator, f.trace.generator);
  EXPECT_EQ(back.column_names, f.column_names);
  EXPECT_EQ(back.group_count, f.group_count);
  // the rebuilt sampler draws exactly what the original does
  std::mt19937_64 r1(8), r2(8);
  EXPECT_EQ(global_vector(sample_posterior(back.inference, r1)), global_vector(sample_posterior(f.inference, r2)));
}

TEST(Serialization, FitDocumentErrors) {
  json j = fit_to_json(tiny_fit());
  json wrong_kind = j;
  wrong_kind["kind"] = "mcmc_chain";
  EXPECT_THROW(fit_from_json(wrong_kind), ConfigError);
  json short_block = j;
  auto& first = short_block["parameters"]["inference"].begin().value();
  first.erase(first.size() - 1);
  EXPECT_THROW(fit_from_json(short_block), ConfigError);
  json bad_groups = j;
  bad_groups["group_count"] = 7;
  EXPECT_THROW(fit_from_json(bad_groups), ConfigError);
  json bad_count = j;
  bad_count["draws"]["count"] = 3;
  EXPECT_THROW(fit_from_json(bad_count), ConfigError);
  json no_draws = j;
  no_draws.erase("draws");
  EXPECT_THROW(fit_from_json(no_draws), ConfigError);
}

TEST(Serialization, ChainRoundTrip) {
  SimTruth t;
  t.rows = 60;
  t.groups = 2;
  std::mt19937_64 rng(1);
  ChainConfig c;
  c.iterations = 60;
  c.burn_in = 10;
  c.thinning = 5;
  const ChainResult r = run_chain(simulate_dataset(t, rng).data, c);
  const ChainResult back = chain_from_json(json::parse(chain_to_json(r).dump()));
  ASSERT_EQ(back.draws.size(), r.draws.size());
  for (std::size_t s = 0; s < r.draws.size(); ++s) EXPECT_EQ(global_vector(back.draws[s]), global_vector(r.draws[s]));
  EXPECT_EQ(back.acceptance, r.acceptance);
  EXPECT_EQ(back.config.iterations, 60);
  EXPECT_EQ(back.group_labels, r.group_labels);
}

TEST(Serialization, DrawsRejectInvalidValues) {
  LatentAssignment z;
  z.fixed_weights = {0.0};
  json j = draws_to_json({z});
  EXPECT_NO_THROW(draws_from_json(j));
  j["raw_p"] = json::array({nullptr});
  EXPECT_THROW(draws_from_json(j), ConfigError);
}

TEST(Serialization, MissingFileAndBadJson) {
  TempDir dir;
  EXPECT_THROW(read_json_file((dir / "absent.json").string()), DataError);
  write_text(dir / "bad.json", "{ not json");
  EXPECT_THROW(read_json_file((dir / "bad.json").string()), ConfigError);
}

TEST(Predict, MissingColumnsAreNamed) {
  TempDir dir;
  write_text(dir / "h.csv", "x2,y\n1,2\n");
  SchemaConfig s;
  s.response_column = "y";
  s.fixed_columns = {"x1", "x2"};
  s.categorical_columns = {"colour"};
  s.group_column = "group";
  EXPECT_EQ(cli::missing_columns((dir / "h.csv").string(), s), (std::vector<std::string>{"x1", "colour", "group"}));
}

// --- the executable ---------------------------------------------------------------------

TEST(Executable, SimulateIsDeterministicInTheSeed) {
  TempDir dir;
  write_text(dir / "c.json", R"({"simulate": {"rows": 50, "groups": 3}})");
  const std::string cfg = (dir / "c.json").string();
  ASSERT_EQ(run_cli("simulate -c '" + cfg + "' --seed 5 --out '" + (dir / "a").string() + "'", dir).code, 0);
  ASSERT_EQ(run_cli("simulate -c '" + cfg + "' --seed 5 --out '" + (dir / "b").string() + "'", dir).code, 0);
  ASSERT_EQ(run_cli("simulate -c '" + cfg + "' --seed 6 --out '" + (dir / "c").string() + "'", dir).code, 0);
  EXPECT_EQ(slurp(dir / "a/data.csv"), slurp(dir / "b/data.csv"));
  EXPECT_NE(slurp(dir / "a/data.csv"), slurp(dir / "c/data.csv"));
  EXPECT_EQ(count_lines(dir / "a/data.csv"), 51u);
  const SimTruth t = read_json_file((dir / "a/truth.json").string()).get<SimTruth>();
  EXPECT_EQ(t.group_effects.size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "a/simulate_config.json"));
}

TEST(Executable, FitEvaluatePredictOnSampleData) {
  TempDir dir;
  const std::string out = (dir / "run").string();
  write_text(dir / "c.json", std::string(R"({"data": ")") + TWEEDIE_AVB_SAMPLE_DATA + R"(",
    "train": {"outer_steps": 120, "latent_sample_count": 100, "eval_every": 40},
    "mcmc": {"iterations": 600, "burn_in": 200, "thinning": 4},
    "evaluate": {"chain": ")" + out + R"(/chain.json", "splits": 5, "bins": 8},
    "predict": {"input": ")" + TWEEDIE_AVB_SAMPLE_DATA + R"("}})");
  const std::string cfg = "-c '" + (dir / "c.json").string() + "' --seed 3 --out '" + out + "'";

  const CliRun fit = run_cli("fit " + cfg + " --mcmc --n-max 8", dir);
  ASSERT_EQ(fit.code, 0) << fit.err;
  for (const char* f : {"fit.json", "trace.csv", "chain.json", "fit_config.json"}) {
    EXPECT_TRUE(fs::exists(dir / ("run/" + std::string(f)))) << f;
  }
  EXPECT_EQ(count_lines(dir / "run/trace.csv"), 121u);
  const cli::FitArtifact art = cli::read_fit_artifact((dir / "run/fit.json").string());
  EXPECT_EQ(art.fit.draws.size(), 100u);
  EXPECT_EQ(art.fit.config.truncation.n_max, 8);
  EXPECT_EQ(art.prep.split.train.size() + art.prep.split.valid.size() + art.prep.split.test.size(), 200u);
  ASSERT_TRUE(art.prep.standardization.has_value());
  const json echoed = read_json_file((dir / "run/fit_config.json").string());
  EXPECT_EQ(echoed.at("seed"), 3);
  EXPECT_EQ(echoed.at("train").at("outer_steps"), 120);

  const CliRun ev = run_cli("evaluate " + cfg, dir);
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(count_lines(dir / "run/gini_matrix.csv"), 4u);
  EXPECT_EQ(slurp(dir / "run/gini_matrix.csv").substr(0, 28), "baseline,intercept,avb,mcmc\n");
  for (const char* f : {"lorenz_intercept_avb.csv", "lorenz_avb_mcmc.csv", "lorenz_mcmc_intercept.csv",
                        "posterior_p_hist.csv", "posterior_summary.json", "gini_matrix.json"}) {
    EXPECT_TRUE(fs::exists(dir / ("run/" + std::string(f)))) << f;
  }
  EXPECT_EQ(count_lines(dir / "run/posterior_p_hist.csv"), 9u);
  const json gm = read_json_file((dir / "run/gini_matrix.json").string());
  EXPECT_EQ(gm.at("test_rows"), 50);
  EXPECT_TRUE(gm.at("gini")[0][0].is_null());
  EXPECT_TRUE(gm.at("standard_error")[0][1].is_number());
  const json summary = read_json_file((dir / "run/posterior_summary.json").string());
  EXPECT_TRUE(summary.contains("avb"));
  EXPECT_TRUE(summary.contains("mcmc"));

  const CliRun pr = run_cli("predict " + cfg, dir);
  ASSERT_EQ(pr.code, 0) << pr.err;
  EXPECT_EQ(count_lines(dir / "run/predictions.csv"), 201u);
  const std::string first = slurp(dir / "run/predictions.csv");
  ASSERT_EQ(run_cli("predict " + cfg, dir).code, 0);
  EXPECT_EQ(slurp(dir / "run/predictions.csv"), first);
}

TEST(Executable, ExitCodesAndMessages) {
  TempDir dir;
  const std::string out = " --out '" + (dir / "o").string() + "'";
  write_text(dir / "typo.json", R"({"trian": {}})");
  CliRun r = run_cli("fit -c '" + (dir / "typo.json").string() + "'" + out, dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("trian"), std::string::npos);

  r = run_cli("fit" + out, dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("data path"), std::string::npos);

  write_text(dir / "missing.json", R"({"data": "/nonexistent/file.csv"})");
  EXPECT_EQ(run_cli("fit -c '" + (dir / "missing.json").string() + "'" + out, dir).code, 1);

  EXPECT_NE(run_cli("frobnicate", dir).code, 0);

  // a learning rate this large overflows the linear predictor on the first step
  write_text(dir / "boom.json", std::string(R"({"data": ")") + TWEEDIE_AVB_SAMPLE_DATA +
                                    R"(", "train": {"outer_steps": 30,
               "inference_optimizer": {"learning_rate": 1e6}}})");
  r = run_cli("fit -c '" + (dir / "boom.json").string() + "'" + out, dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("fit.json"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "o/fit.json"));
}

TEST(Executable, PredictReportsMissingColumns) {
  TempDir dir;
  const std::string out = (dir / "run").string();
  write_text(dir / "c.json", std::string(R"({"data": ")") + TWEEDIE_AVB_SAMPLE_DATA +
                                 R"(", "train": {"outer_steps": 5, "latent_sample_count": 5},
    "predict": {"input": ")" + (dir / "new.csv").string() + R"("}})");
  write_text(dir / "new.csv", "x2\n0.5\n");
  const std::string cfg = "-c '" + (dir / "c.json").string() + "' --out '" + out + "'";
  ASSERT_EQ(run_cli("fit " + cfg, dir).code, 0);
  const CliRun r = run_cli("predict " + cfg, dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("x1, group"), std::string::npos) << r.err;
}
