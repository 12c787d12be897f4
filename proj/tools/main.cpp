#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace tweedie_avb;

int main(int argc, char** argv) {
  CLI::App app{"Bayesian Tweedie mixed models fitted by adversarial variational Bayes"};
  app.require_subcommand(1);

  cli::Overrides o;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  int n_max = 0;
  long steps = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed (split, training, chain, prediction)");
    sub->add_option("-o,--out", out, "output directory");
  };
  auto* simulate = app.add_subcommand("simulate", "write a synthetic dataset and its truth");
  auto* fit = app.add_subcommand("fit", "train the variational posterior");
  auto* evaluate = app.add_subcommand("evaluate", "Gini matrix, Lorenz curves and posterior summaries");
  auto* predict = app.add_subcommand("predict", "posterior predictive summaries for new rows");
  for (auto* s : {simulate, fit, evaluate, predict}) common(s);
  fit->add_flag("--mcmc", o.mcmc, "also run the reference Metropolis chain");
  fit->add_option("--n-max", n_max, "series truncation for training and the chain")->check(CLI::PositiveNumber);
  fit->add_option("--steps", steps, "outer training steps")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  auto given = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
  CLI::App* active = app.get_subcommands().front();
  if (given(active, "--config")) o.config_path = config_path;
  if (given(active, "--seed")) o.seed = seed;
  if (given(active, "--out")) o.out = out;
  if (active == fit && given(fit, "--n-max")) o.n_max = n_max;
  if (active == fit && given(fit, "--steps")) o.steps = steps;

  try {
    const cli::RunConfig cfg = cli::resolve_config(o);
    if (active == simulate) return cli::cmd_simulate(cfg);
    if (active == fit) return cli::cmd_fit(cfg);
    if (active == evaluate) return cli::cmd_evaluate(cfg);
    return cli::cmd_predict(cfg);
  } catch (const NumericalAbort& e) {
    std::cerr << "tweedie-avb: numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const NonFiniteGradient& e) {
    std::cerr << "tweedie-avb: numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const NonConvergence& e) {
    std::cerr << "tweedie-avb: numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "tweedie-avb: error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "tweedie-avb: unexpected error: " << e.what() << '\n';
    return 1;
  }
}
