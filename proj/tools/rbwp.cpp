// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "CLI11.hpp"
#include "rbwp/cli/commands.hpp"

int main(int argc, char** argv) {
  using namespace rbwp::cli;
  CLI::App app{"Continual learning with evolving prompts"};
  app.require_subcommand(1);

  RunOptions run_opts;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> strategies;
  auto add_run_flags = [&](CLI::App* sub) {
    sub->add_option("config", run_opts.config, "configuration file")->required();
    sub->add_option("--seed", seed, "overrides scenario.seed");
    sub->add_option("--out", out_dir, "overrides run.output_dir");
  };
  auto* run = app.add_subcommand("run", "train the configured strategy");
  add_run_flags(run);
  auto* compare = app.add_subcommand("compare", "train several strategies on one scenario");
  add_run_flags(compare);
  compare->add_option("--strategies", strategies, "comma-separated strategy names")->delimiter(',');

  CheckOptions check_opts;
  auto* check = app.add_subcommand("check", "self checks");
  check->add_flag("--gradcheck", check_opts.gradcheck, "finite-difference gradient suite");
  check->add_flag("--corrupt-gradient", check_opts.corrupt_gradient)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsage;
  }
  for (auto* sub : {run, compare}) {
    if (sub->count("--seed")) run_opts.seed = seed;
    if (sub->count("--out")) run_opts.out = out_dir;
  }
  for (const auto& name : strategies) {
    try {
      run_opts.strategies.push_back(rbwp::harness::parse_strategy(name));
    } catch (const std::invalid_argument&) {
      std::cerr << "unknown strategy '" << name << "'\n";
      return kUsage;
    }
  }
  if (*run) return run_command(run_opts, std::cout, std::cerr);
  if (*compare) return compare_command(run_opts, std::cout, std::cerr);
  return check_command(check_opts, std::cout, std::cerr);
}
