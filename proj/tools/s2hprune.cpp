#include <iostream>

#include <CLI11.hpp>

#include "s2h/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"FLOPs-constrained differentiable channel pruning with soft-to-hard distillation"};
  app.require_subcommand(1);

  s2h::CliOptions options;
  std::uint64_t seed = 0;

  for (const char* name : {"prune", "eval", "export", "random-baseline"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", options.config_path, "run configuration (JSON)")->required();
    sub->add_option("--resume", options.checkpoint, "checkpoint to resume from / operate on");
    sub->add_option("--seed", seed, "override the config seed");
    sub->callback([&options, name] { options.command = name; });
  }

  CLI11_PARSE(app, argc, argv);
  for (const CLI::App* sub : app.get_subcommands()) {
    if (sub->count("--seed") > 0) options.seed_override = seed;
  }
  return s2h::dispatch(options, std::cout, std::cerr);
}
