#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "sdhn/expcli.hpp"

namespace {

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skewness-driven hypergraph multi-agent training"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, variants;
  std::uint64_t seed = 0;
  int episodes = 100;

  auto* train = app.add_subcommand("train", "train a policy from a config file");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  auto* seed_opt = train->add_option("--seed", seed, "override train.seed");

  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config_path, "config file the checkpoint was trained with")->required();
  eval->add_option("--episodes", episodes, "episodes to run");
  eval->add_option("--seed", seed, "evaluation seed");

  auto* ablate = app.add_subcommand("ablate", "train the base config and its ablations");
  ablate->add_option("--config", config_path, "base config file")->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  ablate->add_option("--variants", variants, "comma-separated subset of no-skew,det-edges,plain-mappo; empty runs the base config only");

  CLI11_PARSE(app, argc, argv);

  using namespace sdhn::expcli;
  if (*train) {
    std::optional<std::uint64_t> override;
    if (seed_opt->count() > 0) override = seed;
    return cmd_train(config_path, out_dir, override, std::cout, std::cerr);
  }
  if (*eval) return cmd_eval(checkpoint, config_path, episodes, seed, std::cout, std::cerr);
  return cmd_ablate(config_path, out_dir, split_commas(variants), std::cout, std::cerr);
}
