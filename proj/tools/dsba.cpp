#include <CLI11.hpp>

#include <iostream>

#include "dsba/errors.hpp"
#include "dsba/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Dynamic stealthy backdoor attack experiments"};
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> disabled;
  app.add_option("command", command, "pretrain | attack | evaluate | defend | report | all")->required();
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--out", out_dir, "output directory (overrides the config)");
  app.add_option("--seed", seed, "global seed (overrides the config)");
  app.add_option("--disable-loss", disabled, "align | perc | dist | eff | ste | cons; repeatable");
  CLI11_PARSE(app, argc, argv);

  try {
    torch::set_num_threads(1);
    auto config = dsba::load_run_config(config_path);
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (seed) config.seed = *seed;
    for (const auto& name : disabled) config.attack.disabled_losses.push_back(name);
    config.validate();

    dsba::Experiment experiment(std::move(config));
    for (const auto& outcome : experiment.run(command))
      std::cout << dsba::to_string(outcome.stage) << (outcome.cached ? ": cached" : ": done") << '\n';
    std::cout << "output: " << experiment.dir().string() << '\n';
    return 0;
  } catch (const dsba::DependencyError& e) {
    std::cerr << "dependency error (" << e.stage() << "): " << e.what() << '\n';
    return 3;
  } catch (const dsba::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
