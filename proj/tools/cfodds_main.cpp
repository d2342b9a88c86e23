#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "cfodds/pipeline.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  bool has_seed = false;
  std::uint64_t seed = 0;
};

cfodds::pipeline::ExperimentConfig resolve(const CliOptions& options) {
  auto config = cfodds::pipeline::load_config(options.config_path);
  if (!options.out_dir.empty()) config.output_dir = options.out_dir;
  if (options.has_seed) config.seed = options.seed;
  config.validate();
  return config;
}

void attach_common(CLI::App* cmd, CliOptions& options) {
  cmd->add_option("--config", options.config_path, "experiment config JSON")
      ->required();
  cmd->add_option("--out", options.out_dir,
                  "output directory (overrides config output_dir)");
  cmd->add_option("--seed", options.seed, "master seed (overrides config seed)")
      ->each([&options](const std::string&) { options.has_seed = true; });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"counterfactual-odds experiment pipeline"};
  app.require_subcommand(1);

  CliOptions options;
  using StageFn = void (*)(const cfodds::pipeline::ExperimentConfig&);
  struct Entry {
    const char* name;
    const char* help;
    StageFn fn;  // null marks the full run
  };
  const Entry entries[] = {
      {"run", "run every stage in order", nullptr},
      {"generate", "draw or ingest the dataset", cfodds::pipeline::stage_generate},
      {"split", "partition samples into train/validation/test",
       cfodds::pipeline::stage_split},
      {"train-vae", "fit the generative model", cfodds::pipeline::stage_train_vae},
      {"train-fair", "sweep the predictor grid and the baseline",
       cfodds::pipeline::stage_train_fair},
      {"evaluate", "score frozen checkpoints on fixed bundles",
       cfodds::pipeline::stage_evaluate},
      {"report", "render summary CSVs and difference matrices",
       cfodds::pipeline::stage_report}};

  StageFn selected = nullptr;
  bool full_run = false;
  for (const auto& entry : entries) {
    auto* cmd = app.add_subcommand(entry.name, entry.help);
    attach_common(cmd, options);
    if (entry.fn == nullptr) {
      cmd->callback([&full_run]() { full_run = true; });
    } else {
      StageFn fn = entry.fn;
      cmd->callback([&selected, fn]() { selected = fn; });
    }
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve(options);
    if (full_run) return cfodds::pipeline::run_pipeline(config);
    selected(config);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
