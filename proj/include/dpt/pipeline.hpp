#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dpt/harness.hpp"

namespace dpt {

/// Defaults, then the key=value file if given. Empty resource paths fall back
/// to the shipped data directory; relative ones resolve against the config
/// file's directory.
RunConfig load_run_config(const std::optional<fs::path>& config_path = std::nullopt);

/// Everything a tuning run needs besides the backbone.
struct Resources {
  Vocab vocab;
  Dataset dataset;
  PromptSpec spec;
  PromptBank bank;
};

/// The spec for `dataset`, or a LookupError listing the known names.
PromptSpec select_prompt_spec(const std::vector<PromptSpec>& specs, const std::string& dataset);

/// Loads the dataset at `data_dir`. Its template comes from
/// data_dir/templates.json when present, else from the configured table; the
/// bank is data_dir/prompt_bank.json cut to prompt.n_prompts.
Resources load_resources(const fs::path& data_dir, const RunConfig& config);

/// Tuned context plus the run it came from.
struct TrainedPrompt {
  ContextVectors context;
  int k_shot = 0;
  int seed = 0;
  Switches switches;
};

void save_trained(const fs::path& path, const TrainedPrompt& trained);
TrainedPrompt load_trained(const fs::path& path);

/// All 16 on/off combinations of {zsp, cpt, l1, kl}, "none" first.
std::vector<Switches> switch_combinations();

std::vector<MetricsRecord> run_ablation(const Workspace& ws, const RunConfig& config, int k_shot, int seed);

/// Evaluates a trained prompt on the test split of every class.
MetricsRecord evaluate_trained(const Workspace& ws, const RunConfig& config, const TrainedPrompt& trained);

}  // namespace dpt
