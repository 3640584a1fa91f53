#include "dpt/pipeline.hpp"

#include <cmath>

namespace dpt {

namespace {

fs::path resolve(const std::string& configured, const fs::path& base, const char* fallback) {
  if (configured.empty()) return fs::path(DPT_DATA_DIR) / fallback;
  const fs::path p(configured);
  return p.is_absolute() ? p : base / p;
}

}  // namespace

RunConfig load_run_config(const std::optional<fs::path>& config_path) {
  RunConfig config;
  fs::path base = fs::current_path();
  if (config_path) {
    apply_config(read_config(*config_path), config, true);
    base = config_path->parent_path();
  }
  config.vocab_path = resolve(config.vocab_path, base, "vocab.txt").string();
  config.templates_path = resolve(config.templates_path, base, "templates.json").string();
  config.lambda_table_path = resolve(config.lambda_table_path, base, "lambdas.json").string();
  config.lambda_table = load_lambda_table(config.lambda_table_path);
  return config;
}

PromptSpec select_prompt_spec(const std::vector<PromptSpec>& specs, const std::string& dataset) {
  std::string known;
  for (const PromptSpec& spec : specs) {
    if (spec.dataset_name == dataset) return spec;
    known += (known.empty() ? "" : ", ") + spec.dataset_name;
  }
  throw LookupError("no prompt template for dataset '" + dataset + "' (have: " + known + ")");
}

Resources load_resources(const fs::path& data_dir, const RunConfig& config) {
  Resources r;
  r.vocab = load_vocab(config.vocab_path);
  r.dataset = load_dataset(data_dir);
  const fs::path local = data_dir / "templates.json";
  r.spec = select_prompt_spec(load_templates(fs::exists(local) ? local : fs::path(config.templates_path)),
                              r.dataset.name);
  r.spec.class_position = config.class_position;
  const PromptBank bank = load_prompt_bank(data_dir / "prompt_bank.json", r.dataset.class_names, config.strict);
  if (config.strict && bank.prompts_per_class() < static_cast<std::size_t>(config.n_prompts)) {
    throw IngestionError("prompt bank has " + std::to_string(bank.prompts_per_class()) +
                         " prompts per class, prompt.n_prompts asks for " + std::to_string(config.n_prompts));
  }
  r.bank = bank.truncated(static_cast<std::size_t>(config.n_prompts));
  return r;
}

void save_trained(const fs::path& path, const TrainedPrompt& trained) {
  const Switches& s = trained.switches;
  Matrix run(1, 6);
  run << trained.k_shot, trained.seed, s.zsp, s.cpt, s.l1, s.kl;
  NamedMatrices leaves;
  leaves.emplace_back("meta.context_init",
                      Matrix::Constant(1, 1, trained.context.init_source == ContextInit::template_words ? 0.0 : 1.0));
  leaves.emplace_back("meta.run", run);
  leaves.emplace_back("context.v", trained.context.v.value);
  save_weights(path, leaves);
}

TrainedPrompt load_trained(const fs::path& path) {
  const NamedMatrices leaves = load_weights(path);
  if (leaves.size() != 3 || leaves[0].first != "meta.context_init" || leaves[1].first != "meta.run" ||
      leaves[2].first != "context.v" || leaves[1].second.size() != 6) {
    throw FormatError(path.string() + ": not a trained-prompt file");
  }
  const Matrix& run = leaves[1].second;
  TrainedPrompt t;
  t.context.init_source = leaves[0].second(0, 0) == 0.0 ? ContextInit::template_words : ContextInit::random;
  t.context.v = Tensor(leaves[2].second, true);
  t.k_shot = static_cast<int>(run(0, 0));
  t.seed = static_cast<int>(run(0, 1));
  t.switches = {run(0, 2) != 0.0, run(0, 3) != 0.0, run(0, 4) != 0.0, run(0, 5) != 0.0};
  return t;
}

std::vector<Switches> switch_combinations() {
  std::vector<Switches> out;
  for (int mask = 0; mask < 16; ++mask) {
    out.push_back({(mask & 8) != 0, (mask & 4) != 0, (mask & 2) != 0, (mask & 1) != 0});
  }
  return out;
}

std::vector<MetricsRecord> run_ablation(const Workspace& ws, const RunConfig& config, int k_shot, int seed) {
  std::vector<MetricsRecord> out;
  for (const Switches& s : switch_combinations()) {
    RunConfig c = config;
    c.switches = s;
    out.push_back(run_few_shot(ws, c, k_shot, seed));
  }
  return out;
}

MetricsRecord evaluate_trained(const Workspace& ws, const RunConfig& config, const TrainedPrompt& trained) {
  if (trained.context.v.cols() != ws.backbone().config.text_width) {
    throw DimensionError("trained context width does not match the backbone");
  }
  RunConfig c = config;
  c.switches = trained.switches;
  MetricsRecord r;
  r.dataset = ws.dataset().name;
  r.benchmark = Benchmark::few_shot;
  r.method = method_name(trained.switches);
  r.k_shot = trained.k_shot;
  r.seed = trained.seed;
  r.switches = trained.switches;
  r.accuracy = evaluate(ws, trained.context, all_classes(ws.dataset()), Split::test, c.student_zcfg(), c.tau);
  return r;
}

}  // namespace dpt
