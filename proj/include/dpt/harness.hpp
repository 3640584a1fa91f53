#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpt/io.hpp"
#include "dpt/losses.hpp"
#include "dpt/text.hpp"
#include "dpt/vision.hpp"

namespace dpt {

/// Ablation switches: zero-vector prompts, clinical-template init, and the
/// two auxiliary loss terms.
struct Switches {
  bool zsp = true;
  bool cpt = true;
  bool l1 = true;
  bool kl = true;

  static Switches all() { return {}; }
  static Switches none() { return {false, false, false, false}; }
  /// Comma list of the enabled switches, e.g. "zsp,cpt,l1,kl" (or "none").
  std::string to_string() const;
  static Switches parse(const std::string& list);
  bool operator==(const Switches&) const = default;
};

struct RunConfig {
  ModelConfig model;

  // Backbone pretraining (symmetric contrastive loss, Adam).
  std::uint64_t pretrain_seed = 1;
  int pretrain_epochs = 20;
  double pretrain_lr = 5e-4;
  double pretrain_temperature = 0.01;
  // Share of pretraining batches whose vision attention carries one zero
  // key/value sink, so the frozen encoder tolerates the zero prompts.
  double pretrain_sink_rate = 0.5;

  // Prompt tuning.
  double lr = 0.0025;
  int batch_size = 4;
  int epochs_few_shot = 100;
  int epochs_base_novel = 50;
  std::vector<int> seeds = {1, 2, 3};
  int n_prompts = 50;

  double tau = 0.01;
  // Used where the lambda table has no cell for the dataset.
  LambdaTable::Entry default_lambdas = {1.0, 0.25};
  LambdaTable lambda_table;
  // Explicit loss.lambda1 / loss.lambda2 win over the table.
  std::optional<double> lambda1_override;
  std::optional<double> lambda2_override;

  Switches switches;
  ZeroPromptConfig zsp = {1, ZeroPromptMode::kv_sink};
  ClassPosition class_position = ClassPosition::end;
  bool strict = true;

  std::string vocab_path;
  std::string templates_path;
  std::string lambda_table_path;

  LossWeights weights(const std::string& dataset, Benchmark benchmark) const;
  /// Zero-prompt settings for the student path under the current switches.
  ZeroPromptConfig student_zcfg() const { return switches.zsp ? zsp : ZeroPromptConfig::disabled(); }
  void validate() const;
};

/// The documented key set; strict mode rejects anything else.
const std::vector<std::string>& config_keys();
void apply_config(const std::map<std::string, std::string>& kv, RunConfig& config, bool strict = true);

// ---- few-shot sampling and class splits ---------------------------------------

struct FewShotTask {
  int k_shot = 0;
  int seed = 0;
  std::vector<int> classes;                          // dataset class ids in use
  std::vector<std::vector<std::size_t>> per_class;  // item indices, parallel to classes
  std::vector<std::size_t> pool() const;
};

/// Per class, uniform sampling of k train items without replacement.
FewShotTask sample_few_shot(const Dataset& dataset, int k_shot, int seed, const std::vector<int>& classes = {});

struct ClassSplit {
  std::vector<int> base;
  std::vector<int> novel;
};

/// Lexicographic order; the first ceil(K/2) names are base.
ClassSplit split_base_novel(const std::vector<std::string>& class_names);

/// Shuffled mini-batches over a pool of `pool_size`, one reshuffle per epoch.
std::vector<std::vector<std::size_t>> batch_schedule(std::size_t pool_size, int batch_size, int epochs, int seed);

// ---- backbone --------------------------------------------------------------------

struct PretrainReport {
  double heldout_retrieval = 0.0;  // percent, image -> text top-1
  std::vector<double> epoch_losses;
};

/// Symmetric image/text contrastive training of every backbone weight. Each
/// batch holds one training item per class, so K must be >= 2.
ModelParams pretrain_backbone(const Dataset& dataset, const Vocab& vocab, const RunConfig& config,
                              PretrainReport* report = nullptr);

/// Top-1 image-to-caption retrieval (percent) over batches of one test item
/// per class.
double retrieval_accuracy(const ModelParams& params, const Dataset& dataset, const Vocab& vocab, Split split);

// ---- prompt tuning ---------------------------------------------------------------

/// Frozen state shared by every tuning run on one dataset and backbone.
class Workspace {
 public:
  Workspace(const ModelParams& backbone, const Dataset& dataset, const Vocab& vocab, PromptSpec spec,
            const PromptBank& bank);

  const ModelParams& backbone() const { return *backbone_; }
  const Dataset& dataset() const { return *dataset_; }
  const Vocab& vocab() const { return *vocab_; }
  const PromptSpec& spec() const { return spec_; }
  const PromptBank& bank() const { return bank_; }
  /// Ensemble teacher embeddings Gp, K x d in dataset class order.
  const Matrix& teacher() const { return teacher_; }
  const PromptLayout& layout(int class_id) const { return layouts_.at(static_cast<std::size_t>(class_id)); }
  /// Image features for every dataset item under `zcfg` (cached).
  const Matrix& features(const ZeroPromptConfig& zcfg) const;
  /// Teacher probabilities over `classes` for every item (frozen P = 0 path).
  Matrix teacher_probs(const std::vector<int>& classes, double tau) const;

  /// Student class embeddings W for `classes`.
  Matrix student_embeddings(const ContextVectors& ctx, const std::vector<int>& classes) const;

 private:
  const ModelParams* backbone_;
  const Dataset* dataset_;
  const Vocab* vocab_;
  PromptSpec spec_;
  PromptBank bank_;
  Matrix teacher_;
  std::vector<PromptLayout> layouts_;
  mutable std::map<std::pair<int, int>, Matrix> feature_cache_;
};

struct TrainResult {
  ContextVectors context;
  std::vector<double> step_losses;
};

/// SGD over the context vectors only; the backbone is never written.
TrainResult train_prompts(const Workspace& ws, const FewShotTask& task, const RunConfig& config, Benchmark benchmark);

/// Initial context under the CPT switch (template words or random).
ContextVectors initial_context(const Workspace& ws, const RunConfig& config, int seed);

/// 100 * correct / total over `split` items of `classes`, predicting among
/// `classes` with class embeddings `w` (rows parallel to `classes`).
double evaluate_embeddings(const Workspace& ws, const Matrix& w, const std::vector<int>& classes, Split split,
                           const ZeroPromptConfig& zcfg, double tau);

double evaluate(const Workspace& ws, const ContextVectors& ctx, const std::vector<int>& classes, Split split,
                const ZeroPromptConfig& zcfg, double tau);

/// Zero-shot accuracy with Gp of a (possibly truncated) bank as W.
double zero_shot_ensemble_eval(const Workspace& ws, const Matrix& teacher, const std::vector<int>& classes,
                               Split split, double tau);

// ---- metrics -------------------------------------------------------------------------

struct MetricsRecord {
  std::string dataset;
  Benchmark benchmark = Benchmark::few_shot;
  std::string method;
  int k_shot = 0;
  int seed = 0;
  Switches switches;
  std::optional<double> accuracy;
  std::optional<double> base_acc;
  std::optional<double> novel_acc;
  std::optional<double> hm;

  /// One JSON object on a single line, fixed key order.
  std::string to_jsonl() const;
};

struct SeedSummary {
  std::string key;
  std::vector<double> values;
  double mean = 0.0;
};

/// Groups records by (dataset, benchmark, method, switches, k) and averages
/// accuracy (or HM for base-to-novel records).
std::vector<SeedSummary> aggregate_seeds(const std::vector<MetricsRecord>& records);

double mean_of(const std::vector<double>& values);

/// "coop" with every switch off, "dpt" with all on, "dpt-ablation" otherwise.
std::string method_name(const Switches& switches);

/// Few-shot run: sample, tune, evaluate on the test split.
MetricsRecord run_few_shot(const Workspace& ws, const RunConfig& config, int k_shot, int seed,
                           ContextVectors* trained = nullptr);

/// Base-to-novel run: tune on base classes, evaluate on base and novel test.
MetricsRecord run_base_to_novel(const Workspace& ws, const RunConfig& config, int k_shot, int seed);

std::vector<int> all_classes(const Dataset& dataset);

}  // namespace dpt
