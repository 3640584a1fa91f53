#include "dpt/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace dpt {

namespace {

int to_int(const std::string& key, const std::string& value) {
  int out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const auto b = part.find_first_not_of(" \t");
    const auto e = part.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(part.substr(b, e - b + 1));
  }
  return out;
}

Matrix select_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

Matrix select_rows(const Matrix& m, const std::vector<std::size_t>& rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

// Symmetric InfoNCE over a B x B similarity matrix with matched pairs on the diagonal.
Var contrastive_loss(Var image_features, Var text_features, double temperature) {
  const Var logits = scale(matmul(l2_normalize_rows(image_features), transpose(l2_normalize_rows(text_features))),
                           1.0 / temperature);
  std::vector<int> diagonal(static_cast<std::size_t>(logits.rows()));
  std::iota(diagonal.begin(), diagonal.end(), 0);
  const Var i2t = loss_ce_batch(diagonal, softmax(logits, 1));
  const Var t2i = loss_ce_batch(diagonal, softmax(transpose(logits), 1));
  return scale(add(i2t, t2i), 0.5);
}

// Batches holding one item per class, walking each class's list cyclically.
std::vector<std::vector<std::size_t>> class_balanced_batches(const std::vector<std::vector<std::size_t>>& by_class) {
  std::size_t longest = 0;
  for (const auto& c : by_class) longest = std::max(longest, c.size());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < longest; ++b) {
    std::vector<std::size_t> batch;
    for (const auto& c : by_class) batch.push_back(c[b % c.size()]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> items_by_class(const Dataset& dataset, Split split) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.num_classes()));
  for (std::size_t i : dataset.indices(split)) by_class[static_cast<std::size_t>(dataset.items[i].label)].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) throw DataError("class '" + dataset.class_names[c] + "' has no items in this split");
  }
  return by_class;
}

}  // namespace

// ---- switches and config --------------------------------------------------------

std::string Switches::to_string() const {
  std::vector<std::string> on;
  if (zsp) on.emplace_back("zsp");
  if (cpt) on.emplace_back("cpt");
  if (l1) on.emplace_back("l1");
  if (kl) on.emplace_back("kl");
  if (on.empty()) return "none";
  std::string out = on.front();
  for (std::size_t i = 1; i < on.size(); ++i) out += "," + on[i];
  return out;
}

Switches Switches::parse(const std::string& list) {
  Switches s = none();
  for (const std::string& name : split_list(list)) {
    if (name == "zsp") s.zsp = true;
    else if (name == "cpt") s.cpt = true;
    else if (name == "l1") s.l1 = true;
    else if (name == "kl") s.kl = true;
    else if (name == "none") continue;
    else throw ConfigError("unknown switch '" + name + "' (expected zsp, cpt, l1, kl)");
  }
  return s;
}

LossWeights RunConfig::weights(const std::string& dataset, Benchmark benchmark) const {
  const LambdaTable::Entry entry = lambda_table.lookup(dataset, benchmark, default_lambdas);
  LossWeights w;
  w.lambda1 = switches.l1 ? lambda1_override.value_or(entry.lambda1) : 0.0;
  w.lambda2 = switches.kl ? lambda2_override.value_or(entry.lambda2) : 0.0;
  w.tau = tau;
  w.validate();
  return w;
}

void RunConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs_few_shot < 1 || epochs_base_novel < 1) throw ConfigError("train epochs must be >= 1");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  if (n_prompts < 1) throw ConfigError("prompt.n_prompts must be >= 1");
  if (!(tau > 0.0)) throw ConfigError("loss.tau must be positive");
  if (pretrain_epochs < 0) throw ConfigError("train.pretrain_epochs must be >= 0");
  if (!(pretrain_lr > 0.0)) throw ConfigError("train.pretrain_lr must be positive");
  if (!(pretrain_temperature > 0.0)) throw ConfigError("train.pretrain_temperature must be positive");
  if (pretrain_sink_rate < 0.0 || pretrain_sink_rate > 1.0) throw ConfigError("train.pretrain_sink_rate must be in [0, 1]");
  if (zsp.count < 0) throw ConfigError("prompt.zsp_count must be >= 0");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "model.context_window", "model.text_width",      "model.text_layers",      "model.text_heads",
      "model.vision_width",   "model.vision_layers",   "model.vision_heads",     "model.channels",
      "model.patch",          "model.image_size",      "model.mlp_ratio",        "model.feature_dim",
      "model.ln_eps",         "train.lr",              "train.batch_size",       "train.epochs_few_shot",
      "train.epochs_base_novel", "train.seeds",        "train.pretrain_seed",    "train.pretrain_epochs",
      "train.pretrain_lr",    "train.pretrain_temperature", "train.pretrain_sink_rate", "loss.tau",          "loss.lambda1",
      "loss.lambda2",         "loss.default_lambda1",  "loss.default_lambda2",   "loss.lambda_table",
      "prompt.n_prompts",     "prompt.class_position", "prompt.switches",        "prompt.zsp_count",
      "prompt.zsp_mode",      "prompt.templates",      "prompt.vocab",           "data.strict",
  };
  return keys;
}

void apply_config(const std::map<std::string, std::string>& kv, RunConfig& c, bool strict) {
  for (const auto& [key, value] : kv) {
    ModelConfig& m = c.model;
    if (key == "model.context_window") m.context_window = to_int(key, value);
    else if (key == "model.text_width") m.text_width = to_int(key, value);
    else if (key == "model.text_layers") m.text_layers = to_int(key, value);
    else if (key == "model.text_heads") m.text_heads = to_int(key, value);
    else if (key == "model.vision_width") m.vision_width = to_int(key, value);
    else if (key == "model.vision_layers") m.vision_layers = to_int(key, value);
    else if (key == "model.vision_heads") m.vision_heads = to_int(key, value);
    else if (key == "model.channels") m.channels = to_int(key, value);
    else if (key == "model.patch") m.patch = to_int(key, value);
    else if (key == "model.image_size") m.image_size = to_int(key, value);
    else if (key == "model.mlp_ratio") m.mlp_ratio = to_int(key, value);
    else if (key == "model.feature_dim") m.feature_dim = to_int(key, value);
    else if (key == "model.ln_eps") m.ln_eps = to_double(key, value);
    else if (key == "train.lr") c.lr = to_double(key, value);
    else if (key == "train.batch_size") c.batch_size = to_int(key, value);
    else if (key == "train.epochs_few_shot") c.epochs_few_shot = to_int(key, value);
    else if (key == "train.epochs_base_novel") c.epochs_base_novel = to_int(key, value);
    else if (key == "train.seeds") {
      c.seeds.clear();
      for (const std::string& s : split_list(value)) c.seeds.push_back(to_int(key, s));
    } else if (key == "train.pretrain_seed") c.pretrain_seed = static_cast<std::uint64_t>(to_int(key, value));
    else if (key == "train.pretrain_epochs") c.pretrain_epochs = to_int(key, value);
    else if (key == "train.pretrain_lr") c.pretrain_lr = to_double(key, value);
    else if (key == "train.pretrain_temperature") c.pretrain_temperature = to_double(key, value);
    else if (key == "train.pretrain_sink_rate") c.pretrain_sink_rate = to_double(key, value);
    else if (key == "loss.tau") c.tau = to_double(key, value);
    else if (key == "loss.lambda1") c.lambda1_override = to_double(key, value);
    else if (key == "loss.lambda2") c.lambda2_override = to_double(key, value);
    else if (key == "loss.default_lambda1") c.default_lambdas.lambda1 = to_double(key, value);
    else if (key == "loss.default_lambda2") c.default_lambdas.lambda2 = to_double(key, value);
    else if (key == "loss.lambda_table") c.lambda_table_path = value;
    else if (key == "prompt.n_prompts") c.n_prompts = to_int(key, value);
    else if (key == "prompt.class_position") c.class_position = parse_class_position(value);
    else if (key == "prompt.switches") c.switches = Switches::parse(value);
    else if (key == "prompt.zsp_count") c.zsp.count = to_int(key, value);
    else if (key == "prompt.zsp_mode") c.zsp.mode = parse_zero_prompt_mode(value);
    else if (key == "prompt.templates") c.templates_path = value;
    else if (key == "prompt.vocab") c.vocab_path = value;
    else if (key == "data.strict") c.strict = to_bool(key, value);
    else if (strict) throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
}

// ---- sampling ------------------------------------------------------------------------

std::vector<std::size_t> FewShotTask::pool() const {
  std::vector<std::size_t> out;
  for (const auto& c : per_class) out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::vector<int> all_classes(const Dataset& dataset) {
  std::vector<int> out(static_cast<std::size_t>(dataset.num_classes()));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

FewShotTask sample_few_shot(const Dataset& dataset, int k_shot, int seed, const std::vector<int>& classes) {
  if (k_shot < 1) throw ConfigError("k_shot must be >= 1");
  FewShotTask task;
  task.k_shot = k_shot;
  task.seed = seed;
  task.classes = classes.empty() ? all_classes(dataset) : classes;

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.num_classes()));
  for (std::size_t i : dataset.indices(Split::train)) {
    by_class[static_cast<std::size_t>(dataset.items[i].label)].push_back(i);
  }
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  for (int c : task.classes) {
    if (c < 0 || c >= dataset.num_classes()) throw LookupError("sample_few_shot: class id out of range");
    std::vector<std::size_t> candidates = by_class[static_cast<std::size_t>(c)];
    if (static_cast<int>(candidates.size()) < k_shot) {
      throw DataError("class '" + dataset.class_names[static_cast<std::size_t>(c)] + "' has " +
                      std::to_string(candidates.size()) + " train items, fewer than k=" + std::to_string(k_shot));
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    candidates.resize(static_cast<std::size_t>(k_shot));
    std::sort(candidates.begin(), candidates.end());
    task.per_class.push_back(std::move(candidates));
  }
  return task;
}

ClassSplit split_base_novel(const std::vector<std::string>& class_names) {
  if (class_names.size() < 2) throw ContractError("split_base_novel: need at least two classes");
  std::vector<int> order(class_names.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return class_names[static_cast<std::size_t>(a)] < class_names[static_cast<std::size_t>(b)];
  });
  const std::size_t n_base = (class_names.size() + 1) / 2;
  ClassSplit split;
  split.base.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel.assign(order.begin() + static_cast<std::ptrdiff_t>(n_base), order.end());
  return split;
}

std::vector<std::vector<std::size_t>> batch_schedule(std::size_t pool_size, int batch_size, int epochs, int seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (pool_size == 0) throw DataError("batch_schedule: empty pool");
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  std::vector<std::size_t> order(pool_size);
  std::vector<std::vector<std::size_t>> batches;
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < pool_size; start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(pool_size, start + static_cast<std::size_t>(batch_size));
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return batches;
}

// ---- backbone ---------------------------------------------------------------------------

ModelParams pretrain_backbone(const Dataset& dataset, const Vocab& vocab, const RunConfig& config,
                              PretrainReport* report) {
  config.validate();
  dataset.validate();
  if (dataset.num_classes() < 2) throw ContractError("pretrain_backbone: a batch of one pair has no negatives");

  ModelConfig mc = config.model;
  mc.vocab_size = vocab.size();
  ModelParams params = init_model(mc, config.pretrain_seed);
  params.set_trainable(true);

  std::vector<PatchGrid> grids;
  std::vector<PromptLayout> captions;
  grids.reserve(dataset.items.size());
  const TokenizeOptions tok{mc.context_window - 1, false};
  for (std::size_t i = 0; i < dataset.items.size(); ++i) {
    grids.push_back(image_grid(mc, dataset.images[i]));
    captions.push_back(layout_text(dataset.items[i].caption, vocab, tok));
  }

  auto by_class = items_by_class(dataset, Split::train);
  std::mt19937_64 rng(config.pretrain_seed);
  Adam adam(config.pretrain_lr);
  std::vector<Tensor*> leaves = params.tensors();

  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    for (auto& c : by_class) std::shuffle(c.begin(), c.end(), rng);
    double total = 0.0;
    const auto batches = class_balanced_batches(by_class);
    for (const auto& batch : batches) {
      const bool sink = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.pretrain_sink_rate;
      const ZeroPromptConfig zcfg = sink ? ZeroPromptConfig{1, ZeroPromptMode::kv_sink} : ZeroPromptConfig::disabled();
      Tape tape;
      std::vector<Var> images;
      std::vector<Var> texts;
      for (std::size_t i : batch) {
        images.push_back(
            encoder_forward(tape, params.vision, mc, embed_patches(tape, params.vision, grids[i]), zcfg));
        texts.push_back(encode_text(tape, params.text, mc, captions[i]));
      }
      const Var loss = contrastive_loss(concat_rows(images), concat_rows(texts), config.pretrain_temperature);
      tape.backward(loss);
      adam.step(leaves);
      zero_grads(leaves);
      total += loss.scalar();
    }
    if (report) report->epoch_losses.push_back(total / static_cast<double>(batches.size()));
  }
  params.set_trainable(false);
  if (report) report->heldout_retrieval = retrieval_accuracy(params, dataset, vocab, Split::test);
  return params;
}

double retrieval_accuracy(const ModelParams& params, const Dataset& dataset, const Vocab& vocab, Split split) {
  if (dataset.num_classes() < 2) throw ContractError("retrieval_accuracy: need at least two classes");
  const auto by_class = items_by_class(dataset, split);
  const TokenizeOptions tok{params.config.context_window - 1, false};
  int correct = 0;
  int total = 0;
  for (const auto& batch : class_balanced_batches(by_class)) {
    Matrix images(static_cast<Index>(batch.size()), params.config.feature_dim);
    Matrix texts(static_cast<Index>(batch.size()), params.config.feature_dim);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t i = batch[b];
      images.row(static_cast<Index>(b)) = encode_image(params, dataset.images[i], ZeroPromptConfig::disabled());
      texts.row(static_cast<Index>(b)) = encode_text(params, layout_text(dataset.items[i].caption, vocab, tok));
    }
    const Matrix sims = l2_normalize_rows(images) * l2_normalize_rows(texts).transpose();
    for (Index r = 0; r < sims.rows(); ++r) {
      Index best = 0;
      for (Index c = 1; c < sims.cols(); ++c) {
        if (sims(r, c) > sims(r, best)) best = c;
      }
      correct += best == r ? 1 : 0;
      ++total;
    }
  }
  return 100.0 * correct / total;
}

// ---- workspace ---------------------------------------------------------------------------

Workspace::Workspace(const ModelParams& backbone, const Dataset& dataset, const Vocab& vocab, PromptSpec spec,
                     const PromptBank& bank)
    : backbone_(&backbone), dataset_(&dataset), vocab_(&vocab), spec_(std::move(spec)) {
  spec_.validate();
  dataset.validate();
  if (backbone.config.vocab_size != vocab.size()) {
    throw ContractError("workspace: backbone vocabulary size differs from the vocab file");
  }
  for (const auto& [name, t] : backbone.named_tensors()) {
    if (t->requires_grad) throw ContractError("workspace: backbone leaf '" + name + "' is trainable");
  }
  bank_ = bank.validated(dataset.class_names, true);
  teacher_ = embed_prompt_bank(backbone, bank_, vocab);
  for (const std::string& name : dataset.class_names) layouts_.push_back(layout_prompt(spec_, name, vocab));
}

const Matrix& Workspace::features(const ZeroPromptConfig& zcfg) const {
  const std::pair<int, int> key{zcfg.active() ? static_cast<int>(zcfg.mode) : 0, zcfg.active() ? zcfg.count : 0};
  auto it = feature_cache_.find(key);
  if (it != feature_cache_.end()) return it->second;
  Matrix f(static_cast<Index>(dataset_->items.size()), backbone_->config.feature_dim);
  for (std::size_t i = 0; i < dataset_->items.size(); ++i) {
    f.row(static_cast<Index>(i)) = encode_image(*backbone_, dataset_->images[i], zcfg);
  }
  return feature_cache_.emplace(key, std::move(f)).first->second;
}

Matrix Workspace::teacher_probs(const std::vector<int>& classes, double tau) const {
  const Matrix& f = features(ZeroPromptConfig::disabled());
  const Matrix w = select_rows(teacher_, classes);
  Matrix out(f.rows(), static_cast<Index>(classes.size()));
  for (Index i = 0; i < f.rows(); ++i) out.row(i) = class_probs(w, f.row(i), tau);
  return out;
}

Matrix Workspace::student_embeddings(const ContextVectors& ctx, const std::vector<int>& classes) const {
  Matrix w(static_cast<Index>(classes.size()), backbone_->config.feature_dim);
  for (std::size_t i = 0; i < classes.size(); ++i) {
    w.row(static_cast<Index>(i)) = encode_text(*backbone_, layout(classes[i]), &ctx);
  }
  return w;
}

// ---- tuning and evaluation -------------------------------------------------------------

ContextVectors initial_context(const Workspace& ws, const RunConfig& config, int seed) {
  return init_context(ws.spec(), ws.backbone().text.token_embedding, ws.vocab(),
                      config.switches.cpt ? ContextInit::template_words : ContextInit::random,
                      static_cast<std::uint64_t>(seed));
}

TrainResult train_prompts(const Workspace& ws, const FewShotTask& task, const RunConfig& config, Benchmark benchmark) {
  config.validate();
  const LossWeights weights = config.weights(ws.dataset().name, benchmark);
  if (task.classes.size() < 2) throw ContractError("train_prompts: need at least two classes");

  TrainResult result{initial_context(ws, config, task.seed), {}};
  ContextVectors& ctx = result.context;

  const Matrix& features = ws.features(config.student_zcfg());
  const Matrix teacher = select_rows(ws.teacher(), task.classes);
  const Matrix teacher_probs = weights.lambda2 > 0.0 ? ws.teacher_probs(task.classes, weights.tau) : Matrix();

  std::vector<std::size_t> pool;
  std::vector<int> pool_labels;
  for (std::size_t c = 0; c < task.per_class.size(); ++c) {
    for (std::size_t i : task.per_class[c]) {
      pool.push_back(i);
      pool_labels.push_back(static_cast<int>(c));
    }
  }

  const int epochs = benchmark == Benchmark::few_shot ? config.epochs_few_shot : config.epochs_base_novel;
  const auto schedule = batch_schedule(pool.size(), config.batch_size, epochs, task.seed);
  const ModelParams& backbone = ws.backbone();
  Tensor* trainable[] = {&ctx.v};

  std::size_t step = 0;
  for (const auto& batch : schedule) {
    std::vector<std::size_t> items;
    std::vector<int> labels;
    for (std::size_t b : batch) {
      items.push_back(pool[b]);
      labels.push_back(pool_labels[b]);
    }
    double value = 0.0;
    try {
      Tape tape;
      const Var v = tape.leaf(ctx.v);
      std::vector<Var> rows;
      for (int c : task.classes) rows.push_back(encode_text(tape, backbone.text, backbone.config, ws.layout(c), v));
      const Var w = concat_rows(rows);
      const Var probs = class_probs(w, tape.constant(select_rows(features, items)), weights.tau);
      Var loss = loss_ce_batch(labels, probs);
      if (weights.lambda2 > 0.0) {
        loss = add(loss, scale(loss_kl_batch(select_rows(teacher_probs, items), probs), weights.lambda2));
      }
      if (weights.lambda1 > 0.0) loss = add(loss, scale(loss_l1(teacher, w), weights.lambda1));
      value = loss.scalar();
      if (!std::isfinite(value)) throw NumericError("non-finite loss");
      tape.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError("prompt tuning diverged at step " + std::to_string(step) + ": " + e.what());
    }
    sgd_step(trainable, config.lr);
    zero_grads(trainable);
    result.step_losses.push_back(value);
    ++step;
  }
  return result;
}

double evaluate_embeddings(const Workspace& ws, const Matrix& w, const std::vector<int>& classes, Split split,
                           const ZeroPromptConfig& zcfg, double tau) {
  if (w.rows() != static_cast<Index>(classes.size())) throw DimensionError("evaluate: one row per class expected");
  const Dataset& ds = ws.dataset();
  const Matrix& features = ws.features(zcfg);
  int correct = 0;
  int total = 0;
  for (std::size_t i : ds.indices(split)) {
    const auto it = std::find(classes.begin(), classes.end(), ds.items[i].label);
    if (it == classes.end()) continue;
    const int pred = predict(class_probs(w, features.row(static_cast<Index>(i)), tau));
    correct += pred == static_cast<int>(it - classes.begin()) ? 1 : 0;
    ++total;
  }
  if (total == 0) throw DataError("evaluate: no items of the requested classes in this split");
  return 100.0 * correct / total;
}

double evaluate(const Workspace& ws, const ContextVectors& ctx, const std::vector<int>& classes, Split split,
                const ZeroPromptConfig& zcfg, double tau) {
  return evaluate_embeddings(ws, ws.student_embeddings(ctx, classes), classes, split, zcfg, tau);
}

double zero_shot_ensemble_eval(const Workspace& ws, const Matrix& teacher, const std::vector<int>& classes,
                               Split split, double tau) {
  return evaluate_embeddings(ws, select_rows(teacher, classes), classes, split, ZeroPromptConfig::disabled(), tau);
}

// ---- metrics ------------------------------------------------------------------------------

std::string MetricsRecord::to_jsonl() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["benchmark"] = std::string(to_string(benchmark));
  j["method"] = method;
  j["k_shot"] = k_shot;
  j["seed"] = seed;
  j["switches"] = switches.to_string();
  if (accuracy) j["accuracy"] = *accuracy;
  if (base_acc) j["base_acc"] = *base_acc;
  if (novel_acc) j["novel_acc"] = *novel_acc;
  if (hm) j["hm"] = *hm;
  return j.dump();
}

double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw DataError("mean_of: no values");
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

std::vector<SeedSummary> aggregate_seeds(const std::vector<MetricsRecord>& records) {
  std::vector<SeedSummary> out;
  std::map<std::string, std::size_t> index;
  for (const MetricsRecord& r : records) {
    const std::string key = r.dataset + "|" + std::string(to_string(r.benchmark)) + "|" + r.method + "|" +
                            r.switches.to_string() + "|k=" + std::to_string(r.k_shot);
    const std::optional<double> value = r.benchmark == Benchmark::base_to_novel ? r.hm : r.accuracy;
    if (!value) throw DataError("aggregate_seeds: record without a score for " + key);
    auto [it, inserted] = index.emplace(key, out.size());
    if (inserted) out.push_back({key, {}, 0.0});
    out[it->second].values.push_back(*value);
  }
  for (SeedSummary& s : out) s.mean = mean_of(s.values);
  return out;
}

std::string method_name(const Switches& s) {
  if (s == Switches::none()) return "coop";
  if (s == Switches::all()) return "dpt";
  return "dpt-ablation";
}

MetricsRecord run_few_shot(const Workspace& ws, const RunConfig& config, int k_shot, int seed,
                           ContextVectors* trained) {
  const FewShotTask task = sample_few_shot(ws.dataset(), k_shot, seed);
  TrainResult result = train_prompts(ws, task, config, Benchmark::few_shot);
  MetricsRecord r;
  r.dataset = ws.dataset().name;
  r.benchmark = Benchmark::few_shot;
  r.method = method_name(config.switches);
  r.k_shot = k_shot;
  r.seed = seed;
  r.switches = config.switches;
  r.accuracy = evaluate(ws, result.context, task.classes, Split::test, config.student_zcfg(), config.tau);
  if (trained) *trained = std::move(result.context);
  return r;
}

MetricsRecord run_base_to_novel(const Workspace& ws, const RunConfig& config, int k_shot, int seed) {
  const ClassSplit split = split_base_novel(ws.dataset().class_names);
  const FewShotTask task = sample_few_shot(ws.dataset(), k_shot, seed, split.base);
  const TrainResult result = train_prompts(ws, task, config, Benchmark::base_to_novel);
  MetricsRecord r;
  r.dataset = ws.dataset().name;
  r.benchmark = Benchmark::base_to_novel;
  r.method = method_name(config.switches);
  r.k_shot = k_shot;
  r.seed = seed;
  r.switches = config.switches;
  const ZeroPromptConfig zcfg = config.student_zcfg();
  r.base_acc = evaluate(ws, result.context, split.base, Split::test, zcfg, config.tau);
  // A single novel class has nothing to be confused with.
  r.novel_acc = split.novel.size() < 2 ? 100.0 : evaluate(ws, result.context, split.novel, Split::test, zcfg, config.tau);
  r.hm = harmonic_mean(*r.base_acc, *r.novel_acc);
  return r;
}

}  // namespace dpt
