#include "dpt/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

namespace dpt {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(context_window, "context_window");
  positive(text_width, "text_width");
  positive(text_layers, "text_layers");
  positive(text_heads, "text_heads");
  positive(vision_width, "vision_width");
  positive(vision_layers, "vision_layers");
  positive(vision_heads, "vision_heads");
  positive(patch, "patch");
  positive(image_size, "image_size");
  positive(mlp_ratio, "mlp_ratio");
  positive(feature_dim, "feature_dim");
  if (channels != 1 && channels != 3) throw ConfigError("model.channels must be 1 or 3");
  if (text_width % text_heads != 0) throw ConfigError("model.text_width must divide by text_heads");
  if (vision_width % vision_heads != 0) throw ConfigError("model.vision_width must divide by vision_heads");
  if (patch > image_size) throw ConfigError("model.patch exceeds model.image_size");
  if (!(ln_eps > 0.0)) throw ConfigError("model.ln_eps must be positive");
}

std::vector<std::pair<std::string, Tensor*>> BlockParams::named(const std::string& prefix) {
  return {{prefix + "ln1.gain", &ln1_gain}, {prefix + "ln1.bias", &ln1_bias}, {prefix + "attn.wq", &wq},
          {prefix + "attn.bq", &bq},         {prefix + "attn.wk", &wk},         {prefix + "attn.bk", &bk},
          {prefix + "attn.wv", &wv},         {prefix + "attn.bv", &bv},         {prefix + "attn.wo", &wo},
          {prefix + "attn.bo", &bo},         {prefix + "ln2.gain", &ln2_gain}, {prefix + "ln2.bias", &ln2_bias},
          {prefix + "mlp.w1", &w1},          {prefix + "mlp.b1", &b1},          {prefix + "mlp.w2", &w2},
          {prefix + "mlp.b2", &b2}};
}

std::vector<std::pair<std::string, const Tensor*>> BlockParams::named(const std::string& prefix) const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<BlockParams*>(this)->named(prefix)) out.emplace_back(name, t);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("text.token_embedding", &text.token_embedding);
  out.emplace_back("text.position_embedding", &text.position_embedding);
  for (std::size_t i = 0; i < text.blocks.size(); ++i) {
    auto b = text.blocks[i].named("text.block" + std::to_string(i) + ".");
    out.insert(out.end(), b.begin(), b.end());
  }
  out.emplace_back("text.ln_final.gain", &text.ln_final_gain);
  out.emplace_back("text.ln_final.bias", &text.ln_final_bias);
  out.emplace_back("text.projection", &text.projection);
  out.emplace_back("vision.patch_weight", &vision.patch_weight);
  out.emplace_back("vision.patch_bias", &vision.patch_bias);
  out.emplace_back("vision.class_token", &vision.class_token);
  out.emplace_back("vision.position_embedding", &vision.position_embedding);
  for (std::size_t i = 0; i < vision.blocks.size(); ++i) {
    auto b = vision.blocks[i].named("vision.block" + std::to_string(i) + ".");
    out.insert(out.end(), b.begin(), b.end());
  }
  out.emplace_back("vision.ln_final.gain", &vision.ln_final_gain);
  out.emplace_back("vision.ln_final.bias", &vision.ln_final_bias);
  out.emplace_back("vision.projection", &vision.projection);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<ModelParams*>(this)->named_tensors()) out.emplace_back(name, t);
  return out;
}

std::vector<Tensor*> ModelParams::tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

std::vector<Tensor*> ModelParams::vision_tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) {
    if (name.rfind("vision.", 0) == 0) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> ModelParams::text_tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) {
    if (name.rfind("text.", 0) == 0) out.push_back(t);
  }
  return out;
}

void ModelParams::set_trainable(bool trainable) {
  for (Tensor* t : tensors()) t->requires_grad = trainable;
}

namespace {

class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return Tensor(std::move(m));
  }
  Tensor linear(Index in, Index out) { return normal(in, out, 1.0 / std::sqrt(static_cast<double>(in))); }
  static Tensor zeros(Index rows, Index cols) { return Tensor(Matrix::Zero(rows, cols)); }
  static Tensor ones(Index rows, Index cols) { return Tensor(Matrix::Ones(rows, cols)); }

  BlockParams block(Index width, Index hidden) {
    BlockParams b;
    b.ln1_gain = ones(1, width);
    b.ln1_bias = zeros(1, width);
    b.wq = linear(width, width);
    b.bq = zeros(1, width);
    b.wk = linear(width, width);
    b.bk = zeros(1, width);
    b.wv = linear(width, width);
    b.bv = zeros(1, width);
    b.wo = linear(width, width);
    b.bo = zeros(1, width);
    b.ln2_gain = ones(1, width);
    b.ln2_bias = zeros(1, width);
    b.w1 = linear(width, hidden);
    b.b1 = zeros(1, hidden);
    b.w2 = linear(hidden, width);
    b.b2 = zeros(1, width);
    return b;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Init init(seed);
  ModelParams p;
  p.config = config;

  const Index tw = config.text_width;
  p.text.token_embedding = init.normal(config.vocab_size, tw, 0.02);
  p.text.position_embedding = init.normal(config.context_window, tw, 0.01);
  for (int i = 0; i < config.text_layers; ++i) p.text.blocks.push_back(init.block(tw, tw * config.mlp_ratio));
  p.text.ln_final_gain = Init::ones(1, tw);
  p.text.ln_final_bias = Init::zeros(1, tw);
  p.text.projection = init.linear(tw, config.feature_dim);

  const Index vw = config.vision_width;
  const Index patch_dim = static_cast<Index>(config.channels) * config.patch * config.patch;
  p.vision.patch_weight = init.linear(patch_dim, vw);
  p.vision.patch_bias = Init::zeros(1, vw);
  p.vision.class_token = init.normal(1, vw, 0.02);
  p.vision.position_embedding = init.normal(1 + config.num_patches(), vw, 0.01);
  for (int i = 0; i < config.vision_layers; ++i) p.vision.blocks.push_back(init.block(vw, vw * config.mlp_ratio));
  p.vision.ln_final_gain = Init::ones(1, vw);
  p.vision.ln_final_bias = Init::zeros(1, vw);
  p.vision.projection = init.linear(vw, config.feature_dim);
  return p;
}

std::uint64_t hash_tensors(const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : tensors) {
    mix(name.data(), name.size());
    const std::int64_t shape[2] = {t->rows(), t->cols()};
    mix(shape, sizeof(shape));
    mix(t->value.data(), sizeof(double) * static_cast<std::size_t>(t->value.size()));
  }
  return h;
}

std::uint64_t hash_params(const ModelParams& params) { return hash_tensors(params.named_tensors()); }

std::uint64_t hash_vision(const ModelParams& params) {
  auto all = params.named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> vision;
  for (auto& entry : all) {
    if (entry.first.rfind("vision.", 0) == 0) vision.push_back(entry);
  }
  return hash_tensors(vision);
}

// ---- transformer ------------------------------------------------------------

BlockVars record_block(Tape& tape, const BlockParams& b) {
  return BlockVars{tape.leaf(b.ln1_gain), tape.leaf(b.ln1_bias), tape.leaf(b.wq),       tape.leaf(b.bq),
                   tape.leaf(b.wk),       tape.leaf(b.bk),       tape.leaf(b.wv),       tape.leaf(b.bv),
                   tape.leaf(b.wo),       tape.leaf(b.bo),       tape.leaf(b.ln2_gain), tape.leaf(b.ln2_bias),
                   tape.leaf(b.w1),       tape.leaf(b.b1),       tape.leaf(b.w2),       tape.leaf(b.b2)};
}

Var attention_with_sink(Var queries, Var keys, Var values, int sink_rows) {
  if (sink_rows < 0) throw ConfigError("attention_with_sink: prompt count must be >= 0");
  if (queries.cols() != keys.cols() || keys.rows() != values.rows()) {
    throw DimensionError("attention_with_sink: inconsistent q/k/v shapes");
  }
  Tape& tape = *queries.tape;
  if (sink_rows > 0) {
    const Var zk = tape.constant(Matrix::Zero(sink_rows, keys.cols()));
    const Var zv = tape.constant(Matrix::Zero(sink_rows, values.cols()));
    const Var kparts[] = {keys, zk};
    const Var vparts[] = {values, zv};
    keys = concat_rows(kparts);
    values = concat_rows(vparts);
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(queries.cols()));
  const Var weights = softmax(scale(matmul(queries, transpose(keys)), s), 1);
  return matmul(weights, values);
}

Var self_attention(const BlockVars& b, Var x, int heads, int sink_rows) {
  const Var q = add(matmul(x, b.wq), b.bq);
  const Var k = add(matmul(x, b.wk), b.bk);
  const Var v = add(matmul(x, b.wv), b.bv);
  const Index width = q.cols();
  const Index dh = width / heads;
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    outs.push_back(attention_with_sink(slice_cols(q, h * dh, dh), slice_cols(k, h * dh, dh),
                                       slice_cols(v, h * dh, dh), sink_rows));
  }
  const Var merged = heads == 1 ? outs.front() : concat_cols(outs);
  return add(matmul(merged, b.wo), b.bo);
}

Var transformer_block(const BlockVars& b, Var x, int heads, int sink_rows, double eps) {
  x = add(x, self_attention(b, layer_norm(x, b.ln1_gain, b.ln1_bias, eps), heads, sink_rows));
  const Var hidden = gelu(add(matmul(layer_norm(x, b.ln2_gain, b.ln2_bias, eps), b.w1), b.b1));
  return add(x, add(matmul(hidden, b.w2), b.b2));
}

}  // namespace dpt
