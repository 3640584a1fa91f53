#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

struct ModelConfig {
  int vocab_size = 0;
  int context_window = 24;  // includes the leading class slot
  int text_width = 32;
  int text_layers = 2;
  int text_heads = 2;
  int vision_width = 32;
  int vision_layers = 2;
  int vision_heads = 2;
  int channels = 3;
  int patch = 8;
  int image_size = 32;
  int mlp_ratio = 4;
  int feature_dim = 32;
  double ln_eps = 1e-5;

  int grid() const { return image_size / patch; }
  int num_patches() const { return grid() * grid(); }
  void validate() const;
};

/// Pre-LN transformer block weights.
struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;

  std::vector<std::pair<std::string, Tensor*>> named(const std::string& prefix);
  std::vector<std::pair<std::string, const Tensor*>> named(const std::string& prefix) const;
};

struct TextParams {
  Tensor token_embedding;     // vocab x width
  Tensor position_embedding;  // context_window x width
  std::vector<BlockParams> blocks;
  Tensor ln_final_gain, ln_final_bias;
  Tensor projection;          // width x feature_dim
};

struct VisionParams {
  Tensor patch_weight;        // channels*patch*patch x width
  Tensor patch_bias;          // 1 x width
  Tensor class_token;         // 1 x width
  Tensor position_embedding;  // (1 + num_patches) x width
  std::vector<BlockParams> blocks;
  Tensor ln_final_gain, ln_final_bias;
  Tensor projection;          // width x feature_dim
};

struct ModelParams {
  ModelConfig config;
  TextParams text;
  VisionParams vision;

  /// Stable, ordered view of every weight; the order defines the weight file.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<Tensor*> tensors();
  std::vector<Tensor*> vision_tensors();
  std::vector<Tensor*> text_tensors();

  void set_trainable(bool trainable);
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

/// FNV-1a over names, shapes and raw float64 bytes.
std::uint64_t hash_tensors(const std::vector<std::pair<std::string, const Tensor*>>& tensors);
std::uint64_t hash_params(const ModelParams& params);
std::uint64_t hash_vision(const ModelParams& params);

struct BlockVars {
  Var ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2;
};

BlockVars record_block(Tape& tape, const BlockParams& block);

/// Single-head attention with `sink_rows` zero rows appended to keys and
/// values. Logits are scaled by 1/sqrt(d_k). Each zero key adds exp(0) = 1 to
/// every query's softmax denominator and its zero value contributes nothing,
/// so each query's output is the plain output times Z_q / (Z_q + P).
Var attention_with_sink(Var queries, Var keys, Var values, int sink_rows);

/// Multi-head self-attention over the rows of `x` (already normalised),
/// including the output projection.
Var self_attention(const BlockVars& block, Var x, int heads, int sink_rows);

/// x + attn(LN(x)), then + mlp(LN(x)).
Var transformer_block(const BlockVars& block, Var x, int heads, int sink_rows, double eps);

}  // namespace dpt
