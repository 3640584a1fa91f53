#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dpt/model.hpp"

namespace dpt {

/// Word-level vocabulary. Ids are dense from 0; the first three are reserved.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr std::string_view kReserved[3] = {"[PAD]", "[UNK]", "[CLS]"};

  Vocab();
  /// `words` must not repeat; reserved tokens are prepended if absent.
  explicit Vocab(const std::vector<std::string>& words);

  int id(const std::string& word) const;  // kUnk when absent
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Lowercase, delete punctuation, split on whitespace. "X-ray" -> "xray".
std::vector<std::string> normalize_words(std::string_view text);

struct TokenizeOptions {
  int max_tokens = 23;  // context window minus the class slot
  bool strict = false;
};

/// Over-length input is truncated with a warning on stderr, or rejected
/// with a ContractError when `strict`.
std::vector<int> tokenize(std::string_view text, const Vocab& vocab, TokenizeOptions options = {});

enum class ClassPosition { front, mid, end };

ClassPosition parse_class_position(std::string_view s);
std::string to_string(ClassPosition p);

/// A clinical prompt template. `nctx` counts the words preceding "[CLASS]".
struct PromptSpec {
  std::string dataset_name;
  std::string template_text;  // contains "[CLASS]" once, optionally "[MODALITY]"
  int nctx = 0;
  ClassPosition class_position = ClassPosition::end;
  std::string modality;

  void validate() const;
  /// Template with "[MODALITY]" resolved, split around "[CLASS]".
  std::pair<std::string, std::string> split() const;
  /// The nctx context words (as written, before normalisation).
  std::vector<std::string> context_words() const;
};

std::string build_prompt(const PromptSpec& spec, const std::string& class_name);

/// Token ids of a rendered prompt and, per token, which context vector (if
/// any) replaces its embedding.
struct PromptLayout {
  std::vector<int> ids;
  std::vector<int> context_slot;  // -1 for fixed tokens
};

PromptLayout layout_prompt(const PromptSpec& spec, const std::string& class_name, const Vocab& vocab);

/// A plain string with no learnable slots.
PromptLayout layout_text(std::string_view text, const Vocab& vocab, TokenizeOptions options = {});

enum class ContextInit { template_words, random };

struct ContextVectors {
  Tensor v;  // nctx x text_width, trainable
  ContextInit init_source = ContextInit::template_words;

  int size() const { return static_cast<int>(v.rows()); }
};

/// Template mode copies the embedding rows of the template's context words;
/// random mode draws N(0, 0.02^2).
ContextVectors init_context(const PromptSpec& spec, const Tensor& token_embedding, const Vocab& vocab,
                            ContextInit mode, std::uint64_t seed = 1);

/// Text tower: [CLS] + tokens, context rows spliced in, positional
/// embeddings, transformer blocks, final LN; the class-slot row is projected
/// to the feature space. Returns a 1 x feature_dim Var.
Var encode_text(Tape& tape, const TextParams& params, const ModelConfig& config, const PromptLayout& layout,
                std::optional<Var> context = std::nullopt);

/// Forward-only convenience wrapper.
Matrix encode_text(const ModelParams& params, const PromptLayout& layout, const ContextVectors* context = nullptr);

/// Per-class LLM description lists.
struct PromptBank {
  std::vector<std::string> class_names;
  std::vector<std::vector<std::string>> prompts;

  /// Reorders to `classes`, checks every class has >= 1 prompt, and (strict)
  /// that every class has the same count. Throws IngestionError naming the
  /// offending class.
  PromptBank validated(const std::vector<std::string>& classes, bool strict) const;
  /// Keeps the first n prompts of each class.
  PromptBank truncated(std::size_t n) const;
  std::size_t prompts_per_class() const;
};

/// Row i = mean of the frozen encodings of class i's prompts (no context).
Matrix embed_prompt_bank(const ModelParams& params, const PromptBank& bank, const Vocab& vocab);

/// Student and teacher class embeddings in dataset class order.
struct ClassBank {
  std::vector<std::string> class_names;
  Matrix student;  // K x d
  Matrix teacher;  // K x d
};

struct NearestToken {
  std::string word;
  double distance;
};

/// k vocabulary words by ascending Euclidean distance, ties by id.
std::vector<NearestToken> nearest_tokens(const RowVector<double>& query, const Tensor& token_embedding,
                                         const Vocab& vocab, int k);

}  // namespace dpt
