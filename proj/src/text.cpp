#include "dpt/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace dpt {

// ---- Vocab --------------------------------------------------------------------

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(const std::vector<std::string>& words) {
  for (std::string_view r : kReserved) {
    index_.emplace(std::string(r), static_cast<int>(words_.size()));
    words_.emplace_back(r);
  }
  for (const std::string& w : words) {
    if (w.empty()) throw IngestionError("vocab: empty token");
    if (index_.count(w) != 0) {
      if (std::find(std::begin(kReserved), std::end(kReserved), w) != std::end(kReserved)) continue;
      throw IngestionError("vocab: duplicate token '" + w + "'");
    }
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }
}

int Vocab::id(const std::string& word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw LookupError("vocab id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

// ---- tokenizer ------------------------------------------------------------------

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab, TokenizeOptions options) {
  const auto words = normalize_words(text);
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(vocab.id(w));
  if (static_cast<int>(ids.size()) > options.max_tokens) {
    const std::string msg = "text of " + std::to_string(ids.size()) + " tokens exceeds the limit of " +
                            std::to_string(options.max_tokens);
    if (options.strict) throw ContractError(msg);
    std::cerr << "warning: " << msg << "; truncating\n";
    ids.resize(static_cast<std::size_t>(options.max_tokens));
  }
  return ids;
}

// ---- templates ------------------------------------------------------------------

ClassPosition parse_class_position(std::string_view s) {
  if (s == "front") return ClassPosition::front;
  if (s == "mid") return ClassPosition::mid;
  if (s == "end") return ClassPosition::end;
  throw ConfigError("class position must be front|mid|end, got '" + std::string(s) + "'");
}

std::string to_string(ClassPosition p) {
  switch (p) {
    case ClassPosition::front: return "front";
    case ClassPosition::mid: return "mid";
    case ClassPosition::end: return "end";
  }
  return "end";
}

namespace {

constexpr std::string_view kClassSlot = "[CLASS]";
constexpr std::string_view kModalitySlot = "[MODALITY]";

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::string join(const std::vector<std::string>& words, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end; ++i) {
    if (!out.empty()) out += ' ';
    out += words[i];
  }
  return out;
}

std::size_t mid_split(std::size_t n) { return (n + 1) / 2; }

}  // namespace

std::pair<std::string, std::string> PromptSpec::split() const {
  std::string text = template_text;
  for (std::size_t at; (at = text.find(kModalitySlot)) != std::string::npos;) {
    if (modality.empty()) throw TemplateError(dataset_name + ": template uses [MODALITY] but no modality is set");
    text.replace(at, kModalitySlot.size(), modality);
  }
  const std::size_t at = text.find(kClassSlot);
  if (at == std::string::npos) throw TemplateError(dataset_name + ": template has no [CLASS] placeholder");
  if (text.find(kClassSlot, at + 1) != std::string::npos) {
    throw TemplateError(dataset_name + ": template has more than one [CLASS] placeholder");
  }
  std::string prefix = text.substr(0, at);
  std::string suffix = text.substr(at + kClassSlot.size());
  if (prefix.find('[') != std::string::npos || suffix.find('[') != std::string::npos) {
    throw TemplateError(dataset_name + ": template has an unresolved placeholder");
  }
  while (!prefix.empty() && std::isspace(static_cast<unsigned char>(prefix.back()))) prefix.pop_back();
  return {prefix, suffix};
}

std::vector<std::string> PromptSpec::context_words() const { return split_ws(split().first); }

void PromptSpec::validate() const {
  const auto words = context_words();
  if (nctx < 0 || static_cast<std::size_t>(nctx) != words.size()) {
    throw TemplateError(dataset_name + ": nctx " + std::to_string(nctx) + " but " + std::to_string(words.size()) +
                        " words precede [CLASS]");
  }
}

std::string build_prompt(const PromptSpec& spec, const std::string& class_name) {
  const auto [prefix, suffix] = spec.split();
  const auto words = split_ws(prefix);
  std::string head;
  switch (spec.class_position) {
    case ClassPosition::end:
      head = join(words, 0, words.size());
      head = head.empty() ? class_name : head + " " + class_name;
      break;
    case ClassPosition::front:
      head = words.empty() ? class_name : class_name + " " + join(words, 0, words.size());
      break;
    case ClassPosition::mid: {
      const std::size_t k = mid_split(words.size());
      std::vector<std::string> arranged(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(k));
      arranged.push_back(class_name);
      arranged.insert(arranged.end(), words.begin() + static_cast<std::ptrdiff_t>(k), words.end());
      head = join(arranged, 0, arranged.size());
      break;
    }
  }
  return head + suffix;
}

PromptLayout layout_prompt(const PromptSpec& spec, const std::string& class_name, const Vocab& vocab) {
  spec.validate();
  const auto [prefix, suffix] = spec.split();
  const auto words = split_ws(prefix);

  std::vector<int> context_ids;
  for (const auto& w : words) {
    const auto norm = normalize_words(w);
    if (norm.size() != 1) throw TemplateError(spec.dataset_name + ": context word '" + w + "' is not one token");
    context_ids.push_back(vocab.id(norm.front()));
  }
  const TokenizeOptions unbounded{1 << 20, false};
  const auto class_ids = tokenize(class_name, vocab, unbounded);
  const auto suffix_ids = tokenize(suffix, vocab, unbounded);

  PromptLayout out;
  auto push_context = [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      out.ids.push_back(context_ids[j]);
      out.context_slot.push_back(static_cast<int>(j));
    }
  };
  auto push_fixed = [&](const std::vector<int>& ids) {
    for (int id : ids) {
      out.ids.push_back(id);
      out.context_slot.push_back(-1);
    }
  };
  const std::size_t n = context_ids.size();
  switch (spec.class_position) {
    case ClassPosition::end:
      push_context(0, n);
      push_fixed(class_ids);
      break;
    case ClassPosition::front:
      push_fixed(class_ids);
      push_context(0, n);
      break;
    case ClassPosition::mid:
      push_context(0, mid_split(n));
      push_fixed(class_ids);
      push_context(mid_split(n), n);
      break;
  }
  push_fixed(suffix_ids);
  return out;
}

PromptLayout layout_text(std::string_view text, const Vocab& vocab, TokenizeOptions options) {
  PromptLayout out;
  out.ids = tokenize(text, vocab, options);
  out.context_slot.assign(out.ids.size(), -1);
  return out;
}

ContextVectors init_context(const PromptSpec& spec, const Tensor& token_embedding, const Vocab& vocab,
                            ContextInit mode, std::uint64_t seed) {
  spec.validate();
  const Index width = token_embedding.cols();
  ContextVectors ctx;
  ctx.init_source = mode;
  Matrix v(spec.nctx, width);
  if (mode == ContextInit::template_words) {
    const auto words = spec.context_words();
    for (int j = 0; j < spec.nctx; ++j) {
      const auto norm = normalize_words(words[static_cast<std::size_t>(j)]);
      if (norm.size() != 1) throw TemplateError(spec.dataset_name + ": context word is not one token");
      v.row(j) = token_embedding.value.row(vocab.id(norm.front()));
    }
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    for (Index i = 0; i < v.size(); ++i) v.data()[i] = dist(rng);
  }
  ctx.v = Tensor(std::move(v), true);
  return ctx;
}

// ---- encoder ------------------------------------------------------------------------

Var encode_text(Tape& tape, const TextParams& params, const ModelConfig& config, const PromptLayout& layout,
                std::optional<Var> context) {
  if (layout.ids.size() != layout.context_slot.size()) throw ContractError("encode_text: malformed layout");
  const Index n = static_cast<Index>(layout.ids.size()) + 1;
  if (n > config.context_window) {
    throw ContractError("encode_text: " + std::to_string(n) + " tokens exceed the context window of " +
                        std::to_string(config.context_window));
  }
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(n));
  ids.push_back(Vocab::kCls);
  ids.insert(ids.end(), layout.ids.begin(), layout.ids.end());

  const Var table = tape.leaf(params.token_embedding);
  Var x = gather_rows(table, ids);

  const bool splice = context.has_value() &&
                      std::any_of(layout.context_slot.begin(), layout.context_slot.end(), [](int s) { return s >= 0; });
  if (splice) {
    // Runs of fixed rows come from the lookup, context rows from `context`.
    std::vector<Var> pieces;
    Index run_start = 0;
    for (Index pos = 1; pos <= n; ++pos) {
      const int slot = pos < n ? layout.context_slot[static_cast<std::size_t>(pos - 1)] : -1;
      if (pos == n || slot >= 0) {
        if (pos > run_start) pieces.push_back(slice_rows(x, run_start, pos - run_start));
        if (pos < n) {
          if (slot >= context->rows()) throw ContractError("encode_text: context slot outside the context vectors");
          pieces.push_back(slice_rows(*context, slot, 1));
        }
        run_start = pos + 1;
      }
    }
    x = concat_rows(pieces);
  }

  const Var pos = slice_rows(tape.leaf(params.position_embedding), 0, n);
  x = add(x, pos);
  for (const BlockParams& block : params.blocks) {
    x = transformer_block(record_block(tape, block), x, config.text_heads, 0, config.ln_eps);
  }
  x = layer_norm(x, tape.leaf(params.ln_final_gain), tape.leaf(params.ln_final_bias), config.ln_eps);
  return matmul(slice_rows(x, 0, 1), tape.leaf(params.projection));
}

Matrix encode_text(const ModelParams& params, const PromptLayout& layout, const ContextVectors* context) {
  Tape tape;
  std::optional<Var> ctx;
  if (context != nullptr) ctx = tape.constant(context->v.value);
  return encode_text(tape, params.text, params.config, layout, ctx).value();
}

// ---- prompt bank -----------------------------------------------------------------------

PromptBank PromptBank::validated(const std::vector<std::string>& classes, bool strict) const {
  if (class_names.size() != prompts.size()) throw IngestionError("prompt bank: names and prompt lists differ in length");
  PromptBank out;
  for (const auto& cls : classes) {
    const auto it = std::find(class_names.begin(), class_names.end(), cls);
    if (it == class_names.end()) throw IngestionError("prompt bank: missing class '" + cls + "'");
    const auto& list = prompts[static_cast<std::size_t>(it - class_names.begin())];
    if (list.empty()) throw IngestionError("prompt bank: class '" + cls + "' has no prompts");
    out.class_names.push_back(cls);
    out.prompts.push_back(list);
  }
  if (strict) {
    for (std::size_t i = 1; i < out.prompts.size(); ++i) {
      if (out.prompts[i].size() != out.prompts[0].size()) {
        throw IngestionError("prompt bank: class '" + out.class_names[i] + "' has " +
                             std::to_string(out.prompts[i].size()) + " prompts, expected " +
                             std::to_string(out.prompts[0].size()));
      }
    }
  }
  return out;
}

PromptBank PromptBank::truncated(std::size_t n) const {
  PromptBank out = *this;
  for (auto& list : out.prompts) {
    if (list.size() > n) list.resize(n);
  }
  return out;
}

std::size_t PromptBank::prompts_per_class() const {
  std::size_t n = 0;
  for (const auto& list : prompts) n = std::max(n, list.size());
  return n;
}

Matrix embed_prompt_bank(const ModelParams& params, const PromptBank& bank, const Vocab& vocab) {
  const TokenizeOptions options{params.config.context_window - 1, false};
  Matrix gp(static_cast<Index>(bank.prompts.size()), params.config.feature_dim);
  for (std::size_t i = 0; i < bank.prompts.size(); ++i) {
    const auto& list = bank.prompts[i];
    if (list.empty()) throw IngestionError("prompt bank: class '" + bank.class_names[i] + "' has no prompts");
    RowVector<double> acc = RowVector<double>::Zero(params.config.feature_dim);
    for (const auto& prompt : list) acc += encode_text(params, layout_text(prompt, vocab, options));
    gp.row(static_cast<Index>(i)) = acc / static_cast<double>(list.size());
  }
  return gp;
}

std::vector<NearestToken> nearest_tokens(const RowVector<double>& query, const Tensor& token_embedding,
                                         const Vocab& vocab, int k) {
  const Matrix& table = token_embedding.value;
  if (query.size() != table.cols()) throw DimensionError("nearest_tokens: query width mismatch");
  if (k < 0 || k > table.rows()) throw ContractError("nearest_tokens: k exceeds the vocabulary size");
  std::vector<double> dist(static_cast<std::size_t>(table.rows()));
  for (Index i = 0; i < table.rows(); ++i) dist[static_cast<std::size_t>(i)] = (table.row(i) - query).norm();
  std::vector<int> order(dist.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[a] < dist[b]; });
  std::vector<NearestToken> out;
  for (int i = 0; i < k; ++i) out.push_back({vocab.word(order[static_cast<std::size_t>(i)]), dist[order[static_cast<std::size_t>(i)]]});
  return out;
}

}  // namespace dpt
