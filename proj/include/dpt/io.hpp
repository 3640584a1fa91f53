#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpt/losses.hpp"
#include "dpt/model.hpp"
#include "dpt/text.hpp"
#include "dpt/vision.hpp"

namespace dpt {

namespace fs = std::filesystem;

// ---- raster images (binary PGM P5 / PPM P6, maxval 255) ---------------------------

ImageTensor read_pnm(const fs::path& path);
void write_pnm(const fs::path& path, const ImageTensor& image);
/// Grayscale P5 with values round(255 * v), v clamped to [0, 1].
void write_pgm(const fs::path& path, const Matrix& values);

// ---- datasets -------------------------------------------------------------

enum class Split { train, test };

struct DatasetItem {
  std::string path;  // relative to the dataset root
  int label = 0;
  std::string caption;
  Split split = Split::train;
};

struct Dataset {
  std::string name;
  fs::path root;
  std::vector<std::string> class_names;
  std::vector<DatasetItem> items;
  std::vector<ImageTensor> images;  // parallel to items

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> indices(Split split) const;
  void validate() const;
};

/// Reads manifest.json and decodes every image it lists.
Dataset load_dataset(const fs::path& dir);
void write_manifest(const fs::path& path, const Dataset& dataset);

// ---- text resources -------------------------------------------------------

/// One token per line; line number is the id (reserved tokens included).
Vocab load_vocab(const fs::path& path);
void save_vocab(const fs::path& path, const Vocab& vocab);

std::vector<PromptSpec> load_templates(const fs::path& path);
PromptSpec parse_prompt_spec(const std::string& json_text);
void save_templates(const fs::path& path, const std::vector<PromptSpec>& specs);

PromptBank load_prompt_bank(const fs::path& path);
/// Loads and validates against `classes`.
PromptBank load_prompt_bank(const fs::path& path, const std::vector<std::string>& classes, bool strict);
void save_prompt_bank(const fs::path& path, const PromptBank& bank);

LambdaTable load_lambda_table(const fs::path& path);

// ---- weights ("DPTW") --------------------------------------------------------

inline constexpr char kWeightMagic[4] = {'D', 'P', 'T', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

using NamedMatrices = std::vector<std::pair<std::string, Matrix>>;

/// magic, u32 version, then per leaf: u32 name length, name
/// bytes, u32 rank, u64 extents, float64 payload. Little-endian throughout.
void save_weights(const fs::path& path, const NamedMatrices& leaves);
NamedMatrices load_weights(const fs::path& path);

void save_model(const fs::path& path, const ModelParams& params);
ModelParams load_model(const fs::path& path);
void save_context(const fs::path& path, const ContextVectors& ctx);
ContextVectors load_context(const fs::path& path);

/// SHA-free content hash of a file (FNV-1a 64 over its bytes).
std::uint64_t hash_file(const fs::path& path);

// ---- key=value configuration ---------------------------------------------------

/// Parses "key = value" lines; '#' starts a comment. Throws ConfigError on
/// malformed lines or repeated keys.
std::map<std::string, std::string> parse_config(const std::string& text);
std::map<std::string, std::string> read_config(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

}  // namespace dpt
