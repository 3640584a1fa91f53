#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpt/io.hpp"

namespace dpt {

/// Quadrant-pattern benchmark: class c draws its texture inside quadrant c
/// (0 upper-left, 1 upper-right, 2 lower-left, 3 lower-right) over faint
/// background noise.
struct SyntheticOptions {
  std::uint64_t seed = 1;
  int image_size = 32;
  int train_per_class = 50;
  int test_per_class = 50;
  int prompts_per_class = 50;
  int filler_words = 5;  // descriptor words per bank prompt
  double noise = 0.5;  // background noise amplitude
  double contrast_min = 0.2;
  double contrast_max = 0.6;
};

const std::vector<std::string>& synthetic_class_names();
/// Words the bank prompts draw their descriptors from.
const std::vector<std::string>& synthetic_descriptors();
std::string synthetic_caption(const std::string& class_name);
PromptSpec synthetic_prompt_spec();

/// Row-major grayscale image of class `label`.
ImageTensor synthetic_image(int label, const SyntheticOptions& options, std::uint64_t seed);
/// The (row, col) quadrant owning class `label`.
std::pair<int, int> synthetic_quadrant(int label);

PromptBank synthetic_prompt_bank(const SyntheticOptions& options);

/// Writes <class>/<split>_<n>.pgm, manifest.json, prompt_bank.json and
/// prompt_spec.json under `out_dir`.
Dataset generate_synthetic(const std::filesystem::path& out_dir, const SyntheticOptions& options = {});

}  // namespace dpt
