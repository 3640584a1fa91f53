#pragma once

#include <string_view>
#include <vector>

#include "dpt/model.hpp"

namespace dpt {

/// Channel-major image with values in [0, 1].
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // channels * height * width

  ImageTensor() = default;
  /// Values are clamped to [0, 1].
  ImageTensor(int channels, int height, int width, std::vector<double> values);

  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  /// Replicates a single channel up to `channels`.
  ImageTensor with_channels(int channels) const;
};

struct PatchGrid {
  int grid_rows = 0;
  int grid_cols = 0;
  int channels = 0;
  int patch_h = 0;
  int patch_w = 0;
  Matrix patches;  // N_p x (channels * patch_h * patch_w), row-major grid order

  int count() const { return grid_rows * grid_cols; }
};

/// Floor-partitions into patch_h x patch_w tiles; residual pixels dropped.
PatchGrid patchify(const ImageTensor& image, int patch_h, int patch_w);
/// Inverse of patchify over the covered area.
ImageTensor reassemble(const PatchGrid& grid);

enum class ZeroPromptMode { off, kv_sink, concat };

ZeroPromptMode parse_zero_prompt_mode(std::string_view s);
std::string_view to_string(ZeroPromptMode m);

struct ZeroPromptConfig {
  int count = 1;
  ZeroPromptMode mode = ZeroPromptMode::kv_sink;

  static ZeroPromptConfig disabled() { return {0, ZeroPromptMode::off}; }
  bool active() const { return mode != ZeroPromptMode::off && count > 0; }
};

/// E_0: projected patches plus their positional embeddings (rows 1..N_p).
Var embed_patches(Tape& tape, const VisionParams& params, const PatchGrid& grid);

/// Runs the vision blocks on [class slot; E_0] and returns the projected
/// class-token feature (1 x feature_dim).
///
/// kv_sink appends `count` zero key/value rows inside every attention; concat
/// inserts `count` zero token rows after the class token before each block
/// and drops their outputs afterwards. Zero prompts never get positional
/// embeddings and carry no state between blocks.
Var encoder_forward(Tape& tape, const VisionParams& params, const ModelConfig& config, Var patches,
                    const ZeroPromptConfig& zcfg);

PatchGrid image_grid(const ModelConfig& config, const ImageTensor& image);

/// Forward-only image feature.
Matrix encode_image(const ModelParams& params, const ImageTensor& image, const ZeroPromptConfig& zcfg);

struct Heatmap {
  Matrix cells;  // grid_rows x grid_cols, values in [0, 1]

  /// (row, col) of the maximum, first in row-major order on ties.
  std::pair<int, int> argmax() const;
  /// Nearest-neighbour upsampling; residual pixels take the nearest cell.
  Matrix upsample(int height, int width) const;
};

enum class SaliencyMode {
  gradient,    // L2 norm of the gradient per patch row
  grad_input,  // |<gradient, E_0 row>| per patch
};

SaliencyMode parse_saliency_mode(std::string_view s);
std::string_view to_string(SaliencyMode m);

/// Gradient of the target class logit sim(w_c, f) / tau with respect to the
/// patch rows of E_0, reduced per patch according to `mode` and min-max
/// scaled to [0, 1] (all zeros when the reduced field is constant).
Heatmap saliency(const ModelParams& params, const ImageTensor& image, const Matrix& class_embeddings,
                 double tau, int target_class, const ZeroPromptConfig& zcfg,
                 SaliencyMode mode = SaliencyMode::gradient);

/// Min-max normalisation with the degenerate-range guard.
Matrix normalize_heat(const Matrix& raw);

}  // namespace dpt
