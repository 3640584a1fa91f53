#include "dpt/vision.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dpt {

ImageTensor::ImageTensor(int c, int h, int w, std::vector<double> values)
    : channels(c), height(h), width(w), data(std::move(values)) {
  if (c <= 0 || h <= 0 || w <= 0) throw DimensionError("image dimensions must be positive");
  if (data.size() != static_cast<std::size_t>(c) * h * w) throw DimensionError("image payload does not match its shape");
  for (double& v : data) v = std::clamp(v, 0.0, 1.0);
}

ImageTensor ImageTensor::with_channels(int c) const {
  if (c == channels) return *this;
  if (channels != 1) throw DimensionError("only single-channel images can be replicated");
  std::vector<double> out;
  out.reserve(data.size() * static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) out.insert(out.end(), data.begin(), data.end());
  return ImageTensor(c, height, width, std::move(out));
}

PatchGrid patchify(const ImageTensor& image, int patch_h, int patch_w) {
  if (patch_h < 1 || patch_w < 1) throw DimensionError("patch size must be at least 1");
  if (patch_h > image.height || patch_w > image.width) {
    throw DimensionError("patch " + std::to_string(patch_h) + "x" + std::to_string(patch_w) + " larger than image " +
                         std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  PatchGrid grid;
  grid.grid_rows = image.height / patch_h;
  grid.grid_cols = image.width / patch_w;
  grid.channels = image.channels;
  grid.patch_h = patch_h;
  grid.patch_w = patch_w;
  grid.patches.resize(grid.count(), static_cast<Index>(image.channels) * patch_h * patch_w);
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      const Index row = gr * grid.grid_cols + gc;
      Index col = 0;
      for (int c = 0; c < image.channels; ++c) {
        for (int y = 0; y < patch_h; ++y) {
          for (int x = 0; x < patch_w; ++x) grid.patches(row, col++) = image.at(c, gr * patch_h + y, gc * patch_w + x);
        }
      }
    }
  }
  return grid;
}

ImageTensor reassemble(const PatchGrid& grid) {
  const int h = grid.grid_rows * grid.patch_h;
  const int w = grid.grid_cols * grid.patch_w;
  std::vector<double> data(static_cast<std::size_t>(grid.channels) * h * w);
  for (int gr = 0; gr < grid.grid_rows; ++gr) {
    for (int gc = 0; gc < grid.grid_cols; ++gc) {
      const Index row = gr * grid.grid_cols + gc;
      Index col = 0;
      for (int c = 0; c < grid.channels; ++c) {
        for (int y = 0; y < grid.patch_h; ++y) {
          for (int x = 0; x < grid.patch_w; ++x) {
            data[(static_cast<std::size_t>(c) * h + gr * grid.patch_h + y) * w + gc * grid.patch_w + x] =
                grid.patches(row, col++);
          }
        }
      }
    }
  }
  return ImageTensor(grid.channels, h, w, std::move(data));
}

ZeroPromptMode parse_zero_prompt_mode(std::string_view s) {
  if (s == "off") return ZeroPromptMode::off;
  if (s == "kv_sink") return ZeroPromptMode::kv_sink;
  if (s == "concat") return ZeroPromptMode::concat;
  throw ConfigError("zero prompt mode must be off|kv_sink|concat, got '" + std::string(s) + "'");
}

std::string_view to_string(ZeroPromptMode m) {
  switch (m) {
    case ZeroPromptMode::off: return "off";
    case ZeroPromptMode::kv_sink: return "kv_sink";
    case ZeroPromptMode::concat: return "concat";
  }
  return "off";
}

Var embed_patches(Tape& tape, const VisionParams& params, const PatchGrid& grid) {
  if (grid.patches.cols() != params.patch_weight.rows()) {
    throw DimensionError("embed_patches: patch length " + std::to_string(grid.patches.cols()) +
                         " does not match projection rows " + std::to_string(params.patch_weight.rows()));
  }
  if (grid.count() + 1 != params.position_embedding.rows()) {
    throw DimensionError("embed_patches: grid of " + std::to_string(grid.count()) + " patches, model expects " +
                         std::to_string(params.position_embedding.rows() - 1));
  }
  const Var projected = add(matmul(tape.constant(grid.patches), tape.leaf(params.patch_weight)),
                            tape.leaf(params.patch_bias));
  return add(projected, slice_rows(tape.leaf(params.position_embedding), 1, grid.count()));
}

Var encoder_forward(Tape& tape, const VisionParams& params, const ModelConfig& config, Var patches,
                    const ZeroPromptConfig& zcfg) {
  if (zcfg.count < 0) throw ConfigError("zero prompt count must be >= 0");
  const Var cls = add(tape.leaf(params.class_token), slice_rows(tape.leaf(params.position_embedding), 0, 1));
  const Var seq[] = {cls, patches};
  Var x = concat_rows(seq);

  const int sink = zcfg.mode == ZeroPromptMode::kv_sink ? zcfg.count : 0;
  const int inserted = zcfg.mode == ZeroPromptMode::concat ? zcfg.count : 0;
  const Index n = x.rows();
  for (const BlockParams& block : params.blocks) {
    const BlockVars vars = record_block(tape, block);
    if (inserted > 0) {
      const Var parts[] = {slice_rows(x, 0, 1), tape.constant(Matrix::Zero(inserted, x.cols())), slice_rows(x, 1, n - 1)};
      const Var out = transformer_block(vars, concat_rows(parts), config.vision_heads, 0, config.ln_eps);
      const Var kept[] = {slice_rows(out, 0, 1), slice_rows(out, 1 + inserted, n - 1)};
      x = concat_rows(kept);
    } else {
      x = transformer_block(vars, x, config.vision_heads, sink, config.ln_eps);
    }
  }
  x = layer_norm(x, tape.leaf(params.ln_final_gain), tape.leaf(params.ln_final_bias), config.ln_eps);
  return matmul(slice_rows(x, 0, 1), tape.leaf(params.projection));
}

PatchGrid image_grid(const ModelConfig& config, const ImageTensor& image) {
  if (image.height != config.image_size || image.width != config.image_size) {
    throw DimensionError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         ", model expects " + std::to_string(config.image_size));
  }
  return patchify(image.with_channels(config.channels), config.patch, config.patch);
}

Matrix encode_image(const ModelParams& params, const ImageTensor& image, const ZeroPromptConfig& zcfg) {
  Tape tape;
  const Var e0 = embed_patches(tape, params.vision, image_grid(params.config, image));
  return encoder_forward(tape, params.vision, params.config, e0, zcfg).value();
}

std::pair<int, int> Heatmap::argmax() const {
  Index r = 0, c = 0;
  cells.maxCoeff(&r, &c);
  return {static_cast<int>(r), static_cast<int>(c)};
}

Matrix Heatmap::upsample(int height, int width) const {
  Matrix out(height, width);
  for (int y = 0; y < height; ++y) {
    const Index r = std::min<Index>(static_cast<Index>(y) * cells.rows() / height, cells.rows() - 1);
    for (int x = 0; x < width; ++x) {
      const Index c = std::min<Index>(static_cast<Index>(x) * cells.cols() / width, cells.cols() - 1);
      out(y, x) = cells(r, c);
    }
  }
  return out;
}

Matrix normalize_heat(const Matrix& raw) {
  const double lo = raw.minCoeff();
  const double hi = raw.maxCoeff();
  if (!(hi > lo)) return Matrix::Zero(raw.rows(), raw.cols());
  return ((raw.array() - lo) / (hi - lo)).matrix();
}

SaliencyMode parse_saliency_mode(std::string_view s) {
  if (s == "gradient") return SaliencyMode::gradient;
  if (s == "grad_input") return SaliencyMode::grad_input;
  throw ConfigError("saliency mode must be gradient|grad_input, got '" + std::string(s) + "'");
}

std::string_view to_string(SaliencyMode m) { return m == SaliencyMode::gradient ? "gradient" : "grad_input"; }

Heatmap saliency(const ModelParams& params, const ImageTensor& image, const Matrix& class_embeddings, double tau,
                 int target_class, const ZeroPromptConfig& zcfg, SaliencyMode mode) {
  if (target_class < 0 || target_class >= class_embeddings.rows()) {
    throw LookupError("saliency: unknown class index " + std::to_string(target_class));
  }
  if (!(tau > 0.0)) throw ConfigError("saliency: tau must be positive");
  const PatchGrid grid = image_grid(params.config, image);

  Tape tape;
  const Var e0 = tape.variable(embed_patches(tape, params.vision, grid).value());
  const Var f = encoder_forward(tape, params.vision, params.config, e0, zcfg);
  const Var w = tape.constant(class_embeddings.row(target_class));
  const Var logit = scale(matmul(l2_normalize_rows(w), transpose(l2_normalize_rows(f))), 1.0 / tau);
  tape.backward(logit);

  const Matrix& g = tape.grad(e0);
  const Matrix& e = e0.value();
  Matrix raw(grid.grid_rows, grid.grid_cols);
  for (int r = 0; r < grid.grid_rows; ++r) {
    for (int c = 0; c < grid.grid_cols; ++c) {
      const Index k = r * grid.grid_cols + c;
      raw(r, c) = mode == SaliencyMode::gradient ? g.row(k).norm() : std::abs(g.row(k).dot(e.row(k)));
    }
  }
  return Heatmap{normalize_heat(raw)};
}

}  // namespace dpt
