#include "dpt/synthetic.hpp"

#include <cmath>
#include <random>

namespace dpt {

namespace {

// Every draw for an image comes from its own stream so items are independent
// of generation order.
std::mt19937_64 item_rng(std::uint64_t seed, int label, int split, int n) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(label), static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(n)};
  return std::mt19937_64(seq);
}

double pattern_value(int label, int y, int x, int phase, int size, double cy, double cx) {
  switch (label) {
    case 0: {  // checker
      const int cell = std::max(2, size / 4);
      return ((y + phase) / cell + (x + phase) / cell) % 2 == 0 ? 1.0 : 0.0;
    }
    case 1: {  // cross
      const double thick = std::max(1.0, size / 8.0);
      return (std::abs(y - cy) <= thick || std::abs(x - cx) <= thick) ? 1.0 : 0.0;
    }
    case 2: {  // ring
      const double r = std::hypot(y - cy, x - cx);
      const double radius = size * 0.3;
      return std::abs(r - radius) <= std::max(1.0, size / 10.0) ? 1.0 : 0.0;
    }
    default: {  // stripe
      const int period = std::max(2, size / 4);
      return ((y + x + phase) % period) < period / 2 ? 1.0 : 0.0;
    }
  }
}

}  // namespace

const std::vector<std::string>& synthetic_class_names() {
  static const std::vector<std::string> names = {"checker", "cross", "ring", "stripe"};
  return names;
}

const std::vector<std::string>& synthetic_descriptors() {
  static const std::vector<std::string> words = {
      "bright",  "dark",   "faint",   "sharp",  "soft",    "bold",    "thin",    "thick",   "dense",   "sparse",
      "regular", "uneven", "smooth",  "rough",  "clear",   "blurred", "small",   "large",   "repeated", "single",
      "visible", "subtle", "crisp",   "narrow", "wide",    "grainy",  "noisy",   "clean",   "distinct", "textured",
      "shape",   "region", "corner",  "area",   "texture", "marking", "outline", "contour", "structure", "feature"};
  return words;
}

std::string synthetic_caption(const std::string& class_name) { return "a photo of a " + class_name + " pattern"; }

PromptSpec synthetic_prompt_spec() {
  PromptSpec spec;
  spec.dataset_name = "synthetic";
  spec.template_text = "a [MODALITY] photo of a [CLASS].";
  spec.nctx = 5;
  spec.modality = "grayscale";
  return spec;
}

std::pair<int, int> synthetic_quadrant(int label) { return {label / 2, label % 2}; }

ImageTensor synthetic_image(int label, const SyntheticOptions& options, std::uint64_t seed) {
  const int image_size = options.image_size;
  if (label < 0 || label > 3) throw LookupError("synthetic_image: label must be 0..3");
  if (image_size < 8) throw ConfigError("synthetic_image: image_size must be >= 8");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int half = image_size / 2;
  const int margin = std::max(1, half / 8);
  const int inner = half - 2 * margin;

  std::vector<double> pixels(static_cast<std::size_t>(image_size) * image_size);
  for (double& p : pixels) p = options.noise * unit(rng);

  const auto [qr, qc] = synthetic_quadrant(label);
  const int y0 = qr * half + margin;
  const int x0 = qc * half + margin;
  const double amplitude = options.contrast_min + (options.contrast_max - options.contrast_min) * unit(rng);
  const int phase = static_cast<int>(unit(rng) * inner);
  const double cy = inner / 2.0 + (unit(rng) - 0.5) * inner * 0.3;
  const double cx = inner / 2.0 + (unit(rng) - 0.5) * inner * 0.3;
  for (int y = 0; y < inner; ++y) {
    for (int x = 0; x < inner; ++x) {
      const double v = pattern_value(label, y, x, phase, inner, cy, cx);
      double& p = pixels[static_cast<std::size_t>(y0 + y) * image_size + (x0 + x)];
      p = std::min(1.0, p + amplitude * v);
    }
  }
  // Quantised so the in-memory image equals what the PGM round trip yields.
  for (double& p : pixels) p = std::round(255.0 * p) / 255.0;
  return ImageTensor(1, image_size, image_size, std::move(pixels));
}

PromptBank synthetic_prompt_bank(const SyntheticOptions& options) {
  if (options.prompts_per_class < 1) throw ConfigError("prompts_per_class must be >= 1");
  const auto& words = synthetic_descriptors();
  std::mt19937_64 rng(options.seed ^ 0x5eedba5eULL);
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  PromptBank bank;
  bank.class_names = synthetic_class_names();
  for (std::size_t c = 0; c < bank.class_names.size(); ++c) {
    const std::string& name = bank.class_names[c];
    std::vector<std::string> prompts;
    for (int n = 0; n < options.prompts_per_class; ++n) {
      std::string text = "a " + name + " pattern with";
      for (int w = 0; w < options.filler_words; ++w) text += " " + words[pick(rng)];
      prompts.push_back(text);
    }
    bank.prompts.push_back(std::move(prompts));
  }
  return bank;
}

Dataset generate_synthetic(const std::filesystem::path& out_dir, const SyntheticOptions& options) {
  if (options.train_per_class < 1 || options.test_per_class < 1) {
    throw ConfigError("synthetic sizes must be >= 1 per class and split");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Dataset ds;
  ds.name = "synthetic";
  ds.root = out_dir;
  ds.class_names = synthetic_class_names();
  for (int split = 0; split < 2; ++split) {
    const int count = split == 0 ? options.train_per_class : options.test_per_class;
    for (int label = 0; label < ds.num_classes(); ++label) {
      const std::string& name = ds.class_names[static_cast<std::size_t>(label)];
      for (int n = 0; n < count; ++n) {
        auto rng = item_rng(options.seed, label, split, n);
        ImageTensor image = synthetic_image(label, options, rng());
        DatasetItem item;
        item.path = name + "/" + (split == 0 ? "train_" : "test_") + std::to_string(n) + ".pgm";
        item.label = label;
        item.caption = synthetic_caption(name);
        item.split = split == 0 ? Split::train : Split::test;
        write_pnm(out_dir / item.path, image);
        ds.items.push_back(std::move(item));
        ds.images.push_back(std::move(image));
      }
    }
  }
  write_manifest(out_dir / "manifest.json", ds);
  save_prompt_bank(out_dir / "prompt_bank.json", synthetic_prompt_bank(options));
  save_templates(out_dir / "templates.json", {synthetic_prompt_spec()});
  return ds;
}

}  // namespace dpt
