#include <cmath>
#include <random>

#include "doctest.h"
#include "dpt/errors.hpp"
#include "dpt/model.hpp"
#include "dpt/vision.hpp"
#include "oracles.hpp"

using namespace dpt;

namespace {

// Z_q = sum_j exp(q.k_j / sqrt(d)) over the real keys.
Matrix partition(const Matrix& q, const Matrix& k) {
  const Matrix logits = q * k.transpose() / std::sqrt(static_cast<double>(q.cols()));
  return logits.array().exp().rowwise().sum().matrix();
}

ModelConfig toy(int layers = 2, int heads = 2) {
  ModelConfig c;
  c.vocab_size = 10;
  c.vision_layers = layers;
  c.vision_heads = heads;
  c.text_layers = layers;
  c.text_heads = heads;
  c.channels = 1;
  return c;
}

ImageTensor random_image(std::mt19937_64& rng, int size = 32) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(static_cast<std::size_t>(size) * size);
  for (double& p : px) p = u(rng);
  return ImageTensor(1, size, size, std::move(px));
}

}  // namespace

TEST_CASE("attention sink scaling law") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = 2 + trial % 5;
    const Index d = 2 + trial % 4;
    const Matrix q = oracle::random_matrix(n, d, rng);
    const Matrix k = oracle::random_matrix(n, d, rng);
    const Matrix v = oracle::random_matrix(n, d, rng);
    Tape tape;
    const Matrix base = attention_with_sink(tape.constant(q), tape.constant(k), tape.constant(v), 0).value();
    const Matrix z = partition(q, k);
    for (int p : {1, 2, 3, 8}) {
      const Matrix got = attention_with_sink(tape.constant(q), tape.constant(k), tape.constant(v), p).value();
      for (Index r = 0; r < n; ++r) {
        const double s = z(r, 0) / (z(r, 0) + p);
        CHECK((got.row(r) - s * base.row(r)).cwiseAbs().maxCoeff() <= 1e-9);
      }
    }
  }
}

TEST_CASE("attention sink special cases") {
  Tape tape;
  std::mt19937_64 rng(2);
  const Matrix q = oracle::random_matrix(3, 4, rng);
  const Matrix k = oracle::random_matrix(3, 4, rng);
  const Matrix v = oracle::random_matrix(3, 4, rng);

  SUBCASE("P = 0 is plain attention, bitwise") {
    const Matrix plain =
        softmax(tape.constant(q * k.transpose() / 2.0), 1).value() * v;
    CHECK(attention_with_sink(tape.constant(q), tape.constant(k), tape.constant(v), 0).value() == plain);
  }
  SUBCASE("one real token with logit 0 gets weight one half") {
    const Matrix one_k = Matrix::Zero(1, 4);
    const Matrix one_v = Matrix::Ones(1, 4);
    const Matrix out = attention_with_sink(tape.constant(q), tape.constant(one_k), tape.constant(one_v), 1).value();
    CHECK(out.cwiseAbs().maxCoeff() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(out.cwiseAbs().minCoeff() == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("entropy over real tokens is unchanged, mass drops below one") {
    const Matrix logits = q * k.transpose() / 2.0;
    const Matrix w0 = softmax_rows(logits);
    Matrix padded(3, 5);
    padded << logits, Matrix::Zero(3, 2);
    const Matrix w2 = softmax_rows(padded);
    for (Index r = 0; r < 3; ++r) {
      const RowVector<double> real = w2.row(r).head(3);
      const double mass = real.sum();
      CHECK(mass < 1.0);
      const RowVector<double> renorm = real / mass;
      double h0 = 0.0, h2 = 0.0;
      for (Index c = 0; c < 3; ++c) {
        h0 -= w0(r, c) * std::log(w0(r, c));
        h2 -= renorm(c) * std::log(renorm(c));
      }
      CHECK(std::fabs(h0 - h2) < 1e-12);
    }
  }
  CHECK_THROWS_AS(attention_with_sink(tape.constant(q), tape.constant(k), tape.constant(v), -1), ConfigError);
}

TEST_CASE("sink law through a full one-layer, one-head block") {
  const ModelConfig c = toy(1, 1);
  const ModelParams params = init_model(c, 3);
  std::mt19937_64 rng(8);
  const ImageTensor image = random_image(rng);
  const int p = 3;

  Tape tape;
  const Var e0 = embed_patches(tape, params.vision, image_grid(c, image));
  const Matrix f = encoder_forward(tape, params.vision, c, e0, {p, ZeroPromptMode::kv_sink}).value();

  // Baseline attention branch, then the scaling law applied by hand.
  const VisionParams& vp = params.vision;
  const BlockParams& b = vp.blocks.front();
  Matrix x(1 + e0.rows(), c.vision_width);
  x << vp.class_token.value + vp.position_embedding.value.row(0), e0.value();
  const Matrix h = layer_norm_rows(x, b.ln1_gain.value, b.ln1_bias.value, c.ln_eps);
  const Matrix q = (h * b.wq.value).rowwise() + b.bq.value.row(0);
  const Matrix k = (h * b.wk.value).rowwise() + b.bk.value.row(0);
  const Matrix v = (h * b.wv.value).rowwise() + b.bv.value.row(0);
  Matrix attn = softmax_rows(q * k.transpose() / std::sqrt(static_cast<double>(q.cols()))) * v;
  const Matrix z = partition(q, k);
  for (Index r = 0; r < attn.rows(); ++r) attn.row(r) *= z(r, 0) / (z(r, 0) + p);
  Matrix y = x + ((attn * b.wo.value).rowwise() + b.bo.value.row(0));
  const Matrix pre = (layer_norm_rows(y, b.ln2_gain.value, b.ln2_bias.value, c.ln_eps) * b.w1.value).rowwise() +
                     b.b1.value.row(0);
  Matrix act = pre;
  for (Index i = 0; i < act.size(); ++i) {
    const double t = pre.data()[i];
    act.data()[i] = 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0)));
  }
  y += (act * b.w2.value).rowwise() + b.b2.value.row(0);
  const Matrix out = layer_norm_rows(y, vp.ln_final_gain.value, vp.ln_final_bias.value, c.ln_eps);
  const Matrix want = out.row(0) * vp.projection.value;
  CHECK((f - want).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("zero-prompt mode equivalences are bitwise") {
  const ModelConfig c = toy();
  const ModelParams params = init_model(c, 5);
  std::mt19937_64 rng(4);
  const ImageTensor image = random_image(rng);
  const Matrix off = encode_image(params, image, ZeroPromptConfig::disabled());
  CHECK(encode_image(params, image, {0, ZeroPromptMode::kv_sink}) == off);
  CHECK(encode_image(params, image, {0, ZeroPromptMode::concat}) == off);
  CHECK(encode_image(params, image, {4, ZeroPromptMode::off}) == off);
  CHECK(encode_image(params, image, {1, ZeroPromptMode::kv_sink}) != off);
  CHECK(encode_image(params, image, {1, ZeroPromptMode::concat}) != off);
  CHECK_FALSE(ZeroPromptConfig{0, ZeroPromptMode::kv_sink}.active());
}

TEST_CASE("patchify") {
  auto blank = [](int h, int w) {
    return ImageTensor(1, h, w, std::vector<double>(static_cast<std::size_t>(h) * w, 0.0));
  };
  CHECK(patchify(blank(224, 224).with_channels(3), 16, 16).count() == 196);

  const PatchGrid g17 = patchify(blank(17, 17), 16, 16);
  CHECK(g17.count() == 1);
  CHECK(g17.grid_rows * 16 == 16);

  std::vector<double> px(32 * 48);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<double>(i % 251) / 250.0;
  const ImageTensor img(1, 32, 48, px);
  const PatchGrid g = patchify(img, 16, 16);
  CHECK(g.grid_rows == 2);
  CHECK(g.grid_cols == 3);
  const Index patch = 1 * 3 + 2;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) CHECK(g.patches(patch, y * 16 + x) == img.at(0, 16 + y, 32 + x));

  const ImageTensor back = reassemble(g);
  CHECK(back.data == img.data);
  CHECK_THROWS_AS(patchify(img, 33, 16), DimensionError);
  CHECK_THROWS_AS(patchify(img, 0, 16), DimensionError);
}

TEST_CASE("embed_patches") {
  ModelConfig c = toy();
  ModelParams params = init_model(c, 1);
  const ImageTensor zero(1, 32, 32, std::vector<double>(32 * 32, 0.0));
  params.vision.patch_bias.value.setZero();
  Tape tape;
  const Matrix e0 = embed_patches(tape, params.vision, image_grid(c, zero)).value();
  CHECK(e0.cols() == c.vision_width);
  CHECK(e0 == params.vision.position_embedding.value.bottomRows(c.num_patches()));

  std::mt19937_64 rng(6);
  const ImageTensor img = random_image(rng);
  const PatchGrid grid = image_grid(c, img);
  const Matrix e = embed_patches(tape, params.vision, grid).value();
  for (Index j = 0; j < c.vision_width; ++j) {
    double dot = 0.0;
    for (Index t = 0; t < grid.patches.cols(); ++t) dot += grid.patches(5, t) * params.vision.patch_weight.value(t, j);
    CHECK(std::fabs(e(5, j) - (dot + params.vision.position_embedding.value(6, j))) < 1e-12);
  }
}

TEST_CASE("image ingestion") {
  const ImageTensor clamped(1, 1, 2, {-0.5, 1.5});
  CHECK(clamped.data == std::vector<double>{0.0, 1.0});
  const ImageTensor rgb = ImageTensor(1, 1, 2, {0.25, 0.75}).with_channels(3);
  CHECK(rgb.channels == 3);
  CHECK(rgb.at(2, 0, 1) == 0.75);
  CHECK_THROWS_AS(ImageTensor(1, 2, 2, {0.0}), DimensionError);
  CHECK_THROWS_AS(image_grid(toy(), ImageTensor(1, 16, 16, std::vector<double>(256, 0.0))), DimensionError);
}

TEST_CASE("model init and hashing") {
  const ModelConfig c = toy();
  const ModelParams a = init_model(c, 1);
  const ModelParams b = init_model(c, 1);
  CHECK(hash_params(a) == hash_params(b));
  CHECK(hash_params(a) != hash_params(init_model(c, 2)));
  ModelParams d = init_model(c, 1);
  d.vision.blocks[0].wq.value(0, 0) += 1e-12;
  CHECK(hash_vision(d) != hash_vision(a));

  for (const auto& [name, t] : a.named_tensors()) {
    CAPTURE(name);
    CHECK_FALSE(t->requires_grad);
  }
  ModelConfig bad = c;
  bad.vision_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("heatmap normalisation and saliency contract") {
  CHECK(normalize_heat(Matrix::Constant(2, 2, 3.0)).cwiseAbs().maxCoeff() == 0.0);
  Matrix raw(1, 3);
  raw << 1.0, 3.0, 2.0;
  const Matrix n = normalize_heat(raw);
  CHECK(n(0, 0) == 0.0);
  CHECK(n(0, 1) == 1.0);
  CHECK(n(0, 2) == 0.5);

  const ModelConfig c = toy();
  const ModelParams params = init_model(c, 3);
  std::mt19937_64 rng(12);
  const ImageTensor image = random_image(rng);
  const Matrix bank = oracle::random_matrix(3, c.feature_dim, rng);
  for (SaliencyMode mode : {SaliencyMode::gradient, SaliencyMode::grad_input}) {
    const Heatmap h = saliency(params, image, bank, 0.01, 1, {1, ZeroPromptMode::kv_sink}, mode);
    CHECK(h.cells.rows() == c.grid());
    CHECK(h.cells.cols() == c.grid());
    CHECK(h.cells.minCoeff() >= 0.0);
    CHECK(h.cells.maxCoeff() <= 1.0);
    const Matrix up = h.upsample(32, 32);
    const auto [r, col] = h.argmax();
    CHECK(up(r * 8 + 3, col * 8 + 3) == h.cells(r, col));
  }
  CHECK_THROWS_AS(saliency(params, image, bank, 0.01, 3, ZeroPromptConfig::disabled()), LookupError);
  CHECK(parse_saliency_mode("grad_input") == SaliencyMode::grad_input);
  CHECK_THROWS_AS(parse_saliency_mode("cam"), ConfigError);
}
