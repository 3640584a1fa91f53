#include <cmath>
#include <random>

#include "doctest.h"
#include "dpt/io.hpp"
#include "dpt/losses.hpp"
#include "dpt/text.hpp"
#include "oracles.hpp"

using namespace dpt;

namespace {

RowVector<double> rv(std::initializer_list<double> xs) {
  RowVector<double> out(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) out(i++) = x;
  return out;
}

RowVector<double> random_simplex(Index k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  RowVector<double> p(k);
  for (Index i = 0; i < k; ++i) p(i) = u(rng);
  return p / p.sum();
}

std::vector<double> as_vec(const RowVector<double>& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

}  // namespace

TEST_CASE("similarity") {
  std::mt19937_64 rng(5);
  const Matrix u = oracle::random_matrix(1, 8, rng);
  CHECK(similarity(u, u) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(similarity(rv({1, 0}), rv({0, 1})) == 0.0);
  for (int t = 0; t < 20; ++t) {
    const Matrix w = oracle::random_matrix(1, 8, rng);
    const Matrix f = oracle::random_matrix(1, 8, rng);
    const double s = similarity(w, f);
    CHECK(std::fabs(s - similarity(w, 3.7 * f)) < 1e-12);
    CHECK(std::fabs(s - oracle::cosine(oracle::row(w, 0), oracle::row(f, 0))) < 1e-12);
    CHECK(std::fabs(s) <= 1.0);
  }
  CHECK_THROWS_AS(similarity(rv({0, 0}), rv({1, 0})), DegenerateInputError);
  CHECK_THROWS_AS(similarity(rv({1, 2}), rv({0, 0})), DegenerateInputError);
}

TEST_CASE("class_probs") {
  std::mt19937_64 rng(6);
  const Matrix f = oracle::random_matrix(1, 8, rng);

  Matrix same(4, 8);
  for (Index i = 0; i < 4; ++i) same.row(i) = f.row(0) * 0.3 + Matrix::Constant(1, 8, 0.1);
  const RowVector<double> uni = class_probs(same, f, 0.01);
  for (Index i = 0; i < 4; ++i) CHECK(uni(i) == doctest::Approx(0.25).epsilon(1e-12));

  const Matrix w = oracle::random_matrix(3, 8, rng);
  const RowVector<double> flat = class_probs(w, f, 1e6);
  CHECK(flat.maxCoeff() - flat.minCoeff() < 1e-5);

  for (int t = 0; t < 50; ++t) {
    const Matrix wk = oracle::random_matrix(3, 8, rng);
    const Matrix fk = oracle::random_matrix(1, 8, rng);
    std::vector<double> logits;
    for (Index i = 0; i < 3; ++i) logits.push_back(oracle::cosine(oracle::row(wk, i), oracle::row(fk, 0)) / 0.01);
    const auto expected = oracle::softmax(logits);
    const RowVector<double> got = class_probs(wk, fk, 0.01);
    for (Index i = 0; i < 3; ++i) CHECK(std::fabs(got(i) - expected[static_cast<std::size_t>(i)]) < 1e-12);
    CHECK(std::fabs(got.sum() - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(class_probs(w, f, 0.0), ConfigError);
  CHECK_THROWS_AS(class_probs(w, f, -1.0), ConfigError);
  CHECK_THROWS_AS(class_probs(Matrix(w.topRows(1)), f, 0.01), ContractError);
}

TEST_CASE("predict") {
  CHECK(predict(rv({0.1, 0.7, 0.2})) == 1);
  CHECK(predict(rv({0.25, 0.25, 0.25, 0.25})) == 0);
  CHECK(predict(rv({0.2, 0.4, 0.4})) == 1);

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> alpha(1e-3, 1e3);
  for (int t = 0; t < 100; ++t) {
    const Matrix w = oracle::random_matrix(5, 8, rng);
    const Matrix f = oracle::random_matrix(1, 8, rng);
    CHECK(predict(class_probs(w, f, 0.01)) == predict(class_probs(w, alpha(rng) * f, 0.01)));
  }
}

TEST_CASE("cross entropy") {
  CHECK(loss_ce(1, rv({0, 1, 0})) == 0.0);
  CHECK(loss_ce(2, rv({0.25, 0.25, 0.25, 0.25})) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(loss_ce(0, rv({0, 1})) == doctest::Approx(-std::log(1e-12)));
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    const RowVector<double> p = random_simplex(5, rng);
    const int y = t % 5;
    const double ce = loss_ce(y, p);
    CHECK(std::fabs(ce - oracle::cross_entropy(y, as_vec(p))) < 1e-12);
    CHECK(ce >= 0.0);
  }
  CHECK_THROWS_AS(loss_ce(3, rv({0.5, 0.5})), LookupError);
}

TEST_CASE("kl divergence") {
  std::mt19937_64 rng(9);
  const RowVector<double> p = random_simplex(4, rng);
  CHECK(loss_kl(p, p) == 0.0);
  CHECK(loss_kl(rv({1, 0}), rv({0.5, 0.5})) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  for (int t = 0; t < 200; ++t) {
    const RowVector<double> a = random_simplex(5, rng);
    const RowVector<double> b = random_simplex(5, rng);
    const double kl = loss_kl(a, b);
    CHECK(std::fabs(kl - oracle::kl(as_vec(a), as_vec(b))) < 1e-12);
    CHECK(kl > 0.0);
  }
  CHECK_THROWS_AS(loss_kl(rv({1, 0}), rv({0.3, 0.3, 0.4})), DimensionError);

  // Sub-floor mass on the teacher side.
  CHECK(loss_kl(rv({1.0 - 2e-13, 2e-13, 0}), rv({1, 0, 0})) >= 0.0);
  for (int t = 0; t < 500; ++t) {
    const Matrix f = oracle::random_matrix(1, 8, rng);
    const RowVector<double> a = class_probs(oracle::random_matrix(5, 8, rng), f, 0.01);
    const RowVector<double> b = class_probs(oracle::random_matrix(5, 8, rng), f, 0.01);
    CHECK(loss_kl(a, b) >= 0.0);
    CHECK(std::fabs(loss_kl(a, b) - oracle::kl(as_vec(a), as_vec(b))) < 1e-10);
    Tape tape;
    CHECK(std::fabs(loss_kl(a, tape.constant(b)).scalar() - loss_kl(a, b)) < 1e-12);
  }
}

TEST_CASE("l1 bank distance") {
  CHECK(loss_l1(Matrix::Ones(1, 2), Matrix::Zero(1, 2)) == 2.0);
  std::mt19937_64 rng(10);
  const Matrix a = oracle::random_matrix(4, 6, rng);
  CHECK(loss_l1(a, a) == 0.0);
  for (int t = 0; t < 50; ++t) {
    const Matrix x = oracle::random_matrix(4, 6, rng);
    const Matrix y = oracle::random_matrix(4, 6, rng);
    CHECK(std::fabs(loss_l1(x, y) - oracle::l1_bank(x, y)) < 1e-12);
  }
  CHECK_THROWS_AS(loss_l1(a, Matrix(a.topRows(3))), ContractError);
}

TEST_CASE("total loss") {
  CHECK(loss_total(1, 2, 3, {0.5, 2.0, 0.01}) == 8.0);
  CHECK(loss_total(1.25, 2, 3, {0.0, 0.0, 0.01}) == 1.25);
  const LossWeights bad{-1.0, 0.0, 0.01};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("tape losses agree with the plain versions") {
  std::mt19937_64 rng(11);
  const Matrix w = oracle::random_matrix(5, 8, rng);
  const Matrix f = oracle::random_matrix(3, 8, rng);
  const Matrix teacher_bank = oracle::random_matrix(5, 8, rng);
  Matrix teacher_probs(3, 5);
  for (Index b = 0; b < 3; ++b) teacher_probs.row(b) = random_simplex(5, rng);
  const std::vector<int> labels = {0, 3, 4};

  Tape tape;
  const Var probs = class_probs(tape.constant(w), tape.constant(f), 0.01);
  double ce = 0.0, kl = 0.0;
  for (Index b = 0; b < 3; ++b) {
    const RowVector<double> p = class_probs(w, f.row(b), 0.01);
    CHECK((probs.value().row(b) - p).cwiseAbs().maxCoeff() < 1e-12);
    ce += loss_ce(labels[static_cast<std::size_t>(b)], p) / 3.0;
    kl += loss_kl(teacher_probs.row(b), p) / 3.0;
  }
  CHECK(std::fabs(loss_ce_batch(labels, probs).scalar() - ce) < 1e-12);
  CHECK(std::fabs(loss_kl_batch(teacher_probs, probs).scalar() - kl) < 1e-12);
  CHECK(std::fabs(loss_l1(teacher_bank, tape.constant(w)).scalar() - loss_l1(teacher_bank, w)) < 1e-12);
}

TEST_CASE("gradient routing reaches the context and nothing else") {
  const Vocab vocab = load_vocab(DPT_DATA_DIR "/vocab.txt");
  ModelConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.channels = 1;
  const ModelParams params = init_model(cfg, 12);
  PromptSpec spec;
  spec.dataset_name = "toy";
  spec.template_text = "a photo of a [CLASS].";
  spec.nctx = 4;
  ContextVectors ctx = init_context(spec, params.text.token_embedding, vocab, ContextInit::template_words);

  std::mt19937_64 rng(13);
  const Matrix features = oracle::random_matrix(2, cfg.feature_dim, rng);
  const Matrix teacher_bank = oracle::random_matrix(3, cfg.feature_dim, rng);
  const Matrix teacher_probs = class_probs(teacher_bank, features.row(0), 0.01);
  const std::vector<std::string> names = {"ring", "cross", "checker"};

  Tape tape;
  const Var v = tape.leaf(ctx.v);
  std::vector<Var> rows;
  for (const auto& n : names) rows.push_back(encode_text(tape, params.text, cfg, layout_prompt(spec, n, vocab), v));
  const Var w = concat_rows(rows);
  const Var probs = class_probs(w, tape.constant(features), 0.01);
  const Var loss = add(add(loss_ce_batch({0, 2}, probs), scale(loss_l1(teacher_bank, w), 0.5)),
                       scale(loss_kl_batch(Matrix(teacher_probs.replicate(2, 1)), probs), 2.0));
  tape.backward(loss);

  REQUIRE(ctx.v.grad.has_value());
  CHECK(ctx.v.grad->norm() > 0.0);
  for (const auto& [name, t] : params.named_tensors()) {
    CAPTURE(name);
    CHECK_FALSE(t->grad.has_value());
  }
}

TEST_CASE("harmonic mean") {
  CHECK(harmonic_mean(74.28, 67.93) == doctest::Approx(70.96).epsilon(5e-5));
  CHECK(std::round(harmonic_mean(74.28, 67.93) * 100.0) / 100.0 == 70.96);
  CHECK(harmonic_mean(63.5, 63.5) == doctest::Approx(63.5).epsilon(1e-15));
  CHECK(harmonic_mean(100.0, 0.0) == 0.0);
  CHECK(harmonic_mean(0.0, 0.0) == 0.0);
}

TEST_CASE("lambda table") {
  const LambdaTable table = load_lambda_table(DPT_DATA_DIR "/lambdas.json");
  const auto btmri = table.find("BTMRI", Benchmark::few_shot);
  REQUIRE(btmri.has_value());
  CHECK(btmri->lambda1 == 12.50);
  CHECK(btmri->lambda2 == 0.25);
  CHECK_FALSE(table.find("BUSI", Benchmark::base_to_novel).has_value());
  const auto fallback = table.lookup("BUSI", Benchmark::base_to_novel, {1.0, 0.25});
  CHECK(fallback.lambda1 == 1.0);
  CHECK(fallback.lambda2 == 0.25);
  const auto synth = table.lookup("synthetic", Benchmark::few_shot, {1.0, 0.25});
  CHECK(synth.lambda1 == 0.01);
  CHECK(synth.lambda2 == 0.05);
  CHECK(parse_benchmark("base_to_novel") == Benchmark::base_to_novel);
  CHECK_THROWS_AS(parse_benchmark("zero_shot"), ConfigError);
}
