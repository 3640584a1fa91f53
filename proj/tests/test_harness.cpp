#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "fixture.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace dpt;

namespace {

Dataset labels_only(const std::vector<int>& train_per_class) {
  Dataset ds;
  ds.name = "toy";
  for (std::size_t c = 0; c < train_per_class.size(); ++c) {
    ds.class_names.push_back("c" + std::to_string(c));
    for (int i = 0; i < train_per_class[c]; ++i) {
      ds.items.push_back({"x.pgm", static_cast<int>(c), "", Split::train});
    }
  }
  return ds;
}

RunConfig quick(RunConfig c, Switches s, int epochs = 3) {
  c.switches = s;
  c.epochs_few_shot = epochs;
  c.epochs_base_novel = epochs;
  return c;
}

Workspace make_ws(const fixture::World& w, const Dataset& ds) {
  return Workspace(w.backbone, ds, w.res.vocab, w.res.spec, w.res.bank);
}

}  // namespace

TEST_CASE("few-shot sampling") {
  const Dataset& ds = fixture::world().res.dataset;
  const FewShotTask one = sample_few_shot(ds, 1, 1);
  CHECK(one.pool().size() == 4);
  for (std::size_t c = 0; c < one.per_class.size(); ++c) {
    REQUIRE(one.per_class[c].size() == 1);
    CHECK(ds.items[one.per_class[c][0]].label == one.classes[c]);
    CHECK(ds.items[one.per_class[c][0]].split == Split::train);
  }

  const FewShotTask a = sample_few_shot(ds, 16, 2);
  CHECK(a.per_class == sample_few_shot(ds, 16, 2).per_class);
  for (const auto& picks : a.per_class) CHECK(std::set<std::size_t>(picks.begin(), picks.end()).size() == 16);

  const Dataset big = labels_only({100, 100});
  int differing = 0;
  for (int t = 0; t < 10; ++t) {
    const auto x = sample_few_shot(big, 4, 1 + 2 * t);
    const auto y = sample_few_shot(big, 4, 2 + 2 * t);
    differing += x.per_class[0] != y.per_class[0] ? 1 : 0;
  }
  CHECK(differing >= 1);

  try {
    sample_few_shot(labels_only({20, 3}), 4, 1);
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("'c1'") != std::string::npos);
  }
}

TEST_CASE("base/novel split") {
  const ClassSplit four = split_base_novel({"d", "b", "a", "c"});
  CHECK(four.base == std::vector<int>{2, 1});
  CHECK(four.novel == std::vector<int>{3, 0});
  const ClassSplit five = split_base_novel({"e", "d", "c", "b", "a"});
  CHECK(five.base.size() == 3);
  CHECK(five.novel.size() == 2);
  CHECK_THROWS_AS(split_base_novel({"only"}), ContractError);

  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> count(2, 12), letter('a', 'z');
  for (int t = 0; t < 50; ++t) {
    std::set<std::string> unique;
    const int n = count(rng);
    while (static_cast<int>(unique.size()) < n) unique.insert(std::string(3, static_cast<char>(letter(rng))) + std::to_string(unique.size()));
    std::vector<std::string> names(unique.begin(), unique.end());
    std::shuffle(names.begin(), names.end(), rng);
    const ClassSplit s = split_base_novel(names);
    std::vector<int> all = s.base;
    all.insert(all.end(), s.novel.begin(), s.novel.end());
    std::sort(all.begin(), all.end());
    std::vector<int> expected(names.size());
    std::iota(expected.begin(), expected.end(), 0);
    CHECK(all == expected);
    CHECK(s.base.size() == (names.size() + 1) / 2);
    for (int b : s.base)
      for (int v : s.novel) CHECK(names[static_cast<std::size_t>(b)] < names[static_cast<std::size_t>(v)]);
  }
}

TEST_CASE("batch schedule") {
  const auto sched = batch_schedule(10, 4, 3, 7);
  CHECK(sched == batch_schedule(10, 4, 3, 7));
  CHECK(sched != batch_schedule(10, 4, 3, 8));
  REQUIRE(sched.size() == 9);
  for (int e = 0; e < 3; ++e) {
    std::vector<std::size_t> seen;
    for (int b = 0; b < 3; ++b) {
      const auto& batch = sched[static_cast<std::size_t>(3 * e + b)];
      CHECK(batch.size() <= 4);
      seen.insert(seen.end(), batch.begin(), batch.end());
    }
    std::sort(seen.begin(), seen.end());
    std::vector<std::size_t> all(10);
    std::iota(all.begin(), all.end(), 0);
    CHECK(seen == all);
  }
}

TEST_CASE("seed aggregation and metrics records") {
  auto rec = [](int seed, double acc) {
    MetricsRecord r;
    r.dataset = "synthetic";
    r.method = "dpt";
    r.k_shot = 16;
    r.seed = seed;
    r.accuracy = acc;
    return r;
  };
  const auto single = aggregate_seeds({rec(1, 42.5)});
  REQUIRE(single.size() == 1);
  CHECK(single[0].mean == 42.5);

  const auto three = aggregate_seeds({rec(1, 50), rec(2, 60), rec(3, 70)});
  REQUIRE(three.size() == 1);
  CHECK(three[0].mean == 60.0);
  CHECK(three[0].values == std::vector<double>{50, 60, 70});

  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0, 100);
  std::vector<MetricsRecord> many;
  double total = 0.0;
  for (int s = 0; s < 7; ++s) {
    many.push_back(rec(s, u(rng)));
    total += *many.back().accuracy;
  }
  MetricsRecord other = rec(1, 10.0);
  other.k_shot = 1;
  many.push_back(other);
  const auto cells = aggregate_seeds(many);
  CHECK(cells.size() == 2);
  bool found = false;
  for (const auto& cell : cells) {
    if (cell.values.size() == 7) {
      CHECK(std::fabs(cell.mean - total / 7.0) < 1e-12);
      found = true;
    }
  }
  CHECK(found);

  const auto j = nlohmann::json::parse(rec(2, 55.0).to_jsonl());
  for (const char* key : {"dataset", "benchmark", "method", "k_shot", "seed", "switches", "accuracy"}) CHECK(j.contains(key));
  CHECK_FALSE(j.contains("hm"));
  CHECK(rec(2, 55.0).to_jsonl().find('\n') == std::string::npos);
}

TEST_CASE("configuration") {
  RunConfig c;
  CHECK(c.lr == 0.0025);
  CHECK(c.batch_size == 4);
  CHECK(c.epochs_few_shot == 100);
  CHECK(c.epochs_base_novel == 50);
  CHECK(c.seeds == std::vector<int>{1, 2, 3});
  CHECK(c.n_prompts == 50);

  apply_config(parse_config("train.lr = 0.01\ntrain.seeds = 4,5\nprompt.switches = zsp,kl\n"), c);
  CHECK(c.lr == 0.01);
  CHECK(c.seeds == std::vector<int>{4, 5});
  CHECK(c.switches == Switches{true, false, false, true});
  CHECK_THROWS_AS(apply_config(parse_config("train.lrr = 1\n"), c), ConfigError);
  CHECK_NOTHROW(apply_config(parse_config("train.lrr = 1\n"), c, false));
  CHECK_THROWS_AS(apply_config(parse_config("train.batch_size = four\n"), c), ConfigError);

  CHECK(Switches::parse("none") == Switches::none());
  CHECK(Switches::parse("zsp,cpt,l1,kl") == Switches::all());
  for (const Switches& s : switch_combinations()) CHECK(Switches::parse(s.to_string()) == s);
  CHECK_THROWS_AS(Switches::parse("zsp,foo"), ConfigError);
  CHECK(switch_combinations().size() == 16);
  CHECK(switch_combinations().front() == Switches::none());
  CHECK(method_name(Switches::none()) == "coop");
  CHECK(method_name(Switches::all()) == "dpt");
  CHECK(method_name(Switches{true, false, true, true}) == "dpt-ablation");

  RunConfig coop;
  coop.switches = Switches::none();
  const LossWeights w = coop.weights("BTMRI", Benchmark::few_shot);
  CHECK(w.lambda1 == 0.0);
  CHECK(w.lambda2 == 0.0);
}

TEST_CASE("evaluation") {
  const fixture::World& w = fixture::world();
  const Dataset& full = w.res.dataset;
  const ZeroPromptConfig p0 = ZeroPromptConfig::disabled();

  Dataset one = full;
  const std::size_t keep = full.indices(Split::test).front();
  for (std::size_t i = one.items.size(); i-- > 0;) {
    if (one.items[i].split == Split::test && i != keep) {
      one.items.erase(one.items.begin() + static_cast<std::ptrdiff_t>(i));
      one.images.erase(one.images.begin() + static_cast<std::ptrdiff_t>(i));
    }
  }
  const Workspace ws1 = make_ws(w, one);
  const std::size_t only = one.indices(Split::test).front();
  const int label = one.items[only].label;
  Matrix bank = ws1.features(p0).topRows(4);
  bank.row(label) = ws1.features(p0).row(static_cast<Index>(only));
  for (Index c = 0; c < 4; ++c)
    if (c != label) bank.row(c) = -bank.row(label);
  CHECK(evaluate_embeddings(ws1, bank, all_classes(one), Split::test, p0, 0.01) == 100.0);

  const Workspace ws = make_ws(w, full);
  const ContextVectors ctx = initial_context(ws, w.config, 1);
  const double base = evaluate(ws, ctx, all_classes(full), Split::test, p0, 0.01);

  Dataset reversed = full;
  std::reverse(reversed.items.begin(), reversed.items.end());
  std::reverse(reversed.images.begin(), reversed.images.end());
  const Workspace wsr = make_ws(w, reversed);
  CHECK(evaluate(wsr, ctx, all_classes(full), Split::test, p0, 0.01) == base);
  CHECK(evaluate(ws, ctx, all_classes(full), Split::test, p0, 0.01) == base);

  std::mt19937_64 rng(23);
  const Matrix coin = oracle::random_matrix(2, w.config.model.feature_dim, rng);
  const double acc = evaluate_embeddings(ws, coin, {0, 1}, Split::test, p0, 0.01);
  CHECK(acc >= 30.0);
  CHECK(acc <= 70.0);

  Dataset no_test = full;
  std::erase_if(no_test.items, [](const DatasetItem& it) { return it.split == Split::test; });
  no_test.images.resize(no_test.items.size());
  const Workspace wse = make_ws(w, no_test);
  CHECK_THROWS_AS(evaluate(wse, ctx, all_classes(full), Split::test, p0, 0.01), DataError);
}

TEST_CASE("zero-shot ensemble") {
  const fixture::World& w = fixture::world();
  const Workspace ws = make_ws(w, w.res.dataset);
  const auto classes = all_classes(w.res.dataset);

  const Matrix same = ws.teacher().row(0).replicate(4, 1);
  CHECK(zero_shot_ensemble_eval(ws, same, classes, Split::test, 0.01) == 25.0);

  const PromptBank first = w.res.bank.truncated(1);
  Matrix single(4, w.config.model.feature_dim);
  for (Index c = 0; c < 4; ++c) {
    single.row(c) = encode_text(w.backbone, layout_text(first.prompts[static_cast<std::size_t>(c)][0], w.res.vocab));
  }
  const Matrix ensemble_of_one = embed_prompt_bank(w.backbone, first, w.res.vocab);
  CHECK((ensemble_of_one - single).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(zero_shot_ensemble_eval(ws, ensemble_of_one, classes, Split::test, 0.01) ==
        evaluate_embeddings(ws, single, classes, Split::test, ZeroPromptConfig::disabled(), 0.01));
}

TEST_CASE("coop configuration matches a plain cross-entropy loop step for step") {
  const fixture::World& w = fixture::world();
  const Workspace ws = make_ws(w, w.res.dataset);
  const RunConfig c = quick(w.config, Switches::none(), 2);
  const FewShotTask task = sample_few_shot(w.res.dataset, 4, 5);
  const TrainResult lib = train_prompts(ws, task, c, Benchmark::few_shot);

  ContextVectors ctx = init_context(w.res.spec, w.backbone.text.token_embedding, w.res.vocab, ContextInit::random, 5);
  std::vector<std::size_t> pool;
  std::vector<int> labels;
  for (std::size_t k = 0; k < task.per_class.size(); ++k)
    for (std::size_t i : task.per_class[k]) {
      pool.push_back(i);
      labels.push_back(static_cast<int>(k));
    }
  std::vector<PromptLayout> layouts;
  for (const auto& name : w.res.dataset.class_names) layouts.push_back(layout_prompt(w.res.spec, name, w.res.vocab));
  const Matrix feats = ws.features(ZeroPromptConfig::disabled());

  std::vector<double> ref;
  Tensor* trainable[] = {&ctx.v};
  for (const auto& batch : batch_schedule(pool.size(), 4, 2, 5)) {
    Tape tape;
    const Var v = tape.leaf(ctx.v);
    std::vector<Var> rows;
    for (const auto& l : layouts) rows.push_back(encode_text(tape, w.backbone.text, w.backbone.config, l, v));
    const Var wv = concat_rows(rows);
    Var loss = tape.constant(Matrix::Zero(1, 1));
    for (std::size_t b : batch) {
      const Var p = class_probs(wv, tape.constant(feats.row(static_cast<Index>(pool[b]))), 0.01);
      loss = add(loss, scale(loss_ce(labels[b], p), 1.0 / static_cast<double>(batch.size())));
    }
    ref.push_back(loss.scalar());
    tape.backward(loss);
    for (Index i = 0; i < ctx.v.value.rows(); ++i)
      for (Index j = 0; j < ctx.v.value.cols(); ++j) ctx.v.value(i, j) -= 0.0025 * (*ctx.v.grad)(i, j);
    zero_grads(trainable);
  }
  REQUIRE(ref.size() == lib.step_losses.size());
  for (std::size_t s = 0; s < ref.size(); ++s) CHECK(lib.step_losses[s] == doctest::Approx(ref[s]).epsilon(1e-10));
  CHECK((lib.context.v.value - ctx.v.value).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backbone stays frozen in every training mode") {
  const fixture::World& w = fixture::world();
  const Workspace ws = make_ws(w, w.res.dataset);
  const std::uint64_t before = hash_params(w.backbone);
  const FewShotTask task = sample_few_shot(w.res.dataset, 2, 1);
  for (const Switches& s : {Switches::all(), Switches::none(), Switches{true, false, true, false}}) {
    const TrainResult r = train_prompts(ws, task, quick(w.config, s, 2), Benchmark::few_shot);
    CHECK(std::all_of(r.step_losses.begin(), r.step_losses.end(), [](double x) { return std::isfinite(x); }));
    CHECK(hash_params(w.backbone) == before);
  }
  const MetricsRecord b2n = run_base_to_novel(ws, quick(w.config, Switches::all(), 2), 2, 1);
  CHECK(hash_params(w.backbone) == before);
  REQUIRE(b2n.hm.has_value());
  CHECK(*b2n.hm == harmonic_mean(*b2n.base_acc, *b2n.novel_acc));
  CHECK_FALSE(b2n.accuracy.has_value());
}

TEST_CASE("runs are reproducible") {
  const fixture::World& w = fixture::world();
  const Workspace ws = make_ws(w, w.res.dataset);
  const RunConfig c = quick(w.config, Switches::all(), 2);
  const MetricsRecord a = run_few_shot(ws, c, 2, 3);
  const MetricsRecord b = run_few_shot(ws, c, 2, 3);
  CHECK(a.to_jsonl() == b.to_jsonl());
  CHECK(a.method == "dpt");
  REQUIRE(a.accuracy.has_value());
  CHECK(*a.accuracy >= 0.0);
  CHECK(*a.accuracy <= 100.0);
  CHECK_FALSE(a.hm.has_value());
}

TEST_CASE("backbone pretraining") {
  const fixture::World& w = fixture::world();
  CHECK(retrieval_accuracy(w.backbone, w.res.dataset, w.res.vocab, Split::test) < 50.0);

  RunConfig c = w.config;
  c.pretrain_epochs = 1;
  PretrainReport r1, r2;
  const ModelParams a = pretrain_backbone(w.res.dataset, w.res.vocab, c, &r1);
  const ModelParams b = pretrain_backbone(w.res.dataset, w.res.vocab, c, &r2);
  CHECK(hash_params(a) == hash_params(b));
  CHECK(r1.epoch_losses == r2.epoch_losses);
  CHECK(r1.epoch_losses.size() == 1);
  for (const auto& [name, t] : a.named_tensors()) CHECK_FALSE(t->requires_grad);

  Dataset one_class = w.res.dataset;
  one_class.class_names.resize(1);
  std::vector<DatasetItem> items;
  std::vector<ImageTensor> images;
  for (std::size_t i = 0; i < one_class.items.size(); ++i)
    if (one_class.items[i].label == 0) {
      items.push_back(one_class.items[i]);
      images.push_back(one_class.images[i]);
    }
  one_class.items = items;
  one_class.images = images;
  CHECK_THROWS_AS(pretrain_backbone(one_class, w.res.vocab, c), ContractError);
}
