// Command-line front end: data generation, backbone pretraining, prompt
// tuning, evaluation, base-to-novel runs, ablations and saliency export.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dpt/pipeline.hpp"
#include "dpt/synthetic.hpp"

namespace {

using namespace dpt;

struct Options {
  std::string config;
  std::string data;
  std::string weights;
  std::string context;
  std::string out;
  std::string image;
  std::string switches = "zsp,cpt,l1,kl";
  std::string mode = "gradient";
  std::optional<int> seed;
  int k = 16;
  int target = 0;
};

RunConfig run_config(const Options& o) {
  std::optional<fs::path> path;
  if (!o.config.empty()) path = o.config;
  RunConfig c = load_run_config(path);
  c.switches = Switches::parse(o.switches);
  return c;
}

void emit(const std::vector<MetricsRecord>& records, const std::string& out) {
  std::ofstream file;
  if (!out.empty()) {
    file.open(out, std::ios::app);
    if (!file) throw IoError("cannot append to " + out);
  }
  for (const MetricsRecord& r : records) {
    std::cout << r.to_jsonl() << '\n';
    if (file) file << r.to_jsonl() << '\n';
  }
}

std::vector<int> seeds_for(const Options& o, const RunConfig& c) {
  return o.seed ? std::vector<int>{*o.seed} : c.seeds;
}

void cmd_gen_data(const Options& o) {
  SyntheticOptions so;
  so.seed = static_cast<std::uint64_t>(o.seed.value_or(1));
  const Dataset ds = generate_synthetic(o.out, so);
  std::cout << "wrote " << ds.items.size() << " images to " << o.out << '\n';
}

void cmd_pretrain(const Options& o) {
  RunConfig c = run_config(o);
  if (o.seed) c.pretrain_seed = static_cast<std::uint64_t>(*o.seed);
  const Vocab vocab = load_vocab(c.vocab_path);
  const Dataset ds = load_dataset(o.data);
  PretrainReport report;
  const ModelParams params = pretrain_backbone(ds, vocab, c, &report);
  save_model(o.out, params);
  std::printf("heldout_retrieval %.2f final_loss %.6f\n", report.heldout_retrieval,
              report.epoch_losses.empty() ? 0.0 : report.epoch_losses.back());
}

void cmd_embed_prompts(const Options& o) {
  const RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  save_weights(o.out, {{"teacher", embed_prompt_bank(params, r.bank, r.vocab)}});
  std::cout << "embedded " << r.bank.prompts_per_class() << " prompts x " << r.bank.class_names.size()
            << " classes to " << o.out << '\n';
}

void cmd_train(const Options& o) {
  const RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  const Workspace ws(params, r.dataset, r.vocab, r.spec, r.bank);
  TrainedPrompt t;
  t.k_shot = o.k;
  t.seed = o.seed.value_or(1);
  t.switches = c.switches;
  const TrainResult result = train_prompts(ws, sample_few_shot(r.dataset, o.k, t.seed), c, Benchmark::few_shot);
  t.context = result.context;
  save_trained(o.out, t);
  std::printf("steps %zu final_loss %.6f\n", result.step_losses.size(), result.step_losses.back());
}

void cmd_eval(const Options& o) {
  const RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  const Workspace ws(params, r.dataset, r.vocab, r.spec, r.bank);
  emit({evaluate_trained(ws, c, load_trained(o.context))}, o.out);
}

void cmd_base2novel(const Options& o) {
  const RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  const Workspace ws(params, r.dataset, r.vocab, r.spec, r.bank);
  std::vector<MetricsRecord> records;
  for (int seed : seeds_for(o, c)) records.push_back(run_base_to_novel(ws, c, o.k, seed));
  emit(records, o.out);
}

void cmd_ablate(const Options& o) {
  const RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  const Workspace ws(params, r.dataset, r.vocab, r.spec, r.bank);
  std::vector<MetricsRecord> records;
  for (int seed : seeds_for(o, c)) {
    const auto rows = run_ablation(ws, c, o.k, seed);
    records.insert(records.end(), rows.begin(), rows.end());
  }
  emit(records, o.out);
}

void cmd_saliency(const Options& o) {
  RunConfig c = run_config(o);
  const Resources r = load_resources(o.data, c);
  const ModelParams params = load_model(o.weights);
  const Workspace ws(params, r.dataset, r.vocab, r.spec, r.bank);
  ContextVectors ctx;
  if (o.context.empty()) {
    ctx = initial_context(ws, c, o.seed.value_or(1));
  } else {
    const TrainedPrompt t = load_trained(o.context);
    ctx = t.context;
    c.switches = t.switches;
  }
  const Matrix w = ws.student_embeddings(ctx, all_classes(r.dataset));
  const ImageTensor image = read_pnm(o.image);
  const Heatmap heat = saliency(params, image, w, c.tau, o.target, c.student_zcfg(), parse_saliency_mode(o.mode));
  write_pgm(o.out, heat.upsample(image.height, image.width));
  const auto [row, col] = heat.argmax();
  std::cout << "argmax cell " << row << ' ' << col << " -> " << o.out << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-modality prompt tuning on a frozen toy vision-language model"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key=value configuration file")->check(CLI::ExistingFile);
  };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", o.seed, "random seed"); };
  auto add_switches = [&](CLI::App* sub) {
    sub->add_option("--switches", o.switches, "enabled parts, e.g. zsp,cpt,l1,kl or none");
  };
  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    sub->add_option("--weights", o.weights, "backbone weight file")->required()->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "write the quadrant-pattern synthetic dataset");
  add_seed(gen);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->callback([&] { cmd_gen_data(o); });

  auto* pre = app.add_subcommand("pretrain", "contrastive pretraining of the backbone");
  add_config(pre);
  add_seed(pre);
  pre->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--out", o.out, "weight file to write")->required();
  pre->callback([&] { cmd_pretrain(o); });

  auto* emb = app.add_subcommand("embed-prompts", "ensemble teacher embeddings of the prompt bank");
  add_config(emb);
  add_model(emb);
  emb->add_option("--out", o.out, "weight file to write")->required();
  emb->callback([&] { cmd_embed_prompts(o); });

  auto* train = app.add_subcommand("train", "few-shot prompt tuning");
  add_config(train);
  add_model(train);
  add_seed(train);
  add_switches(train);
  train->add_option("--k", o.k, "shots per class")->check(CLI::PositiveNumber);
  train->add_option("--out", o.out, "trained prompt file to write")->required();
  train->callback([&] { cmd_train(o); });

  auto* eval = app.add_subcommand("eval", "test accuracy of a trained prompt");
  add_config(eval);
  add_model(eval);
  eval->add_option("--context", o.context, "trained prompt file")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", o.out, "metrics file to append to");
  eval->callback([&] { cmd_eval(o); });

  auto* b2n = app.add_subcommand("base2novel", "train on base classes, test on base and novel");
  add_config(b2n);
  add_model(b2n);
  add_seed(b2n);
  add_switches(b2n);
  b2n->add_option("--k", o.k, "shots per class")->check(CLI::PositiveNumber);
  b2n->add_option("--out", o.out, "metrics file to append to");
  b2n->callback([&] { cmd_base2novel(o); });

  auto* abl = app.add_subcommand("ablate", "one run per on/off combination of zsp, cpt, l1, kl");
  add_config(abl);
  add_model(abl);
  add_seed(abl);
  abl->add_option("--k", o.k, "shots per class")->check(CLI::PositiveNumber);
  abl->add_option("--out", o.out, "metrics file to append to");
  abl->callback([&] { cmd_ablate(o); });

  auto* sal = app.add_subcommand("saliency", "patch saliency heatmap as 8-bit PGM");
  add_config(sal);
  add_model(sal);
  add_seed(sal);
  add_switches(sal);
  sal->add_option("--image", o.image, "input PGM/PPM")->required()->check(CLI::ExistingFile);
  sal->add_option("--class", o.target, "target class index")->required();
  sal->add_option("--context", o.context, "trained prompt file (template init when absent)")
      ->check(CLI::ExistingFile);
  sal->add_option("--mode", o.mode, "gradient or grad_input");
  sal->add_option("--out", o.out, "heatmap PGM to write")->required();
  sal->callback([&] { cmd_saliency(o); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "dpt: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "dpt: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "dpt: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
