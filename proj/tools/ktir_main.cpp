// ktir: extract, train, eval and gen-data over a dataset directory.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "ktir/errors.hpp"
#include "ktir/pipeline.hpp"

namespace {

struct Options {
  ktir::RunConfig run;
  std::string source = "rskg";
  std::string fusion = "cross-attention";
  std::string strategy = "random";
  std::string out;
  std::string export_sim;
  std::size_t top_k = 0;
  std::size_t n_images = 300;
  double omit_prob = 0.5;
};

template <typename Parse>
auto parsed(const std::string& text, Parse parse, const char* what) {
  const auto v = parse(text);
  if (!v) throw ktir::InvalidArgument(std::string("unknown ") + what + ": " + text);
  return *v;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--data", o.run.data_dir, "Dataset directory (manifest.json, images/)")
      ->required();
  cmd->add_option("--kg", o.run.kg_paths,
                  "Graph TSV; repeat as --kg RSKG --kg ConceptNet for combined");
  cmd->add_option("--source", o.source, "Knowledge source")
      ->check(CLI::IsMember({"rskg", "conceptnet", "combined", "none"}));
  cmd->add_option("--m", o.run.m, "Triplets per caption")->check(CLI::PositiveNumber);
  cmd->add_option("--strategy", o.strategy, "Triplet selection")
      ->check(CLI::IsMember({"random", "relevance", "diversity"}));
  cmd->add_option("--seed", o.run.seed, "Random seed");
}

void add_training(CLI::App* cmd, Options& o) {
  cmd->add_option("--fusion", o.fusion, "Caption/knowledge fusion")
      ->check(CLI::IsMember({"cross-attention", "concat", "none"}));
  cmd->add_option("--w1", o.run.w1, "Contrastive loss weight");
  cmd->add_option("--w2", o.run.w2, "Matching loss weight");
  cmd->add_option("--epochs", o.run.epochs, "Training epochs");
  cmd->add_option("--batch", o.run.batch_size, "Batch size");
  cmd->add_option("--lr", o.run.lr, "Peak learning rate");
  cmd->add_option("--min-lr", o.run.min_lr, "Learning rate at the end of the cosine decay");
  cmd->add_option("--warmup", o.run.warmup_steps, "Linear warmup steps");
  cmd->add_option("--max-steps", o.run.max_steps, "Stop after this many steps (0: no limit)");
  cmd->add_option("--momentum", o.run.momentum, "Momentum-encoder coefficient");
  cmd->add_option("--d-model", o.run.model.d_model, "Encoder width");
  cmd->add_option("--layers", o.run.model.n_layers, "Transformer blocks per encoder");
  cmd->add_option("--heads", o.run.model.n_heads, "Attention heads");
  cmd->add_option("--max-text-len", o.run.model.max_text_len, "Token budget per text");
}

void finish(Options& o) {
  o.run.source = parsed(o.source, ktir::parse_knowledge_source, "source");
  o.run.strategy = parsed(o.strategy, ktir::parse_selection, "strategy");
  o.run.model.fusion_mode = parsed(o.fusion, ktir::parse_fusion, "fusion mode");
  if (o.top_k > 0) o.run.top_k = o.top_k;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-aware text-image retrieval"};
  app.set_config("--config");
  app.require_subcommand(1);
  Options o;

  auto* extract = app.add_subcommand("extract", "Write knowledge-augmented captions as JSONL");
  add_common(extract, o);
  extract->add_option("--out", o.out, "Output JSONL path")->required();

  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  add_common(train, o);
  add_training(train, o);
  train->add_option("--out", o.run.output_dir, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.run.checkpoint, "Checkpoint file")->required();
  eval->add_option("--out", o.run.output_dir, "Directory for metrics.json");
  eval->add_option("--export-sim", o.export_sim, "Write the score matrix as CSV");
  eval->add_option("--top-k", o.top_k, "Score matching only for the top k by similarity");
  eval->add_option("--threads", o.run.threads, "Scoring threads");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--out", o.out, "Output dataset directory")->required();
  gen->add_option("--images", o.n_images, "Number of images");
  gen->add_option("--omit-prob", o.omit_prob, "Probability a caption omits an object")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", o.run.seed, "Random seed");

  auto* ablate = app.add_subcommand("ablate", "Run the loss-weight, m and strategy sweeps");
  add_common(ablate, o);
  add_training(ablate, o);
  ablate->add_option("--out", o.run.output_dir, "Directory for per-run metrics")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    finish(o);
    if (*extract) {
      const auto n = ktir::cmd_extract(o.run, o.out);
      std::cerr << "wrote " << n << " records to " << o.out << '\n';
    } else if (*train) {
      const auto result = ktir::cmd_train(o.run);
      if (!result.log.empty()) {
        std::cerr << "steps " << result.log.size() << ", first loss " << result.log.front().total
                  << ", last loss " << result.log.back().total << '\n';
      }
    } else if (*eval) {
      const auto result = ktir::cmd_eval(o.run, o.export_sim);
      std::cout << result.metrics.to_json() << '\n';
    } else if (*gen) {
      const auto ds = ktir::cmd_gen_data(o.out, o.n_images, o.run.seed, o.omit_prob);
      std::cerr << "wrote " << ds.manifest.entries.size() << " images to " << o.out << '\n';
    } else if (*ablate) {
      const auto corpus = ktir::load_corpus(o.run.data_dir);
      const auto graph = ktir::load_knowledge(o.run);
      for (const auto& run : ktir::run_ablation(o.run, corpus, graph)) {
        std::cout << run.name << ' ' << run.metrics.to_json() << '\n';
      }
    }
  } catch (const ktir::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
