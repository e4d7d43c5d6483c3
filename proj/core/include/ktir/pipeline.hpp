#pragma once

// End-to-end commands: knowledge extraction, training, evaluation and the
// ablation grid. The CLI is a thin layer over these functions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ktir/data_synth.hpp"
#include "ktir/encoders.hpp"
#include "ktir/kg.hpp"
#include "ktir/knowledge_text.hpp"
#include "ktir/objectives.hpp"
#include "ktir/retrieval.hpp"

namespace ktir {

enum class KnowledgeSource { RSKG, ConceptNet, Combined, None };

std::string_view knowledge_source_name(KnowledgeSource source);
std::optional<KnowledgeSource> parse_knowledge_source(std::string_view text);

struct RunConfig {
  std::filesystem::path data_dir;
  // RSKG file first, ConceptNet file second. With no files the dataset's
  // mini_kg.tsv is used as the RSKG graph.
  std::vector<std::filesystem::path> kg_paths;
  std::filesystem::path output_dir;
  std::filesystem::path checkpoint;

  KnowledgeSource source = KnowledgeSource::RSKG;
  std::size_t m = 5;
  SelectionKind strategy = SelectionKind::Random;
  double w1 = 1.0;
  double w2 = 1.0;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double min_lr = 1e-4;
  std::size_t warmup_steps = 20;
  double weight_decay = 0.05;
  double momentum = 0.995;
  double soft_label_mix = 0.4;
  bool hard_negative = true;
  std::uint64_t seed = 0;
  // Stops training after this many steps when non-zero.
  std::size_t max_steps = 0;
  std::optional<std::size_t> top_k;
  std::size_t threads = 1;
  EncoderConfig model;

  // Throws InvalidArgument for m == 0, batch_size < 2 with the matching
  // loss enabled, negative weights or a bad model configuration.
  void validate() const;
};

struct Corpus {
  DatasetManifest manifest;
  std::vector<Image> images;
};

Corpus load_corpus(const std::filesystem::path& data_dir);

// Graph for the configured source; empty for KnowledgeSource::None.
KnowledgeGraph load_knowledge(const RunConfig& config);

// Tokens from the training captions and every verbalized triplet, plus the
// default noun lexicon and the graph objects.
Vocabulary build_vocabulary(const DatasetManifest& manifest, const KnowledgeGraph& graph);

struct EncodedText {
  std::vector<int> caption_ids;
  std::vector<int> knowledge_ids;
};

// The knowledge sentence is empty when the graph is empty or the fusion
// mode ignores knowledge. stream picks the random-selection draw.
EncodedText encode_caption(std::string_view caption, const Vocabulary& vocab,
                           const KnowledgeGraph& graph, const RunConfig& config,
                           std::uint64_t stream);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double contrastive = 0.0;
  double matching = 0.0;
  double total = 0.0;
  double tau = 0.0;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::size_t epoch, ModelParams& model)> on_epoch;
};

struct TrainResult {
  ModelParams model;
  Vocabulary vocab;
  std::vector<StepLog> log;
};

// Throws DivergedLoss on a non-finite loss.
TrainResult train_model(const RunConfig& config, const Corpus& corpus, const KnowledgeGraph& graph,
                        const TrainHooks& hooks = {});

struct EvalResult {
  RetrievalMetrics metrics;
  ScoreMatrix scores;  // captions x images
  std::vector<std::string> caption_labels;
  std::vector<std::string> image_labels;
};

EvalResult evaluate_model(ModelParams& model, const Vocabulary& vocab, const RunConfig& config,
                          const Corpus& corpus, const KnowledgeGraph& graph,
                          const std::string& split = "test");

// ---- commands ---------------------------------------------------------------

// One JSON line per caption with keywords, selected triplets and the
// knowledge sentence. Returns the number of records.
std::size_t cmd_extract(const RunConfig& config, const std::filesystem::path& out_path);

// Writes epoch_<k>.ckpt per epoch, model.ckpt, vocab.txt, model.cfg and
// train_log.csv into config.output_dir.
TrainResult cmd_train(const RunConfig& config);

// Loads config.checkpoint (with vocab.txt and model.cfg beside it),
// evaluates the test split and writes metrics.json into output_dir when set.
// export_sim, if non-empty, receives the final score matrix as CSV.
EvalResult cmd_eval(const RunConfig& config, const std::filesystem::path& export_sim = {});

// Generates a synthetic dataset into dir.
SyntheticDataset cmd_gen_data(const std::filesystem::path& dir, std::size_t n_images,
                              std::uint64_t seed, double omit_prob,
                              const SynthOptions& options = {});

struct AblationRun {
  std::string name;
  RunConfig config;
  RetrievalMetrics metrics;
};

// The loss-weight grid, the m sweep and the three selection strategies, each
// trained and evaluated from base. Writes <name>.json per run into
// base.output_dir when set.
std::vector<AblationRun> run_ablation(const RunConfig& base, const Corpus& corpus,
                                      const KnowledgeGraph& graph);

void save_model_config(const std::filesystem::path& path, const RunConfig& config);
// Reads model.cfg back over config (model dimensions, fusion mode, source,
// m, strategy, seed).
void load_model_config(const std::filesystem::path& path, RunConfig& config);

}  // namespace ktir
