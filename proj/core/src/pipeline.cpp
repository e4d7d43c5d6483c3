#include "ktir/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ktir/checkpoint.hpp"
#include "ktir/errors.hpp"
#include "ktir/optim.hpp"
#include "ktir/random.hpp"

namespace ktir {
namespace {

constexpr std::uint64_t kEvalStream = 0;

Image fit_image(const Image& image, std::size_t size) {
  if (image.width == size && image.height == size) return image;
  return resize_image(image, size, size);
}

std::uint64_t caption_stream(std::size_t entry, std::size_t sentence, std::uint64_t round) {
  return mix_seed(entry * 8 + sentence, round);
}

void ensure_dir(const std::filesystem::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string pooling_name(Pooling p) { return p == Pooling::Cls ? "cls" : "mean"; }

}  // namespace

std::string_view knowledge_source_name(KnowledgeSource source) {
  switch (source) {
    case KnowledgeSource::RSKG: return "rskg";
    case KnowledgeSource::ConceptNet: return "conceptnet";
    case KnowledgeSource::Combined: return "combined";
    case KnowledgeSource::None: return "none";
  }
  return "none";
}

std::optional<KnowledgeSource> parse_knowledge_source(std::string_view text) {
  for (auto s : {KnowledgeSource::RSKG, KnowledgeSource::ConceptNet, KnowledgeSource::Combined,
                 KnowledgeSource::None}) {
    if (knowledge_source_name(s) == text) return s;
  }
  return std::nullopt;
}

void RunConfig::validate() const {
  if (m == 0) throw InvalidArgument("m must be at least 1");
  if (w1 < 0.0 || w2 < 0.0) throw InvalidArgument("loss weights must be non-negative");
  if (batch_size < 1 || (w2 > 0.0 && batch_size < 2)) {
    throw InvalidArgument("batch size must be at least 2 when the matching loss is enabled");
  }
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum <= 1.0)) {
    throw InvalidArgument("lr must be >= 0 and momentum in [0, 1]");
  }
  // The vocabulary size is only known once the corpus is read.
  EncoderConfig probe = model;
  if (probe.vocab_size == 0) probe.vocab_size = kFirstTokenId + 1;
  probe.validate();
}

Corpus load_corpus(const std::filesystem::path& data_dir) {
  Corpus c;
  c.manifest = read_manifest(data_dir / "manifest.json");
  c.images = read_images(data_dir, c.manifest);
  return c;
}

KnowledgeGraph load_knowledge(const RunConfig& config) {
  const auto& paths = config.kg_paths;
  const auto mini_kg = config.data_dir / "mini_kg.tsv";
  LoadOptions cn_options;
  cn_options.allowed_relations = default_conceptnet_relations();
  switch (config.source) {
    case KnowledgeSource::None:
      return {};
    case KnowledgeSource::RSKG:
      return load_graph(paths.empty() ? mini_kg : paths.front(), Source::RSKG);
    case KnowledgeSource::ConceptNet:
      if (paths.empty()) throw InvalidArgument("source conceptnet needs a --kg file");
      return load_graph(paths.back(), Source::ConceptNet, cn_options);
    case KnowledgeSource::Combined: {
      if (paths.empty()) throw InvalidArgument("source combined needs a ConceptNet --kg file");
      const auto rskg = load_graph(paths.size() >= 2 ? paths.front() : mini_kg, Source::RSKG);
      return combine_sources(rskg, load_graph(paths.back(), Source::ConceptNet, cn_options));
    }
  }
  return {};
}

Vocabulary build_vocabulary(const DatasetManifest& manifest, const KnowledgeGraph& graph) {
  Vocabulary vocab = Vocabulary::with_default_lexicon();
  vocab.add_graph_objects(graph);
  for (const auto& e : manifest.entries) {
    if (e.split != "train") continue;
    for (const auto& s : e.sentences) {
      for (const auto& tok : tokenize(s)) vocab.add_token(tok);
    }
  }
  for (const auto& t : graph.triplets()) {
    for (const auto& tok : tokenize(triplet_to_sentence(t))) vocab.add_token(tok);
  }
  return vocab;
}

EncodedText encode_caption(std::string_view caption, const Vocabulary& vocab,
                           const KnowledgeGraph& graph, const RunConfig& config,
                           std::uint64_t stream) {
  const bool use_knowledge = !graph.empty() && config.model.fusion_mode != FusionMode::NoKnowledge;
  const TextSample s = build_text_sample(caption, vocab, use_knowledge ? &graph : nullptr, config.m,
                                         {config.strategy, config.seed}, stream,
                                         config.model.max_text_len);
  return {s.caption_ids, s.knowledge_ids};
}

TrainResult train_model(const RunConfig& config, const Corpus& corpus, const KnowledgeGraph& graph,
                        const TrainHooks& hooks) {
  config.validate();
  const auto train_idx = corpus.manifest.split_indices("train");
  if (train_idx.empty()) throw InvalidArgument("the dataset has no training images");
  if (corpus.images.size() != corpus.manifest.entries.size()) {
    throw InvalidArgument("one image per manifest entry required");
  }

  TrainResult result;
  result.vocab = build_vocabulary(corpus.manifest, graph);
  EncoderConfig mc = config.model;
  mc.vocab_size = result.vocab.size();
  result.model = init_model(mc, mix_seed(config.seed, 1));
  ModelParams& model = result.model;

  std::map<std::size_t, Image> images;
  for (std::size_t i : train_idx) images.emplace(i, fit_image(corpus.images[i], mc.image_size));

  auto params = trainable_parameters(model);
  OptimizerState opt;
  opt.config.weight_decay = config.weight_decay;
  for (const auto& p : params) opt.decay_mask.push_back(p.rank() == 2);

  const std::size_t n_train = train_idx.size();
  const std::size_t min_batch = config.w2 > 0.0 ? 2 : 1;
  std::size_t per_epoch = n_train / config.batch_size;
  if (n_train % config.batch_size >= min_batch) ++per_epoch;
  std::size_t total = per_epoch * config.epochs;
  if (config.max_steps > 0) total = std::min(total, config.max_steps);
  const LrSchedule schedule{config.lr, static_cast<std::int64_t>(std::max<std::size_t>(total, 1)),
                            config.min_lr, static_cast<std::int64_t>(config.warmup_steps)};
  const LossConfig loss{config.w1, config.w2, config.soft_label_mix, config.hard_negative};

  Rng rng(mix_seed(config.seed, 2));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs && step < total; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t b = 0; b < order.size() && step < total; b += config.batch_size) {
      const std::size_t e = std::min(order.size(), b + config.batch_size);
      if (e - b < min_batch) break;
      std::vector<TrainPair> batch;
      for (std::size_t k = b; k < e; ++k) {
        const std::size_t idx = order[k];
        const auto& sentences = corpus.manifest.entries[idx].sentences;
        const std::size_t s = rng.index(sentences.size());
        auto enc = encode_caption(sentences[s], result.vocab, graph, config,
                                  caption_stream(idx, s, epoch + 1));
        batch.push_back({&images.at(idx), std::move(enc.caption_ids), std::move(enc.knowledge_ids)});
      }
      for (auto& p : params) p.zero_grad();
      const BatchLoss bl = compute_batch_loss(model, batch, loss, rng);
      const double value = bl.total.item();
      if (!std::isfinite(value)) {
        throw DivergedLoss(fmt::format("non-finite loss at step {}", step + 1));
      }
      backward(bl.total);
      const double lr = cosine_lr(schedule, static_cast<std::int64_t>(step));
      adamw_step(params, opt, lr);
      momentum_update(model, config.momentum);
      ++step;
      StepLog log{step, epoch + 1, lr, bl.contrastive.item(), bl.matching.item(), value, model.tau()};
      result.log.push_back(log);
      if (hooks.on_step) hooks.on_step(log);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, model);
  }
  return result;
}

EvalResult evaluate_model(ModelParams& model, const Vocabulary& vocab, const RunConfig& config,
                          const Corpus& corpus, const KnowledgeGraph& graph,
                          const std::string& split) {
  NoGradGuard guard;
  const auto& mc = model.config;
  RunConfig run = config;
  run.model = mc;
  const auto idx = corpus.manifest.split_indices(split);
  if (idx.empty()) throw InvalidArgument("the dataset has no '" + split + "' images");

  EvalResult out;
  std::vector<Tensor> image_emb;
  std::vector<Tensor> image_tokens;
  for (std::size_t i : idx) {
    const auto f = encode_image(fit_image(corpus.images[i], mc.image_size), model.image, mc);
    image_emb.push_back(f.embedding);
    image_tokens.push_back(f.tokens);
    out.image_labels.push_back(corpus.manifest.entries[i].filename);
  }
  std::vector<EncodedText> texts;
  std::vector<Tensor> text_feats;
  std::vector<std::size_t> image_of_caption;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& entry = corpus.manifest.entries[idx[j]];
    for (std::size_t s = 0; s < entry.sentences.size(); ++s) {
      texts.push_back(encode_caption(entry.sentences[s], vocab, graph, run,
                                     caption_stream(idx[j], s, kEvalStream)));
      text_feats.push_back(encode_text_feature(texts.back().caption_ids,
                                               texts.back().knowledge_ids, model.text,
                                               model.fusion, mc));
      image_of_caption.push_back(j);
      out.caption_labels.push_back(fmt::format("{}#{}", entry.filename, s));
    }
  }

  out.scores.sim = similarity_scores(text_feats, image_emb);
  const auto scorer = [&](std::size_t c, std::size_t j) {
    const Tensor f = encode_multimodal(texts[c].caption_ids, texts[c].knowledge_ids,
                                       image_tokens[j], model.text, mc);
    return match_head(f, model.match_head).item();
  };
  auto matched = matching_scores(out.scores.sim, scorer, config.top_k, config.threads);
  out.scores.mat = std::move(matched.mat);
  out.scores.computed = std::move(matched.computed);
  out.scores.final = final_scores(out.scores.sim, out.scores.mat, out.scores.computed);
  out.metrics = evaluate_retrieval(out.scores.final, image_of_caption);
  return out;
}

std::size_t cmd_extract(const RunConfig& config, const std::filesystem::path& out_path) {
  if (config.m == 0) throw InvalidArgument("m must be at least 1");
  const DatasetManifest manifest = read_manifest(config.data_dir / "manifest.json");
  const KnowledgeGraph graph = load_knowledge(config);
  Vocabulary vocab = Vocabulary::with_default_lexicon();
  vocab.add_graph_objects(graph);
  const SelectionStrategy strategy{config.strategy, config.seed};

  std::ostringstream buffer;
  std::size_t records = 0;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& entry = manifest.entries[i];
    for (std::size_t s = 0; s < entry.sentences.size(); ++s) {
      const TextSample sample =
          build_text_sample(entry.sentences[s], vocab, graph.empty() ? nullptr : &graph, config.m,
                            strategy, caption_stream(i, s, kEvalStream), config.model.max_text_len);
      nlohmann::ordered_json j;
      j["image"] = entry.filename;
      j["split"] = entry.split;
      j["sentence"] = s;
      j["caption"] = sample.caption;
      j["keywords"] = sample.keywords;
      auto triplets = nlohmann::ordered_json::array();
      for (const auto& t : sample.triplets) {
        triplets.push_back({t.head, t.relation, t.tail, std::string(source_name(t.source))});
      }
      j["triplets"] = std::move(triplets);
      j["knowledge"] = sample.knowledge_sentence;
      buffer << j.dump() << '\n';
      ++records;
    }
  }
  if (!out_path.parent_path().empty()) ensure_dir(out_path.parent_path());
  write_text(out_path, buffer.str());
  return records;
}

void save_model_config(const std::filesystem::path& path, const RunConfig& config) {
  const auto& m = config.model;
  std::ostringstream out;
  out << "d_model=" << m.d_model << '\n'
      << "n_heads=" << m.n_heads << '\n'
      << "n_layers=" << m.n_layers << '\n'
      << "d_proj=" << m.d_proj << '\n'
      << "ffn_multiplier=" << m.ffn_multiplier << '\n'
      << "image_size=" << m.image_size << '\n'
      << "image_channels=" << m.image_channels << '\n'
      << "patch_size=" << m.patch_size << '\n'
      << "max_text_len=" << m.max_text_len << '\n'
      << "vocab_size=" << m.vocab_size << '\n'
      << "fusion=" << fusion_name(m.fusion_mode) << '\n'
      << "pooling=" << pooling_name(m.pooling) << '\n'
      << fmt::format("init_tau={}\n", m.init_tau)
      << "source=" << knowledge_source_name(config.source) << '\n'
      << "m=" << config.m << '\n'
      << "strategy=" << selection_name(config.strategy) << '\n'
      << "seed=" << config.seed << '\n';
  write_text(path, out.str());
}

void load_model_config(const std::filesystem::path& path, RunConfig& config) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model config " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto size = [&](const char* key, std::size_t& dst) {
    if (kv.count(key)) dst = static_cast<std::size_t>(std::stoull(kv.at(key)));
  };
  auto& m = config.model;
  size("d_model", m.d_model);
  size("n_heads", m.n_heads);
  size("n_layers", m.n_layers);
  size("d_proj", m.d_proj);
  size("ffn_multiplier", m.ffn_multiplier);
  size("image_size", m.image_size);
  size("image_channels", m.image_channels);
  size("patch_size", m.patch_size);
  size("max_text_len", m.max_text_len);
  size("vocab_size", m.vocab_size);
  size("m", config.m);
  if (kv.count("fusion")) {
    const auto f = parse_fusion(kv.at("fusion"));
    if (!f) throw CheckpointMismatch("unknown fusion mode in " + path.string());
    m.fusion_mode = *f;
  }
  if (kv.count("pooling")) m.pooling = kv.at("pooling") == "mean" ? Pooling::Mean : Pooling::Cls;
  if (kv.count("init_tau")) m.init_tau = std::stod(kv.at("init_tau"));
  if (kv.count("source")) {
    const auto s = parse_knowledge_source(kv.at("source"));
    if (!s) throw CheckpointMismatch("unknown knowledge source in " + path.string());
    config.source = *s;
  }
  if (kv.count("strategy")) {
    const auto s = parse_selection(kv.at("strategy"));
    if (!s) throw CheckpointMismatch("unknown selection strategy in " + path.string());
    config.strategy = *s;
  }
  if (kv.count("seed")) config.seed = std::stoull(kv.at("seed"));
}

TrainResult cmd_train(const RunConfig& config) {
  config.validate();
  if (config.output_dir.empty()) throw InvalidArgument("train needs an output directory");
  const Corpus corpus = load_corpus(config.data_dir);
  const KnowledgeGraph graph = load_knowledge(config);
  ensure_dir(config.output_dir);

  std::ofstream log(config.output_dir / "train_log.csv", std::ios::trunc);
  if (!log) throw IoError("cannot write training log");
  log << "step,epoch,lr,contrastive,matching,total,tau\n";

  RunConfig saved = config;
  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) {
    log << fmt::format("{},{},{:.6g},{:.6f},{:.6f},{:.6f},{:.6f}\n", s.step, s.epoch, s.lr,
                       s.contrastive, s.matching, s.total, s.tau);
    log.flush();
  };
  hooks.on_epoch = [&](std::size_t epoch, ModelParams& model) {
    save_checkpoint(config.output_dir / fmt::format("epoch_{}.ckpt", epoch), model_state(model));
  };
  TrainResult result = train_model(config, corpus, graph, hooks);
  saved.model = result.model.config;
  save_checkpoint(config.output_dir / "model.ckpt", model_state(result.model));
  save_vocabulary_tokens(config.output_dir / "vocab.txt", result.vocab);
  save_model_config(config.output_dir / "model.cfg", saved);
  if (!log) throw IoError("write failed for the training log");
  return result;
}

EvalResult cmd_eval(const RunConfig& config, const std::filesystem::path& export_sim) {
  if (config.checkpoint.empty()) throw InvalidArgument("eval needs a checkpoint");
  const auto dir = config.checkpoint.parent_path();
  RunConfig run = config;
  load_model_config(dir / "model.cfg", run);
  const Corpus corpus = load_corpus(run.data_dir);
  const KnowledgeGraph graph = load_knowledge(run);
  Vocabulary vocab = Vocabulary::with_default_lexicon();
  vocab.add_graph_objects(graph);
  load_vocabulary_tokens(dir / "vocab.txt", vocab);
  if (vocab.size() != run.model.vocab_size) {
    throw CheckpointMismatch(fmt::format("vocabulary has {} ids, model expects {}", vocab.size(),
                                         run.model.vocab_size));
  }
  ModelParams model = init_model(run.model, 0);
  load_model_state(model, load_checkpoint(config.checkpoint));
  EvalResult result = evaluate_model(model, vocab, run, corpus, graph);
  if (!run.output_dir.empty()) {
    ensure_dir(run.output_dir);
    write_text(run.output_dir / "metrics.json", result.metrics.to_json() + "\n");
  }
  if (!export_sim.empty()) {
    if (!export_sim.parent_path().empty()) ensure_dir(export_sim.parent_path());
    export_similarity_csv(result.scores.final, result.caption_labels, result.image_labels,
                          export_sim);
  }
  return result;
}

SyntheticDataset cmd_gen_data(const std::filesystem::path& dir, std::size_t n_images,
                              std::uint64_t seed, double omit_prob, const SynthOptions& options) {
  SyntheticDataset ds = generate_dataset(n_images, seed, omit_prob, options);
  write_dataset(dir, ds);
  return ds;
}

std::vector<AblationRun> run_ablation(const RunConfig& base, const Corpus& corpus,
                                      const KnowledgeGraph& graph) {
  std::vector<AblationRun> runs;
  for (const auto& [w1, w2] : {std::pair{0.5, 1.0}, std::pair{1.0, 0.5}, std::pair{1.0, 1.0}}) {
    RunConfig c = base;
    c.w1 = w1;
    c.w2 = w2;
    runs.push_back({fmt::format("loss_w1_{}_w2_{}", w1, w2), c, {}});
  }
  for (std::size_t m : {1, 3, 5, 7, 10}) {
    RunConfig c = base;
    c.m = m;
    runs.push_back({fmt::format("m_{}", m), c, {}});
  }
  for (auto kind : {SelectionKind::Random, SelectionKind::RelevanceToCaption,
                    SelectionKind::DiversityAmongTriplets}) {
    RunConfig c = base;
    c.strategy = kind;
    runs.push_back({fmt::format("strategy_{}", selection_name(kind)), c, {}});
  }
  if (!base.output_dir.empty()) ensure_dir(base.output_dir);
  for (auto& run : runs) {
    TrainResult trained = train_model(run.config, corpus, graph);
    run.metrics = evaluate_model(trained.model, trained.vocab, run.config, corpus, graph).metrics;
    if (!base.output_dir.empty()) {
      nlohmann::ordered_json j;
      j["name"] = run.name;
      j["w1"] = run.config.w1;
      j["w2"] = run.config.w2;
      j["m"] = run.config.m;
      j["strategy"] = std::string(selection_name(run.config.strategy));
      j["fusion"] = std::string(fusion_name(run.config.model.fusion_mode));
      j["metrics"] = nlohmann::json::parse(run.metrics.to_json());
      write_text(base.output_dir / (run.name + ".json"), j.dump() + "\n");
    }
  }
  return runs;
}

}  // namespace ktir
