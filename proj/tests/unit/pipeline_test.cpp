#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "ktir/errors.hpp"
#include "ktir/pipeline.hpp"

#ifndef KTIR_DATA_DIR
#define KTIR_DATA_DIR "data"
#endif

namespace ktir {
namespace {

namespace fs = std::filesystem;

const fs::path kFixtures = fs::path(KTIR_DATA_DIR) / "fixtures";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

RunConfig tiny_config(const fs::path& data, const fs::path& out) {
  RunConfig c;
  c.data_dir = data;
  c.output_dir = out;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_layers = 1;
  c.model.d_proj = 8;
  c.model.max_text_len = 24;
  c.epochs = 1;
  c.batch_size = 8;
  c.warmup_steps = 2;
  return c;
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "ktir_pipeline_test";
    fs::remove_all(root_);
    cmd_gen_data(root_ / "data", 40, 11, 0.5);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path root_;
};

fs::path PipelineTest::root_;

TEST(RunConfigTest, Validation) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.m = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = RunConfig{};
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c.w2 = 0.0;
  EXPECT_NO_THROW(c.validate());
  c = RunConfig{};
  c.w1 = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = RunConfig{};
  c.model.n_heads = 3;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(RunConfigTest, Defaults) {
  const RunConfig c;
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.m, 5u);
  EXPECT_DOUBLE_EQ(c.w1, 1.0);
  EXPECT_DOUBLE_EQ(c.w2, 1.0);
  EXPECT_DOUBLE_EQ(c.weight_decay, 0.05);
  EXPECT_DOUBLE_EQ(c.model.init_tau, 0.07);
}

TEST(KnowledgeSourceTest, Names) {
  for (auto s : {KnowledgeSource::RSKG, KnowledgeSource::ConceptNet, KnowledgeSource::Combined,
                 KnowledgeSource::None}) {
    EXPECT_EQ(parse_knowledge_source(knowledge_source_name(s)), s);
  }
  EXPECT_EQ(parse_knowledge_source("wikidata"), std::nullopt);
}

TEST(Extract, LakeCaptionUsesFixtureGraph) {
  const auto dir = fs::temp_directory_path() / "ktir_extract_lake";
  fs::remove_all(dir);
  fs::create_directories(dir);
  DatasetManifest m;
  m.entries.push_back({"x.ppm", "train",
                       {"There is a lake", "a lake", "lake view", "the lake", "lake"}, "lake"});
  write_manifest(dir / "manifest.json", m);
  RunConfig c;
  c.data_dir = dir;
  c.kg_paths = {kFixtures / "rskg_fixture.tsv"};
  ASSERT_EQ(cmd_extract(c, dir / "out.jsonl"), 5u);
  const auto records = read_jsonl(dir / "out.jsonl");
  const auto& r = records.front();
  EXPECT_EQ(r["caption"], "There is a lake");
  EXPECT_EQ(r["keywords"], nlohmann::json::array({"lake"}));

  const auto graph = load_graph(kFixtures / "rskg_fixture.tsv", Source::RSKG);
  const std::vector<std::string> kw{"lake"};
  const auto expected = one_step_neighbors(graph, kw);
  ASSERT_FALSE(r["triplets"].empty());
  EXPECT_LE(r["triplets"].size(), std::min<std::size_t>(5, expected.size()));
  std::vector<Triplet> picked;
  for (const auto& t : r["triplets"]) {
    const Triplet tr{t[0], t[1], t[2], Source::RSKG};
    EXPECT_NE(std::find(expected.begin(), expected.end(), tr), expected.end());
    picked.push_back(tr);
  }
  EXPECT_EQ(r["knowledge"], build_knowledge_sentence(picked));
  fs::remove_all(dir);
}

TEST_F(PipelineTest, ExtractDeterministicAndNoneSource) {
  RunConfig c = tiny_config(root_ / "data", {});
  cmd_extract(c, root_ / "a.jsonl");
  cmd_extract(c, root_ / "b.jsonl");
  EXPECT_EQ(read_file(root_ / "a.jsonl"), read_file(root_ / "b.jsonl"));
  bool any_knowledge = false;
  for (const auto& r : read_jsonl(root_ / "a.jsonl")) any_knowledge |= r["knowledge"] != "";
  EXPECT_TRUE(any_knowledge);

  c.source = KnowledgeSource::None;
  cmd_extract(c, root_ / "none.jsonl");
  const auto none = read_jsonl(root_ / "none.jsonl");
  EXPECT_EQ(none.size(), 200u);
  for (const auto& r : none) EXPECT_EQ(r["knowledge"], "");
}

TEST_F(PipelineTest, ExtractMissingDataFails) {
  RunConfig c;
  c.data_dir = root_ / "missing";
  EXPECT_THROW(cmd_extract(c, root_ / "x.jsonl"), IoError);
}

TEST_F(PipelineTest, CombinedSourceLoads) {
  RunConfig c = tiny_config(root_ / "data", {});
  c.source = KnowledgeSource::Combined;
  c.kg_paths = {kFixtures / "rskg_fixture.tsv", kFixtures / "conceptnet_fixture.tsv"};
  const auto g = load_knowledge(c);
  const auto rskg = load_graph(kFixtures / "rskg_fixture.tsv", Source::RSKG);
  for (const auto& t : g.triplets()) {
    EXPECT_TRUE(rskg.has_object(t.head) || rskg.has_object(t.tail));
  }
  c.source = KnowledgeSource::None;
  EXPECT_TRUE(load_knowledge(c).empty());
}

TEST_F(PipelineTest, TrainWritesArtifactsAndEvalReadsThem) {
  RunConfig c = tiny_config(root_ / "data", root_ / "run");
  c.w2 = 0.5;
  const auto trained = cmd_train(c);
  EXPECT_FALSE(trained.log.empty());
  for (const char* f : {"model.ckpt", "epoch_1.ckpt", "vocab.txt", "model.cfg", "train_log.csv"}) {
    EXPECT_TRUE(fs::exists(root_ / "run" / f)) << f;
  }
  std::ifstream log(root_ / "run" / "train_log.csv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step,epoch,lr,contrastive,matching,total,tau");
  for (const auto& s : trained.log) {
    EXPECT_GT(s.tau, 0.0);
    EXPECT_NEAR(s.total, s.contrastive + 0.5 * s.matching, 1e-9);
  }

  RunConfig e;
  e.data_dir = root_ / "data";
  e.checkpoint = root_ / "run" / "model.ckpt";
  e.output_dir = root_ / "eval";
  const auto result = cmd_eval(e, root_ / "eval" / "sim.csv");
  const auto json = nlohmann::json::parse(read_file(root_ / "eval" / "metrics.json"));
  EXPECT_LE(json["r1_t2i"].get<double>(), json["r5_t2i"].get<double>());
  EXPECT_LE(json["r5_t2i"].get<double>(), json["r10_t2i"].get<double>());
  EXPECT_LE(json["r1_i2t"].get<double>(), json["r5_i2t"].get<double>());
  EXPECT_LE(json["r5_i2t"].get<double>(), json["r10_i2t"].get<double>());
  const auto sim = import_similarity_csv(root_ / "eval" / "sim.csv");
  EXPECT_EQ(sim.rows, result.caption_labels.size());
  EXPECT_EQ(sim.cols, result.image_labels.size());

  // Evaluating the in-memory model gives the same numbers.
  auto model = trained.model;
  RunConfig mem = c;
  const auto graph = load_knowledge(mem);
  const auto direct =
      evaluate_model(model, trained.vocab, mem, load_corpus(mem.data_dir), graph);
  EXPECT_EQ(direct.metrics.to_json(), result.metrics.to_json());
}

TEST_F(PipelineTest, EvalRejectsMismatchedVocabulary) {
  RunConfig c = tiny_config(root_ / "data", root_ / "run_mismatch");
  c.max_steps = 1;
  cmd_train(c);
  std::ofstream(root_ / "run_mismatch" / "vocab.txt", std::ios::app) << "zzzextra\n";
  RunConfig e;
  e.data_dir = root_ / "data";
  e.checkpoint = root_ / "run_mismatch" / "model.ckpt";
  EXPECT_THROW(cmd_eval(e), CheckpointMismatch);
}

TEST_F(PipelineTest, SeededRunsAreIdentical) {
  RunConfig a = tiny_config(root_ / "data", root_ / "det_a");
  RunConfig b = tiny_config(root_ / "data", root_ / "det_b");
  a.max_steps = b.max_steps = 3;
  cmd_train(a);
  cmd_train(b);
  EXPECT_EQ(read_file(root_ / "det_a" / "train_log.csv"), read_file(root_ / "det_b" / "train_log.csv"));
  EXPECT_EQ(read_file(root_ / "det_a" / "model.ckpt"), read_file(root_ / "det_b" / "model.ckpt"));
  for (const char* run : {"det_a", "det_b"}) {
    RunConfig e;
    e.data_dir = root_ / "data";
    e.checkpoint = root_ / run / "model.ckpt";
    e.output_dir = root_ / run;
    cmd_eval(e);
  }
  EXPECT_EQ(read_file(root_ / "det_a" / "metrics.json"), read_file(root_ / "det_b" / "metrics.json"));
}

TEST_F(PipelineTest, FusionModesAndWeightsTrain) {
  for (auto mode : {FusionMode::NoKnowledge, FusionMode::ConcatOnly}) {
    RunConfig c = tiny_config(root_ / "data", {});
    c.model.fusion_mode = mode;
    c.max_steps = 2;
    const auto r = train_model(c, load_corpus(c.data_dir), load_knowledge(c));
    EXPECT_EQ(r.log.size(), 2u);
  }
  RunConfig c = tiny_config(root_ / "data", {});
  c.w2 = 0.0;
  c.max_steps = 2;
  const auto r = train_model(c, load_corpus(c.data_dir), load_knowledge(c));
  for (const auto& s : r.log) EXPECT_EQ(s.matching, 0.0);
}

TEST_F(PipelineTest, DivergedLossAborts) {
  RunConfig c = tiny_config(root_ / "data", {});
  c.lr = 1e200;
  c.warmup_steps = 0;
  c.max_steps = 20;
  EXPECT_THROW(train_model(c, load_corpus(c.data_dir), load_knowledge(c)), DivergedLoss);
}

TEST_F(PipelineTest, ModelConfigRoundTrip) {
  RunConfig c = tiny_config(root_ / "data", {});
  c.model.fusion_mode = FusionMode::ConcatOnly;
  c.m = 3;
  c.strategy = SelectionKind::DiversityAmongTriplets;
  c.source = KnowledgeSource::None;
  c.seed = 17;
  save_model_config(root_ / "model.cfg", c);
  RunConfig back;
  load_model_config(root_ / "model.cfg", back);
  EXPECT_EQ(back.model.d_model, 16u);
  EXPECT_EQ(back.model.fusion_mode, FusionMode::ConcatOnly);
  EXPECT_EQ(back.m, 3u);
  EXPECT_EQ(back.strategy, SelectionKind::DiversityAmongTriplets);
  EXPECT_EQ(back.source, KnowledgeSource::None);
  EXPECT_EQ(back.seed, 17u);
}

// An untrained model should retrieve at chance level: R@1 of about 5% for 20
// test images. Checked loosely over three seeds.
TEST(Chance, UntrainedModelNearChance) {
  const auto root = fs::temp_directory_path() / "ktir_chance_test";
  fs::remove_all(root);
  double r1 = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto data = root / ("data" + std::to_string(seed));
    cmd_gen_data(data, 200, seed, 0.5);
    RunConfig c = tiny_config(data, {});
    c.seed = seed;
    const Corpus corpus = load_corpus(data);
    ASSERT_EQ(corpus.manifest.split_indices("test").size(), 20u);
    const auto graph = load_knowledge(c);
    const Vocabulary vocab = build_vocabulary(corpus.manifest, graph);
    c.model.vocab_size = vocab.size();
    ModelParams model = init_model(c.model, seed);
    r1 += evaluate_model(model, vocab, c, corpus, graph).metrics.r1_t2i / 3.0;
  }
  // 100 queries per seed; +-3 sigma of a 5% binomial mean over 300 queries.
  EXPECT_GT(r1, 1.2);
  EXPECT_LT(r1, 8.8);
  fs::remove_all(root);
}

}  // namespace
}  // namespace ktir
