#include <benchmark/benchmark.h>

#include "ktir/encoders.hpp"
#include "ktir/knowledge_text.hpp"
#include "ktir/objectives.hpp"
#include "ktir/random.hpp"
#include "ktir/retrieval.hpp"
#include "ktir/tensor.hpp"

namespace {

using namespace ktir;

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, bool grad = false) {
  Rng rng(seed);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor::from_data({rows, cols}, std::move(v), grad);
}

Image random_image(std::uint64_t seed) {
  Rng rng(seed);
  Image img = Image::filled(32, 32, 0, 0, 0);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_matrix(n, n, 1, true), b = random_matrix(n, n, 2, true);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    backward(sum(matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(32)->Arg(64);

void BM_EncodeImage(benchmark::State& state) {
  EncoderConfig c;
  c.vocab_size = 200;
  const ModelParams m = init_model(c, 1);
  const Image img = random_image(3);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(encode_image(img, m.image, c).embedding.data().data());
}
BENCHMARK(BM_EncodeImage);

void BM_EncodeTextFeature(benchmark::State& state) {
  EncoderConfig c;
  c.vocab_size = 200;
  const ModelParams m = init_model(c, 1);
  std::vector<int> cap{kClsId}, kn{kClsId};
  for (int i = 0; i < 12; ++i) cap.push_back(10 + i);
  for (int i = 0; i < 24; ++i) kn.push_back(40 + i);
  cap.push_back(kSepId);
  kn.push_back(kSepId);
  NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode_text_feature(cap, kn, m.text, m.fusion, c).data().data());
  }
}
BENCHMARK(BM_EncodeTextFeature);

void BM_TrainStep(benchmark::State& state) {
  EncoderConfig c;
  c.vocab_size = 200;
  ModelParams m = init_model(c, 1);
  std::vector<Image> images;
  std::vector<TrainPair> batch;
  for (int i = 0; i < 16; ++i) images.push_back(random_image(10 + i));
  for (int i = 0; i < 16; ++i) {
    batch.push_back({&images[i], {kClsId, 10 + i, 30 + i, kSepId}, {kClsId, 50 + i, 60, 61, kSepId}});
  }
  Rng rng(4);
  for (auto _ : state) {
    for (auto& t : trainable_parameters(m)) t.zero_grad();
    backward(compute_batch_loss(m, batch, {}, rng).total);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_RecallAtK(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  Matrix s(n, n);
  for (auto& v : s.values) v = rng.uniform(-1.0, 1.0);
  std::vector<std::vector<std::size_t>> truth(n);
  for (std::size_t i = 0; i < n; ++i) truth[i] = {i};
  for (auto _ : state) benchmark::DoNotOptimize(recall_at_k(s, truth, 10));
}
BENCHMARK(BM_RecallAtK)->Arg(200)->Arg(1000);

void BM_KnowledgeSentence(benchmark::State& state) {
  KnowledgeGraph g;
  for (int i = 0; i < 500; ++i) {
    g.add({"o" + std::to_string(i % 60), "next_to", "o" + std::to_string((i * 7) % 60), Source::RSKG});
  }
  Vocabulary v;
  v.add_graph_objects(g);
  std::uint64_t stream = 0;
  for (auto _ : state) {
    const auto s = build_text_sample("o1 and o2 near o3", v, &g, 5, {}, stream++, 32);
    benchmark::DoNotOptimize(s.knowledge_sentence.data());
  }
}
BENCHMARK(BM_KnowledgeSentence);

}  // namespace

BENCHMARK_MAIN();
