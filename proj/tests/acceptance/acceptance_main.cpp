// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. `--only N[,M...]` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradcheck.hpp"
#include "ktir/data_synth.hpp"
#include "ktir/encoders.hpp"
#include "ktir/kg.hpp"
#include "ktir/knowledge_text.hpp"
#include "ktir/objectives.hpp"
#include "ktir/pipeline.hpp"
#include "ktir/random.hpp"
#include "ktir/retrieval.hpp"
#include "oracles.hpp"

#ifndef KTIR_DATA_DIR
#define KTIR_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using namespace ktir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* title;
  double limit_seconds;
  std::function<Outcome()> run;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "ktir_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// ---- 1 ----------------------------------------------------------------------

Outcome metric_arithmetic() {
  const double ucm = mean_recall({19.81, 64.57, 95.33, 21.42, 64.29, 87.14}).all;
  const double rsicd = mean_recall({20.55, 48.67, 63.70, 26.08, 49.77, 62.49}).all;
  const bool pass = std::abs(ucm - 58.76) <= 0.005 && std::abs(rsicd - 45.21) <= 0.005;
  return {pass, "UCM " + fmt("%.4f", ucm) + " RSICD " + fmt("%.4f", rsicd)};
}

// ---- 2 ----------------------------------------------------------------------

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor weigh(const Tensor& y) {
  Rng rng(99);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return sum(mul(y, Tensor::from_data(y.shape(), std::move(w))));
}

Outcome gradient_integrity() {
  double worst_primitive = 0.0;
  std::string worst_name;
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t n = 2 + rng.index(3), m = 2 + rng.index(4), k = 1 + rng.index(3);
    Tensor a = random_tensor({n, m}, rng), b = random_tensor({m, k}, rng);
    Tensor c = random_tensor({n, m}, rng), g = random_tensor({m}, rng);
    Tensor pos = random_tensor({n, m}, rng, 0.2, 2.0);
    const std::vector<int> ids{0, static_cast<int>(n) - 1, 0};
    const std::vector<std::pair<const char*, std::function<Tensor()>>> cases{
        {"matmul", [&] { return weigh(matmul(a, b)); }},
        {"add", [&] { return weigh(add(a, c)); }},
        {"mul", [&] { return weigh(mul(a, c)); }},
        {"softmax", [&] { return weigh(softmax(a)); }},
        {"layer_norm", [&] { return weigh(layer_norm(a, g, g)); }},
        {"gelu", [&] { return weigh(gelu(a)); }},
        {"embedding", [&] { return weigh(embedding(a, ids)); }},
        {"concat", [&] { return weigh(concat({a, c}, 1)); }},
        {"slice", [&] { return weigh(slice(a, 1, 1, m)); }},
        {"mean", [&] { return mean(mul(a, c)); }},
        {"l2_normalize", [&] { return weigh(l2_normalize(a)); }},
        {"cosine", [&] { return weigh(cosine_similarity(a, c)); }},
        {"log", [&] { return weigh(log(pos)); }},
        {"exp", [&] { return weigh(exp(a)); }},
    };
    for (const auto& [name, f] : cases) {
      const double e = testing::check_gradients(f, {a, b, c, g, pos}).max_rel_error;
      if (e > worst_primitive) {
        worst_primitive = e;
        worst_name = name;
      }
    }
  }

  // Full weighted loss on a 4-pair batch with a small model.
  EncoderConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 1;
  cfg.d_proj = 4;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.max_text_len = 8;
  cfg.vocab_size = 12;
  cfg.ffn_multiplier = 2;
  ModelParams model = init_model(cfg, 3);
  visit_momentum(model, [](const std::string&, Tensor& t) {
    for (auto& v : t.mutable_data()) v *= 0.9;
  });
  Rng img_rng(5);
  std::vector<Image> images;
  for (int i = 0; i < 4; ++i) {
    Image im = Image::filled(8, 8, 0.1 * i, 0.5, 0.2);
    for (auto& p : im.pixels) p += img_rng.uniform(0.0, 0.3);
    images.push_back(im);
  }
  std::vector<TrainPair> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({&images[i], {kClsId, 4 + i, 5 + i, kSepId, kPadId}, {kClsId, 8, 9 + i % 3, kSepId}});
  }
  const HardNegatives neg{{1, 0, 3, 2}, {2, 3, 0, 1}};
  LossConfig lc;
  auto loss = [&] {
    Rng r(1);
    return compute_batch_loss(model, batch, lc, r, &neg).total;
  };
  auto params = trainable_parameters(model);
  params.pop_back();  // log_tau, checked below with hard targets
  const double full = testing::check_gradients(loss, params).max_rel_error;
  lc.soft_label_mix = 0.0;
  const double tau = testing::check_gradients(loss, {model.log_tau}).max_rel_error;

  const double worst = std::max({worst_primitive, full, tau});
  return {worst < 1e-4, "primitives " + fmt("%.2e", worst_primitive) + " (" + worst_name +
                            "), full loss " + fmt("%.2e", full) + ", tau " + fmt("%.2e", tau)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome knowledge_pipeline() {
  const fs::path fixtures = fs::path(KTIR_DATA_DIR) / "fixtures";
  const auto rskg = load_graph(fixtures / "rskg_fixture.tsv", Source::RSKG);
  LoadOptions options;
  options.allowed_relations = default_conceptnet_relations();
  const auto cn = load_graph(fixtures / "conceptnet_fixture.tsv", Source::ConceptNet, options);

  std::string rendered;
  for (const auto& t : cn.triplets()) {
    if (t.head == "boat" && t.relation == "AtLocation" && t.tail == "water") {
      rendered = triplet_to_sentence(t);
    }
  }
  const bool render_ok = rendered == "boat is at location of water";

  const auto combined = combine_sources(rskg, cn);
  std::size_t dropped = 0, leaked = 0;
  for (const auto& t : cn.triplets()) {
    const bool anchored = rskg.has_object(t.head) || rskg.has_object(t.tail);
    const bool kept =
        std::find(combined.triplets().begin(), combined.triplets().end(), t) != combined.triplets().end();
    if (!anchored) dropped += !kept;
    if (!anchored && kept) ++leaked;
  }
  bool combine_ok = leaked == 0 && dropped > 0;
  for (const auto& t : rskg.triplets()) {
    combine_ok &= std::find(combined.triplets().begin(), combined.triplets().end(), t) !=
                  combined.triplets().end();
  }

  std::size_t mismatches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(mix_seed(seed, 3));
    KnowledgeGraph g;
    const std::size_t n_obj = 2 + rng.index(30);
    for (std::size_t i = 0, n = rng.index(80); i < n; ++i) {
      g.add({"o" + std::to_string(rng.index(n_obj)), "r" + std::to_string(rng.index(5)),
             "o" + std::to_string(rng.index(n_obj)), rng.bernoulli(0.5) ? Source::RSKG : Source::ConceptNet});
    }
    std::vector<std::string> keywords;
    for (std::size_t i = 0, n = rng.index(5); i < n; ++i) {
      keywords.push_back("o" + std::to_string(rng.index(n_obj + 3)));
    }
    std::vector<Triplet> expected;
    for (const auto& t : g.triplets()) {
      if (std::count(keywords.begin(), keywords.end(), t.head) ||
          std::count(keywords.begin(), keywords.end(), t.tail)) {
        expected.push_back(t);
      }
    }
    mismatches += one_step_neighbors(g, keywords) != expected;
  }
  return {render_ok && combine_ok && mismatches == 0,
          "render \"" + rendered + "\", ConceptNet rows dropped " + std::to_string(dropped) +
              " leaked " + std::to_string(leaked) + ", neighbour mismatches " +
              std::to_string(mismatches) + "/1000"};
}

// ---- 4 ----------------------------------------------------------------------

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[1];
}

Outcome knowledge_benefit() {
  std::vector<double> with_kg, without_kg;
  double slowest = 0.0;
  std::string runs;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const fs::path data = work_dir() / ("benefit_" + std::to_string(seed));
    cmd_gen_data(data, 300, seed, 0.5);
    const Corpus corpus = load_corpus(data);
    for (auto mode : {FusionMode::CrossAttention, FusionMode::NoKnowledge}) {
      const auto t0 = std::chrono::steady_clock::now();
      RunConfig c;
      c.data_dir = data;
      c.seed = seed;
      c.model.fusion_mode = mode;
      const auto graph = load_knowledge(c);
      auto trained = train_model(c, corpus, graph);
      const double mr = evaluate_model(trained.model, trained.vocab, c, corpus, graph).metrics.mR;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      slowest = std::max(slowest, secs);
      (mode == FusionMode::CrossAttention ? with_kg : without_kg).push_back(mr);
      runs += std::string(mode == FusionMode::CrossAttention ? " CA" : " NK") + std::to_string(seed) +
              "=" + fmt("%.2f", mr);
      std::fprintf(stderr, "  criterion 4: %s seed %llu mR %.2f (%.0f s)\n",
                   std::string(fusion_name(mode)).c_str(), static_cast<unsigned long long>(seed), mr,
                   secs);
    }
  }
  const double ca = median3(with_kg), nk = median3(without_kg);
  return {ca >= nk && slowest < 600.0, "median mR cross-attention " + fmt("%.2f", ca) +
                                           " vs no-knowledge " + fmt("%.2f", nk) + ";" + runs +
                                           "; slowest run " + fmt("%.0f", slowest) + " s"};
}

// ---- 5 ----------------------------------------------------------------------

Outcome training_sanity() {
  const fs::path data = work_dir() / "sanity";
  cmd_gen_data(data, 300, 0, 0.5);
  const Corpus corpus = load_corpus(data);
  RunConfig c;
  c.data_dir = data;
  c.epochs = 100;  // the step cap below ends training
  c.max_steps = 200;
  const auto graph = load_knowledge(c);
  const auto result = train_model(c, corpus, graph);
  bool tau_positive = true;
  for (const auto& s : result.log) tau_positive &= s.tau > 0.0 && std::isfinite(s.tau);
  const double first = result.log.front().total;
  const double last = result.log.back().total;
  const double ratio = last / first;
  return {result.log.size() == 200 && ratio < 0.5 && tau_positive,
          "step 1 loss " + fmt("%.4f", first) + ", step 200 loss " + fmt("%.4f", last) +
              ", ratio " + fmt("%.3f", ratio) + ", final tau " + fmt("%.4f", result.log.back().tau)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome retrieval_oracle() {
  Rng rng(2024);
  std::size_t recall_bad = 0, rank_bad = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t rows = 1 + rng.index(200), cols = 1 + rng.index(200);
    const Matrix sim = testing::random_scores(rows, cols, rng);
    const Matrix mat = testing::random_scores(rows, cols, rng);
    const Matrix s = final_scores(sim, mat);
    const auto truth = testing::random_truth(rows, cols, rng);
    for (std::size_t k : {1u, 5u, 10u}) {
      recall_bad += recall_at_k(s, truth, k) != testing::oracle_recall(s, truth, k);
    }
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> brute(cols);
      for (std::size_t c = 0; c < cols; ++c) brute[c] = sim.at(r, c) + mat.at(r, c);
      rank_bad += rank_row(s.row(r)) != testing::oracle_rank(brute);
    }
  }
  return {recall_bad == 0 && rank_bad == 0,
          "recall mismatches " + std::to_string(recall_bad) + "/600, ranking mismatches " +
              std::to_string(rank_bad)};
}

// ---- 7 ----------------------------------------------------------------------

double vec_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

Outcome invariant_suite() {
  std::vector<std::string> failures;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };
  EncoderConfig cfg;
  cfg.vocab_size = 40;
  ModelParams model = init_model(cfg, 1);
  Rng rng(3);

  double norm_err = 0.0;
  for (int i = 0; i < 10; ++i) {
    Image img = Image::filled(32, 32, 0, 0, 0);
    for (auto& p : img.pixels) p = rng.uniform();
    const auto f = encode_image(img, model.image, cfg);
    norm_err = std::max(norm_err, std::abs(vec_norm(f.embedding) - 1.0));
    const std::vector<int> cap{kClsId, 4 + i, 5 + i, kSepId}, kn{kClsId, 20 + i, kSepId};
    norm_err = std::max(norm_err, std::abs(vec_norm(encode_text_feature(cap, kn, model.text, model.fusion, cfg)) - 1.0));
  }
  check(norm_err <= 1e-9, "unit norm");

  double row_err = 0.0;
  const Tensor x = random_tensor({6, 9}, rng, -30.0, 30.0);
  const Tensor p = softmax(x);
  Tensor attn;
  cross_attention(random_tensor({3, 64}, rng), random_tensor({5, 64}, rng), model.fusion.w1,
                  model.fusion.w2, &attn);
  for (const Tensor* t : {&p, static_cast<const Tensor*>(&attn)}) {
    for (std::size_t r = 0; r < t->rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < t->cols(); ++c) s += t->at(r, c);
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }
  check(row_err <= 1e-9, "row sums");

  const std::vector<int> bare{kClsId, 7, 8, kSepId}, padded{kClsId, 7, 8, kSepId, kPadId, kPadId};
  const auto a = encode_text(bare, model.text, cfg).pooled;
  const auto b = encode_text(padded, model.text, cfg).pooled;
  const std::vector<int> inner{kClsId, 7, kPadId, 8, kSepId};
  const auto before = encode_text(inner, model.text, cfg).pooled;
  for (std::size_t j = 0; j < cfg.d_model; ++j) model.text.token_embedding.mutable_data()[j] += 5.0;
  const auto after = encode_text(inner, model.text, cfg).pooled;
  double pad_diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    pad_diff = std::max({pad_diff, std::abs(a.at(i) - b.at(i)), std::abs(before.at(i) - after.at(i))});
  }
  check(pad_diff <= 1e-12, "PAD masking");

  std::vector<Tensor> online{random_tensor({4, 4}, rng)}, copy{random_tensor({4, 4}, rng)};
  auto gap = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < 16; ++i) s += std::pow(copy[0].at(i) - online[0].at(i), 2);
    return std::sqrt(s);
  };
  double contraction_err = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double g0 = gap();
    momentum_update(online, copy, 0.995);
    contraction_err = std::max(contraction_err, std::abs(gap() - 0.995 * g0));
  }
  check(contraction_err <= 1e-12, "momentum contraction");

  bool monotone = true;
  for (int t = 0; t < 50; ++t) {
    const Matrix s = testing::random_scores(30, 40, rng);
    const auto truth = testing::random_truth(30, 40, rng);
    double prev = 0.0;
    for (std::size_t k = 1; k <= 40; ++k) {
      const double r = recall_at_k(s, truth, k);
      monotone &= r >= prev && r <= 100.0;
      prev = r;
    }
  }
  check(monotone, "R@k monotonicity");

  const fs::path data = work_dir() / "determinism";
  cmd_gen_data(data, 60, 5, 0.5);
  std::string metrics[2];
  for (int run = 0; run < 2; ++run) {
    RunConfig c;
    c.data_dir = data;
    c.output_dir = work_dir() / ("determinism_run" + std::to_string(run));
    c.max_steps = 6;
    c.seed = 9;
    cmd_train(c);
    RunConfig e;
    e.data_dir = data;
    e.checkpoint = c.output_dir / "model.ckpt";
    e.output_dir = c.output_dir;
    cmd_eval(e);
    metrics[run] = read_file(c.output_dir / "metrics.json");
  }
  check(!metrics[0].empty() && metrics[0] == metrics[1], "seeded determinism");

  std::string detail = "norm err " + fmt("%.1e", norm_err) + ", row-sum err " + fmt("%.1e", row_err) +
                       ", PAD diff " + fmt("%.1e", pad_diff) + ", contraction err " +
                       fmt("%.1e", contraction_err) + ", metrics identical " +
                       (metrics[0] == metrics[1] ? "yes" : "no");
  for (const auto& f : failures) detail += "; failed: " + f;
  return {failures.empty(), detail};
}

// ---- 8 ----------------------------------------------------------------------

Outcome ablation_harness() {
  const fs::path data = work_dir() / "ablation_data";
  cmd_gen_data(data, 100, 0, 0.5);
  const Corpus corpus = load_corpus(data);
  RunConfig base;
  base.data_dir = data;
  base.output_dir = work_dir() / "ablation";
  const auto graph = load_knowledge(base);
  const auto runs = run_ablation(base, corpus, graph);
  std::size_t written = 0;
  std::string summary;
  for (const auto& r : runs) {
    const fs::path f = base.output_dir / (r.name + ".json");
    if (fs::exists(f) &&
        RetrievalMetrics::from_json(nlohmann::json::parse(read_file(f)).at("metrics").dump()).to_json() ==
            r.metrics.to_json()) {
      ++written;
    }
    summary += " " + r.name + "=" + fmt("%.1f", r.metrics.mR);
  }
  std::set<std::string> names;
  for (const auto& r : runs) names.insert(r.name);
  const bool pass = runs.size() == 11 && names.size() == 11 && written == 11;
  return {pass, std::to_string(written) + "/11 metrics files in " + base.output_dir.string() + ";" + summary};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    }
  }
  const std::vector<Criterion> criteria{
      {1, "metric arithmetic", 1.0, metric_arithmetic},
      {2, "gradient integrity", 60.0, gradient_integrity},
      {3, "knowledge pipeline", 10.0, knowledge_pipeline},
      {4, "knowledge benefit", 3 * 2 * 600.0, knowledge_benefit},
      {5, "training sanity", 180.0, training_sanity},
      {6, "retrieval oracle", 30.0, retrieval_oracle},
      {7, "invariant suite", 120.0, invariant_suite},
      {8, "ablation harness", 0.0, ablation_harness},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.contains(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt("%.1f s", secs);
    if (c.limit_seconds > 0.0) {
      timing += " of " + fmt("%.0f s", c.limit_seconds);
      if (secs > c.limit_seconds) {
        o.pass = false;
        o.detail += "; over time budget";
      }
    }
    failed += !o.pass;
    std::printf("%s  criterion %d  %-20s %s  [%s]\n", o.pass ? "PASS" : "FAIL", c.id, c.title,
                o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
