#include "ktir/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ktir/errors.hpp"

namespace ktir {

Matrix Matrix::transposed() const {
  Matrix out(cols, rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = at(r, c);
  }
  return out;
}

Matrix similarity_scores(std::span<const Tensor> text_feats, std::span<const Tensor> image_feats) {
  Matrix out(text_feats.size(), image_feats.size());
  for (std::size_t i = 0; i < text_feats.size(); ++i) {
    const auto a = text_feats[i].data();
    for (std::size_t j = 0; j < image_feats.size(); ++j) {
      const auto b = image_feats[j].data();
      if (a.size() != b.size()) throw ShapeMismatch("similarity_scores: feature sizes differ");
      double dot = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
      out.at(i, j) = dot;
    }
  }
  return out;
}

Matrix similarity_scores(const Matrix& text_feats, const Matrix& image_feats) {
  if (text_feats.cols != image_feats.cols) {
    throw ShapeMismatch("similarity_scores: feature sizes differ");
  }
  Matrix out(text_feats.rows, image_feats.rows);
  for (std::size_t i = 0; i < text_feats.rows; ++i) {
    const auto a = text_feats.row(i);
    for (std::size_t j = 0; j < image_feats.rows; ++j) {
      const auto b = image_feats.row(j);
      out.at(i, j) = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    }
  }
  return out;
}

std::vector<std::size_t> rank_row(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

MatchingResult matching_scores(const Matrix& sim, const PairScorer& scorer,
                               std::optional<std::size_t> top_k, std::size_t threads) {
  MatchingResult out{Matrix(sim.rows, sim.cols), std::vector<unsigned char>(sim.rows * sim.cols, 0)};
  auto score_rows = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t r = begin; r < end; ++r) {
      std::vector<std::size_t> cands;
      if (top_k && *top_k < sim.cols) {
        cands = rank_row(sim.row(r));
        cands.resize(*top_k);
      } else {
        cands.resize(sim.cols);
        std::iota(cands.begin(), cands.end(), std::size_t{0});
      }
      for (std::size_t c : cands) {
        out.mat.at(r, c) = scorer(r, c);
        out.computed[r * sim.cols + c] = 1;
      }
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, sim.rows));
  if (threads == 1) {
    score_rows(0, sim.rows);
    return out;
  }
  std::vector<std::thread> workers;
  const std::size_t chunk = (sim.rows + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(sim.rows, b + chunk);
    if (b < e) workers.emplace_back(score_rows, b, e);
  }
  for (auto& w : workers) w.join();
  return out;
}

Matrix final_scores(const Matrix& sim, const Matrix& mat, std::span<const unsigned char> computed) {
  if (sim.rows != mat.rows || sim.cols != mat.cols) {
    throw ShapeMismatch("final_scores: S_sim and S_mat differ in shape");
  }
  if (!computed.empty() && computed.size() != sim.values.size()) {
    throw ShapeMismatch("final_scores: mask size differs");
  }
  Matrix out(sim.rows, sim.cols);
  for (std::size_t i = 0; i < sim.values.size(); ++i) {
    out.values[i] = (computed.empty() || computed[i]) ? sim.values[i] + mat.values[i]
                                                      : -std::numeric_limits<double>::infinity();
  }
  return out;
}

double recall_at_k(const Matrix& scores, const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k) {
  if (ground_truth.size() != scores.rows) {
    throw MissingGroundTruth("recall_at_k: ground truth count differs from query count");
  }
  if (scores.rows == 0) throw MissingGroundTruth("recall_at_k: no queries");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < scores.rows; ++q) {
    const auto& truth = ground_truth[q];
    if (truth.empty()) {
      throw MissingGroundTruth(fmt::format("recall_at_k: query {} has no ground truth", q));
    }
    const auto s = scores.row(q);
    // Rank of a candidate = number of candidates ordered before it.
    std::size_t best = scores.cols;
    for (std::size_t g : truth) {
      if (g >= scores.cols) throw InvalidArgument("recall_at_k: ground truth out of range");
      std::size_t rank = 0;
      for (std::size_t c = 0; c < scores.cols; ++c) {
        if (s[c] > s[g] || (s[c] == s[g] && c < g)) ++rank;
      }
      best = std::min(best, rank);
    }
    if (best < k) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(scores.rows);
}

MeanRecall mean_recall(const std::array<double, 6>& r) {
  MeanRecall out;
  out.t2i = (r[0] + r[1] + r[2]) / 3.0;
  out.i2t = (r[3] + r[4] + r[5]) / 3.0;
  out.all = (r[0] + r[1] + r[2] + r[3] + r[4] + r[5]) / 6.0;
  return out;
}

std::string RetrievalMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["r1_t2i"] = r1_t2i;
  j["r5_t2i"] = r5_t2i;
  j["r10_t2i"] = r10_t2i;
  j["r1_i2t"] = r1_i2t;
  j["r5_i2t"] = r5_i2t;
  j["r10_i2t"] = r10_i2t;
  j["mR_t2i"] = mR_t2i;
  j["mR_i2t"] = mR_i2t;
  j["mR"] = mR;
  return j.dump();
}

RetrievalMetrics RetrievalMetrics::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  RetrievalMetrics m;
  m.r1_t2i = j.at("r1_t2i");
  m.r5_t2i = j.at("r5_t2i");
  m.r10_t2i = j.at("r10_t2i");
  m.r1_i2t = j.at("r1_i2t");
  m.r5_i2t = j.at("r5_i2t");
  m.r10_i2t = j.at("r10_i2t");
  m.mR_t2i = j.at("mR_t2i");
  m.mR_i2t = j.at("mR_i2t");
  m.mR = j.at("mR");
  return m;
}

RetrievalMetrics evaluate_retrieval(const Matrix& text_to_image,
                                    std::span<const std::size_t> image_of_caption) {
  if (image_of_caption.size() != text_to_image.rows) {
    throw MissingGroundTruth("evaluate_retrieval: one image index per caption required");
  }
  std::vector<std::vector<std::size_t>> t2i(text_to_image.rows);
  std::vector<std::vector<std::size_t>> i2t(text_to_image.cols);
  for (std::size_t c = 0; c < image_of_caption.size(); ++c) {
    if (image_of_caption[c] >= text_to_image.cols) {
      throw InvalidArgument("evaluate_retrieval: image index out of range");
    }
    t2i[c].push_back(image_of_caption[c]);
    i2t[image_of_caption[c]].push_back(c);
  }
  const Matrix image_to_text = text_to_image.transposed();
  RetrievalMetrics m;
  m.r1_t2i = recall_at_k(text_to_image, t2i, 1);
  m.r5_t2i = recall_at_k(text_to_image, t2i, 5);
  m.r10_t2i = recall_at_k(text_to_image, t2i, 10);
  m.r1_i2t = recall_at_k(image_to_text, i2t, 1);
  m.r5_i2t = recall_at_k(image_to_text, i2t, 5);
  m.r10_i2t = recall_at_k(image_to_text, i2t, 10);
  const auto mr = mean_recall({m.r1_t2i, m.r5_t2i, m.r10_t2i, m.r1_i2t, m.r5_i2t, m.r10_i2t});
  m.mR_t2i = mr.t2i;
  m.mR_i2t = mr.i2t;
  m.mR = mr.all;
  return m;
}

void export_similarity_csv(const Matrix& scores, std::span<const std::string> row_labels,
                           std::span<const std::string> col_labels,
                           const std::filesystem::path& path) {
  if (row_labels.size() != scores.rows || col_labels.size() != scores.cols) {
    throw InvalidArgument("export_similarity_csv: label counts do not match the matrix");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "query";
  for (const auto& label : col_labels) out << ',' << label;
  out << '\n';
  for (std::size_t r = 0; r < scores.rows; ++r) {
    out << row_labels[r];
    for (std::size_t c = 0; c < scores.cols; ++c) out << ',' << fmt::format("{:.4f}", scores.at(r, c));
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Matrix import_similarity_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty CSV: " + path.string());
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  Matrix out(0, cols);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      out.values.push_back(std::stod(cell));
      ++n;
    }
    if (n != cols) throw IoError("ragged CSV row in " + path.string());
    ++out.rows;
  }
  return out;
}

}  // namespace ktir
