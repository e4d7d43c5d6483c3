#pragma once

// Inference scoring, ranking, recall metrics and similarity export.

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ktir/tensor.hpp"

namespace ktir {

// Dense row-major matrix of queries x candidates.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  Matrix transposed() const;
};

struct ScoreMatrix {
  Matrix sim;
  Matrix mat;
  // 1 where mat was computed, 0 where it was skipped by top-k filtering.
  std::vector<unsigned char> computed;
  Matrix final;
};

// S[i][j] = <text_i, image_j>. Features are expected to be unit vectors.
// Throws ShapeMismatch when the feature dimensions differ.
Matrix similarity_scores(std::span<const Tensor> text_feats, std::span<const Tensor> image_feats);
Matrix similarity_scores(const Matrix& text_feats, const Matrix& image_feats);

// Matching probability for (query, candidate).
using PairScorer = std::function<double(std::size_t query, std::size_t candidate)>;

struct MatchingResult {
  Matrix mat;
  std::vector<unsigned char> computed;
};

// Evaluates scorer on every pair, or only on the top_k candidates per row by
// sim when top_k is set. Rows are split across `threads` workers; the scorer
// must be safe to call concurrently when threads > 1.
MatchingResult matching_scores(const Matrix& sim, const PairScorer& scorer,
                               std::optional<std::size_t> top_k = std::nullopt,
                               std::size_t threads = 1);

// sim + mat where computed, -inf elsewhere. An empty mask means all computed.
Matrix final_scores(const Matrix& sim, const Matrix& mat,
                    std::span<const unsigned char> computed = {});

// Candidate indices of one row, best first, ties toward the lower index.
std::vector<std::size_t> rank_row(std::span<const double> scores);

// Percent of queries with a ground-truth candidate in the top k.
// Throws MissingGroundTruth when a query has no ground truth.
double recall_at_k(const Matrix& scores, const std::vector<std::vector<std::size_t>>& ground_truth,
                   std::size_t k);

struct MeanRecall {
  double t2i = 0.0;
  double i2t = 0.0;
  double all = 0.0;
};

// Input order: t2i R@1, R@5, R@10, then i2t R@1, R@5, R@10.
MeanRecall mean_recall(const std::array<double, 6>& recalls);

struct RetrievalMetrics {
  double r1_t2i = 0.0, r5_t2i = 0.0, r10_t2i = 0.0;
  double r1_i2t = 0.0, r5_i2t = 0.0, r10_i2t = 0.0;
  double mR_t2i = 0.0, mR_i2t = 0.0, mR = 0.0;

  std::string to_json() const;
  static RetrievalMetrics from_json(const std::string& text);
};

// text_to_image is captions x images and image_of_caption[c] is the one
// correct image of caption c. Image-to-text counts a hit when any caption
// of the image is in the top k.
RetrievalMetrics evaluate_retrieval(const Matrix& text_to_image,
                                    std::span<const std::size_t> image_of_caption);

// Header row of column labels (first cell "query"), then one row per query
// with values at 4 decimals. Throws InvalidArgument on label count mismatch
// and IoError when the file cannot be written.
void export_similarity_csv(const Matrix& scores, std::span<const std::string> row_labels,
                           std::span<const std::string> col_labels,
                           const std::filesystem::path& path);
Matrix import_similarity_csv(const std::filesystem::path& path);

}  // namespace ktir
