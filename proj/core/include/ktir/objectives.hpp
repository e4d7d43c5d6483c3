#pragma once

// Contrastive loss with momentum soft labels, image-text matching loss with
// hard negatives, and their weighted combination.

#include <cstddef>
#include <span>
#include <vector>

#include "ktir/encoders.hpp"
#include "ktir/image.hpp"
#include "ktir/random.hpp"
#include "ktir/tensor.hpp"

namespace ktir {

struct LossConfig {
  double w1 = 1.0;  // contrastive weight
  double w2 = 1.0;  // matching weight
  double soft_label_mix = 0.4;
  bool hard_negative = true;
};

// Soft targets (1 - alpha) * I + alpha * softmax(sim_momentum / tau) along
// the given axis (-1: rows, image-to-text; 0: columns, text-to-image).
std::vector<double> soft_targets(const Tensor& sim_momentum, double tau, double alpha, int axis);

// Symmetric in-batch cross-entropy over sim / tau. sim is [N, N] with the
// positives on the diagonal; sim_momentum supplies the soft-label part and
// is never differentiated. tau is a positive scalar tensor. Throws NotSquare.
Tensor contrastive_loss(const Tensor& sim, const Tensor& sim_momentum, const Tensor& tau,
                        double alpha);
Tensor contrastive_loss(const Tensor& sim, const Tensor& sim_momentum, double tau, double alpha);

struct HardNegatives {
  std::vector<std::size_t> text_for_image;  // negative caption index per image
  std::vector<std::size_t> image_for_text;  // negative image index per caption
};

// Row i draws j != i with probability softmax_j(sim[i][j]) over the
// off-diagonal entries; columns likewise. Throws BatchTooSmall if N < 2.
HardNegatives sample_hard_negatives(const Tensor& sim, Rng& rng);
// Uniform off-diagonal draws; used when hard-negative mining is disabled.
HardNegatives sample_uniform_negatives(std::size_t n, Rng& rng);

// Mean binary cross-entropy, label 1 for positives and 0 for negatives.
// Probabilities are clamped to [1e-7, 1 - 1e-7].
Tensor itm_loss(const Tensor& positive_probs, const Tensor& negative_probs);

Tensor total_loss(const Tensor& contrastive, const Tensor& matching, const LossConfig& config);
double total_loss(double contrastive, double matching, const LossConfig& config);

struct TrainPair {
  const Image* image = nullptr;
  std::vector<int> caption_ids;
  std::vector<int> knowledge_ids;
};

struct BatchLoss {
  Tensor total;
  Tensor contrastive;
  Tensor matching;
  HardNegatives negatives;
};

// Full forward pass for one batch of aligned pairs. Negatives are drawn with
// rng unless fixed_negatives is given. The matching branch is skipped when
// config.w2 == 0.
BatchLoss compute_batch_loss(ModelParams& model, std::span<const TrainPair> batch,
                             const LossConfig& config, Rng& rng,
                             const HardNegatives* fixed_negatives = nullptr);

}  // namespace ktir
