#include "ktir/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ktir/errors.hpp"

namespace ktir {
namespace {

constexpr double kProbFloor = 1e-7;

void require_square(const Tensor& sim, const char* what) {
  if (sim.rank() != 2 || sim.rows() != sim.cols() || sim.rows() == 0) {
    throw NotSquare(std::string(what) + " must be a non-empty square matrix");
  }
}

std::size_t draw(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  std::size_t last = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last;
}

// Softmax weights over the off-diagonal entries of one lane; the diagonal
// gets weight zero.
std::vector<double> off_diagonal_weights(const Tensor& sim, std::size_t lane, bool by_row) {
  const std::size_t n = sim.rows();
  std::vector<double> w(n, 0.0);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == lane) continue;
    mx = std::max(mx, by_row ? sim.at(lane, j) : sim.at(j, lane));
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (j == lane) continue;
    w[j] = std::exp((by_row ? sim.at(lane, j) : sim.at(j, lane)) - mx);
  }
  return w;
}

}  // namespace

std::vector<double> soft_targets(const Tensor& sim_momentum, double tau, double alpha, int axis) {
  require_square(sim_momentum, "momentum similarity");
  const std::size_t n = sim_momentum.rows();
  std::vector<double> t(n * n, 0.0);
  if (alpha > 0.0) {
    NoGradGuard guard;
    const Tensor p = softmax(scale(sim_momentum.detach(), 1.0 / tau), axis);
    for (std::size_t i = 0; i < n * n; ++i) t[i] = alpha * p.at(i);
  }
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] += 1.0 - alpha;
  return t;
}

Tensor contrastive_loss(const Tensor& sim, const Tensor& sim_momentum, const Tensor& tau,
                        double alpha) {
  require_square(sim, "similarity");
  if (sim_momentum.shape() != sim.shape()) {
    throw NotSquare("momentum similarity must match the similarity matrix");
  }
  if (tau.numel() != 1 || !(tau.item() > 0.0)) throw InvalidArgument("tau must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("soft_label_mix must be in [0, 1]");
  const std::size_t n = sim.rows();
  const double tau_value = tau.item();
  const Tensor targets_i2t =
      Tensor::from_data({n, n}, soft_targets(sim_momentum, tau_value, alpha, -1));
  const Tensor targets_t2i =
      Tensor::from_data({n, n}, soft_targets(sim_momentum, tau_value, alpha, 0));

  const Tensor inv_tau = exp(scale(log(tau), -1.0));
  const Tensor logits = scale_by(sim, inv_tau);
  const double inv_n = 1.0 / static_cast<double>(n);
  const Tensor img2txt = scale(sum(mul(targets_i2t, log_softmax(logits, -1))), -inv_n);
  const Tensor txt2img = scale(sum(mul(targets_t2i, log_softmax(logits, 0))), -inv_n);
  return scale(add(img2txt, txt2img), 0.5);
}

Tensor contrastive_loss(const Tensor& sim, const Tensor& sim_momentum, double tau, double alpha) {
  return contrastive_loss(sim, sim_momentum, Tensor::scalar(tau), alpha);
}

HardNegatives sample_hard_negatives(const Tensor& sim, Rng& rng) {
  require_square(sim, "similarity");
  const std::size_t n = sim.rows();
  if (n < 2) throw BatchTooSmall("hard negatives need at least 2 pairs");
  HardNegatives out;
  out.text_for_image.resize(n);
  out.image_for_text.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.text_for_image[i] = draw(off_diagonal_weights(sim, i, true), rng);
  }
  for (std::size_t j = 0; j < n; ++j) {
    out.image_for_text[j] = draw(off_diagonal_weights(sim, j, false), rng);
  }
  return out;
}

HardNegatives sample_uniform_negatives(std::size_t n, Rng& rng) {
  if (n < 2) throw BatchTooSmall("negatives need at least 2 pairs");
  HardNegatives out;
  out.text_for_image.resize(n);
  out.image_for_text.resize(n);
  auto pick = [&](std::size_t self) {
    const auto k = static_cast<std::size_t>(rng.index(n - 1));
    return k >= self ? k + 1 : k;
  };
  for (std::size_t i = 0; i < n; ++i) out.text_for_image[i] = pick(i);
  for (std::size_t j = 0; j < n; ++j) out.image_for_text[j] = pick(j);
  return out;
}

Tensor itm_loss(const Tensor& positive_probs, const Tensor& negative_probs) {
  const std::size_t n_pos = positive_probs.defined() ? positive_probs.numel() : 0;
  const std::size_t n_neg = negative_probs.defined() ? negative_probs.numel() : 0;
  if (n_pos + n_neg == 0) throw InvalidArgument("itm_loss: no pairs");
  std::vector<Tensor> terms;
  if (n_pos > 0) {
    terms.push_back(sum(log(clamp(positive_probs, kProbFloor, 1.0 - kProbFloor))));
  }
  if (n_neg > 0) {
    const Tensor p = clamp(negative_probs, kProbFloor, 1.0 - kProbFloor);
    const Tensor one_minus = add(Tensor::full(p.shape(), 1.0), scale(p, -1.0));
    terms.push_back(sum(log(one_minus)));
  }
  const Tensor total = terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
  return scale(total, -1.0 / static_cast<double>(n_pos + n_neg));
}

Tensor total_loss(const Tensor& contrastive, const Tensor& matching, const LossConfig& config) {
  if (config.w1 < 0.0 || config.w2 < 0.0) throw InvalidArgument("loss weights must be >= 0");
  return add(scale(contrastive, config.w1), scale(matching, config.w2));
}

double total_loss(double contrastive, double matching, const LossConfig& config) {
  if (config.w1 < 0.0 || config.w2 < 0.0) throw InvalidArgument("loss weights must be >= 0");
  return config.w1 * contrastive + config.w2 * matching;
}

BatchLoss compute_batch_loss(ModelParams& model, std::span<const TrainPair> batch,
                             const LossConfig& config, Rng& rng,
                             const HardNegatives* fixed_negatives) {
  const std::size_t n = batch.size();
  if (n == 0) throw InvalidArgument("empty batch");
  const auto& cfg = model.config;

  // Momentum features, outside the tape.
  Tensor sim_momentum;
  {
    NoGradGuard guard;
    std::vector<Tensor> img_m, txt_m;
    for (const auto& pair : batch) {
      img_m.push_back(encode_image(*pair.image, model.image_momentum, cfg).embedding);
      txt_m.push_back(encode_text_feature(pair.caption_ids, pair.knowledge_ids,
                                          model.text_momentum, model.fusion_momentum, cfg));
    }
    sim_momentum = matmul(stack_rows(img_m), transpose(stack_rows(txt_m)));
  }

  std::vector<ImageFeatures> images;
  std::vector<Tensor> img_emb, txt_emb;
  images.reserve(n);
  for (const auto& pair : batch) {
    images.push_back(encode_image(*pair.image, model.image, cfg));
    img_emb.push_back(images.back().embedding);
    txt_emb.push_back(encode_text_feature(pair.caption_ids, pair.knowledge_ids, model.text,
                                          model.fusion, cfg));
  }
  const Tensor sim = matmul(stack_rows(img_emb), transpose(stack_rows(txt_emb)));
  const Tensor tau = exp(model.log_tau);

  BatchLoss out;
  out.contrastive = contrastive_loss(sim, sim_momentum, tau, config.soft_label_mix);

  if (config.w2 == 0.0 || n < 2) {
    out.matching = Tensor::scalar(0.0);
  } else {
    if (fixed_negatives != nullptr) {
      out.negatives = *fixed_negatives;
    } else if (config.hard_negative) {
      out.negatives = sample_hard_negatives(sim.detach(), rng);
    } else {
      out.negatives = sample_uniform_negatives(n, rng);
    }
    std::vector<Tensor> pos, neg;
    for (std::size_t i = 0; i < n; ++i) {
      pos.push_back(encode_multimodal(batch[i].caption_ids, batch[i].knowledge_ids,
                                      images[i].tokens, model.text, cfg));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = batch[out.negatives.text_for_image[i]];
      neg.push_back(encode_multimodal(t.caption_ids, t.knowledge_ids, images[i].tokens,
                                      model.text, cfg));
    }
    for (std::size_t j = 0; j < n; ++j) {
      const auto& img = images[out.negatives.image_for_text[j]];
      neg.push_back(encode_multimodal(batch[j].caption_ids, batch[j].knowledge_ids, img.tokens,
                                      model.text, cfg));
    }
    out.matching = itm_loss(match_head(stack_rows(pos), model.match_head),
                            match_head(stack_rows(neg), model.match_head));
  }
  out.total = total_loss(out.contrastive, out.matching, config);
  return out;
}

}  // namespace ktir
