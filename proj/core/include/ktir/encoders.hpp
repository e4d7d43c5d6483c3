#pragma once

// Image encoder, text encoder (text-only and multimodal modes), knowledge
// fusion, matching head and the momentum copies used for soft labels.

#include <cstddef>
#include <cstdint>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ktir/checkpoint.hpp"
#include "ktir/image.hpp"
#include "ktir/tensor.hpp"

namespace ktir {

enum class FusionMode { CrossAttention, ConcatOnly, NoKnowledge };
enum class Pooling { Cls, Mean };

std::string_view fusion_name(FusionMode mode);
std::optional<FusionMode> parse_fusion(std::string_view text);

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_proj = 32;
  std::size_t ffn_multiplier = 4;
  std::size_t image_size = 32;
  std::size_t image_channels = 3;
  std::size_t patch_size = 8;
  std::size_t max_text_len = 32;
  std::size_t vocab_size = 0;
  FusionMode fusion_mode = FusionMode::CrossAttention;
  Pooling pooling = Pooling::Cls;
  double init_tau = 0.07;

  std::size_t n_patches() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * image_channels; }

  // Throws InvalidArgument when d_model % n_heads != 0,
  // image_size % patch_size != 0, or a size is zero.
  void validate() const;

  // ViT-B/16 + BERT-base sized configuration. Only used to check shapes.
  static EncoderConfig paper_scale(std::size_t vocab_size);
};

// weight is [in x out], bias is [out].
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
};

// Pre-norm transformer block. The cross-attention members are only set on
// text-encoder blocks and are only used in multimodal mode.
struct EncoderBlock {
  LayerNormParams attn_norm;
  AttentionParams self_attn;
  LayerNormParams cross_norm;
  AttentionParams cross_attn;
  LayerNormParams ffn_norm;
  Linear ffn_in;
  Linear ffn_out;
};

struct ImageEncoderParams {
  Linear patch_embed;
  Tensor cls_token;
  Tensor positions;
  std::vector<EncoderBlock> blocks;
  LayerNormParams final_norm;
  Linear projection;
};

struct TextEncoderParams {
  Tensor token_embedding;
  Tensor positions;
  std::vector<EncoderBlock> blocks;
  LayerNormParams final_norm;
};

// Single-head cross-attention (w1, w2), the 2d -> d reduction of the
// concatenated attention rows, and the final text projection.
struct FusionParams {
  Tensor w1;
  Tensor w2;
  Linear reduce;
  Linear projection;
};

struct ModelParams {
  EncoderConfig config;
  ImageEncoderParams image;
  TextEncoderParams text;
  FusionParams fusion;
  Linear match_head;
  Tensor log_tau;

  ImageEncoderParams image_momentum;
  TextEncoderParams text_momentum;
  FusionParams fusion_momentum;

  double tau() const { return std::exp(log_tau.item()); }
};

ModelParams init_model(const EncoderConfig& config, std::uint64_t seed);

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

// Trainable parameters in a fixed order.
void visit_parameters(ModelParams& model, const ParamVisitor& visit);
// Momentum copies, in the same relative order as the online tensors they
// track (see momentum_update()).
void visit_momentum(ModelParams& model, const ParamVisitor& visit);

std::vector<Tensor> trainable_parameters(ModelParams& model);
std::size_t count_parameters(ModelParams& model);

std::vector<NamedTensor> model_state(ModelParams& model);
// Copies tensors from a checkpoint into the model. Throws CheckpointMismatch
// when a tensor is missing or has a different shape.
void load_model_state(ModelParams& model, const std::vector<NamedTensor>& state);

// ---- forward passes -------------------------------------------------------

struct ImageFeatures {
  Tensor embedding;  // unit vector [d_proj]
  Tensor tokens;     // [n_patches + 1, d_model], CLS first
};

struct TextFeatures {
  Tensor pooled;  // [d_model]
  Tensor tokens;  // [len, d_model] over the ids up to the last non-PAD id
};

// Splits the image into patch_size x patch_size patches, each flattened in
// (row, column, channel) order. Returns [n_patches, patch_dim].
Tensor patchify(const Image& image, const EncoderConfig& config);

ImageFeatures encode_image(const Image& image, const ImageEncoderParams& params,
                           const EncoderConfig& config);

// Text-only mode when image_tokens is null, multimodal mode otherwise.
// PAD ids are masked out of attention.
TextFeatures encode_text(std::span<const int> ids, const TextEncoderParams& params,
                         const EncoderConfig& config, const Tensor* image_tokens = nullptr);

// softmax((f1 W1)(f2 W2)^T / sqrt(d_k)) (f2 W2), single head.
// If weights is non-null it receives the attention matrix.
Tensor cross_attention(const Tensor& f1, const Tensor& f2, const Tensor& w1, const Tensor& w2,
                       Tensor* weights = nullptr);

// Fuses pooled caption and knowledge features into the unit text feature.
// CrossAttention: attention over [f_cap, f_kwl] and [f_kwl, f_cap], rows
// concatenated, reduced to d_model, projected and normalized. NoKnowledge:
// the caption feature alone is projected and normalized. ConcatOnly is not
// handled here (see encode_text_feature()).
Tensor fuse_text_knowledge(const Tensor& f_cap, const Tensor& f_kwl, const FusionParams& params,
                           FusionMode mode);

// [CLS] caption [SEP] knowledge [SEP], truncated to max_len with a final
// [SEP]. Knowledge without tokens leaves the caption ids unchanged.
std::vector<int> join_caption_knowledge(std::span<const int> caption_ids,
                                        std::span<const int> knowledge_ids, std::size_t max_len);

// Unit text feature for a caption and its knowledge sentence in the
// configured fusion mode.
Tensor encode_text_feature(std::span<const int> caption_ids, std::span<const int> knowledge_ids,
                           const TextEncoderParams& text, const FusionParams& fusion,
                           const EncoderConfig& config);

// Joint image-text feature [d_model] from the multimodal text encoder. The
// knowledge ids are ignored in NoKnowledge mode.
Tensor encode_multimodal(std::span<const int> caption_ids, std::span<const int> knowledge_ids,
                         const Tensor& image_tokens, const TextEncoderParams& params,
                         const EncoderConfig& config);

// sigmoid(FC_multi(f)) for f of shape [d] or [n, d]; returns [n].
Tensor match_head(const Tensor& f_multi, const Linear& head);

// copy <- lambda * copy + (1 - lambda) * online for every momentum tensor.
// Throws InvalidArgument unless 0 <= lambda <= 1.
void momentum_update(ModelParams& model, double lambda);
void momentum_update(std::span<const Tensor> online, std::span<Tensor> copy, double lambda);

// Applies a linear layer to [in] or [n, in].
Tensor linear(const Tensor& x, const Linear& layer);

}  // namespace ktir
