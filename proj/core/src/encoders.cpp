#include "ktir/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ktir/errors.hpp"
#include "ktir/knowledge_text.hpp"
#include "ktir/random.hpp"

namespace ktir {
namespace {

constexpr double kMaskValue = -1e9;

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng_.normal(0.0, stddev);
    return Tensor::from_data(std::move(shape), std::move(v), true);
  }

  Linear linear(std::size_t in, std::size_t out) {
    return {normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in))),
            Tensor::zeros({out}, true)};
  }

  LayerNormParams layer_norm(std::size_t d) {
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
  }

  AttentionParams attention(std::size_t d) {
    return {linear(d, d), linear(d, d), linear(d, d), linear(d, d)};
  }

  EncoderBlock block(const EncoderConfig& c, bool with_cross) {
    EncoderBlock b;
    b.attn_norm = layer_norm(c.d_model);
    b.self_attn = attention(c.d_model);
    if (with_cross) {
      b.cross_norm = layer_norm(c.d_model);
      b.cross_attn = attention(c.d_model);
    }
    b.ffn_norm = layer_norm(c.d_model);
    b.ffn_in = linear(c.d_model, c.d_model * c.ffn_multiplier);
    b.ffn_out = linear(c.d_model * c.ffn_multiplier, c.d_model);
    return b;
  }

 private:
  Rng rng_;
};

using ConstVisitor = std::function<void(const std::string&, Tensor&)>;

void visit_linear(const std::string& p, Linear& l, const ConstVisitor& f) {
  f(p + ".weight", l.weight);
  f(p + ".bias", l.bias);
}

void visit_norm(const std::string& p, LayerNormParams& n, const ConstVisitor& f) {
  f(p + ".gain", n.gain);
  f(p + ".bias", n.bias);
}

void visit_attention(const std::string& p, AttentionParams& a, const ConstVisitor& f) {
  visit_linear(p + ".query", a.query, f);
  visit_linear(p + ".key", a.key, f);
  visit_linear(p + ".value", a.value, f);
  visit_linear(p + ".output", a.output, f);
}

void visit_block(const std::string& p, EncoderBlock& b, const ConstVisitor& f) {
  visit_norm(p + ".attn_norm", b.attn_norm, f);
  visit_attention(p + ".self_attn", b.self_attn, f);
  if (b.cross_norm.gain.defined()) {
    visit_norm(p + ".cross_norm", b.cross_norm, f);
    visit_attention(p + ".cross_attn", b.cross_attn, f);
  }
  visit_norm(p + ".ffn_norm", b.ffn_norm, f);
  visit_linear(p + ".ffn_in", b.ffn_in, f);
  visit_linear(p + ".ffn_out", b.ffn_out, f);
}

void visit_image(const std::string& p, ImageEncoderParams& e, const ConstVisitor& f) {
  visit_linear(p + ".patch_embed", e.patch_embed, f);
  f(p + ".cls_token", e.cls_token);
  f(p + ".positions", e.positions);
  for (std::size_t i = 0; i < e.blocks.size(); ++i) {
    visit_block(p + ".blocks." + std::to_string(i), e.blocks[i], f);
  }
  visit_norm(p + ".final_norm", e.final_norm, f);
  visit_linear(p + ".projection", e.projection, f);
}

void visit_text(const std::string& p, TextEncoderParams& e, const ConstVisitor& f) {
  f(p + ".token_embedding", e.token_embedding);
  f(p + ".positions", e.positions);
  for (std::size_t i = 0; i < e.blocks.size(); ++i) {
    visit_block(p + ".blocks." + std::to_string(i), e.blocks[i], f);
  }
  visit_norm(p + ".final_norm", e.final_norm, f);
}

void visit_fusion(const std::string& p, FusionParams& e, const ConstVisitor& f) {
  f(p + ".w1", e.w1);
  f(p + ".w2", e.w2);
  visit_linear(p + ".reduce", e.reduce, f);
  visit_linear(p + ".projection", e.projection, f);
}

// Online tensors that have a momentum counterpart, in visit_momentum order.
void visit_momentum_sources(ModelParams& m, const ConstVisitor& f) {
  visit_image("image", m.image, f);
  visit_text("text", m.text, f);
  visit_fusion("fusion", m.fusion, f);
}

Tensor as_matrix(const Tensor& t) {
  return t.rank() == 2 ? t : reshape(t, {t.rows(), t.cols()});
}

Tensor multi_head_attention(const Tensor& x, const Tensor& context, const AttentionParams& p,
                            std::size_t n_heads, const Tensor* mask) {
  const Tensor q = linear(x, p.query);
  const Tensor k = linear(context, p.key);
  const Tensor v = linear(context, p.value);
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Tensor qh = n_heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor kh = n_heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor vh = n_heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (mask != nullptr) scores = add(scores, *mask);
    heads.push_back(matmul(softmax(scores), vh));
  }
  const Tensor merged = n_heads == 1 ? heads[0] : concat(std::span<const Tensor>(heads), 1);
  return linear(merged, p.output);
}

Tensor run_block(const Tensor& input, const EncoderBlock& b, std::size_t n_heads,
                 const Tensor* mask, const Tensor* image_tokens) {
  Tensor x = input;
  const Tensor h = layer_norm(x, b.attn_norm.gain, b.attn_norm.bias);
  x = add(x, multi_head_attention(h, h, b.self_attn, n_heads, mask));
  if (image_tokens != nullptr) {
    const Tensor hc = layer_norm(x, b.cross_norm.gain, b.cross_norm.bias);
    x = add(x, multi_head_attention(hc, *image_tokens, b.cross_attn, n_heads, nullptr));
  }
  const Tensor hf = layer_norm(x, b.ffn_norm.gain, b.ffn_norm.bias);
  x = add(x, linear(gelu(linear(hf, b.ffn_in)), b.ffn_out));
  return x;
}

std::size_t effective_length(std::span<const int> ids) {
  std::size_t len = ids.size();
  while (len > 1 && ids[len - 1] == kPadId) --len;
  return len;
}

// Strips trailing PADs and the leading CLS / trailing SEP framing.
std::span<const int> inner_tokens(std::span<const int> ids) {
  auto body = ids.subspan(0, effective_length(ids));
  if (!body.empty() && body.front() == kClsId) body = body.subspan(1);
  if (!body.empty() && body.back() == kSepId) body = body.subspan(0, body.size() - 1);
  return body;
}

}  // namespace

std::string_view fusion_name(FusionMode mode) {
  switch (mode) {
    case FusionMode::CrossAttention:
      return "cross-attention";
    case FusionMode::ConcatOnly:
      return "concat";
    case FusionMode::NoKnowledge:
      return "none";
  }
  return "cross-attention";
}

std::optional<FusionMode> parse_fusion(std::string_view text) {
  if (text == "cross-attention" || text == "crossattention" || text == "cross") {
    return FusionMode::CrossAttention;
  }
  if (text == "concat" || text == "concat-only") return FusionMode::ConcatOnly;
  if (text == "none" || text == "no-knowledge") return FusionMode::NoKnowledge;
  return std::nullopt;
}

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_proj == 0 || patch_size == 0 ||
      image_size == 0 || image_channels == 0 || max_text_len < 2 || ffn_multiplier == 0) {
    throw InvalidArgument("encoder config has a zero dimension");
  }
  if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  if (image_size % patch_size != 0) {
    throw InvalidArgument("image_size must be divisible by patch_size");
  }
  if (vocab_size <= static_cast<std::size_t>(kFirstTokenId)) {
    throw InvalidArgument("vocab_size must exceed the reserved ids");
  }
  if (!(init_tau > 0.0)) throw InvalidArgument("init_tau must be positive");
}

EncoderConfig EncoderConfig::paper_scale(std::size_t vocab_size) {
  EncoderConfig c;
  c.d_model = 768;
  c.n_heads = 12;
  c.n_layers = 12;
  c.d_proj = 256;
  c.image_size = 224;
  c.patch_size = 16;
  c.max_text_len = 35;
  c.vocab_size = vocab_size;
  return c;
}

ModelParams init_model(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model;
  Initializer init(seed);
  ModelParams m;
  m.config = config;

  m.image.patch_embed = init.linear(config.patch_dim(), d);
  m.image.cls_token = init.normal({1, d}, 0.02);
  m.image.positions = init.normal({config.n_patches() + 1, d}, 0.02);
  for (std::size_t i = 0; i < config.n_layers; ++i) m.image.blocks.push_back(init.block(config, false));
  m.image.final_norm = init.layer_norm(d);
  m.image.projection = init.linear(d, config.d_proj);

  m.text.token_embedding = init.normal({config.vocab_size, d}, 0.02);
  m.text.positions = init.normal({config.max_text_len, d}, 0.02);
  for (std::size_t i = 0; i < config.n_layers; ++i) m.text.blocks.push_back(init.block(config, true));
  m.text.final_norm = init.layer_norm(d);

  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  m.fusion.w1 = init.normal({d, d}, w_std);
  m.fusion.w2 = init.normal({d, d}, w_std);
  m.fusion.reduce = init.linear(2 * d, d);
  m.fusion.projection = init.linear(d, config.d_proj);

  m.match_head = init.linear(d, 1);
  m.log_tau = Tensor::scalar(std::log(config.init_tau), true);

  m.image_momentum = m.image;
  m.text_momentum = m.text;
  m.fusion_momentum = m.fusion;
  // Deep-copy the momentum tensors; the struct copies above share nodes.
  visit_momentum(m, [](const std::string&, Tensor& t) { t = t.detach(); });
  return m;
}

void visit_parameters(ModelParams& m, const ParamVisitor& visit) {
  visit_image("image", m.image, visit);
  visit_text("text", m.text, visit);
  visit_fusion("fusion", m.fusion, visit);
  visit_linear("match_head", m.match_head, visit);
  visit("log_tau", m.log_tau);
}

void visit_momentum(ModelParams& m, const ParamVisitor& visit) {
  visit_image("momentum.image", m.image_momentum, visit);
  visit_text("momentum.text", m.text_momentum, visit);
  visit_fusion("momentum.fusion", m.fusion_momentum, visit);
}

std::vector<Tensor> trainable_parameters(ModelParams& m) {
  std::vector<Tensor> out;
  visit_parameters(m, [&](const std::string&, Tensor& t) { out.push_back(t); });
  return out;
}

std::size_t count_parameters(ModelParams& m) {
  std::size_t n = 0;
  visit_parameters(m, [&](const std::string&, Tensor& t) { n += t.numel(); });
  return n;
}

std::vector<NamedTensor> model_state(ModelParams& m) {
  std::vector<NamedTensor> out;
  auto collect = [&](const std::string& name, Tensor& t) { out.emplace_back(name, t); };
  visit_parameters(m, collect);
  visit_momentum(m, collect);
  return out;
}

void load_model_state(ModelParams& m, const std::vector<NamedTensor>& state) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : state) by_name[name] = &t;
  auto assign = [&](const std::string& name, Tensor& dst) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointMismatch("checkpoint lacks tensor " + name);
    const Tensor& src = *it->second;
    if (src.shape() != dst.shape()) {
      throw CheckpointMismatch("shape mismatch for " + name);
    }
    auto out = dst.mutable_data();
    std::copy(src.data().begin(), src.data().end(), out.begin());
  };
  visit_parameters(m, assign);
  visit_momentum(m, assign);
}

// ---- forward ---------------------------------------------------------------

Tensor linear(const Tensor& x, const Linear& layer) {
  if (x.rank() <= 1) {
    const Tensor y = add_row(matmul(reshape(x, {1, x.numel()}), layer.weight), layer.bias);
    return reshape(y, {y.cols()});
  }
  return add_row(matmul(x, layer.weight), layer.bias);
}

Tensor patchify(const Image& image, const EncoderConfig& c) {
  if (image.width != c.image_size || image.height != c.image_size ||
      image.channels != c.image_channels ||
      image.pixels.size() != image.width * image.height * image.channels) {
    throw ShapeMismatch("image is " + std::to_string(image.width) + "x" +
                        std::to_string(image.height) + "x" + std::to_string(image.channels) +
                        ", encoder expects " + std::to_string(c.image_size) + "x" +
                        std::to_string(c.image_size) + "x" + std::to_string(c.image_channels));
  }
  const std::size_t grid = c.image_size / c.patch_size;
  const std::size_t pd = c.patch_dim();
  std::vector<double> out(grid * grid * pd);
  for (std::size_t pr = 0; pr < grid; ++pr) {
    for (std::size_t pc = 0; pc < grid; ++pc) {
      double* dst = out.data() + (pr * grid + pc) * pd;
      std::size_t k = 0;
      for (std::size_t y = 0; y < c.patch_size; ++y)
        for (std::size_t x = 0; x < c.patch_size; ++x)
          for (std::size_t ch = 0; ch < c.image_channels; ++ch)
            dst[k++] = image.at(pr * c.patch_size + y, pc * c.patch_size + x, ch);
    }
  }
  return Tensor::from_data({grid * grid, pd}, std::move(out));
}

ImageFeatures encode_image(const Image& image, const ImageEncoderParams& p,
                           const EncoderConfig& c) {
  // Pixels are centred to [-1, 1] before the patch projection.
  const Tensor pixels =
      add(scale(patchify(image, c), 2.0), Tensor::full({c.n_patches(), c.patch_dim()}, -1.0));
  const Tensor patches = linear(pixels, p.patch_embed);
  Tensor x = add(concat({p.cls_token, patches}, 0), p.positions);
  for (const auto& b : p.blocks) x = run_block(x, b, c.n_heads, nullptr, nullptr);
  ImageFeatures f;
  f.tokens = layer_norm(x, p.final_norm.gain, p.final_norm.bias);
  f.embedding = l2_normalize(linear(row(f.tokens, 0), p.projection));
  return f;
}

TextFeatures encode_text(std::span<const int> ids, const TextEncoderParams& p,
                         const EncoderConfig& c, const Tensor* image_tokens) {
  if (ids.empty()) throw ShapeMismatch("encode_text: empty id sequence");
  const std::size_t len = effective_length(ids);
  if (len > c.max_text_len) {
    throw ShapeMismatch("encode_text: " + std::to_string(len) + " ids exceed max_text_len " +
                        std::to_string(c.max_text_len));
  }
  if (image_tokens != nullptr && image_tokens->cols() != c.d_model) {
    throw ShapeMismatch("encode_text: image tokens have width " +
                        std::to_string(image_tokens->cols()));
  }
  const auto used = ids.subspan(0, len);
  Tensor x = add(embedding(p.token_embedding, used), slice(p.positions, 0, 0, len));

  std::optional<Tensor> mask;
  const bool has_pad = std::find(used.begin(), used.end(), kPadId) != used.end();
  if (has_pad) {
    std::vector<double> m(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < len; ++j)
        if (used[j] == kPadId) m[i * len + j] = kMaskValue;
    mask = Tensor::from_data({len, len}, std::move(m));
  }
  for (const auto& b : p.blocks) {
    x = run_block(x, b, c.n_heads, mask ? &*mask : nullptr, image_tokens);
  }
  TextFeatures f;
  f.tokens = layer_norm(x, p.final_norm.gain, p.final_norm.bias);
  if (c.pooling == Pooling::Cls) {
    f.pooled = row(f.tokens, 0);
  } else {
    std::vector<double> w(len, 0.0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < len; ++i) n += used[i] != kPadId;
    for (std::size_t i = 0; i < len; ++i)
      if (used[i] != kPadId) w[i] = 1.0 / static_cast<double>(n);
    f.pooled = reshape(matmul(Tensor::from_data({1, len}, std::move(w)), f.tokens), {c.d_model});
  }
  return f;
}

Tensor cross_attention(const Tensor& f1, const Tensor& f2, const Tensor& w1, const Tensor& w2,
                       Tensor* weights) {
  const Tensor a = as_matrix(f1);
  const Tensor b = as_matrix(f2);
  const std::size_t dk = a.cols();
  if (b.cols() != dk || w1.rank() != 2 || w2.rank() != 2 || w1.rows() != dk ||
      w2.rows() != dk || w1.cols() != w2.cols()) {
    throw ShapeMismatch("cross_attention: feature and transform dimensions disagree");
  }
  const Tensor q = matmul(a, w1);
  const Tensor kv = matmul(b, w2);
  const Tensor attn =
      softmax(scale(matmul(q, transpose(kv)), 1.0 / std::sqrt(static_cast<double>(dk))));
  if (weights != nullptr) *weights = attn;
  return matmul(attn, kv);
}

Tensor fuse_text_knowledge(const Tensor& f_cap, const Tensor& f_kwl, const FusionParams& p,
                           FusionMode mode) {
  if (mode != FusionMode::CrossAttention) {
    return l2_normalize(linear(f_cap, p.projection));
  }
  const std::vector<Tensor> first = {f_cap, f_kwl};
  const std::vector<Tensor> second = {f_kwl, f_cap};
  const Tensor fused = cross_attention(stack_rows(first), stack_rows(second), p.w1, p.w2);
  const Tensor flat = reshape(fused, {fused.numel()});
  return l2_normalize(linear(linear(flat, p.reduce), p.projection));
}

std::vector<int> join_caption_knowledge(std::span<const int> caption_ids,
                                        std::span<const int> knowledge_ids, std::size_t max_len) {
  std::vector<int> out;
  out.push_back(kClsId);
  const auto cap = inner_tokens(caption_ids);
  out.insert(out.end(), cap.begin(), cap.end());
  out.push_back(kSepId);
  const auto kn = inner_tokens(knowledge_ids);
  if (!kn.empty()) {
    out.insert(out.end(), kn.begin(), kn.end());
    out.push_back(kSepId);
  }
  if (out.size() > max_len) {
    out.resize(max_len);
    out.back() = kSepId;
  }
  return out;
}

Tensor encode_text_feature(std::span<const int> caption_ids, std::span<const int> knowledge_ids,
                           const TextEncoderParams& text, const FusionParams& fusion,
                           const EncoderConfig& c) {
  switch (c.fusion_mode) {
    case FusionMode::CrossAttention: {
      const Tensor f_cap = encode_text(caption_ids, text, c).pooled;
      const Tensor f_kwl = encode_text(knowledge_ids, text, c).pooled;
      return fuse_text_knowledge(f_cap, f_kwl, fusion, c.fusion_mode);
    }
    case FusionMode::ConcatOnly: {
      const auto joined = join_caption_knowledge(caption_ids, knowledge_ids, c.max_text_len);
      const Tensor pooled = encode_text(joined, text, c).pooled;
      return fuse_text_knowledge(pooled, pooled, fusion, c.fusion_mode);
    }
    case FusionMode::NoKnowledge: {
      const Tensor f_cap = encode_text(caption_ids, text, c).pooled;
      return fuse_text_knowledge(f_cap, f_cap, fusion, c.fusion_mode);
    }
  }
  throw InvalidArgument("unknown fusion mode");
}

Tensor encode_multimodal(std::span<const int> caption_ids, std::span<const int> knowledge_ids,
                         const Tensor& image_tokens, const TextEncoderParams& p,
                         const EncoderConfig& c) {
  if (image_tokens.rank() != 2) throw ShapeMismatch("encode_multimodal: image tokens must be a matrix");
  if (c.fusion_mode == FusionMode::NoKnowledge) {
    return encode_text(caption_ids, p, c, &image_tokens).pooled;
  }
  const auto joined = join_caption_knowledge(caption_ids, knowledge_ids, c.max_text_len);
  return encode_text(joined, p, c, &image_tokens).pooled;
}

Tensor match_head(const Tensor& f_multi, const Linear& head) {
  const Tensor x = as_matrix(f_multi);
  const Tensor logits = linear(x, head);
  return sigmoid(reshape(logits, {logits.rows()}));
}

void momentum_update(std::span<const Tensor> online, std::span<Tensor> copy, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("momentum coefficient must lie in [0, 1]");
  }
  if (online.size() != copy.size()) throw ShapeMismatch("momentum_update: list sizes differ");
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].shape() != copy[i].shape()) {
      throw ShapeMismatch("momentum_update: tensor " + std::to_string(i) + " shape differs");
    }
    const auto src = online[i].data();
    auto dst = copy[i].mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = lambda * dst[j] + (1.0 - lambda) * src[j];
    }
  }
}

void momentum_update(ModelParams& m, double lambda) {
  std::vector<Tensor> online, copy;
  visit_momentum_sources(m, [&](const std::string&, Tensor& t) { online.push_back(t); });
  visit_momentum(m, [&](const std::string&, Tensor& t) { copy.push_back(t); });
  momentum_update(online, copy, lambda);
}

}  // namespace ktir
