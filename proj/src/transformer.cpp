#include "uvim/transformer.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace uvim {

void TransformerConfig::validate() const {
  if (width == 0 || num_heads == 0 || width % num_heads != 0) {
    throw std::invalid_argument("TransformerConfig: width " + std::to_string(width) + " not divisible by num_heads " +
                                std::to_string(num_heads));
  }
  if (patch_size == 0 || input_size == 0 || input_size % patch_size != 0) {
    throw std::invalid_argument("TransformerConfig: input_size " + std::to_string(input_size) +
                                " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (mlp_dim == 0) throw std::invalid_argument("TransformerConfig: mlp_dim must be positive");
}

Linear Linear::create(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      double bias_std) {
  Linear l;
  l.weight = params.add(name + "/kernel", init::xavier_uniform(rng, in, out));
  l.bias = params.add(name + "/bias", bias_std > 0 ? init::normal(rng, {out}, bias_std) : Tensor::zeros({out}));
  return l;
}

Linear Linear::create_zero(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out) {
  Linear l;
  l.weight = params.add(name + "/kernel", Tensor::zeros({in, out}));
  l.bias = params.add(name + "/bias", Tensor::zeros({out}));
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

LayerNorm LayerNorm::create(ParameterSet& params, const std::string& name, std::size_t width) {
  LayerNorm ln;
  ln.gain = params.add(name + "/scale", Tensor::full({width}, 1.0f));
  ln.bias = params.add(name + "/bias", Tensor::zeros({width}));
  return ln;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

MultiHeadAttention::MultiHeadAttention(ParameterSet& params, const std::string& name, std::size_t width,
                                       std::size_t heads, Rng& rng)
    : width_(width),
      heads_(heads),
      q_(Linear::create(params, name + "/query", width, width, rng)),
      k_(Linear::create(params, name + "/key", width, width, rng)),
      v_(Linear::create(params, name + "/value", width, width, rng)),
      o_(Linear::create(params, name + "/out", width, width, rng)) {}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& context, const Tensor& mask) const {
  const std::size_t b = query.dim(0), lq = query.dim(1), lk = context.dim(1), dh = width_ / heads_;
  if (context.dim(0) != b || lk == 0) {
    throw ShapeError("attention: context " + shape_str(context.shape()) + " incompatible with query " +
                     shape_str(query.shape()));
  }
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = permute(reshape(scale(q_(query), inv_sqrt), {b, lq, heads_, dh}), {0, 2, 1, 3});
  Tensor kt = permute(reshape(k_(context), {b, lk, heads_, dh}), {0, 2, 3, 1});
  Tensor v = permute(reshape(v_(context), {b, lk, heads_, dh}), {0, 2, 1, 3});
  Tensor scores = matmul(q, kt);  // [B, H, Lq, Lk]
  if (mask.defined()) scores = add(scores, mask);
  Tensor ctx = matmul(softmax(scores, -1), v);  // [B, H, Lq, dh]
  return o_(reshape(permute(ctx, {0, 2, 1, 3}), {b, lq, width_}));
}

Mlp Mlp::create(ParameterSet& params, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng) {
  return Mlp{Linear::create(params, name + "/fc1", width, hidden, rng, 1e-6),
             Linear::create(params, name + "/fc2", hidden, width, rng, 1e-6)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

EncoderBlock::EncoderBlock(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng)
    : ln1_(LayerNorm::create(params, name + "/ln1", cfg.width)),
      ln2_(LayerNorm::create(params, name + "/ln2", cfg.width)),
      attn_(params, name + "/attn", cfg.width, cfg.num_heads, rng),
      mlp_(Mlp::create(params, name + "/mlp", cfg.width, cfg.mlp_dim, rng)) {}

Tensor EncoderBlock::operator()(const Tensor& x, const Tensor& mask) const {
  Tensor h = ln1_(x);
  Tensor y = add(x, attn_(h, h, mask));
  return add(y, mlp_(ln2_(y)));
}

Encoder::Encoder(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    blocks_.emplace_back(params, name + "/block" + std::to_string(i), cfg, rng);
  }
  if (cfg.depth > 0) final_norm_ = LayerNorm::create(params, name + "/ln_final", cfg.width);
}

TokenSequence Encoder::operator()(const TokenSequence& x, const Tensor& mask) const {
  if (x.rank() != 3) throw ShapeError("encoder: expected [B, L, W], got " + shape_str(x.shape()));
  Tensor h = x;
  for (const auto& block : blocks_) h = block(h, mask);
  return final_norm_ ? (*final_norm_)(h) : h;
}

DecoderBlock::DecoderBlock(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng)
    : ln1_(LayerNorm::create(params, name + "/ln1", cfg.width)),
      ln2_(LayerNorm::create(params, name + "/ln2", cfg.width)),
      ln3_(LayerNorm::create(params, name + "/ln3", cfg.width)),
      self_attn_(params, name + "/self_attn", cfg.width, cfg.num_heads, rng),
      cross_attn_(params, name + "/cross_attn", cfg.width, cfg.num_heads, rng),
      mlp_(Mlp::create(params, name + "/mlp", cfg.width, cfg.mlp_dim, rng)) {}

Tensor DecoderBlock::operator()(const Tensor& x, const Tensor& memory, const Tensor& self_mask) const {
  Tensor h = ln1_(x);
  Tensor y = add(x, self_attn_(h, h, self_mask));
  y = add(y, cross_attn_(ln2_(y), memory));
  return add(y, mlp_(ln3_(y)));
}

Decoder::Decoder(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    blocks_.emplace_back(params, name + "/block" + std::to_string(i), cfg, rng);
  }
  if (cfg.depth > 0) final_norm_ = LayerNorm::create(params, name + "/ln_final", cfg.width);
}

TokenSequence Decoder::operator()(const TokenSequence& target, const TokenSequence& memory, bool causal) const {
  if (target.rank() != 3 || memory.rank() != 3) {
    throw ShapeError("decoder: expected [B, L, W] target and memory, got " + shape_str(target.shape()) + " and " +
                     shape_str(memory.shape()));
  }
  if (memory.dim(1) < 1) throw ShapeError("decoder: memory must hold at least one token");
  const Tensor mask = causal ? causal_mask(target.dim(1)) : Tensor{};
  Tensor h = target;
  for (const auto& block : blocks_) h = block(h, memory, mask);
  return final_norm_ ? (*final_norm_)(h) : h;
}

Tensor causal_mask(std::size_t length) {
  std::vector<float> m(length * length, 0.0f);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = i + 1; j < length; ++j) m[i * length + j] = -std::numeric_limits<float>::infinity();
  }
  return Tensor({length, length}, std::move(m));
}

Tensor extract_patches(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4) throw ShapeError("extract_patches: expected [B, H, W, C], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("extract_patches: " + shape_str(images.shape()) + " not divisible into " +
                     std::to_string(patch) + "-pixel patches");
  }
  const std::size_t gh = h / patch, gw = w / patch;
  Tensor t = reshape(images, {b, gh, patch, gw, patch, c});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {b, gh * gw, patch * patch * c});
}

Tensor assemble_patches(const Tensor& patches, std::size_t grid, std::size_t patch, std::size_t channels) {
  const std::size_t b = patches.dim(0);
  if (patches.rank() != 3 || patches.dim(1) != grid * grid || patches.dim(2) != patch * patch * channels) {
    throw ShapeError("assemble_patches: unexpected shape " + shape_str(patches.shape()));
  }
  Tensor t = reshape(patches, {b, grid, grid, patch, patch, channels});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {b, grid * patch, grid * patch, channels});
}

PatchEmbedding::PatchEmbedding(ParameterSet& params, const std::string& name, const TransformerConfig& cfg,
                               std::size_t channels, Rng& rng)
    : cfg_(cfg),
      channels_(channels),
      proj_(Linear::create(params, name + "/embedding", cfg.patch_size * cfg.patch_size * channels, cfg.width, rng)),
      posemb_(params.add(name + "/pos_embedding", init::sincos_2d(cfg.grid(), cfg.width))) {
  cfg.validate();
}

Tensor PatchEmbedding::project(const Tensor& images) const {
  Tensor x = images.rank() == 3 ? reshape(images, {1, images.dim(0), images.dim(1), images.dim(2)}) : images;
  if (x.rank() != 4 || x.dim(1) != cfg_.input_size || x.dim(2) != cfg_.input_size || x.dim(3) != channels_) {
    throw ShapeError("patchify: expected " + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                     "x" + std::to_string(channels_) + " images, got " + shape_str(images.shape()));
  }
  return proj_(extract_patches(x, cfg_.patch_size));
}

TokenSequence PatchEmbedding::operator()(const Tensor& images) const { return add(project(images), posemb_); }

std::size_t encoder_parameter_count(const TransformerConfig& cfg) {
  const std::size_t w = cfg.width, m = cfg.mlp_dim;
  const std::size_t block = 2 * (2 * w) + 4 * (w * w + w) + (w * m + m) + (m * w + w);
  return cfg.depth * block + (cfg.depth > 0 ? 2 * w : 0);
}

std::size_t decoder_parameter_count(const TransformerConfig& cfg) {
  const std::size_t w = cfg.width, m = cfg.mlp_dim;
  const std::size_t block = 3 * (2 * w) + 8 * (w * w + w) + (w * m + m) + (m * w + w);
  return cfg.depth * block + (cfg.depth > 0 ? 2 * w : 0);
}

std::size_t patch_embedding_parameter_count(const TransformerConfig& cfg, std::size_t channels) {
  const std::size_t in = cfg.patch_size * cfg.patch_size * channels;
  return in * cfg.width + cfg.width + cfg.grid() * cfg.grid() * cfg.width;
}

}  // namespace uvim
