#pragma once

// Plain ViT building blocks: patch embedding, pre-norm encoder blocks and a
// causally masked decoder with cross-attention. Activations are [B, L, width].

#include <optional>
#include <string>
#include <vector>

#include "uvim/params.hpp"
#include "uvim/tensor.hpp"

namespace uvim {

struct TransformerConfig {
  std::size_t width = 128;
  std::size_t depth = 6;
  std::size_t num_heads = 4;
  std::size_t mlp_dim = 512;
  std::size_t patch_size = 8;
  std::size_t input_size = 64;

  void validate() const;
  // Token grid edge: input_size / patch_size.
  std::size_t grid() const { return input_size / patch_size; }
};

// [B, L, width] token activations. Image sequences have L = grid()^2, code
// sequences have L = code length.
using TokenSequence = Tensor;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear create(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double bias_std = 0.0);
  // Zero-initialized kernel and bias.
  static Linear create_zero(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParameterSet& params, const std::string& name, std::size_t width);
  Tensor operator()(const Tensor& x) const;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention(ParameterSet& params, const std::string& name, std::size_t width, std::size_t heads, Rng& rng);
  // query: [B, Lq, W]; context: [B, Lk, W]; additive mask [Lq, Lk] or undefined.
  Tensor operator()(const Tensor& query, const Tensor& context, const Tensor& mask = {}) const;

 private:
  std::size_t width_, heads_;
  Linear q_, k_, v_, o_;
};

struct Mlp {
  Linear fc1, fc2;
  static Mlp create(ParameterSet& params, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

class EncoderBlock {
 public:
  EncoderBlock(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& mask = {}) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  Mlp mlp_;
};

// Stack of encoder blocks followed by a final layer norm. With depth 0 the
// stack (including the final norm) is the identity.
class Encoder {
 public:
  Encoder(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng);
  TokenSequence operator()(const TokenSequence& x, const Tensor& mask = {}) const;
  std::size_t depth() const { return blocks_.size(); }

 private:
  std::vector<EncoderBlock> blocks_;
  std::optional<LayerNorm> final_norm_;
};

class DecoderBlock {
 public:
  DecoderBlock(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& memory, const Tensor& self_mask) const;

 private:
  LayerNorm ln1_, ln2_, ln3_;
  MultiHeadAttention self_attn_, cross_attn_;
  Mlp mlp_;
};

class Decoder {
 public:
  Decoder(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, Rng& rng);
  // Target position i attends to positions j <= i when causal is set.
  TokenSequence operator()(const TokenSequence& target, const TokenSequence& memory, bool causal = true) const;
  std::size_t depth() const { return blocks_.size(); }

 private:
  std::vector<DecoderBlock> blocks_;
  std::optional<LayerNorm> final_norm_;
};

// [L, L] additive mask: 0 on and below the diagonal, -inf above.
Tensor causal_mask(std::size_t length);

// [B, H, W, C] -> [B, (H/p)*(W/p), p*p*C] in raster patch order; pure layout.
Tensor extract_patches(const Tensor& images, std::size_t patch);
// Inverse of extract_patches for per-patch pixel blocks [B, g*g, p*p*C].
Tensor assemble_patches(const Tensor& patches, std::size_t grid, std::size_t patch, std::size_t channels);

// Linear patch projection plus learned positional embeddings.
class PatchEmbedding {
 public:
  PatchEmbedding(ParameterSet& params, const std::string& name, const TransformerConfig& cfg, std::size_t channels,
                 Rng& rng);
  // images: [B, H, W, C] or [H, W, C] with H = W = input_size.
  TokenSequence operator()(const Tensor& images) const;
  // Projection only, without positional embeddings.
  Tensor project(const Tensor& images) const;
  const Tensor& positions() const { return posemb_; }

 private:
  TransformerConfig cfg_;
  std::size_t channels_;
  Linear proj_;
  Tensor posemb_;  // [g*g, width]
};

// Closed-form scalar parameter counts.
std::size_t encoder_parameter_count(const TransformerConfig& cfg);
std::size_t decoder_parameter_count(const TransformerConfig& cfg);
std::size_t patch_embedding_parameter_count(const TransformerConfig& cfg, std::size_t channels);

}  // namespace uvim
