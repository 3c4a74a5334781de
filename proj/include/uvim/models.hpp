#pragma once

// The three networks: restricted oracle (label -> guiding code), base model
// (image + code -> dense output) and the image-conditioned code language model.

#include <memory>
#include <vector>

#include "uvim/params.hpp"
#include "uvim/tasks.hpp"
#include "uvim/transformer.hpp"
#include "uvim/vq.hpp"

namespace uvim {

struct ModelConfig {
  std::size_t width = 128;
  std::size_t num_heads = 4;
  std::size_t mlp_dim = 512;
  std::size_t patch_size = 8;
  std::size_t input_size = 64;
  std::size_t f_depth = 6;
  std::size_t oracle_depth = 3;
  std::size_t lm_enc_depth = 6;
  std::size_t lm_dec_depth = 4;

  std::size_t code_len = 16;      // n, a perfect square
  std::size_t dict_size = 64;     // N
  std::size_t codeword_dim = 64;  // d
  double dict_momentum = 0.995;
  std::size_t usage_window = 100;
  double codebook_init_std = 1.0;
  bool oracle_image_context = true;

  // Ablation switches.
  bool no_oracle = false;           // f sees only the image
  bool no_image = false;            // f sees only the code
  bool non_autoregressive = false;  // LM predicts all positions in one pass

  void validate() const;
  TransformerConfig transformer(std::size_t depth) const;
  std::size_t code_side() const;
};

// Label tokens (plus optional image tokens) -> encoder -> d-dim projection ->
// spatial resize to n -> quantize against the owned codebook.
class OracleModel {
 public:
  OracleModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng);
  OracleModel(const OracleModel&) = delete;
  OracleModel& operator=(const OracleModel&) = delete;

  struct Output {
    GuidingCode code;  // [B * n]
    Tensor z_q;        // [B, n, d], straight-through to z_e
    Tensor z_e;        // [B, n, d]
  };
  // labels: [B, H, W, label_channels]; images may be undefined when the
  // image-context pathway is off.
  Output encode(const Tensor& labels, const Tensor& images) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }
  bool uses_image() const { return image_embed_ != nullptr; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::unique_ptr<PatchEmbedding> label_embed_, image_embed_;
  std::unique_ptr<Encoder> encoder_;
  Linear out_proj_;
  Codebook codebook_;
};

// Image tokens and embedded code tokens share one encoder; the dense output is
// decoded from the image-token positions.
class BaseModel {
 public:
  BaseModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng);
  BaseModel(const BaseModel&) = delete;
  BaseModel& operator=(const BaseModel&) = delete;

  // images: [B, H, W, C]; z_q: [B, n, d] (ignored under no_oracle).
  // Returns logits [B, H, W, output_channels].
  Tensor forward(const Tensor& images, const Tensor& z_q) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  const TaskConfig& task() const { return task_; }

 private:
  ModelConfig cfg_;
  TaskConfig task_;
  ParameterSet params_;
  std::unique_ptr<PatchEmbedding> image_embed_;
  Linear code_proj_;
  Tensor code_pos_;
  std::unique_ptr<Encoder> encoder_;
  Linear head_;
};

// LM_enc encodes the image; LM_dec predicts the code with index N as BOS.
class LanguageModel {
 public:
  LanguageModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng);
  LanguageModel(const LanguageModel&) = delete;
  LanguageModel& operator=(const LanguageModel&) = delete;

  std::size_t vocab_size() const { return cfg_.dict_size + 1; }
  int bos() const { return static_cast<int>(cfg_.dict_size); }

  // [B, g*g, width] cross-attention memory.
  Tensor encode_image(const Tensor& images) const;
  // Teacher-forced logits [B, n, N+1] for codes [B * n]. In the
  // non-autoregressive variant the codes are not consumed.
  Tensor sequence_logits(const Tensor& memory, std::span<const int> codes) const;
  // Next-position logits [B, N+1] given equal-length prefixes [B * len], len < n.
  Tensor next_logits(const Tensor& memory, std::span<const int> prefixes, std::size_t len) const;
  // Mean NLL in nats over all n positions, restricted to the N real symbols.
  Tensor loss(const Tensor& memory, std::span<const int> codes) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  ParameterSet params_;
  std::unique_ptr<PatchEmbedding> image_embed_;
  std::unique_ptr<Encoder> encoder_;
  Tensor token_embed_;  // [N+1, width]
  Tensor token_pos_;    // [n, width]
  std::unique_ptr<Decoder> decoder_;
  Linear head_;

  Tensor decode(const Tensor& memory, std::span<const int> tokens, std::size_t batch, std::size_t len) const;
};

// First N of N+1 logits along the last axis.
Tensor real_symbol_logits(const Tensor& logits, std::size_t dict_size);

}  // namespace uvim
