#include "uvim/models.hpp"

#include <cmath>
#include <stdexcept>

namespace uvim {

void ModelConfig::validate() const {
  transformer(1).validate();
  const std::size_t side = code_side();
  if (side * side != code_len || code_len == 0) {
    throw std::invalid_argument("model.code_len = " + std::to_string(code_len) + " is not a perfect square");
  }
  if (dict_size < 2) throw std::invalid_argument("model.dict_size must be at least 2");
  if (codeword_dim == 0) throw std::invalid_argument("model.codeword_dim must be positive");
  if (!(dict_momentum > 0.0 && dict_momentum < 1.0)) throw std::invalid_argument("model.dict_momentum must be in (0, 1)");
  if (no_oracle && no_image) throw std::invalid_argument("no_oracle and no_image together leave f without input");
}

TransformerConfig ModelConfig::transformer(std::size_t depth) const {
  return {width, depth, num_heads, mlp_dim, patch_size, input_size};
}

std::size_t ModelConfig::code_side() const {
  return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(code_len))));
}

OracleModel::OracleModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const TransformerConfig tc = cfg.transformer(cfg.oracle_depth);
  label_embed_ = std::make_unique<PatchEmbedding>(params_, "oracle/label_embed", tc, task.label_channels(), rng);
  if (cfg.oracle_image_context) {
    image_embed_ = std::make_unique<PatchEmbedding>(params_, "oracle/image_embed", tc, task.input_channels(), rng);
  }
  encoder_ = std::make_unique<Encoder>(params_, "oracle/encoder", tc, rng);
  out_proj_ = Linear::create(params_, "oracle/to_code", cfg.width, cfg.codeword_dim, rng);
  codebook_ = Codebook(cfg.dict_size, cfg.codeword_dim, cfg.dict_momentum, cfg.usage_window, rng,
                       cfg.codebook_init_std);
}

OracleModel::Output OracleModel::encode(const Tensor& labels, const Tensor& images) const {
  Tensor tokens = (*label_embed_)(labels);
  const std::size_t b = tokens.dim(0), l = tokens.dim(1), g = cfg_.input_size / cfg_.patch_size;
  if (image_embed_) {
    if (!images.defined() || images.dim(0) != b) {
      throw ShapeError("oracle: image context is enabled but no matching image batch was given");
    }
    tokens = concat<float>({tokens, (*image_embed_)(images)}, 1);
  }
  Tensor h = slice((*encoder_)(tokens), 1, 0, l);
  Tensor grid = reshape(out_proj_(h), {b, g, g, cfg_.codeword_dim});
  Tensor z_e = resize_code_grid(grid, cfg_.code_len);
  Quantized q = quantize(z_e, codebook_);
  return {std::move(q.code), q.z_q, z_e};
}

BaseModel::BaseModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng) : cfg_(cfg), task_(task) {
  cfg.validate();
  const TransformerConfig tc = cfg.transformer(cfg.f_depth);
  image_embed_ = std::make_unique<PatchEmbedding>(params_, "f/image_embed", tc, task.input_channels(), rng);
  if (!cfg.no_oracle) {
    code_proj_ = Linear::create(params_, "f/code_embed", cfg.codeword_dim, cfg.width, rng);
    // Code cells share the image tokens' coordinate frame.
    const double stride = static_cast<double>(tc.grid()) / static_cast<double>(cfg.code_side());
    code_pos_ = params_.add("f/code_pos_embedding", init::sincos_2d(cfg.code_side(), cfg.width, stride));
  }
  encoder_ = std::make_unique<Encoder>(params_, "f/encoder", tc, rng);
  head_ = Linear::create_zero(params_, "f/head", cfg.width, cfg.patch_size * cfg.patch_size * task.output_channels());
}

Tensor BaseModel::forward(const Tensor& images, const Tensor& z_q) const {
  const std::size_t b = images.dim(0), g = cfg_.input_size / cfg_.patch_size, gg = g * g;
  Tensor img = cfg_.no_image ? add(Tensor::zeros({b, gg, cfg_.width}), image_embed_->positions())
                             : (*image_embed_)(images);
  Tensor tokens = img;
  if (!cfg_.no_oracle) {
    if (!z_q.defined() || z_q.rank() != 3 || z_q.dim(0) != b || z_q.dim(1) != cfg_.code_len ||
        z_q.dim(2) != cfg_.codeword_dim) {
      throw ShapeError("base model: expected code embeddings [" + std::to_string(b) + "x" +
                       std::to_string(cfg_.code_len) + "x" + std::to_string(cfg_.codeword_dim) + "], got " +
                       (z_q.defined() ? shape_str(z_q.shape()) : std::string("none")));
    }
    tokens = concat<float>({img, add(code_proj_(z_q), code_pos_)}, 1);
  }
  Tensor h = slice((*encoder_)(tokens), 1, 0, gg);
  return assemble_patches(head_(h), g, cfg_.patch_size, task_.output_channels());
}

LanguageModel::LanguageModel(const ModelConfig& cfg, const TaskConfig& task, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  const TransformerConfig enc = cfg.transformer(cfg.lm_enc_depth), dec = cfg.transformer(cfg.lm_dec_depth);
  image_embed_ = std::make_unique<PatchEmbedding>(params_, "lm/image_embed", enc, task.input_channels(), rng);
  encoder_ = std::make_unique<Encoder>(params_, "lm/encoder", enc, rng);
  token_embed_ = params_.add("lm/token_embed", init::normal(rng, {vocab_size(), cfg.width}, 0.02));
  token_pos_ = params_.add("lm/token_pos_embedding", init::normal(rng, {cfg.code_len, cfg.width}, 0.02));
  decoder_ = std::make_unique<Decoder>(params_, "lm/decoder", dec, rng);
  head_ = Linear::create_zero(params_, "lm/head", cfg.width, vocab_size());
}

Tensor LanguageModel::encode_image(const Tensor& images) const { return (*encoder_)((*image_embed_)(images)); }

Tensor LanguageModel::decode(const Tensor& memory, std::span<const int> tokens, std::size_t batch,
                             std::size_t len) const {
  Tensor emb = reshape(gather_rows(token_embed_, tokens), {batch, len, cfg_.width});
  emb = add(emb, slice(token_pos_, 0, 0, len));
  return head_((*decoder_)(emb, memory, !cfg_.non_autoregressive));
}

Tensor LanguageModel::sequence_logits(const Tensor& memory, std::span<const int> codes) const {
  const std::size_t b = memory.dim(0), n = cfg_.code_len;
  if (codes.size() != b * n) {
    throw ShapeError("LM: expected " + std::to_string(b * n) + " code symbols, got " + std::to_string(codes.size()));
  }
  std::vector<int> inputs(b * n, bos());
  for (std::size_t i = 0; i < b * n; ++i) {
    if (codes[i] < 0 || static_cast<std::size_t>(codes[i]) >= cfg_.dict_size) {
      throw std::out_of_range("LM: code index " + std::to_string(codes[i]) + " outside [0, " +
                              std::to_string(cfg_.dict_size) + ")");
    }
  }
  if (!cfg_.non_autoregressive) {
    for (std::size_t e = 0; e < b; ++e)
      for (std::size_t k = 1; k < n; ++k) inputs[e * n + k] = codes[e * n + k - 1];
  }
  return decode(memory, inputs, b, n);
}

Tensor LanguageModel::next_logits(const Tensor& memory, std::span<const int> prefixes, std::size_t len) const {
  const std::size_t b = memory.dim(0), n = cfg_.code_len;
  if (len >= n) throw std::invalid_argument("LM: prefix length " + std::to_string(len) + " must be below " + std::to_string(n));
  if (prefixes.size() != b * len) throw ShapeError("LM: prefix batch size mismatch");
  if (cfg_.non_autoregressive) {
    const std::vector<int> inputs(b * n, bos());
    return reshape(slice(decode(memory, inputs, b, n), 1, len, 1), {b, vocab_size()});
  }
  std::vector<int> inputs(b * (len + 1), bos());
  for (std::size_t e = 0; e < b; ++e)
    for (std::size_t k = 0; k < len; ++k) inputs[e * (len + 1) + k + 1] = prefixes[e * len + k];
  return reshape(slice(decode(memory, inputs, b, len + 1), 1, len, 1), {b, vocab_size()});
}

Tensor LanguageModel::loss(const Tensor& memory, std::span<const int> codes) const {
  Tensor logits = real_symbol_logits(sequence_logits(memory, codes), cfg_.dict_size);
  return softmax_cross_entropy(reshape(logits, {codes.size(), cfg_.dict_size}), codes);
}

Tensor real_symbol_logits(const Tensor& logits, std::size_t dict_size) {
  return slice(logits, static_cast<int>(logits.rank()) - 1, 0, dict_size);
}

}  // namespace uvim
