#pragma once

// Test-time composition f(x, LM(x)), temperature sampling and code-masking probes.

#include <string>
#include <vector>

#include "uvim/models.hpp"

namespace uvim {

struct SamplingParams {
  double temperature = 0.0;  // 0 selects the per-step argmax
  std::uint64_t seed = 0;
  std::size_t num_samples = 1;

  void validate() const;
};

// Distribution a sampler at this temperature draws from, over the given
// logits. T = 0 is one-hot on the argmax (lowest index on ties).
std::vector<double> symbol_distribution(std::span<const float> logits, double temperature);
int sample_symbol(std::span<const float> logits, double temperature, Rng& rng);

// Left-to-right sampling of n symbols per image. Returns codes [B * n].
GuidingCode sample_code(const LanguageModel& lm, const Tensor& images, double temperature, Rng& rng);
// num_samples independent draws, sample s using stream derive_seed(seed, s).
std::vector<GuidingCode> sample_codes(const LanguageModel& lm, const Tensor& images, const SamplingParams& params);

// Codebook rows for codes [B * n] as [B, n, d].
Tensor code_embeddings(const Codebook& book, std::span<const int> code, std::size_t batch);

// Per-example task decoding of logits [B, H, W, C].
std::vector<TaskLabel> decode_batch(const TaskConfig& task, const Tensor& logits);

// Runs f on explicit code embeddings or indices. An undefined z_q is only valid
// for the no_oracle ablation.
std::vector<TaskLabel> decode_with_embeddings(const BaseModel& f, const Tensor& images, const Tensor& z_q);
std::vector<TaskLabel> decode_with_code(const BaseModel& f, const Codebook& book, const Tensor& images,
                                        std::span<const int> code);

// Rejects a base model, codebook and language model whose (n, N, d) or image
// geometry disagree, naming every mismatched field.
void check_compatible(const ModelConfig& stage1, const Codebook& book, const ModelConfig& stage2);

// f(x, LM(x)): samples a code, looks it up and decodes with task post-processing.
std::vector<TaskLabel> predict(const BaseModel& f, const Codebook& book, const LanguageModel& lm, const Tensor& images,
                               double temperature, Rng& rng);

enum class MaskMode { zero_embedding, random_codeword, constant_codeword };
MaskMode parse_mask_mode(const std::string& name);
std::string mask_mode_name(MaskMode mode);

// Rectangle on the sqrt(n) x sqrt(n) code grid.
struct MaskProbeSpec {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  MaskMode mode = MaskMode::zero_embedding;
  int constant_index = 0;

  void validate(std::size_t side, std::size_t dict_size) const;
  bool contains(std::size_t row, std::size_t col) const;
};

// Applies the mask to codes [B * n] and decodes through f. Random codewords are
// drawn uniformly from [0, N).
std::vector<TaskLabel> probe_masked_code(const BaseModel& f, const Codebook& book, const Tensor& images,
                                         std::span<const int> code, const MaskProbeSpec& spec, Rng& rng);

// Pixels of an H x W output covered by the masked code cells.
std::vector<std::uint8_t> probe_pixel_region(const MaskProbeSpec& spec, std::size_t side, std::size_t height,
                                             std::size_t width);

}  // namespace uvim
