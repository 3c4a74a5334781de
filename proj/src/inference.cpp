#include "uvim/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uvim {

void SamplingParams::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("sampling: temperature must be finite and >= 0, got " + std::to_string(temperature));
  }
  if (num_samples == 0) throw std::invalid_argument("sampling: num_samples must be positive");
}

std::vector<double> symbol_distribution(std::span<const float> logits, double temperature) {
  SamplingParams{.temperature = temperature}.validate();
  if (logits.empty()) throw std::invalid_argument("symbol_distribution: empty logits");
  std::vector<double> p(logits.size(), 0.0);
  const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (temperature == 0.0) {
    p[best] = 1.0;
    return p;
  }
  const double top = logits[best] / temperature;
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

int sample_symbol(std::span<const float> logits, double temperature, Rng& rng) {
  const auto p = symbol_distribution(logits, temperature);
  if (temperature == 0.0) return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cumulative = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last = i;
    cumulative += p[i];
    if (u < cumulative) return static_cast<int>(i);
  }
  return static_cast<int>(last);
}

GuidingCode sample_code(const LanguageModel& lm, const Tensor& images, double temperature, Rng& rng) {
  SamplingParams{.temperature = temperature}.validate();
  NoRecordScope<float> no_record;
  const Tensor memory = lm.encode_image(images);
  const std::size_t b = memory.dim(0), n = lm.config().code_len, N = lm.config().dict_size, V = lm.vocab_size();
  GuidingCode code(b * n);
  std::vector<int> prefixes;
  for (std::size_t k = 0; k < n; ++k) {
    prefixes.resize(b * k);
    for (std::size_t e = 0; e < b; ++e)
      for (std::size_t j = 0; j < k; ++j) prefixes[e * k + j] = code[e * n + j];
    const Tensor logits = lm.next_logits(memory, prefixes, k);
    // The BOS logit (index N) is dropped so it can never be emitted.
    for (std::size_t e = 0; e < b; ++e) {
      code[e * n + k] = sample_symbol(logits.data().subspan(e * V, N), temperature, rng);
    }
  }
  return code;
}

std::vector<GuidingCode> sample_codes(const LanguageModel& lm, const Tensor& images, const SamplingParams& params) {
  params.validate();
  std::vector<GuidingCode> out;
  for (std::size_t s = 0; s < params.num_samples; ++s) {
    Rng rng(derive_seed(params.seed, 0, s));
    out.push_back(sample_code(lm, images, params.temperature, rng));
  }
  return out;
}

Tensor code_embeddings(const Codebook& book, std::span<const int> code, std::size_t batch) {
  if (batch == 0 || code.size() % batch != 0) {
    throw ShapeError("code_embeddings: " + std::to_string(code.size()) + " codes do not split into " +
                     std::to_string(batch) + " examples");
  }
  return reshape(book.lookup(code), {batch, code.size() / batch, book.dim()});
}

std::vector<TaskLabel> decode_batch(const TaskConfig& task, const Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("decode_batch: expected [B, H, W, C], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), h = logits.dim(1), w = logits.dim(2), c = logits.dim(3);
  std::vector<TaskLabel> out;
  out.reserve(b);
  for (std::size_t e = 0; e < b; ++e) out.push_back(decode_output(task, reshape(slice(logits, 0, e, 1), {h, w, c})));
  return out;
}

std::vector<TaskLabel> decode_with_embeddings(const BaseModel& f, const Tensor& images, const Tensor& z_q) {
  NoRecordScope<float> no_record;
  return decode_batch(f.task(), f.forward(images, z_q));
}

std::vector<TaskLabel> decode_with_code(const BaseModel& f, const Codebook& book, const Tensor& images,
                                        std::span<const int> code) {
  return decode_with_embeddings(f, images, code_embeddings(book, code, images.dim(0)));
}

void check_compatible(const ModelConfig& stage1, const Codebook& book, const ModelConfig& stage2) {
  std::string diff;
  auto field = [&](const char* name, std::size_t a, std::size_t b) {
    if (a != b) diff += std::string("\n  ") + name + ": stage1=" + std::to_string(a) + " stage2=" + std::to_string(b);
  };
  field("model.code_len", stage1.code_len, stage2.code_len);
  field("model.dict_size", stage1.dict_size, stage2.dict_size);
  field("model.codeword_dim", stage1.codeword_dim, stage2.codeword_dim);
  field("model.input_size", stage1.input_size, stage2.input_size);
  field("codebook.size", book.size(), stage2.dict_size);
  field("codebook.dim", book.dim(), stage2.codeword_dim);
  if (!diff.empty()) throw std::invalid_argument("incompatible stage-1 and stage-2 models:" + diff);
}

std::vector<TaskLabel> predict(const BaseModel& f, const Codebook& book, const LanguageModel& lm, const Tensor& images,
                               double temperature, Rng& rng) {
  if (f.config().no_oracle) return decode_with_embeddings(f, images, Tensor{});
  check_compatible(f.config(), book, lm.config());
  return decode_with_code(f, book, images, sample_code(lm, images, temperature, rng));
}

MaskMode parse_mask_mode(const std::string& name) {
  if (name == "zero_embedding") return MaskMode::zero_embedding;
  if (name == "random_codeword") return MaskMode::random_codeword;
  if (name == "constant_codeword") return MaskMode::constant_codeword;
  throw std::invalid_argument("unknown mask mode '" + name +
                              "' (expected zero_embedding, random_codeword or constant_codeword)");
}

std::string mask_mode_name(MaskMode mode) {
  switch (mode) {
    case MaskMode::zero_embedding: return "zero_embedding";
    case MaskMode::random_codeword: return "random_codeword";
    case MaskMode::constant_codeword: return "constant_codeword";
  }
  throw std::invalid_argument("invalid mask mode");
}

void MaskProbeSpec::validate(std::size_t side, std::size_t dict_size) const {
  if (top + height > side || left + width > side) {
    throw std::out_of_range("mask probe: region rows [" + std::to_string(top) + ", " + std::to_string(top + height) +
                            ") cols [" + std::to_string(left) + ", " + std::to_string(left + width) +
                            ") exceeds the " + std::to_string(side) + "x" + std::to_string(side) + " code grid");
  }
  if (mode == MaskMode::constant_codeword && (constant_index < 0 || static_cast<std::size_t>(constant_index) >= dict_size)) {
    throw std::out_of_range("mask probe: constant index " + std::to_string(constant_index) + " outside [0, " +
                            std::to_string(dict_size) + ")");
  }
}

bool MaskProbeSpec::contains(std::size_t row, std::size_t col) const {
  return row >= top && row < top + height && col >= left && col < left + width;
}

std::vector<TaskLabel> probe_masked_code(const BaseModel& f, const Codebook& book, const Tensor& images,
                                         std::span<const int> code, const MaskProbeSpec& spec, Rng& rng) {
  const std::size_t n = f.config().code_len, side = f.config().code_side(), b = images.dim(0);
  spec.validate(side, book.size());
  if (code.size() != b * n) throw ShapeError("mask probe: expected " + std::to_string(b * n) + " code symbols");
  GuidingCode masked(code.begin(), code.end());
  std::vector<float> keep(n, 1.0f);
  std::uniform_int_distribution<int> any(0, static_cast<int>(book.size()) - 1);
  for (std::size_t e = 0; e < b; ++e) {
    for (std::size_t p = 0; p < n; ++p) {
      if (!spec.contains(p / side, p % side)) continue;
      keep[p] = 0.0f;
      if (spec.mode == MaskMode::random_codeword) masked[e * n + p] = any(rng);
      if (spec.mode == MaskMode::constant_codeword) masked[e * n + p] = spec.constant_index;
    }
  }
  Tensor z_q = code_embeddings(book, masked, b);
  if (spec.mode == MaskMode::zero_embedding) z_q = apply_code_mask(z_q, keep);
  return decode_with_embeddings(f, images, z_q);
}

std::vector<std::uint8_t> probe_pixel_region(const MaskProbeSpec& spec, std::size_t side, std::size_t height,
                                             std::size_t width) {
  std::vector<std::uint8_t> region(height * width, 0);
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) region[r * width + c] = spec.contains(r * side / height, c * side / width);
  return region;
}

}  // namespace uvim
