#pragma once

// Vector-quantization bottleneck: nearest-entry lookup with straight-through
// gradients, an EMA-learned codebook, and dead-entry respawning.

#include <cstdint>
#include <span>
#include <vector>

#include "uvim/params.hpp"
#include "uvim/tensor.hpp"

namespace uvim {

using GuidingCode = std::vector<int>;

class Codebook {
 public:
  static constexpr double kCountEpsilon = 1e-5;

  Codebook() = default;
  // Entries drawn from N(0, init_std^2); counts start at 1 so sums = entries.
  Codebook(std::size_t size, std::size_t dim, double momentum, std::size_t window, Rng& rng, double init_std);
  Codebook(Tensor64 entries, double momentum, std::size_t window);
  // Copies own their arrays.
  Codebook(const Codebook& other);
  Codebook& operator=(const Codebook& other);
  Codebook(Codebook&&) = default;
  Codebook& operator=(Codebook&&) = default;

  std::size_t size() const { return entries_.defined() ? entries_.dim(0) : 0; }
  std::size_t dim() const { return entries_.defined() ? entries_.dim(1) : 0; }
  double momentum() const { return momentum_; }
  std::size_t window() const { return window_; }

  const Tensor64& entries() const { return entries_; }
  const Tensor64& ema_sums() const { return ema_sums_; }
  const std::vector<double>& ema_counts() const { return ema_counts_; }

  // Rows of z_e ([..., d], flattened to [M, d]); ties go to the lowest index.
  GuidingCode nearest(const Tensor& z_e) const;
  // Entry rows for a code, as float [code.size(), d].
  Tensor lookup(std::span<const int> code) const;

  // One EMA step over all assignments, then credits the usage window.
  void ema_update(const Tensor64& z_e, std::span<const int> code);
  // Replaces entries with no hits over a full window. Returns respawned indices.
  std::vector<int> respawn_dead_entries(double noise_scale, Rng& rng);
  // 1e-3 * RMS of entries.
  double default_noise_scale() const;

  // Hits per entry within the current window.
  std::vector<std::uint64_t> window_hits() const;
  bool window_full() const { return window_steps_ >= window_; }

  // Raw state for checkpointing. Usage ring is [window, N] with a cursor.
  struct State {
    std::vector<std::uint64_t> usage;
    std::size_t cursor = 0;
    std::size_t steps = 0;
  };
  State usage_state() const { return {usage_, cursor_, window_steps_}; }
  void restore(Tensor64 entries, Tensor64 sums, std::vector<double> counts, State usage);

 private:
  Tensor64 entries_, ema_sums_;
  std::vector<double> ema_counts_;
  double momentum_ = 0.995;
  std::size_t window_ = 100;
  std::vector<std::uint64_t> usage_;
  std::size_t cursor_ = 0, window_steps_ = 0;

  void recompute_entry(std::size_t i);
};

struct Quantized {
  GuidingCode code;
  Tensor z_q;  // carries straight-through gradient to z_e
};

// z_e: [..., d]. z_q has z_e's shape; its forward values are codebook entries
// and its backward copies gradients verbatim to z_e.
Quantized quantize(const Tensor& z_e, const Codebook& book);

// beta * mean((z_e - stopgrad(z_q))^2), gradient into z_e only.
Tensor commitment_loss(const Tensor& z_e, const Tensor& z_q, float beta);

// [g, g, d] -> [n, d] or [B, g, g, d] -> [B, n, d]; bilinear resize to
// sqrt(n) x sqrt(n) then raster flatten.
Tensor resize_code_grid(const Tensor& grid, std::size_t target_len);

// Keep-mask of length n: k ~ U{0..n} positions zeroed, chosen uniformly.
std::vector<float> sample_code_dropout_mask(std::size_t n, Rng& rng);
// z_q: [n, d] or [B, n, d]; mask: n (shared) or B*n keep flags.
Tensor apply_code_mask(const Tensor& z_q, std::span<const float> mask);
// Independent draw per batch element.
Tensor code_dropout(const Tensor& z_q, Rng& rng);

// exp(entropy) of a usage histogram.
double codebook_perplexity(std::span<const double> histogram);
std::vector<double> code_histogram(std::span<const int> code, std::size_t size);

}  // namespace uvim
