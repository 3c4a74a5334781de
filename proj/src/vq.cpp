#include "uvim/vq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace uvim {

Codebook::Codebook(std::size_t size, std::size_t dim, double momentum, std::size_t window, Rng& rng,
                   double init_std)
    : Codebook(cast<double>(init::normal(rng, {size, dim}, init_std)), momentum, window) {}

Codebook::Codebook(Tensor64 entries, double momentum, std::size_t window)
    : entries_(entries.detach()), momentum_(momentum), window_(window) {
  if (entries_.rank() != 2 || entries_.dim(0) < 2 || entries_.dim(1) == 0) {
    throw std::invalid_argument("Codebook: need at least 2 entries of positive dimension, got " +
                                shape_str(entries_.shape()));
  }
  if (!(momentum > 0.0 && momentum < 1.0)) throw std::invalid_argument("Codebook: momentum must lie in (0, 1)");
  if (window == 0) throw std::invalid_argument("Codebook: usage window must be positive");
  ema_sums_ = Tensor64(entries_.shape(), entries_.values());
  ema_counts_.assign(size(), 1.0);
  usage_.assign(window_ * size(), 0);
}

Codebook::Codebook(const Codebook& other)
    : entries_(other.entries_.defined() ? other.entries_.detach() : Tensor64{}),
      ema_sums_(other.ema_sums_.defined() ? other.ema_sums_.detach() : Tensor64{}),
      ema_counts_(other.ema_counts_),
      momentum_(other.momentum_),
      window_(other.window_),
      usage_(other.usage_),
      cursor_(other.cursor_),
      window_steps_(other.window_steps_) {}

Codebook& Codebook::operator=(const Codebook& other) {
  if (this != &other) *this = Codebook(other);
  return *this;
}

GuidingCode Codebook::nearest(const Tensor& z_e) const {
  const std::size_t d = dim();
  if (z_e.rank() == 0 || z_e.dim(-1) != d) {
    throw ShapeError("quantize: codeword dimension mismatch, z_e " + shape_str(z_e.shape()) + " vs codebook " +
                     shape_str(entries_.shape()));
  }
  const std::size_t rows = z_e.numel() / d, n = size();
  const auto x = z_e.data();
  const auto e = entries_.data();
  GuidingCode code(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t j = 0; j < n; ++j) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(x[r * d + c]) - e[j * d + c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = static_cast<int>(j);
      }
    }
    code[r] = arg;
  }
  return code;
}

Tensor Codebook::lookup(std::span<const int> code) const {
  const std::size_t d = dim();
  std::vector<float> out(code.size() * d);
  const auto e = entries_.data();
  for (std::size_t r = 0; r < code.size(); ++r) {
    if (code[r] < 0 || static_cast<std::size_t>(code[r]) >= size()) {
      throw std::out_of_range("codebook lookup: index " + std::to_string(code[r]) + " outside [0, " +
                              std::to_string(size()) + ")");
    }
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = static_cast<float>(e[code[r] * d + c]);
  }
  return Tensor({code.size(), d}, std::move(out));
}

void Codebook::recompute_entry(std::size_t i) {
  const std::size_t d = dim();
  const double denom = std::max(ema_counts_[i], kCountEpsilon);
  auto e = entries_.mutable_data();
  const auto s = ema_sums_.data();
  for (std::size_t c = 0; c < d; ++c) e[i * d + c] = s[i * d + c] / denom;
}

void Codebook::ema_update(const Tensor64& z_e, std::span<const int> code) {
  const std::size_t d = dim(), n = size();
  if (z_e.rank() == 0 || z_e.dim(-1) != d || z_e.numel() / d != code.size()) {
    throw ShapeError("ema_update: z_e " + shape_str(z_e.shape()) + " does not match " + std::to_string(code.size()) +
                     " codes of dimension " + std::to_string(d));
  }
  std::vector<double> hits(n, 0.0), sums(n * d, 0.0);
  const auto x = z_e.data();
  for (std::size_t r = 0; r < code.size(); ++r) {
    const auto j = static_cast<std::size_t>(code[r]);
    if (j >= n) throw std::out_of_range("ema_update: code index " + std::to_string(code[r]) + " out of range");
    hits[j] += 1.0;
    for (std::size_t c = 0; c < d; ++c) sums[j * d + c] += x[r * d + c];
  }
  const double g = momentum_;
  auto s = ema_sums_.mutable_data();
  for (std::size_t j = 0; j < n; ++j) {
    ema_counts_[j] = g * ema_counts_[j] + (1.0 - g) * hits[j];
    for (std::size_t c = 0; c < d; ++c) s[j * d + c] = g * s[j * d + c] + (1.0 - g) * sums[j * d + c];
    recompute_entry(j);
  }

  std::uint64_t* slot = usage_.data() + cursor_ * n;
  for (std::size_t j = 0; j < n; ++j) slot[j] = static_cast<std::uint64_t>(hits[j]);
  cursor_ = (cursor_ + 1) % window_;
  window_steps_ = std::min(window_steps_ + 1, window_);
}

std::vector<std::uint64_t> Codebook::window_hits() const {
  const std::size_t n = size();
  std::vector<std::uint64_t> total(n, 0);
  for (std::size_t w = 0; w < window_; ++w) {
    for (std::size_t j = 0; j < n; ++j) total[j] += usage_[w * n + j];
  }
  return total;
}

double Codebook::default_noise_scale() const {
  double sq = 0.0;
  for (double v : entries_.data()) sq += v * v;
  return 1e-3 * std::sqrt(sq / static_cast<double>(entries_.numel()));
}

std::vector<int> Codebook::respawn_dead_entries(double noise_scale, Rng& rng) {
  std::vector<int> respawned;
  if (!window_full()) return respawned;
  const std::size_t n = size(), d = dim();
  auto hits = window_hits();
  if (std::all_of(hits.begin(), hits.end(), [](auto h) { return h == 0; })) {
    throw std::runtime_error("respawn_dead_entries: every codebook entry is unused over the window");
  }
  std::normal_distribution<double> noise(0.0, noise_scale > 0.0 ? noise_scale : 1.0);
  auto e = entries_.mutable_data();
  auto s = ema_sums_.mutable_data();
  for (std::size_t dead = 0; dead < n; ++dead) {
    if (hits[dead] != 0) continue;
    const auto donor = static_cast<std::size_t>(std::max_element(hits.begin(), hits.end()) - hits.begin());
    const double half = ema_counts_[donor] / 2.0;
    ema_counts_[donor] = half;
    ema_counts_[dead] = half;
    for (std::size_t c = 0; c < d; ++c) {
      s[donor * d + c] /= 2.0;
      e[dead * d + c] = e[donor * d + c] + (noise_scale > 0.0 ? noise(rng) : 0.0);
      s[dead * d + c] = e[dead * d + c] * half;
    }
    for (std::size_t w = 0; w < window_; ++w) usage_[w * n + dead] = usage_[w * n + donor];
    hits[dead] = hits[donor];
    respawned.push_back(static_cast<int>(dead));
  }
  return respawned;
}

void Codebook::restore(Tensor64 entries, Tensor64 sums, std::vector<double> counts, State usage) {
  if (entries.shape() != entries_.shape() || sums.shape() != entries_.shape() || counts.size() != size() ||
      usage.usage.size() != usage_.size() || usage.cursor >= window_ || usage.steps > window_) {
    throw ShapeError("Codebook::restore: state does not match codebook geometry " + shape_str(entries_.shape()));
  }
  entries_ = entries.detach();
  ema_sums_ = sums.detach();
  ema_counts_ = std::move(counts);
  usage_ = std::move(usage.usage);
  cursor_ = usage.cursor;
  window_steps_ = usage.steps;
}

Quantized quantize(const Tensor& z_e, const Codebook& book) {
  GuidingCode code = book.nearest(z_e);
  Tensor values = reshape(book.lookup(code), z_e.shape());
  return {std::move(code), straight_through(z_e, values)};
}

Tensor commitment_loss(const Tensor& z_e, const Tensor& z_q, float beta) {
  if (z_e.shape() != z_q.shape()) {
    throw ShapeError("commitment_loss: " + shape_str(z_e.shape()) + " vs " + shape_str(z_q.shape()));
  }
  return scale(mean_squared_error(z_e, z_q.detach()), beta);
}

Tensor resize_code_grid(const Tensor& grid, std::size_t target_len) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(target_len))));
  if (target_len == 0 || side * side != target_len) {
    throw std::invalid_argument("resize_code_grid: code length " + std::to_string(target_len) +
                                " is not a perfect square");
  }
  if (grid.rank() != 3 && grid.rank() != 4) {
    throw ShapeError("resize_code_grid: expected [g, g, d] or [B, g, g, d], got " + shape_str(grid.shape()));
  }
  Tensor out = resize_bilinear(grid, side, side);
  const std::size_t d = grid.dim(-1);
  return grid.rank() == 3 ? reshape(out, {target_len, d}) : reshape(out, {grid.dim(0), target_len, d});
}

std::vector<float> sample_code_dropout_mask(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick_k(0, n);
  const std::size_t k = pick_k(rng);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates: the first k positions form a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<float> keep(n, 1.0f);
  for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 0.0f;
  return keep;
}

Tensor apply_code_mask(const Tensor& z_q, std::span<const float> mask) {
  if (z_q.rank() < 2) throw ShapeError("code mask: expected [n, d] or [B, n, d], got " + shape_str(z_q.shape()));
  const std::size_t n = z_q.dim(-2);
  const std::size_t batch = z_q.rank() == 3 ? z_q.dim(0) : 1;
  if (mask.size() == n && z_q.rank() == 2) return mul(z_q, Tensor({n, 1}, {mask.begin(), mask.end()}));
  if (mask.size() == n) return mul(z_q, Tensor({1, n, 1}, {mask.begin(), mask.end()}));
  if (mask.size() == batch * n && z_q.rank() == 3) return mul(z_q, Tensor({batch, n, 1}, {mask.begin(), mask.end()}));
  throw ShapeError("code mask of length " + std::to_string(mask.size()) + " does not fit " +
                   shape_str(z_q.shape()));
}

Tensor code_dropout(const Tensor& z_q, Rng& rng) {
  if (z_q.rank() < 2) throw ShapeError("code_dropout: expected [n, d] or [B, n, d], got " + shape_str(z_q.shape()));
  const std::size_t n = z_q.dim(-2);
  const std::size_t batch = z_q.rank() == 3 ? z_q.dim(0) : 1;
  std::vector<float> mask;
  mask.reserve(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto m = sample_code_dropout_mask(n, rng);
    mask.insert(mask.end(), m.begin(), m.end());
  }
  return apply_code_mask(z_q, mask);
}

double codebook_perplexity(std::span<const double> histogram) {
  const double total = std::accumulate(histogram.begin(), histogram.end(), 0.0);
  if (histogram.empty() || !(total > 0.0)) throw std::invalid_argument("codebook_perplexity: empty histogram");
  double entropy = 0.0;
  for (double h : histogram) {
    if (h < 0.0) throw std::invalid_argument("codebook_perplexity: negative count");
    if (h > 0.0) entropy -= (h / total) * std::log(h / total);
  }
  return std::exp(entropy);
}

std::vector<double> code_histogram(std::span<const int> code, std::size_t size) {
  std::vector<double> h(size, 0.0);
  for (int c : code) {
    if (c < 0 || static_cast<std::size_t>(c) >= size) throw std::out_of_range("code_histogram: index out of range");
    h[static_cast<std::size_t>(c)] += 1.0;
  }
  return h;
}

}  // namespace uvim
