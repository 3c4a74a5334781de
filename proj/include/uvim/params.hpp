#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "uvim/tensor.hpp"

namespace uvim {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; derives independent stream seeds from (seed, stream, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0);

// Ordered, named collection of trainable tensors. Modules keep handles to the
// same tensors, so writes through the set (optimizer, checkpoint load) are
// visible to the modules.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor value);

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const Tensor* find(const std::string& name) const;
  std::size_t scalar_count() const;
  // Appends another set's entries (sharing the tensors).
  void extend(const ParameterSet& other);
  // FNV-1a over names, shapes and raw bytes; used for freeze checks.
  std::uint64_t checksum() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

namespace init {
Tensor xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out);
Tensor normal(Rng& rng, Shape shape, double stddev);
// [side * side, width] 2-D sine-cosine table. Cell (i, j) sits at
// ((i + 0.5) * stride - 0.5, (j + 0.5) * stride - 0.5) in patch-grid units, so
// grids of different resolution share one coordinate frame. Dimensions beyond
// the largest multiple of 4 are zero.
Tensor sincos_2d(std::size_t side, std::size_t width, double stride = 1.0);
}  // namespace init

}  // namespace uvim
