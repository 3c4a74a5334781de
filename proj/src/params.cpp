#include "uvim/params.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace uvim {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

Tensor& ParameterSet::add(const std::string& name, Tensor value) {
  if (find(name)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
  value.set_requires_grad(true);
  items_.emplace_back(name, std::move(value));
  return items_.back().second;
}

const Tensor* ParameterSet::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return &t;
  }
  return nullptr;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& item : items_) n += item.second.numel();
  return n;
}

void ParameterSet::extend(const ParameterSet& other) {
  for (const auto& [n, t] : other.items_) {
    if (find(n)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + n + "'");
    items_.emplace_back(n, t);
  }
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const void* p, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [n, t] : items_) {
    feed(n.data(), n.size());
    for (std::size_t e : t.shape()) feed(&e, sizeof e);
    feed(t.data().data(), t.numel() * sizeof(float));
  }
  return h;
}

namespace init {

Tensor xavier_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<float> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<float>(u(rng));
  return Tensor({fan_in, fan_out}, std::move(v));
}

Tensor normal(Rng& rng, Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(n(rng));
  return Tensor(std::move(shape), std::move(v));
}

Tensor sincos_2d(std::size_t side, std::size_t width, double stride) {
  const std::size_t q = width / 4;
  std::vector<float> v(side * side * width, 0.0f);
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double y = (static_cast<double>(i) + 0.5) * stride - 0.5;
      const double x = (static_cast<double>(j) + 0.5) * stride - 0.5;
      float* row = v.data() + (i * side + j) * width;
      for (std::size_t k = 0; k < q; ++k) {
        const double omega = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(q));
        row[k] = static_cast<float>(std::sin(y * omega));
        row[q + k] = static_cast<float>(std::cos(y * omega));
        row[2 * q + k] = static_cast<float>(std::sin(x * omega));
        row[3 * q + k] = static_cast<float>(std::cos(x * omega));
      }
    }
  }
  return Tensor({side * side, width}, std::move(v));
}

}  // namespace init
}  // namespace uvim
