#include "uvim/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <stdexcept>

#include "uvim/imageio.hpp"

namespace uvim {

namespace {

// Stream ids for derive_seed.
constexpr std::uint64_t kSceneStream = 1, kNoiseStream = 2, kBatchIndexStream = 3, kAugmentStream = 4;

void hsv_to_signed_rgb(double h, double s, double v, float out[3]) {
  const double hh = std::fmod(h, 360.0) / 60.0;
  const double c = v * s, x = c * (1 - std::abs(std::fmod(hh, 2.0) - 1)), m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hh)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  out[0] = static_cast<float>(2 * (r + m) - 1);
  out[1] = static_cast<float>(2 * (g + m) - 1);
  out[2] = static_cast<float>(2 * (b + m) - 1);
}

bool covers(const ShapeSpec& s, double row, double col) {
  const double dr = row - s.center_row, dc = col - s.center_col;
  switch (s.kind) {
    case ShapeKind::circle: return dr * dr + dc * dc <= s.size * s.size;
    case ShapeKind::rectangle: return std::abs(dr) <= s.size && std::abs(dc) <= 0.75 * s.size;
    case ShapeKind::triangle: {
      // Apex up; the half-width grows linearly from apex to base.
      if (dr < -s.size || dr > s.size) return false;
      return std::abs(dc) <= (dr + s.size) / 2.0;
    }
  }
  return false;
}

// Index of the shape owning each pixel (-1 for background), far to near.
std::vector<int> owner_map(const SceneSpec& spec, std::size_t size) {
  std::vector<std::size_t> order(spec.shapes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return spec.shapes[a].depth > spec.shapes[b].depth; });
  std::vector<int> owner(size * size, -1);
  for (std::size_t k : order) {
    for (std::size_t r = 0; r < size; ++r) {
      for (std::size_t c = 0; c < size; ++c) {
        const double row = (r + 0.5) / size, col = (c + 0.5) / size;
        if (covers(spec.shapes[k], row, col)) owner[r * size + c] = static_cast<int>(k);
      }
    }
  }
  return owner;
}

}  // namespace

int thing_class(ShapeKind kind, int color_family) { return 2 + 2 * static_cast<int>(kind) + color_family; }

SceneSpec random_scene_spec(std::uint64_t seed, std::size_t size, std::size_t max_shapes, double min_visible_fraction,
                            double max_depth) {
  Rng rng(derive_seed(seed, kSceneStream));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const auto min_pixels = static_cast<std::size_t>(std::ceil(min_visible_fraction * size * size));

  SceneSpec spec;
  spec.seed = seed;
  hsv_to_signed_rgb(uni(0, 360), uni(0.0, 0.25), uni(0.25, 0.55), spec.background_color);
  spec.background_depth = uni(0.85, 0.98) * max_depth;

  for (int attempt = 0; attempt < 100; ++attempt) {
    spec.shapes.clear();
    const auto count = 1 + static_cast<std::size_t>(u01(rng) * max_shapes) % max_shapes;
    for (std::size_t k = 0; k < count; ++k) {
      ShapeSpec s;
      s.kind = static_cast<ShapeKind>(static_cast<int>(u01(rng) * 3) % 3);
      const int family = u01(rng) < 0.5 ? 0 : 1;
      s.semantic_class = thing_class(s.kind, family);
      const double hue = family == 0 ? uni(0, 60) : uni(180, 260);
      hsv_to_signed_rgb(hue, uni(0.65, 1.0), uni(0.7, 1.0), s.color);
      s.center_row = uni(0.15, 0.85);
      s.center_col = uni(0.15, 0.85);
      s.size = uni(0.12, 0.24);
      s.depth = uni(0.1, 0.8) * max_depth;
      spec.shapes.push_back(s);
    }
    const auto owner = owner_map(spec, size);
    std::vector<std::size_t> visible(count, 0);
    for (int o : owner) {
      if (o >= 0) ++visible[static_cast<std::size_t>(o)];
    }
    if (std::all_of(visible.begin(), visible.end(), [&](std::size_t v) { return v >= std::max<std::size_t>(1, min_pixels); })) {
      return spec;
    }
  }
  // Keep only the nearest shape, which is never occluded.
  auto nearest = std::min_element(spec.shapes.begin(), spec.shapes.end(),
                                  [](const ShapeSpec& a, const ShapeSpec& b) { return a.depth < b.depth; });
  spec.shapes = {*nearest};
  return spec;
}

Scene render_scene(const SceneSpec& spec, std::size_t size) {
  if (size == 0) throw std::invalid_argument("render_scene: size must be positive");
  const auto owner = owner_map(spec, size);
  const std::size_t px = size * size;
  Scene out;
  out.image = {size, size, 3, std::vector<float>(px * 3)};
  out.panoptic = {size, size, std::vector<int>(px), std::vector<int>(px)};
  out.depth = {size, size, std::vector<float>(px)};
  Rng noise_rng(derive_seed(spec.seed, kNoiseStream));
  std::uniform_real_distribution<float> jitter(-1.0f, 1.0f);
  const auto amp = static_cast<float>(spec.noise);
  for (std::size_t p = 0; p < px; ++p) {
    const int o = owner[p];
    const float* color = o >= 0 ? spec.shapes[o].color : spec.background_color;
    for (std::size_t c = 0; c < 3; ++c) {
      const float n = amp > 0.0f ? amp * jitter(noise_rng) : 0.0f;
      out.image.pixels[p * 3 + c] = std::clamp(color[c] + n, -1.0f, 1.0f);
    }
    out.panoptic.semantic[p] = o >= 0 ? spec.shapes[o].semantic_class : spec.background_class;
    out.panoptic.instance[p] = o >= 0 ? o + 1 : 0;
    out.depth.values[p] = static_cast<float>(o >= 0 ? spec.shapes[o].depth : spec.background_depth);
  }
  out.panoptic = canonicalize_instances(out.panoptic);
  return out;
}

CropParams sample_crop(std::size_t height, std::size_t width, Rng& rng, double min_area) {
  std::uniform_real_distribution<double> area(min_area, 1.0);
  std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  CropParams crop{0, 0, height, width, false};
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area(rng) * static_cast<double>(height * width);
    const double ratio = std::exp(log_ratio(rng));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h == 0 || w > width || h > height) continue;
    std::uniform_int_distribution<std::size_t> top(0, height - h), left(0, width - w);
    crop = {top(rng), left(rng), h, w, false};
    break;
  }
  crop.flip = std::bernoulli_distribution(0.5)(rng);
  return crop;
}

namespace {

template <class V>
std::vector<V> crop_channel(const std::vector<V>& src, std::size_t width, std::size_t channels, const CropParams& c) {
  std::vector<V> out(c.height * c.width * channels);
  for (std::size_t r = 0; r < c.height; ++r) {
    for (std::size_t col = 0; col < c.width; ++col) {
      const std::size_t sc = c.flip ? c.left + c.width - 1 - col : c.left + col;
      for (std::size_t k = 0; k < channels; ++k) {
        out[(r * c.width + col) * channels + k] = src[((c.top + r) * width + sc) * channels + k];
      }
    }
  }
  return out;
}

std::vector<float> resize_values(std::vector<float> v, std::size_t h, std::size_t w, std::size_t ch,
                                 std::size_t out, bool nearest) {
  NoRecordScope<float> off;
  Tensor t({h, w, ch}, std::move(v));
  return (nearest ? resize_nearest(t, out, out) : resize_bilinear(t, out, out)).values();
}

}  // namespace

Scene apply_crop(const Scene& scene, const CropParams& crop, std::size_t out_size) {
  const std::size_t w = scene.image.width;
  if (crop.height == 0 || crop.width == 0 || crop.top + crop.height > scene.image.height ||
      crop.left + crop.width > w) {
    throw std::invalid_argument("apply_crop: crop outside the scene");
  }
  Scene out;
  out.image = {out_size, out_size, scene.image.channels,
               resize_values(crop_channel(scene.image.pixels, w, scene.image.channels, crop), crop.height,
                             crop.width, scene.image.channels, out_size, false)};
  out.depth = {out_size, out_size,
               resize_values(crop_channel(scene.depth.values, w, 1, crop), crop.height, crop.width, 1, out_size, false)};
  // Semantic and instance ids travel together through one nearest resize.
  std::vector<float> ids(scene.panoptic.semantic.size() * 2);
  for (std::size_t p = 0; p < scene.panoptic.semantic.size(); ++p) {
    ids[2 * p] = static_cast<float>(scene.panoptic.semantic[p]);
    ids[2 * p + 1] = static_cast<float>(scene.panoptic.instance[p]);
  }
  const auto resized = resize_values(crop_channel(ids, w, 2, crop), crop.height, crop.width, 2, out_size, true);
  out.panoptic = {out_size, out_size, std::vector<int>(out_size * out_size), std::vector<int>(out_size * out_size)};
  for (std::size_t p = 0; p < out_size * out_size; ++p) {
    out.panoptic.semantic[p] = static_cast<int>(resized[2 * p]);
    out.panoptic.instance[p] = static_cast<int>(resized[2 * p + 1]);
  }
  out.panoptic = canonicalize_instances(out.panoptic);
  return out;
}

Scene inception_crop(const Scene& scene, Rng& rng, std::size_t out_size, double min_area) {
  return apply_crop(scene, sample_crop(scene.image.height, scene.image.width, rng, min_area), out_size);
}

Scene hflip(const Scene& scene) {
  return apply_crop(scene, {0, 0, scene.image.height, scene.image.width, true}, scene.image.height);
}

Example task_example(const TaskConfig& task, const Scene& scene) {
  switch (task.kind) {
    case TaskKind::panoptic: return {scene.image, scene.panoptic};
    case TaskKind::depth: return {scene.image, scene.depth};
    case TaskKind::colorization: return {to_grayscale(scene.image), scene.image};
  }
  throw std::logic_error("unreachable");
}

SyntheticDataset::SyntheticDataset(DataConfig cfg, TaskConfig task) : cfg_(cfg), task_(std::move(task)) {
  if (cfg_.image_size == 0 || cfg_.train_size == 0) throw std::invalid_argument("dataset: sizes must be positive");
  task_.validate();
}

std::size_t SyntheticDataset::size(Split split) const {
  return split == Split::train ? cfg_.train_size : cfg_.holdout_size;
}

SceneSpec SyntheticDataset::spec(Split split, std::size_t index) const {
  if (index >= size(split)) throw std::out_of_range("dataset index " + std::to_string(index) + " out of range");
  const std::uint64_t scene_seed = derive_seed(cfg_.seed, 100 + static_cast<std::uint64_t>(split), index);
  return random_scene_spec(scene_seed, cfg_.image_size, cfg_.max_shapes, 0.02, task_.depth.max);
}

Scene SyntheticDataset::scene(Split split, std::size_t index) const {
  return render_scene(spec(split, index), cfg_.image_size);
}

Example SyntheticDataset::example(Split split, std::size_t index) const {
  return task_example(task_, scene(split, index));
}

std::vector<Example> SyntheticDataset::train_batch(std::size_t step, std::size_t batch_size) const {
  std::vector<Example> batch;
  batch.reserve(batch_size);
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::uint64_t slot = static_cast<std::uint64_t>(step) * batch_size + j;
    const std::size_t index = derive_seed(cfg_.seed, kBatchIndexStream, slot) % cfg_.train_size;
    Scene s = scene(Split::train, index);
    if (cfg_.augment) {
      Rng aug(derive_seed(cfg_.seed, kAugmentStream, slot));
      s = inception_crop(s, aug, cfg_.image_size, cfg_.min_crop_area);
    }
    batch.push_back(task_example(task_, s));
  }
  return batch;
}

std::vector<Example> SyntheticDataset::holdout(std::size_t count) const {
  count = std::min(count, cfg_.holdout_size);
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(example(Split::holdout, i));
  return out;
}

void dump_dataset(const SyntheticDataset& data, Split split, std::size_t count, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(dir) / (split == Split::train ? "train" : "holdout");
  fs::create_directories(root);
  count = std::min(count, data.size(split));
  const double dmax = data.task().depth.max;
  for (std::size_t i = 0; i < count; ++i) {
    const SceneSpec spec = data.spec(split, i);
    const Scene s = render_scene(spec, data.config().image_size);
    const std::string stem = (root / std::to_string(i)).string();
    write_png(stem + "_image.png", to_raster(s.image));
    // Raw ids: red = semantic class, green = instance id.
    Raster ids{s.panoptic.height, s.panoptic.width, 3, std::vector<std::uint8_t>(s.panoptic.semantic.size() * 3, 0)};
    for (std::size_t p = 0; p < s.panoptic.semantic.size(); ++p) {
      ids.pixels[p * 3] = static_cast<std::uint8_t>(s.panoptic.semantic[p]);
      ids.pixels[p * 3 + 1] = static_cast<std::uint8_t>(s.panoptic.instance[p]);
    }
    write_png(stem + "_panoptic.png", ids);
    std::vector<std::uint16_t> depth(s.depth.values.size());
    for (std::size_t p = 0; p < depth.size(); ++p) {
      depth[p] = static_cast<std::uint16_t>(std::lround(std::clamp(s.depth.values[p] / dmax, 0.0, 1.0) * 65535.0));
    }
    write_png16(stem + "_depth.png", s.depth.height, s.depth.width, depth);

    nlohmann::json meta;
    meta["seed"] = spec.seed;
    meta["index"] = i;
    meta["depth_scale_m"] = dmax;
    meta["background"] = {{"class", spec.background_class},
                          {"color", {spec.background_color[0], spec.background_color[1], spec.background_color[2]}},
                          {"depth", spec.background_depth}};
    static const char* kinds[] = {"circle", "rectangle", "triangle"};
    for (const auto& sh : spec.shapes) {
      meta["shapes"].push_back({{"kind", kinds[static_cast<int>(sh.kind)]},
                                {"class", sh.semantic_class},
                                {"color", {sh.color[0], sh.color[1], sh.color[2]}},
                                {"center", {sh.center_row, sh.center_col}},
                                {"size", sh.size},
                                {"depth", sh.depth}});
    }
    std::ofstream(stem + "_meta.json") << meta.dump(2) << "\n";
  }
}

}  // namespace uvim
