#pragma once

// Deterministic synthetic scenes (image, panoptic mask, depth) and the
// training augmentations: inception-style crop, horizontal flip, square resize.

#include <cstdint>
#include <string>
#include <vector>

#include "uvim/params.hpp"
#include "uvim/tasks.hpp"

namespace uvim {

enum class ShapeKind { circle = 0, rectangle = 1, triangle = 2 };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  int semantic_class = 2;
  float color[3] = {0, 0, 0};  // in [-1, 1]
  double center_row = 0.5, center_col = 0.5;  // fractions of the image edge
  double size = 0.15;                          // half-extent, fraction of the image edge
  double depth = 3.0;                          // meters
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<ShapeSpec> shapes;
  int background_class = 1;
  float background_color[3] = {0, 0, 0};
  double background_depth = 7.5;
  double noise = 0.03;  // per-pixel color jitter amplitude
};

struct Scene {
  Image image;
  PanopticMask panoptic;
  DepthMap depth;
};

// Thing classes are 2 + 2 * kind + color family (warm 0, cool 1).
int thing_class(ShapeKind kind, int color_family);

// Random spec with 1..max_shapes shapes; every shape stays visible over at
// least min_visible_fraction of the image after occlusion.
SceneSpec random_scene_spec(std::uint64_t seed, std::size_t size, std::size_t max_shapes = 6,
                            double min_visible_fraction = 0.005, double max_depth = 8.0);

// Shapes are drawn far to near; the panoptic mask is canonicalized.
Scene render_scene(const SceneSpec& spec, std::size_t size);

struct CropParams {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool flip = false;
};

// Area fraction in [min_area, 1], aspect in [3/4, 4/3]; full frame after 10
// rejected attempts. Flip with probability 0.5.
CropParams sample_crop(std::size_t height, std::size_t width, Rng& rng, double min_area = 0.5);
// Crop, optional flip, then square resize (bilinear for image and depth,
// nearest for the mask, which is re-canonicalized).
Scene apply_crop(const Scene& scene, const CropParams& crop, std::size_t out_size);
Scene inception_crop(const Scene& scene, Rng& rng, std::size_t out_size, double min_area = 0.5);
Scene hflip(const Scene& scene);

struct Example {
  Image x;
  TaskLabel y;
};

// Task view of a scene: panoptic/depth take the RGB image as input,
// colorization maps grayscale to RGB.
Example task_example(const TaskConfig& task, const Scene& scene);

enum class Split { train = 0, holdout = 1 };

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::size_t train_size = 100000;
  std::size_t holdout_size = 256;
  std::size_t max_shapes = 6;
  bool augment = true;
  double min_crop_area = 0.5;
};

// Pure function of (seed, split, index), so iteration order is reproducible
// and batches can be rebuilt after a restart.
class SyntheticDataset {
 public:
  SyntheticDataset(DataConfig cfg, TaskConfig task);

  const DataConfig& config() const { return cfg_; }
  const TaskConfig& task() const { return task_; }
  std::size_t size(Split split) const;

  SceneSpec spec(Split split, std::size_t index) const;
  Scene scene(Split split, std::size_t index) const;
  // Held-out examples are never augmented.
  Example example(Split split, std::size_t index) const;
  // Training batch for a given step: indices and augmentations are derived
  // from (seed, step).
  std::vector<Example> train_batch(std::size_t step, std::size_t batch_size) const;
  std::vector<Example> holdout(std::size_t count) const;

 private:
  DataConfig cfg_;
  TaskConfig task_;
};

// Writes <dir>/<split>/<index>_{image.png,panoptic.png,depth.png,meta.json}.
void dump_dataset(const SyntheticDataset& data, Split split, std::size_t count, const std::string& dir);

}  // namespace uvim
