#pragma once

// Task label types, model-facing encodings, reconstruction losses,
// post-processing and metrics for panoptic segmentation, colorization and
// depth prediction.

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "uvim/tensor.hpp"

namespace uvim {

enum class TaskKind { panoptic, colorization, depth };

TaskKind parse_task(const std::string& name);
std::string task_name(TaskKind kind);

// Semantic class 0 is void; class 1 is background stuff; the rest are things.
inline constexpr int kVoidClass = 0;

struct PanopticMask {
  std::size_t height = 0, width = 0;
  std::vector<int> semantic;  // [H*W], in [0, S)
  std::vector<int> instance;  // [H*W], in [0, I), 0 = no instance

  // Throws std::invalid_argument on size or range violations.
  void validate(std::size_t num_classes, std::size_t num_instances) const;
  bool operator==(const PanopticMask&) const = default;
};

struct DepthMap {
  std::size_t height = 0, width = 0;
  std::vector<float> values;  // meters
  bool operator==(const DepthMap&) const = default;
};

// RGB (channels 3) or grayscale (channels 1), values in [-1, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // [H, W, C]
  bool operator==(const Image&) const = default;
};

using TaskLabel = std::variant<PanopticMask, DepthMap, Image>;

struct DepthBins {
  double min = 0.0, max = 8.0;
  std::size_t count = 32;

  double bin_width() const { return (max - min) / static_cast<double>(count); }
  // Half-open bins, top edge closed. Out-of-range values throw.
  int bin(double depth) const;
  double center(int bin) const;
};

struct TaskConfig {
  TaskKind kind = TaskKind::panoptic;
  std::size_t num_classes = 8;    // S, including void
  std::size_t num_instances = 8;  // I, including "no instance"
  DepthBins depth;
  double tiny_fraction = 0.001;
  double depth_eval_crop = 0.8;  // central crop fraction for RMSE

  void validate() const;
  // Channels of the model input x.
  std::size_t input_channels() const;
  // Channels of the Ω label encoding.
  std::size_t label_channels() const;
  // Channels of the per-pixel output head.
  std::size_t output_channels() const;
};

// Instance ids 1..m in raster order of mass centroids.
PanopticMask canonicalize_instances(const PanopticMask& mask);

// Logits [H, W, S] and [H, W, I] at full resolution.
PanopticMask panoptic_postprocess(const Tensor& semantic_logits, const Tensor& instance_logits,
                                  double tiny_fraction = 0.001);

struct PanopticQuality {
  double iou_sum = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;

  double pq() const;
  double sq() const;
  double rq() const;
  PanopticQuality& operator+=(const PanopticQuality& other);
};

// Segments are (semantic, instance) pairs of non-void pixels, matched when
// classes agree and IoU > 0.5. Void ground-truth pixels are excluded from
// unions, and predictions lying mostly in void are not false positives.
PanopticQuality panoptic_quality(const PanopticMask& pred, const PanopticMask& gt);
// Fraction of pixels where both channels agree.
double panoptic_pixel_accuracy(const PanopticMask& pred, const PanopticMask& gt);

std::vector<int> depth_quantize(const DepthMap& depth, const DepthBins& bins);
DepthMap depth_dequantize(std::span<const int> indices, std::size_t height, std::size_t width,
                          const DepthBins& bins);

double rmse(const DepthMap& pred, const DepthMap& gt, std::span<const std::uint8_t> valid);
std::vector<std::uint8_t> central_crop_mask(std::size_t height, std::size_t width, double fraction);

double mean_squared_error(const Image& pred, const Image& gt);

// Luminance with weights 0.299/0.587/0.114; single-channel input is returned as is.
Image to_grayscale(const Image& image);

// Model-facing tensors.
Tensor image_tensor(std::span<const Image> images);                            // [B, H, W, C]
Tensor encode_labels(const TaskConfig& cfg, std::span<const TaskLabel> labels);  // [B, H, W, label_channels]
// Mean reconstruction loss for output logits [B, H, W, output_channels].
Tensor task_reconstruction_loss(const TaskConfig& cfg, const Tensor& logits, std::span<const TaskLabel> labels);
// Post-processed prediction from one example's logits [H, W, output_channels].
TaskLabel decode_output(const TaskConfig& cfg, const Tensor& logits);

// Dataset-level evaluation. Primary metric first.
struct TaskMetric {
  std::string name;
  double value = 0.0;
  bool higher_is_better = true;
};

class TaskEvaluator {
 public:
  explicit TaskEvaluator(TaskConfig cfg) : cfg_(std::move(cfg)) {}
  void add(const TaskLabel& pred, const TaskLabel& gt);
  std::vector<TaskMetric> metrics() const;
  // Also reports accuracy restricted to pixels where region is set.
  void add_region(const TaskLabel& pred, const TaskLabel& gt, std::span<const std::uint8_t> region);
  std::size_t count() const { return count_; }

 private:
  TaskConfig cfg_;
  std::size_t count_ = 0;
  PanopticQuality pq_;
  double correct_ = 0, pixels_ = 0, sq_err_ = 0, sq_n_ = 0;
  double region_correct_ = 0, region_pixels_ = 0, outside_correct_ = 0, outside_pixels_ = 0;
};

}  // namespace uvim
