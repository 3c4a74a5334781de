#include "uvim/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace uvim {

TaskKind parse_task(const std::string& name) {
  if (name == "panoptic") return TaskKind::panoptic;
  if (name == "colorization") return TaskKind::colorization;
  if (name == "depth") return TaskKind::depth;
  throw std::invalid_argument("unknown task '" + name + "' (expected panoptic, colorization or depth)");
}

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::panoptic: return "panoptic";
    case TaskKind::colorization: return "colorization";
    case TaskKind::depth: return "depth";
  }
  return "?";
}

void PanopticMask::validate(std::size_t num_classes, std::size_t num_instances) const {
  const std::size_t n = height * width;
  if (semantic.size() != n || instance.size() != n) {
    throw std::invalid_argument("PanopticMask: channel sizes do not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (semantic[i] < 0 || static_cast<std::size_t>(semantic[i]) >= num_classes) {
      throw std::invalid_argument("PanopticMask: semantic id " + std::to_string(semantic[i]) + " out of range");
    }
    if (instance[i] < 0 || static_cast<std::size_t>(instance[i]) >= num_instances) {
      throw std::invalid_argument("PanopticMask: instance id " + std::to_string(instance[i]) + " out of range");
    }
  }
}

int DepthBins::bin(double depth) const {
  if (!(depth >= min && depth <= max)) {
    throw std::out_of_range("depth " + std::to_string(depth) + " outside [" + std::to_string(min) + ", " +
                            std::to_string(max) + "]");
  }
  const auto i = static_cast<std::size_t>(std::floor((depth - min) / bin_width()));
  return static_cast<int>(std::min(i, count - 1));
}

double DepthBins::center(int bin) const {
  if (bin < 0 || static_cast<std::size_t>(bin) >= count) throw std::out_of_range("depth bin out of range");
  return min + (bin + 0.5) * bin_width();
}

void TaskConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("task: num_classes must be at least 2");
  if (num_instances < 2) throw std::invalid_argument("task: num_instances must be at least 2");
  if (depth.count < 2 || !(depth.max > depth.min)) throw std::invalid_argument("task: invalid depth bins");
  if (!(depth_eval_crop > 0.0 && depth_eval_crop <= 1.0)) throw std::invalid_argument("task: crop must be in (0, 1]");
}

std::size_t TaskConfig::input_channels() const { return kind == TaskKind::colorization ? 1 : 3; }

std::size_t TaskConfig::label_channels() const { return output_channels(); }

std::size_t TaskConfig::output_channels() const {
  switch (kind) {
    case TaskKind::panoptic: return num_classes + num_instances;
    case TaskKind::colorization: return 3;
    case TaskKind::depth: return depth.count;
  }
  return 0;
}

PanopticMask canonicalize_instances(const PanopticMask& mask) {
  struct Stats {
    std::int64_t count = 0, sum_r = 0, sum_c = 0;
    std::size_t first = 0;
    int id = 0;
  };
  std::map<int, Stats> stats;
  for (std::size_t p = 0; p < mask.instance.size(); ++p) {
    const int id = mask.instance[p];
    if (id <= 0) continue;
    auto [it, fresh] = stats.try_emplace(id);
    Stats& s = it->second;
    if (fresh) {
      s.first = p;
      s.id = id;
    }
    s.count += 1;
    s.sum_r += static_cast<std::int64_t>(p / mask.width);
    s.sum_c += static_cast<std::int64_t>(p % mask.width);
  }
  std::vector<Stats> order;
  for (const auto& [id, s] : stats) order.push_back(s);
  // Exact centroid comparison by cross-multiplication: row, then column, then
  // first raster pixel (unique for disjoint regions).
  std::sort(order.begin(), order.end(), [](const Stats& a, const Stats& b) {
    const std::int64_t ra = a.sum_r * b.count, rb = b.sum_r * a.count;
    if (ra != rb) return ra < rb;
    const std::int64_t ca = a.sum_c * b.count, cb = b.sum_c * a.count;
    if (ca != cb) return ca < cb;
    if (a.first != b.first) return a.first < b.first;
    return a.id < b.id;
  });
  std::map<int, int> relabel;
  for (std::size_t i = 0; i < order.size(); ++i) relabel[order[i].id] = static_cast<int>(i + 1);
  PanopticMask out = mask;
  for (auto& id : out.instance) {
    if (id > 0) id = relabel[id];
  }
  return out;
}

namespace {

std::vector<int> argmax_last(const Tensor& logits) {
  const std::size_t c = logits.dim(-1), rows = logits.numel() / c;
  const auto v = logits.data();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = v.data() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace

PanopticMask panoptic_postprocess(const Tensor& semantic_logits, const Tensor& instance_logits,
                                  double tiny_fraction) {
  if (semantic_logits.rank() != 3 || instance_logits.rank() != 3 ||
      semantic_logits.dim(0) != instance_logits.dim(0) || semantic_logits.dim(1) != instance_logits.dim(1)) {
    throw ShapeError("panoptic_postprocess: logits " + shape_str(semantic_logits.shape()) + " and " +
                     shape_str(instance_logits.shape()) + " must be [H, W, S] and [H, W, I]");
  }
  PanopticMask mask;
  mask.height = semantic_logits.dim(0);
  mask.width = semantic_logits.dim(1);
  mask.semantic = argmax_last(semantic_logits);
  mask.instance = argmax_last(instance_logits);
  const std::size_t pixels = mask.height * mask.width, classes = semantic_logits.dim(2);

  std::map<int, std::vector<std::size_t>> votes;
  std::map<int, std::size_t> area;
  for (std::size_t p = 0; p < pixels; ++p) {
    const int id = mask.instance[p];
    if (id == 0) continue;
    auto& v = votes[id];
    if (v.empty()) v.assign(classes, 0);
    ++v[static_cast<std::size_t>(mask.semantic[p])];
    ++area[id];
  }
  std::map<int, int> winner;
  for (const auto& [id, v] : votes) {
    // max_element returns the first maximum, so ties go to the lower class.
    winner[id] = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  }
  const double min_area = tiny_fraction * static_cast<double>(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    const int id = mask.instance[p];
    if (id == 0) continue;
    if (static_cast<double>(area[id]) < min_area) {
      mask.instance[p] = 0;
      mask.semantic[p] = kVoidClass;
    } else {
      mask.semantic[p] = winner[id];
    }
  }
  return canonicalize_instances(mask);
}

double PanopticQuality::pq() const {
  const double denom = tp + 0.5 * fp + 0.5 * fn;
  return denom == 0.0 ? 1.0 : iou_sum / denom;
}

double PanopticQuality::sq() const { return tp == 0 ? (fp + fn == 0 ? 1.0 : 0.0) : iou_sum / tp; }

double PanopticQuality::rq() const {
  const double denom = tp + 0.5 * fp + 0.5 * fn;
  return denom == 0.0 ? 1.0 : tp / denom;
}

PanopticQuality& PanopticQuality::operator+=(const PanopticQuality& other) {
  iou_sum += other.iou_sum;
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  return *this;
}

PanopticQuality panoptic_quality(const PanopticMask& pred, const PanopticMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.semantic.size() != gt.semantic.size() ||
      pred.instance.size() != gt.instance.size()) {
    throw std::invalid_argument("panoptic_quality: mask shapes differ (" + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                                std::to_string(gt.width) + ")");
  }
  using Key = std::pair<int, int>;
  std::map<Key, std::size_t> pred_area, gt_area, pred_in_void;
  std::map<std::pair<Key, Key>, std::size_t> overlap;
  for (std::size_t p = 0; p < gt.semantic.size(); ++p) {
    const Key pk{pred.semantic[p], pred.instance[p]}, gk{gt.semantic[p], gt.instance[p]};
    const bool pred_void = pk.first == kVoidClass, gt_void = gk.first == kVoidClass;
    if (!pred_void) ++pred_area[pk];
    if (!gt_void) ++gt_area[gk];
    if (!pred_void && gt_void) ++pred_in_void[pk];
    if (!pred_void && !gt_void) ++overlap[{pk, gk}];
  }
  PanopticQuality q;
  std::map<Key, bool> pred_matched, gt_matched;
  for (const auto& [pair, inter] : overlap) {
    const auto& [pk, gk] = pair;
    if (pk.first != gk.first) continue;
    const double uni = static_cast<double>(pred_area[pk] + gt_area[gk] - inter - pred_in_void[pk]);
    const double iou = static_cast<double>(inter) / uni;
    if (iou > 0.5) {
      q.iou_sum += iou;
      ++q.tp;
      pred_matched[pk] = true;
      gt_matched[gk] = true;
    }
  }
  for (const auto& [gk, a] : gt_area) q.fn += !gt_matched.count(gk);
  for (const auto& [pk, a] : pred_area) {
    if (pred_matched.count(pk)) continue;
    if (static_cast<double>(pred_in_void[pk]) / static_cast<double>(a) > 0.5) continue;
    ++q.fp;
  }
  return q;
}

double panoptic_pixel_accuracy(const PanopticMask& pred, const PanopticMask& gt) {
  if (pred.semantic.size() != gt.semantic.size() || gt.semantic.empty()) {
    throw std::invalid_argument("panoptic_pixel_accuracy: mask shapes differ or are empty");
  }
  std::size_t ok = 0;
  for (std::size_t p = 0; p < gt.semantic.size(); ++p) {
    ok += pred.semantic[p] == gt.semantic[p] && pred.instance[p] == gt.instance[p];
  }
  return static_cast<double>(ok) / static_cast<double>(gt.semantic.size());
}

std::vector<int> depth_quantize(const DepthMap& depth, const DepthBins& bins) {
  std::vector<int> out(depth.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bins.bin(depth.values[i]);
  return out;
}

DepthMap depth_dequantize(std::span<const int> indices, std::size_t height, std::size_t width,
                          const DepthBins& bins) {
  if (indices.size() != height * width) throw std::invalid_argument("depth_dequantize: size mismatch");
  DepthMap d{height, width, std::vector<float>(indices.size())};
  for (std::size_t i = 0; i < indices.size(); ++i) d.values[i] = static_cast<float>(bins.center(indices[i]));
  return d;
}

double rmse(const DepthMap& pred, const DepthMap& gt, std::span<const std::uint8_t> valid) {
  if (pred.values.size() != gt.values.size() || valid.size() != gt.values.size()) {
    throw std::invalid_argument("rmse: shape mismatch");
  }
  double sq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    const double e = static_cast<double>(pred.values[i]) - gt.values[i];
    sq += e * e;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("rmse: empty valid mask");
  return std::sqrt(sq / static_cast<double>(n));
}

std::vector<std::uint8_t> central_crop_mask(std::size_t height, std::size_t width, double fraction) {
  const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(height * fraction)));
  const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(width * fraction)));
  const std::size_t r0 = (height - ch) / 2, c0 = (width - cw) / 2;
  std::vector<std::uint8_t> m(height * width, 0);
  for (std::size_t r = r0; r < r0 + ch; ++r)
    for (std::size_t c = c0; c < c0 + cw; ++c) m[r * width + c] = 1;
  return m;
}

double mean_squared_error(const Image& pred, const Image& gt) {
  if (pred.pixels.size() != gt.pixels.size() || gt.pixels.empty()) {
    throw std::invalid_argument("mean_squared_error: image shapes differ");
  }
  double sq = 0;
  for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
    const double e = static_cast<double>(pred.pixels[i]) - gt.pixels[i];
    sq += e * e;
  }
  return sq / static_cast<double>(gt.pixels.size());
}

Image to_grayscale(const Image& image) {
  if (image.channels == 1) return image;
  if (image.channels != 3) throw std::invalid_argument("to_grayscale: expected 1 or 3 channels");
  Image g{image.height, image.width, 1, std::vector<float>(image.height * image.width)};
  for (std::size_t p = 0; p < g.pixels.size(); ++p) {
    const float* px = image.pixels.data() + 3 * p;
    g.pixels[p] = static_cast<float>(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
  }
  return g;
}

Tensor image_tensor(std::span<const Image> images) {
  if (images.empty()) throw std::invalid_argument("image_tensor: empty batch");
  const Image& first = images.front();
  std::vector<float> data;
  data.reserve(images.size() * first.pixels.size());
  for (const auto& im : images) {
    if (im.height != first.height || im.width != first.width || im.channels != first.channels ||
        im.pixels.size() != im.height * im.width * im.channels) {
      throw ShapeError("image_tensor: images in a batch must share one shape");
    }
    data.insert(data.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor({images.size(), first.height, first.width, first.channels}, std::move(data));
}

namespace {

template <class L>
const L& expect_label(const TaskLabel& label, const char* what) {
  const L* l = std::get_if<L>(&label);
  if (!l) throw std::invalid_argument(std::string("label encoding does not match the configured task: expected ") + what);
  return *l;
}

std::pair<std::size_t, std::size_t> label_extent(const TaskLabel& label) {
  return std::visit([](const auto& l) { return std::pair{l.height, l.width}; }, label);
}

}  // namespace

Tensor encode_labels(const TaskConfig& cfg, std::span<const TaskLabel> labels) {
  if (labels.empty()) throw std::invalid_argument("encode_labels: empty batch");
  const auto [h, w] = label_extent(labels.front());
  const std::size_t c = cfg.label_channels(), px = h * w;
  std::vector<float> out(labels.size() * px * c, 0.0f);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (label_extent(labels[b]) != std::pair{h, w}) throw ShapeError("encode_labels: labels differ in size");
    float* dst = out.data() + b * px * c;
    switch (cfg.kind) {
      case TaskKind::panoptic: {
        const auto& m = expect_label<PanopticMask>(labels[b], "panoptic mask");
        m.validate(cfg.num_classes, cfg.num_instances);
        for (std::size_t p = 0; p < px; ++p) {
          dst[p * c + m.semantic[p]] = 1.0f;
          dst[p * c + cfg.num_classes + m.instance[p]] = 1.0f;
        }
        break;
      }
      case TaskKind::depth: {
        const auto bins = depth_quantize(expect_label<DepthMap>(labels[b], "depth map"), cfg.depth);
        for (std::size_t p = 0; p < px; ++p) dst[p * c + bins[p]] = 1.0f;
        break;
      }
      case TaskKind::colorization: {
        const auto& im = expect_label<Image>(labels[b], "RGB image");
        if (im.channels != 3) throw std::invalid_argument("colorization labels must be RGB");
        std::copy(im.pixels.begin(), im.pixels.end(), dst);
        break;
      }
    }
  }
  return Tensor({labels.size(), h, w, c}, std::move(out));
}

Tensor task_reconstruction_loss(const TaskConfig& cfg, const Tensor& logits, std::span<const TaskLabel> labels) {
  if (logits.rank() != 4 || logits.dim(0) != labels.size() || logits.dim(3) != cfg.output_channels()) {
    throw ShapeError("task loss: logits " + shape_str(logits.shape()) + " do not match " +
                     std::to_string(labels.size()) + " " + task_name(cfg.kind) + " labels");
  }
  const std::size_t b = logits.dim(0), h = logits.dim(1), w = logits.dim(2), rows = b * h * w;
  for (const auto& l : labels) {
    if (label_extent(l) != std::pair{h, w}) throw ShapeError("task loss: label size differs from logits");
  }
  switch (cfg.kind) {
    case TaskKind::panoptic: {
      std::vector<int> sem, inst;
      sem.reserve(rows);
      inst.reserve(rows);
      for (const auto& l : labels) {
        const auto& m = expect_label<PanopticMask>(l, "panoptic mask");
        sem.insert(sem.end(), m.semantic.begin(), m.semantic.end());
        inst.insert(inst.end(), m.instance.begin(), m.instance.end());
      }
      const std::size_t s = cfg.num_classes, i = cfg.num_instances;
      Tensor ls = softmax_cross_entropy(reshape(slice(logits, 3, 0, s), {rows, s}), std::span<const int>(sem));
      Tensor li = softmax_cross_entropy(reshape(slice(logits, 3, s, i), {rows, i}), std::span<const int>(inst));
      return scale(add(ls, li), 0.5f);
    }
    case TaskKind::depth: {
      std::vector<int> bins;
      bins.reserve(rows);
      for (const auto& l : labels) {
        const auto q = depth_quantize(expect_label<DepthMap>(l, "depth map"), cfg.depth);
        bins.insert(bins.end(), q.begin(), q.end());
      }
      return softmax_cross_entropy(reshape(logits, {rows, cfg.depth.count}), std::span<const int>(bins));
    }
    case TaskKind::colorization:
      return mean_squared_error(logits, encode_labels(cfg, labels));
  }
  throw std::logic_error("unreachable");
}

TaskLabel decode_output(const TaskConfig& cfg, const Tensor& logits) {
  if (logits.rank() != 3 || logits.dim(2) != cfg.output_channels()) {
    throw ShapeError("decode_output: expected [H, W, " + std::to_string(cfg.output_channels()) + "], got " +
                     shape_str(logits.shape()));
  }
  const std::size_t h = logits.dim(0), w = logits.dim(1);
  switch (cfg.kind) {
    case TaskKind::panoptic:
      return panoptic_postprocess(slice(logits, 2, 0, cfg.num_classes),
                                  slice(logits, 2, cfg.num_classes, cfg.num_instances), cfg.tiny_fraction);
    case TaskKind::depth: {
      const auto bins = argmax_last(logits);
      return depth_dequantize(bins, h, w, cfg.depth);
    }
    case TaskKind::colorization: {
      Image im{h, w, 3, logits.values()};
      for (auto& v : im.pixels) v = std::clamp(v, -1.0f, 1.0f);
      return im;
    }
  }
  throw std::logic_error("unreachable");
}

namespace {

// Per-pixel correctness used for region accuracy.
std::vector<std::uint8_t> pixel_correct(const TaskConfig& cfg, const TaskLabel& pred, const TaskLabel& gt) {
  switch (cfg.kind) {
    case TaskKind::panoptic: {
      const auto& p = expect_label<PanopticMask>(pred, "panoptic mask");
      const auto& g = expect_label<PanopticMask>(gt, "panoptic mask");
      std::vector<std::uint8_t> ok(g.semantic.size());
      for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = p.semantic[i] == g.semantic[i] && p.instance[i] == g.instance[i];
      return ok;
    }
    case TaskKind::depth: {
      const auto pb = depth_quantize(expect_label<DepthMap>(pred, "depth map"), cfg.depth);
      const auto gb = depth_quantize(expect_label<DepthMap>(gt, "depth map"), cfg.depth);
      std::vector<std::uint8_t> ok(gb.size());
      for (std::size_t i = 0; i < ok.size(); ++i) ok[i] = pb[i] == gb[i];
      return ok;
    }
    case TaskKind::colorization: {
      const auto& p = expect_label<Image>(pred, "RGB image");
      const auto& g = expect_label<Image>(gt, "RGB image");
      std::vector<std::uint8_t> ok(g.height * g.width);
      for (std::size_t i = 0; i < ok.size(); ++i) {
        bool good = true;
        for (std::size_t c = 0; c < 3; ++c) good &= std::abs(p.pixels[3 * i + c] - g.pixels[3 * i + c]) < 0.1f;
        ok[i] = good;
      }
      return ok;
    }
  }
  return {};
}

}  // namespace

void TaskEvaluator::add(const TaskLabel& pred, const TaskLabel& gt) {
  ++count_;
  switch (cfg_.kind) {
    case TaskKind::panoptic: {
      const auto& p = expect_label<PanopticMask>(pred, "panoptic mask");
      const auto& g = expect_label<PanopticMask>(gt, "panoptic mask");
      pq_ += panoptic_quality(p, g);
      correct_ += panoptic_pixel_accuracy(p, g) * g.semantic.size();
      pixels_ += g.semantic.size();
      break;
    }
    case TaskKind::depth: {
      const auto& p = expect_label<DepthMap>(pred, "depth map");
      const auto& g = expect_label<DepthMap>(gt, "depth map");
      const auto crop = central_crop_mask(g.height, g.width, cfg_.depth_eval_crop);
      const double e = rmse(p, g, crop);
      const double n = static_cast<double>(std::count(crop.begin(), crop.end(), 1));
      sq_err_ += e * e * n;
      sq_n_ += n;
      break;
    }
    case TaskKind::colorization: {
      const auto& p = expect_label<Image>(pred, "RGB image");
      const auto& g = expect_label<Image>(gt, "RGB image");
      sq_err_ += mean_squared_error(p, g) * g.pixels.size();
      sq_n_ += g.pixels.size();
      break;
    }
  }
}

void TaskEvaluator::add_region(const TaskLabel& pred, const TaskLabel& gt, std::span<const std::uint8_t> region) {
  const auto ok = pixel_correct(cfg_, pred, gt);
  if (region.size() != ok.size()) throw std::invalid_argument("add_region: region size mismatch");
  for (std::size_t i = 0; i < ok.size(); ++i) {
    if (region[i]) {
      region_correct_ += ok[i];
      region_pixels_ += 1;
    } else {
      outside_correct_ += ok[i];
      outside_pixels_ += 1;
    }
  }
}

std::vector<TaskMetric> TaskEvaluator::metrics() const {
  std::vector<TaskMetric> out;
  switch (cfg_.kind) {
    case TaskKind::panoptic:
      out.push_back({"pq", pq_.pq(), true});
      out.push_back({"sq", pq_.sq(), true});
      out.push_back({"rq", pq_.rq(), true});
      out.push_back({"pixel_accuracy", pixels_ > 0 ? correct_ / pixels_ : 0.0, true});
      break;
    case TaskKind::depth:
      out.push_back({"rmse", sq_n_ > 0 ? std::sqrt(sq_err_ / sq_n_) : 0.0, false});
      break;
    case TaskKind::colorization:
      out.push_back({"mse", sq_n_ > 0 ? sq_err_ / sq_n_ : 0.0, false});
      break;
  }
  if (region_pixels_ > 0) out.push_back({"region_accuracy", region_correct_ / region_pixels_, true});
  if (outside_pixels_ > 0) out.push_back({"outside_accuracy", outside_correct_ / outside_pixels_, true});
  return out;
}

}  // namespace uvim
