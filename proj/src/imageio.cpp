#include "uvim/imageio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uvim {

namespace {

std::uint8_t to_byte(double v01) { return static_cast<std::uint8_t>(std::lround(std::clamp(v01, 0.0, 1.0) * 255.0)); }

void check_png(png_image& image, int ok, const std::string& path) {
  if (!ok) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("png '" + path + "': " + msg);
  }
}

}  // namespace

void write_png(const std::string& path, const Raster& raster) {
  if (raster.pixels.size() != raster.height * raster.width * raster.channels) {
    throw std::invalid_argument("write_png: raster size mismatch");
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(raster.width);
  image.height = static_cast<png_uint_32>(raster.height);
  switch (raster.channels) {
    case 1: image.format = PNG_FORMAT_GRAY; break;
    case 3: image.format = PNG_FORMAT_RGB; break;
    case 4: image.format = PNG_FORMAT_RGBA; break;
    default: throw std::invalid_argument("write_png: unsupported channel count");
  }
  check_png(image, png_image_write_to_file(&image, path.c_str(), 0, raster.pixels.data(), 0, nullptr), path);
}

void write_png16(const std::string& path, std::size_t height, std::size_t width,
                 std::span<const std::uint16_t> values) {
  if (values.size() != height * width) throw std::invalid_argument("write_png16: size mismatch");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = PNG_FORMAT_LINEAR_Y;
  check_png(image, png_image_write_to_file(&image, path.c_str(), 0, values.data(), 0, nullptr), path);
}

Raster read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  check_png(image, png_image_begin_read_from_file(&image, path.c_str()), path);
  image.format = PNG_FORMAT_RGB;
  Raster r{image.height, image.width, 3, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  check_png(image, png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr), path);
  return r;
}

Raster to_raster(const Image& image) {
  Raster r{image.height, image.width, 3, std::vector<std::uint8_t>(image.height * image.width * 3)};
  for (std::size_t p = 0; p < image.height * image.width; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = image.pixels[p * image.channels + (image.channels == 1 ? 0 : c)];
      r.pixels[p * 3 + c] = to_byte((v + 1.0) / 2.0);
    }
  }
  return r;
}

Raster to_raster(const PanopticMask& mask) {
  Raster r{mask.height, mask.width, 3, std::vector<std::uint8_t>(mask.height * mask.width * 3)};
  for (std::size_t p = 0; p < mask.height * mask.width; ++p) {
    const int s = mask.semantic[p], i = mask.instance[p];
    std::uint8_t rgb[3] = {0, 0, 0};
    if (s != kVoidClass && i == 0) {
      const auto tone = static_cast<std::uint8_t>(40 + 25 * s);
      rgb[0] = rgb[1] = rgb[2] = tone;
    } else if (s != kVoidClass) {
      // Hue from the instance id, brightness from the class.
      const double h = std::fmod(0.13 + 0.381966 * i, 1.0) * 6.0;
      const double v = 0.55 + 0.06 * (s % 8);
      const double f = h - std::floor(h);
      const double q = v * (1 - f), t = v * f;
      double c[3];
      switch (static_cast<int>(h) % 6) {
        case 0: c[0] = v, c[1] = t, c[2] = 0; break;
        case 1: c[0] = q, c[1] = v, c[2] = 0; break;
        case 2: c[0] = 0, c[1] = v, c[2] = t; break;
        case 3: c[0] = 0, c[1] = q, c[2] = v; break;
        case 4: c[0] = t, c[1] = 0, c[2] = v; break;
        default: c[0] = v, c[1] = 0, c[2] = q; break;
      }
      for (int k = 0; k < 3; ++k) rgb[k] = to_byte(c[k]);
    }
    std::copy(rgb, rgb + 3, r.pixels.begin() + static_cast<std::ptrdiff_t>(p * 3));
  }
  return r;
}

Raster to_raster(const DepthMap& depth, double max_depth) {
  Raster r{depth.height, depth.width, 3, std::vector<std::uint8_t>(depth.height * depth.width * 3)};
  for (std::size_t p = 0; p < depth.values.size(); ++p) {
    const std::uint8_t v = to_byte(1.0 - depth.values[p] / max_depth);
    r.pixels[p * 3] = r.pixels[p * 3 + 1] = r.pixels[p * 3 + 2] = v;
  }
  return r;
}

Raster to_raster(const TaskLabel& label, double max_depth) {
  if (const auto* m = std::get_if<PanopticMask>(&label)) return to_raster(*m);
  if (const auto* d = std::get_if<DepthMap>(&label)) return to_raster(*d, max_depth);
  return to_raster(std::get<Image>(label));
}

Raster tile(const std::vector<std::vector<Raster>>& rows, std::size_t pad) {
  std::size_t cell_h = 0, cell_w = 0, cols = 0;
  for (const auto& row : rows) {
    cols = std::max(cols, row.size());
    for (const auto& r : row) {
      cell_h = std::max(cell_h, r.height);
      cell_w = std::max(cell_w, r.width);
    }
  }
  const std::size_t h = rows.size() * (cell_h + pad) + pad, w = cols * (cell_w + pad) + pad;
  Raster out{h, w, 3, std::vector<std::uint8_t>(h * w * 3, 255)};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      const Raster& cell = rows[i][j];
      if (cell.channels != 3) throw std::invalid_argument("tile: expected RGB rasters");
      const std::size_t r0 = pad + i * (cell_h + pad), c0 = pad + j * (cell_w + pad);
      for (std::size_t r = 0; r < cell.height; ++r) {
        std::copy_n(cell.pixels.begin() + static_cast<std::ptrdiff_t>(r * cell.width * 3), cell.width * 3,
                    out.pixels.begin() + static_cast<std::ptrdiff_t>(((r0 + r) * w + c0) * 3));
      }
    }
  }
  return out;
}

}  // namespace uvim
