#pragma once

// Lossless PNG output for datasets and sample grids.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uvim/tasks.hpp"

namespace uvim {

struct Raster {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<std::uint8_t> pixels;
};

void write_png(const std::string& path, const Raster& raster);
// 16-bit single-channel PNG.
void write_png16(const std::string& path, std::size_t height, std::size_t width, std::span<const std::uint16_t> values);
Raster read_png(const std::string& path);

// [-1, 1] -> [0, 255]; grayscale is replicated to RGB.
Raster to_raster(const Image& image);
// Stuff classes get a fixed dark tone, each (class, instance) a distinct color.
Raster to_raster(const PanopticMask& mask);
Raster to_raster(const DepthMap& depth, double max_depth);
Raster to_raster(const TaskLabel& label, double max_depth);

// Tiles equally sized rasters row by row with a gap of `pad` pixels.
Raster tile(const std::vector<std::vector<Raster>>& rows, std::size_t pad = 2);

}  // namespace uvim
