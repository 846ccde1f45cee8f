// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <vector>

#include "msiqa/autograd.hpp"

namespace msiqa::imaging {

// Planar (channel-major) raster with samples in [0, 1]. Channel order is RGB
// for colour images.
struct Image {
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  std::vector<double> pixels;

  static Image blank(Index channels, Index height, Index width, double value = 0.0);
  double& at(Index c, Index y, Index x) { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
  double at(Index c, Index y, Index x) const { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
  Index size() const { return channels * height * width; }
};

// 8- or 16-bit grey, RGB or RGBA (alpha dropped). Throws io on failure.
Image read_image(const std::filesystem::path& path);
// Quantizes to 8 bits per sample.
void write_png(const std::filesystem::path& path, const Image& image);

// Encode/decode at the given JPEG quality (1..100).
Image jpeg_round_trip(const Image& image, int quality);

// Area averaging when shrinking, bilinear otherwise.
Image resize(const Image& image, Index height, Index width);
// Grey images are replicated to three channels.
Image to_rgb(const Image& image);

// Single-channel [0, 1] map to an RGB false-colour heatmap.
Image heat_colormap(const Image& grey);

// Peak value 1.0; +inf for identical images.
double psnr(const Image& a, const Image& b);

// Stacks RGB images of equal size into an (N, 3, H, W) constant tensor.
Var to_batch(const std::vector<Image>& images);

}  // namespace msiqa::imaging
