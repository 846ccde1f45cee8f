// SPDX-License-Identifier: Apache-2.0
#include "msiqa/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "msiqa/errors.hpp"

namespace msiqa::imaging {

namespace {

// Interleaved 8-bit Mat in OpenCV channel order (BGR for colour).
cv::Mat to_mat8(const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    fail(ErrorCode::invalid_argument, "cannot encode a {}-channel image", image.channels);
  }
  cv::Mat mat(static_cast<int>(image.height), static_cast<int>(image.width),
              image.channels == 1 ? CV_8UC1 : CV_8UC3);
  for (Index y = 0; y < image.height; ++y) {
    auto* row = mat.ptr<std::uint8_t>(static_cast<int>(y));
    for (Index x = 0; x < image.width; ++x) {
      for (Index c = 0; c < image.channels; ++c) {
        const Index src = image.channels == 3 ? 2 - c : c;
        const double v = std::clamp(image.at(src, y, x), 0.0, 1.0);
        row[x * image.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return mat;
}

Image from_mat(const cv::Mat& mat) {
  double scale = 0.0;
  switch (mat.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    default: fail(ErrorCode::format, "unsupported sample depth {}", mat.depth());
  }
  const int source_channels = mat.channels();
  if (source_channels != 1 && source_channels != 3 && source_channels != 4) {
    fail(ErrorCode::format, "unsupported channel count {}", source_channels);
  }
  Image image = Image::blank(source_channels == 1 ? 1 : 3, mat.rows, mat.cols);
  cv::Mat wide;
  mat.convertTo(wide, CV_64F, scale);
  for (int y = 0; y < mat.rows; ++y) {
    const double* row = wide.ptr<double>(y);
    for (int x = 0; x < mat.cols; ++x) {
      if (image.channels == 1) {
        image.at(0, y, x) = row[x];
      } else {
        for (int c = 0; c < 3; ++c) image.at(c, y, x) = row[x * source_channels + (2 - c)];
      }
    }
  }
  return image;
}

}  // namespace

Image Image::blank(Index channels, Index height, Index width, double value) {
  Image image{channels, height, width, {}};
  image.pixels.assign(static_cast<std::size_t>(channels * height * width), value);
  return image;
}

Image read_image(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    fail(ErrorCode::io, "image '{}' does not exist", path.string());
  }
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    fail(ErrorCode::io, "unreadable image '{}': {}", path.string(), e.what());
  }
  if (mat.empty()) fail(ErrorCode::io, "unreadable image '{}'", path.string());
  return from_mat(mat);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const cv::Mat mat = to_mat8(image);
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, 6});
  } catch (const cv::Exception& e) {
    fail(ErrorCode::io, "cannot write '{}': {}", path.string(), e.what());
  }
  if (!ok) fail(ErrorCode::io, "cannot write '{}'", path.string());
}

Image jpeg_round_trip(const Image& image, int quality) {
  if (quality < 1 || quality > 100) fail(ErrorCode::invalid_argument, "JPEG quality {} outside 1..100", quality);
  std::vector<std::uint8_t> bytes;
  cv::Mat decoded;
  try {
    if (!cv::imencode(".jpg", to_mat8(image), bytes, {cv::IMWRITE_JPEG_QUALITY, quality})) {
      fail(ErrorCode::codec, "JPEG encoding failed");
    }
    decoded = cv::imdecode(bytes, cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    fail(ErrorCode::codec, "JPEG round trip failed: {}", e.what());
  }
  if (decoded.empty()) fail(ErrorCode::codec, "JPEG decoding failed");
  Image out = from_mat(decoded);
  if (out.height != image.height || out.width != image.width || out.channels != image.channels) {
    fail(ErrorCode::codec, "JPEG round trip changed the raster geometry");
  }
  return out;
}

Image resize(const Image& image, Index height, Index width) {
  if (height <= 0 || width <= 0) fail(ErrorCode::invalid_argument, "resize to {}x{}", height, width);
  if (height == image.height && width == image.width) return image;
  const bool shrinking = height < image.height || width < image.width;
  Image out = Image::blank(image.channels, height, width);
  for (Index c = 0; c < image.channels; ++c) {
    const cv::Mat plane(static_cast<int>(image.height), static_cast<int>(image.width), CV_64F,
                        const_cast<double*>(image.pixels.data() + c * image.height * image.width));
    cv::Mat target(static_cast<int>(height), static_cast<int>(width), CV_64F,
                   out.pixels.data() + c * height * width);
    cv::resize(plane, target, target.size(), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  }
  return out;
}

Image to_rgb(const Image& image) {
  if (image.channels == 3) return image;
  if (image.channels != 1) fail(ErrorCode::invalid_argument, "cannot expand {} channels to RGB", image.channels);
  Image out = Image::blank(3, image.height, image.width);
  const auto plane = image.pixels.size();
  for (int c = 0; c < 3; ++c) std::copy(image.pixels.begin(), image.pixels.end(), out.pixels.begin() + c * plane);
  return out;
}

Image heat_colormap(const Image& grey) {
  if (grey.channels != 1) fail(ErrorCode::invalid_argument, "heatmap input must have one channel");
  cv::Mat mapped;
  cv::applyColorMap(to_mat8(grey), mapped, cv::COLORMAP_JET);
  return from_mat(mapped);
}

double psnr(const Image& a, const Image& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width) {
    fail(ErrorCode::shape_mismatch, "PSNR of differently sized images");
  }
  double mse = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.pixels.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

Var to_batch(const std::vector<Image>& images) {
  if (images.empty()) fail(ErrorCode::invalid_argument, "empty image batch");
  const Image& first = images.front();
  std::vector<double> data;
  data.reserve(images.size() * static_cast<std::size_t>(first.size()));
  for (const Image& image : images) {
    if (image.channels != 3 || image.height != first.height || image.width != first.width) {
      fail(ErrorCode::shape_mismatch, "batch images must be RGB of equal size");
    }
    data.insert(data.end(), image.pixels.begin(), image.pixels.end());
  }
  return Var::constant({static_cast<Index>(images.size()), 3, first.height, first.width}, std::move(data));
}

}  // namespace msiqa::imaging
