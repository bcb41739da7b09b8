// Copyright Contributors to the morphdiff Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <cmath>
#include <filesystem>

#include "morphdiff/tensor.hpp"

namespace morphdiff {

/// Writes a [3, H, W] image with values in [0, 1] as 8-bit RGB PNG.
inline void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ConfigError("write_png expects a [3, H, W] image");
  const Index h = image.dim(1);
  const Index w = image.dim(2);
  std::vector<png_byte> rgb(static_cast<std::size_t>(h * w * 3));
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < h * w; ++i) {
      const float v = std::clamp(image[c * h * w + i], 0.0f, 1.0f);
      rgb[static_cast<std::size_t>(i * 3 + c)] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw RuntimeFault("cannot write PNG " + path.string() + ": " + img.message);
  }
}

/// Reads an 8-bit PNG into a [3, H, W] image with values in [0, 1].
inline Tensor<float> read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw ConfigError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    throw ConfigError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const Index h = img.height;
  const Index w = img.width;
  Tensor<float> out({3, h, w});
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < h * w; ++i) out[c * h * w + i] = static_cast<float>(rgb[static_cast<std::size_t>(i * 3 + c)]) / 255.0f;
  }
  return out;
}

/// Tiles [N, 3, H, W] views into a single [3, rows * H, cols * W] image (white fill).
inline Tensor<float> tile_views(const Tensor<float>& views, Index cols) {
  const Index n = views.dim(0);
  const Index h = views.dim(2);
  const Index w = views.dim(3);
  const Index rows = (n + cols - 1) / cols;
  Tensor<float> grid({3, rows * h, cols * w}, 1.0f);
  for (Index v = 0; v < n; ++v) {
    const Index r0 = (v / cols) * h;
    const Index c0 = (v % cols) * w;
    for (Index c = 0; c < 3; ++c)
      for (Index i = 0; i < h; ++i)
        for (Index j = 0; j < w; ++j) grid[(c * rows * h + r0 + i) * cols * w + c0 + j] = views[((v * 3 + c) * h + i) * w + j];
  }
  return grid;
}

}  // namespace morphdiff
