#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/tensor.hpp"

namespace camkit {

/// 8-bit image, row-major, channels interleaved.
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  ImageU8() = default;
  ImageU8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  friend bool operator==(const ImageU8&, const ImageU8&) = default;
};

/// Floating-point image with the same layout as ImageU8; pipeline outputs keep values in [0,1].
struct ImageF {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> values;

  ImageF() = default;
  ImageF(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), values(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return values[(y * width + x) * channels + c];
  }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return values[(y * width + x) * channels + c];
  }
  friend bool operator==(const ImageF&, const ImageF&) = default;
};

inline bool in_unit_range(const ImageF& img) {
  for (double v : img.values)
    if (!(v >= 0.0 && v <= 1.0)) return false;
  return true;
}

/// v / 255 per sample.
inline ImageF to_float(const ImageU8& img) {
  ImageF out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) out.values[i] = img.pixels[i] / 255.0;
  return out;
}

/// round(255 * clip(v, 0, 1)).
inline ImageU8 quantize(const ImageF& img) {
  ImageU8 out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    const double v = std::clamp(img.values[i], 0.0, 1.0);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * v));
  }
  return out;
}

/// Rec. 601 luma for RGB, identity for grayscale.
inline ImageF to_grayscale(const ImageF& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) {
    throw Error(Errc::invalid_argument, "cannot convert " + std::to_string(img.channels) +
                                            "-channel image to grayscale");
  }
  ImageF out(img.height, img.width, 1);
  for (std::size_t p = 0; p < img.height * img.width; ++p) {
    const double* rgb = img.values.data() + 3 * p;
    out.values[p] = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
  }
  return out;
}

/// Planar (C,H,W) copy of one image.
inline void copy_planar(const ImageF& img, double* dst) {
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < img.channels; ++c) dst[c * plane + p] = img.values[p * img.channels + c];
}

/// Stacks images into an (N,C,H,W) batch.
inline Tensor to_batch(std::span<const ImageF* const> images) {
  if (images.empty()) throw Error(Errc::invalid_argument, "empty batch");
  const ImageF& first = *images.front();
  Tensor batch({images.size(), first.channels, first.height, first.width});
  const std::size_t stride = first.channels * first.height * first.width;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const ImageF& img = *images[n];
    if (img.height != first.height || img.width != first.width || img.channels != first.channels) {
      throw Error(Errc::shape_mismatch, "batch image " + std::to_string(n) + " has a different size");
    }
    copy_planar(img, batch.data() + n * stride);
  }
  return batch;
}

inline Tensor to_batch(const ImageF& img) {
  const ImageF* one[1] = {&img};
  return to_batch(one);
}

}  // namespace camkit
