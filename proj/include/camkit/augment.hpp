#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/image.hpp"
#include "camkit/rng.hpp"

namespace camkit {

struct AugmentConfig {
  double noise_std = 0.0023;
  double contrast_scale = 0.79;
  double brightness_delta = 0.24;
  std::vector<double> rotation_set{-13.0, -9.0, 9.0, 13.0};  // degrees
  double flip_probability = 0.5;
  std::uint64_t seed = 0;

  /// Every step turned into the identity.
  static AugmentConfig disabled() {
    AugmentConfig cfg;
    cfg.noise_std = 0.0;
    cfg.contrast_scale = 1.0;
    cfg.brightness_delta = 0.0;
    cfg.rotation_set = {0.0};
    cfg.flip_probability = 0.0;
    return cfg;
  }
};

inline ImageF hflip(const ImageF& img) {
  ImageF out = img;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

/// Adds N(0, std^2) noise (one Rng::normal() per value, storage order), then clips to [0,1].
inline ImageF add_gaussian_noise(const ImageF& img, double std_dev, Rng& rng) {
  ImageF out = img;
  for (double& v : out.values) v = std::clamp(v + std_dev * rng.normal(), 0.0, 1.0);
  return out;
}

/// clip(scale * v + delta, 0, 1).
inline ImageF adjust_contrast_brightness(const ImageF& img, double scale, double delta) {
  ImageF out = img;
  for (double& v : out.values) v = std::clamp(scale * v + delta, 0.0, 1.0);
  return out;
}

/// Rotation about the pixel-grid center ((W-1)/2, (H-1)/2), counter-clockwise
/// on screen for positive degrees. Bilinear sampling; source pixels outside
/// the image read as 0.
inline ImageF rotate(const ImageF& img, double degrees) {
  if (degrees == 0.0) return img;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const auto h = static_cast<std::ptrdiff_t>(img.height);
  const auto w = static_cast<std::ptrdiff_t>(img.width);
  auto sample = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
    if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
    return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
  };
  ImageF out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double sx = cx + cs * dx - sn * dy;
      const double sy = cy + sn * dx + cs * dy;
      const auto x0 = static_cast<std::ptrdiff_t>(std::floor(sx));
      const auto y0 = static_cast<std::ptrdiff_t>(std::floor(sy));
      const double fx = sx - static_cast<double>(x0);
      const double fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - fx) * sample(y0, x0, c) + fx * sample(y0, x0 + 1, c);
        const double bottom = (1.0 - fx) * sample(y0 + 1, x0, c) + fx * sample(y0 + 1, x0 + 1, c);
        out.at(y, x, c) = std::clamp((1.0 - fy) * top + fy * bottom, 0.0, 1.0);
      }
    }
  }
  return out;
}

/// flip -> noise+clip -> contrast -> brightness+clip -> rotation.
///
/// Draw order from rng: one uniform() for the flip decision; one normal()
/// per value when noise_std > 0; one below(|rotation_set|) for the angle.
inline ImageF augment_chain(const ImageF& img, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.rotation_set.empty()) throw Error(Errc::invalid_argument, "rotation_set is empty");
  ImageF out = rng.bernoulli(cfg.flip_probability) ? hflip(img) : img;
  if (cfg.noise_std > 0.0) out = add_gaussian_noise(out, cfg.noise_std, rng);
  out = adjust_contrast_brightness(out, cfg.contrast_scale, cfg.brightness_delta);
  const double angle = cfg.rotation_set[static_cast<std::size_t>(rng.below(cfg.rotation_set.size()))];
  return rotate(out, angle);
}

/// Stream for item `index` in `epoch`, so parallel augmentation matches sequential.
inline Rng augment_rng(const AugmentConfig& cfg, std::uint64_t epoch, std::uint64_t index) {
  return Rng(derive_seed(cfg.seed, {epoch, index}));
}

}  // namespace camkit
