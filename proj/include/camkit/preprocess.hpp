#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/image.hpp"

namespace camkit {

/// Bilinear resampling with half-pixel centers: the source coordinate of
/// destination index d is (d + 0.5) * (in / out) - 0.5, clamped to
/// [0, in - 1]. No value clipping; heatmaps use this directly.
inline ImageF resample_bilinear(const ImageF& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw Error(Errc::invalid_argument, "resize target must be >= 1");
  if (img.height == 0 || img.width == 0) throw Error(Errc::invalid_argument, "empty source image");
  if (out_h == img.height && out_w == img.width) return img;
  const double scale_y = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double scale_x = static_cast<double>(img.width) / static_cast<double>(out_w);
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t out, std::size_t in, double scale) {
    std::vector<Tap> t(out);
    for (std::size_t d = 0; d < out; ++d) {
      double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(s));
      t[d] = {lo, std::min(lo + 1, in - 1), s - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(out_h, img.height, scale_y);
  const auto tx = taps(out_w, img.width, scale_x);
  ImageF out(out_h, out_w, img.channels);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = (1.0 - tx[x].frac) * img.at(ty[y].lo, tx[x].lo, c) +
                           tx[x].frac * img.at(ty[y].lo, tx[x].hi, c);
        const double bottom = (1.0 - tx[x].frac) * img.at(ty[y].hi, tx[x].lo, c) +
                              tx[x].frac * img.at(ty[y].hi, tx[x].hi, c);
        out.at(y, x, c) = (1.0 - ty[y].frac) * top + ty[y].frac * bottom;
      }
    }
  }
  return out;
}

/// resample_bilinear followed by clipping to [0,1].
inline ImageF resize_bilinear(const ImageF& img, std::size_t out_h, std::size_t out_w) {
  ImageF out = resample_bilinear(img, out_h, out_w);
  for (double& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// (x - min) / (max - min) over all channels jointly; all zeros when max == min.
inline ImageF minmax_normalize(const ImageF& img) {
  ImageF out = img;
  if (img.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(img.values.begin(), img.values.end());
  const double min = *lo, range = *hi - *lo;
  for (double& v : out.values) v = range > 0.0 ? (v - min) / range : 0.0;
  return out;
}

inline ImageF minmax_normalize(const ImageU8& img) {
  ImageF raw(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) raw.values[i] = img.pixels[i];
  return minmax_normalize(raw);
}

/// Ingestion chain: scale to [0,1], match the model's channel count,
/// resize to (height, width), then min-max normalize.
inline ImageF preprocess(const ImageU8& img, std::size_t channels, std::size_t height,
                         std::size_t width) {
  ImageF f = to_float(img);
  if (channels == 1) {
    f = to_grayscale(f);
  } else if (channels == 3 && f.channels == 1) {
    ImageF rgb(f.height, f.width, 3);
    for (std::size_t p = 0; p < f.values.size(); ++p)
      for (std::size_t c = 0; c < 3; ++c) rgb.values[3 * p + c] = f.values[p];
    f = std::move(rgb);
  } else if (channels != f.channels) {
    throw Error(Errc::invalid_argument, "unsupported channel count " + std::to_string(channels));
  }
  return minmax_normalize(resize_bilinear(f, height, width));
}

}  // namespace camkit
