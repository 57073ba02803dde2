#pragma once

// Binary Netpbm: P5 (grayscale) and P6 (RGB), maxval 255 only.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/image.hpp"

namespace camkit {

namespace detail {
class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_++] - '0');
      if (++digits > 9) throw Error(Errc::parse_error, std::string(what) + " is too large");
    }
    if (digits == 0) throw Error(Errc::parse_error, std::string("missing ") + what + " in header");
    return value;
  }

  /// Exactly one whitespace byte separates maxval from the raster.
  void single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
      throw Error(Errc::parse_error, "header must end with one whitespace byte");
    ++pos_;
  }

  std::size_t position() const { return pos_; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 2;
};
}  // namespace detail

inline ImageU8 decode_netpbm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw Error(Errc::bad_magic, "expected P5 or P6 magic");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  detail::PnmHeaderReader header(bytes);
  const std::size_t width = header.number("width");
  const std::size_t height = header.number("height");
  const std::size_t maxval = header.number("maxval");
  if (width == 0 || height == 0) throw Error(Errc::parse_error, "zero image dimension");
  if (maxval != 255) {
    throw Error(Errc::bad_maxval, "maxval " + std::to_string(maxval) + " unsupported (need 255)");
  }
  header.single_whitespace();
  const std::size_t need = width * height * channels;
  const std::size_t have = bytes.size() - header.position();
  if (have < need) {
    throw Error(Errc::short_data, "raster needs " + std::to_string(need) + " bytes, found " +
                                      std::to_string(have));
  }
  ImageU8 img(height, width, channels);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(header.position()), need, img.pixels.begin());
  return img;
}

inline std::vector<std::uint8_t> encode_netpbm(const ImageU8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw Error(Errc::invalid_argument, "Netpbm needs 1 or 3 channels");
  }
  if (img.height == 0 || img.width == 0) throw Error(Errc::invalid_argument, "empty image");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(img.width) + " " + std::to_string(img.height) +
                             "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline ImageU8 read_netpbm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_netpbm(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

inline void write_netpbm(const ImageU8& img, const std::filesystem::path& path) {
  const auto bytes = encode_netpbm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace camkit
