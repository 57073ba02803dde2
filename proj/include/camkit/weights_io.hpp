#pragma once

// CAMF0001 weight files:
//
//   bytes 0..7   ASCII "CAMF0001"
//   header       canonical model spec text (to_text), UTF-8, terminated by '\n'
//   tensors      for each layer in order, weights then bias, skipping
//                parameterless layers:
//                  u32 LE rank, rank x u32 LE dims, prod(dims) x f64 LE values
//
// Nothing follows the last tensor.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/model.hpp"

namespace camkit {

inline constexpr std::string_view kWeightMagic = "CAMF0001";

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return std::bit_cast<double>(v);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }
  void skip(std::size_t n) { pos_ += n; }
  const std::uint8_t* cursor() const { return bytes_.data() + pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw Error(Errc::truncated, std::string("file ends inside ") + what + " at byte " +
                                       std::to_string(pos_));
    }
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

/// Checks the magic and returns the header line; leaves the reader after '\n'.
inline std::string read_header(ByteReader& reader) {
  const std::size_t magic_len = kWeightMagic.size();
  const std::size_t have = std::min(reader.remaining(), magic_len);
  if (std::memcmp(reader.cursor(), kWeightMagic.data(), have) != 0) {
    throw Error(Errc::bad_magic, "not a CAMF0001 weight file");
  }
  reader.need(magic_len, "magic");
  reader.skip(magic_len);
  const auto* begin = reader.cursor();
  const auto* end = begin + reader.remaining();
  const auto* newline = std::find(begin, end, static_cast<std::uint8_t>('\n'));
  if (newline == end) throw Error(Errc::truncated, "header line is not terminated");
  std::string header(begin, newline);
  reader.skip(static_cast<std::size_t>(newline - begin) + 1);
  return header;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const Model& model) {
  std::vector<std::uint8_t> out(kWeightMagic.begin(), kWeightMagic.end());
  const std::string header = to_text(model.spec());
  out.insert(out.end(), header.begin(), header.end());
  out.push_back('\n');
  for (const LayerParams& p : model.params()) {
    if (p.empty()) continue;
    for (const Tensor* t : {&p.weights, &p.bias}) {
      detail::put_u32(out, static_cast<std::uint32_t>(t->rank()));
      for (std::size_t d : t->shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
      for (double v : t->values()) detail::put_f64(out, v);
    }
  }
  return out;
}

/// Decodes a weight file for `spec`. Fails with bad_magic, spec_mismatch,
/// truncated or trailing_data; never returns a partial model.
inline Model decode_weights(const ModelSpec& spec, const std::vector<std::uint8_t>& bytes) {
  const auto shapes = propagate_shapes(spec);
  detail::ByteReader reader(bytes);
  const std::string header = detail::read_header(reader);
  if (header != to_text(spec)) {
    throw Error(Errc::spec_mismatch, "file holds '" + header + "', expected '" + to_text(spec) + "'");
  }
  std::vector<LayerParams> params(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [ws, bs] = param_shapes(spec, shapes, i);
    if (ws.empty()) continue;
    Tensor* slots[2] = {&params[i].weights, &params[i].bias};
    const Shape* expected[2] = {&ws, &bs};
    for (int t = 0; t < 2; ++t) {
      const std::uint32_t rank = reader.u32("tensor rank");
      Shape shape(rank);
      for (auto& d : shape) d = reader.u32("tensor dims");
      if (shape != *expected[t]) {
        throw Error(Errc::spec_mismatch, "layer " + std::to_string(i) + " tensor is " +
                                             to_string(shape) + ", expected " +
                                             to_string(*expected[t]));
      }
      std::vector<double> values(shape_size(shape));
      reader.need(values.size() * 8, "tensor values");
      for (double& v : values) v = reader.f64("tensor values");
      *slots[t] = Tensor(shape, std::move(values));
    }
  }
  if (reader.remaining() != 0) {
    throw Error(Errc::trailing_data, std::to_string(reader.remaining()) + " bytes after last tensor");
  }
  return Model(spec, std::move(params));
}

inline void save_weights(const Model& model, const std::filesystem::path& path) {
  detail::write_file(path, encode_weights(model));
}

inline Model load_weights(const ModelSpec& spec, const std::filesystem::path& path) {
  return decode_weights(spec, detail::read_file(path));
}

/// The model spec stored in a weight file's header.
inline ModelSpec read_weights_spec(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader reader(bytes);
  return parse_model_spec(detail::read_header(reader));
}

}  // namespace camkit
