#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "camkit/error.hpp"

namespace camkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array of doubles. Images are (C,H,W), batches (N,C,H,W).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    validate_dims();
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_dims();
    if (data_.size() != shape_size(shape_)) {
      throw Error(Errc::shape_mismatch, "tensor of shape " + to_string(shape_) + " needs " +
                                            std::to_string(shape_size(shape_)) + " values, got " +
                                            std::to_string(data_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& vector() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  template <class... Index>
  double& at(Index... index) {
    return data_[offset({static_cast<std::size_t>(index)...})];
  }
  template <class... Index>
  double at(Index... index) const {
    return data_[offset({static_cast<std::size_t>(index)...})];
  }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw Error(Errc::shape_mismatch,
                  "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void validate_dims() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw Error(Errc::shape_mismatch,
                    "dimension " + std::to_string(i) + " of " + to_string(shape_) + " is zero");
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) flat = flat * shape_[axis++] + i;
    return flat;
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Bitwise equality, distinguishing -0.0 from +0.0 and matching NaN payloads.
inline bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.values().begin(), a.values().end(), b.values().begin(),
                    [](double x, double y) {
                      return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
                    });
}

}  // namespace camkit
