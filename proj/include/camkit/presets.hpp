#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/model.hpp"

namespace camkit {

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"vgg-nano", "vgg-micro"};
  return names;
}

inline std::vector<std::string> default_class_names() { return {"glioma", "menin", "tumor"}; }

/// Scaled-down VGG stacks: 3x3 same-padding conv pairs, 2x2 max-pool, then a
/// 128-unit dense head with dropout. vgg-micro adds a 32-channel block.
inline ModelSpec preset(std::string_view name, std::vector<std::string> class_names = default_class_names(),
                        Shape input_shape = {1, 128, 128}, double dropout_rate = 0.5,
                        std::size_t head_units = 128) {
  using namespace layer;
  std::vector<std::size_t> blocks;
  if (name == "vgg-nano") {
    blocks = {8, 16};
  } else if (name == "vgg-micro") {
    blocks = {8, 16, 32};
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw Error(Errc::invalid_argument,
                "unknown preset '" + std::string(name) + "'; valid presets: " + valid);
  }
  ModelSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.class_names = std::move(class_names);
  for (std::size_t channels : blocks) {
    spec.layers.insert(spec.layers.end(), {Conv{channels, 3, 1, 1}, ReLU{}, Conv{channels, 3, 1, 1},
                                           ReLU{}, MaxPool2{}});
  }
  spec.layers.insert(spec.layers.end(), {Flatten{}, Dense{head_units}, ReLU{}, Dropout{dropout_rate},
                                         Dense{spec.class_names.size()}, SoftmaxOutput{}});
  validate(spec);
  return spec;
}

}  // namespace camkit
