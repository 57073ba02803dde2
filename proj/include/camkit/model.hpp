#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/ops.hpp"
#include "camkit/rng.hpp"
#include "camkit/tensor.hpp"

namespace camkit {

namespace layer {
struct Conv {
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  friend bool operator==(const Conv&, const Conv&) = default;
};
struct MaxPool2 {
  friend bool operator==(const MaxPool2&, const MaxPool2&) = default;
};
struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};
struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};
struct Dense {
  std::size_t units = 1;
  friend bool operator==(const Dense&, const Dense&) = default;
};
struct Dropout {
  double rate = 0.5;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};
struct SoftmaxOutput {
  friend bool operator==(const SoftmaxOutput&, const SoftmaxOutput&) = default;
};
}  // namespace layer

using LayerSpec = std::variant<layer::Conv, layer::MaxPool2, layer::ReLU, layer::Flatten,
                               layer::Dense, layer::Dropout, layer::SoftmaxOutput>;

struct ModelSpec {
  Shape input_shape;  // (C, H, W)
  std::vector<LayerSpec> layers;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return class_names.size(); }
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline bool is_conv(const LayerSpec& l) { return std::holds_alternative<layer::Conv>(l); }

// ---------------------------------------------------------------------------
// Canonical text form, used in weight-file headers and model spec files:
//   input=1x8x8;layers=conv(2,3,1,1),relu,maxpool2,flatten,dense(3),softmax;classes=a,b,c

namespace detail {
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string layer_text(const LayerSpec& l) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, layer::Conv>) {
          return "conv(" + std::to_string(v.out_channels) + "," + std::to_string(v.kernel) + "," +
                 std::to_string(v.stride) + "," + std::to_string(v.padding) + ")";
        } else if constexpr (std::is_same_v<T, layer::MaxPool2>) {
          return "maxpool2";
        } else if constexpr (std::is_same_v<T, layer::ReLU>) {
          return "relu";
        } else if constexpr (std::is_same_v<T, layer::Flatten>) {
          return "flatten";
        } else if constexpr (std::is_same_v<T, layer::Dense>) {
          return "dense(" + std::to_string(v.units) + ")";
        } else if constexpr (std::is_same_v<T, layer::Dropout>) {
          return "dropout(" + format_double(v.rate) + ")";
        } else {
          return "softmax";
        }
      },
      l);
}

inline std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  int depth = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i < text.size() && text[i] == '(') ++depth;
    if (i < text.size() && text[i] == ')') --depth;
    if (i == text.size() || (text[i] == sep && depth == 0)) {
      parts.emplace_back(text.substr(start, i - start));
      start = i + 1;
    }
  }
  return parts;
}

inline std::size_t parse_size(std::string_view s, std::string_view what) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(Errc::parse_error, "expected unsigned integer for " + std::string(what) + ", got '" +
                                       std::string(s) + "'");
  }
  return v;
}

inline double parse_double(std::string_view s, std::string_view what) {
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw Error(Errc::parse_error,
                "expected number for " + std::string(what) + ", got '" + std::string(s) + "'");
  }
  return v;
}

inline LayerSpec parse_layer(std::string_view text) {
  auto args_of = [&](std::string_view name) -> std::vector<std::string> {
    if (text.size() < name.size() + 2 || text.back() != ')' || text[name.size()] != '(') {
      throw Error(Errc::parse_error, "malformed layer '" + std::string(text) + "'");
    }
    return split(text.substr(name.size() + 1, text.size() - name.size() - 2), ',');
  };
  if (text == "maxpool2") return layer::MaxPool2{};
  if (text == "relu") return layer::ReLU{};
  if (text == "flatten") return layer::Flatten{};
  if (text == "softmax") return layer::SoftmaxOutput{};
  if (text.starts_with("conv(")) {
    auto a = args_of("conv");
    if (a.size() != 4) throw Error(Errc::parse_error, "conv takes (out,k,stride,pad)");
    return layer::Conv{parse_size(a[0], "conv out"), parse_size(a[1], "conv kernel"),
                       parse_size(a[2], "conv stride"), parse_size(a[3], "conv pad")};
  }
  if (text.starts_with("dense(")) {
    auto a = args_of("dense");
    if (a.size() != 1) throw Error(Errc::parse_error, "dense takes (units)");
    return layer::Dense{parse_size(a[0], "dense units")};
  }
  if (text.starts_with("dropout(")) {
    auto a = args_of("dropout");
    if (a.size() != 1) throw Error(Errc::parse_error, "dropout takes (rate)");
    return layer::Dropout{parse_double(a[0], "dropout rate")};
  }
  throw Error(Errc::parse_error, "unknown layer '" + std::string(text) + "'");
}
}  // namespace detail

inline std::string layer_name(const LayerSpec& l) { return detail::layer_text(l); }

inline std::string to_text(const ModelSpec& spec) {
  std::string out = "input=";
  for (std::size_t i = 0; i < spec.input_shape.size(); ++i)
    out += (i ? "x" : "") + std::to_string(spec.input_shape[i]);
  out += ";layers=";
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    out += (i ? "," : "") + detail::layer_text(spec.layers[i]);
  out += ";classes=";
  for (std::size_t i = 0; i < spec.class_names.size(); ++i)
    out += (i ? "," : "") + spec.class_names[i];
  return out;
}

inline ModelSpec parse_model_spec(std::string_view text) {
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' '))
    text.remove_suffix(1);
  ModelSpec spec;
  bool have_input = false, have_layers = false, have_classes = false;
  for (const std::string& field : detail::split(text, ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw Error(Errc::parse_error, "missing '=' in '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "input") {
      for (const auto& d : detail::split(value, 'x'))
        spec.input_shape.push_back(detail::parse_size(d, "input dimension"));
      have_input = true;
    } else if (key == "layers") {
      for (const auto& l : detail::split(value, ',')) spec.layers.push_back(detail::parse_layer(l));
      have_layers = true;
    } else if (key == "classes") {
      spec.class_names = detail::split(value, ',');
      have_classes = true;
    } else {
      throw Error(Errc::parse_error, "unknown model spec key '" + key + "'");
    }
  }
  if (!have_input || !have_layers || !have_classes) {
    throw Error(Errc::parse_error, "model spec needs input=, layers= and classes=");
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Validation and shape propagation

/// Output shape of every layer for a batch of one, without the batch axis.
/// Throws naming the first offending layer index.
inline std::vector<Shape> propagate_shapes(const ModelSpec& spec) {
  if (spec.input_shape.size() != 3) {
    throw Error(Errc::shape_mismatch, "input_shape must be (C,H,W), got " +
                                          to_string(spec.input_shape));
  }
  for (std::size_t d : spec.input_shape) {
    if (d == 0) throw Error(Errc::shape_mismatch, "input_shape has a zero dimension");
  }
  if (spec.class_names.size() < 2) {
    throw Error(Errc::invalid_argument, "need at least two class names");
  }
  for (const auto& name : spec.class_names) {
    if (name.empty() || name.find_first_of(",;=\n\r") != std::string::npos) {
      throw Error(Errc::invalid_argument, "invalid class name '" + name + "'");
    }
  }
  std::vector<Shape> shapes;
  Shape current = spec.input_shape;
  bool seen_conv = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    auto fail = [&](const std::string& why) -> Error {
      return Error(Errc::shape_mismatch,
                   "layer " + std::to_string(i) + " (" + layer_name(l) + "): " + why);
    };
    const bool last = i + 1 == spec.layers.size();
    if (auto* conv = std::get_if<layer::Conv>(&l)) {
      if (current.size() != 3) throw fail("needs a (C,H,W) input, got " + to_string(current));
      if (conv->out_channels == 0 || conv->kernel == 0 || conv->stride == 0)
        throw fail("out_channels, kernel and stride must be >= 1");
      std::size_t oh = 0, ow = 0;
      try {
        oh = conv_output_extent(current[1], conv->kernel, conv->stride, conv->padding, "height");
        ow = conv_output_extent(current[2], conv->kernel, conv->stride, conv->padding, "width");
      } catch (const Error& e) {
        throw fail(e.what());
      }
      current = {conv->out_channels, oh, ow};
      seen_conv = true;
    } else if (std::holds_alternative<layer::MaxPool2>(l)) {
      if (current.size() != 3) throw fail("needs a (C,H,W) input, got " + to_string(current));
      if (current[1] % 2 || current[2] % 2) throw fail("odd spatial size " + to_string(current));
      current = {current[0], current[1] / 2, current[2] / 2};
    } else if (std::holds_alternative<layer::Flatten>(l)) {
      if (current.size() != 3) throw fail("needs a (C,H,W) input, got " + to_string(current));
      if (!seen_conv) throw fail("no convolution precedes flatten");
      current = {shape_size(current)};
    } else if (auto* dense = std::get_if<layer::Dense>(&l)) {
      if (current.size() != 1) throw fail("needs a flat input, got " + to_string(current));
      if (dense->units == 0) throw fail("units must be >= 1");
      current = {dense->units};
    } else if (auto* drop = std::get_if<layer::Dropout>(&l)) {
      if (!(drop->rate >= 0.0 && drop->rate < 1.0)) throw fail("rate must be in [0,1)");
    } else if (std::holds_alternative<layer::SoftmaxOutput>(l)) {
      if (!last) throw fail("softmax output must be the last layer");
      if (current.size() != 1 || current[0] != spec.class_names.size()) {
        throw fail("expects " + std::to_string(spec.class_names.size()) + " logits, got " +
                   to_string(current));
      }
    }
    shapes.push_back(current);
  }
  if (spec.layers.empty() || !std::holds_alternative<layer::SoftmaxOutput>(spec.layers.back())) {
    throw Error(Errc::shape_mismatch, "layer " + std::to_string(spec.layers.size()) +
                                          ": model must end with a softmax output");
  }
  return shapes;
}

inline void validate(const ModelSpec& spec) { (void)propagate_shapes(spec); }

/// (weights, bias) shapes of layer i given propagated shapes; empty when parameterless.
inline std::pair<Shape, Shape> param_shapes(const ModelSpec& spec, const std::vector<Shape>& shapes,
                                            std::size_t i) {
  const Shape& in = i == 0 ? spec.input_shape : shapes[i - 1];
  if (auto* conv = std::get_if<layer::Conv>(&spec.layers[i]))
    return {{conv->out_channels, in[0], conv->kernel, conv->kernel}, {conv->out_channels}};
  if (auto* dense = std::get_if<layer::Dense>(&spec.layers[i]))
    return {{in[0], dense->units}, {dense->units}};
  return {{}, {}};
}

/// Parameters of one layer; both tensors empty for parameterless layers.
struct LayerParams {
  Tensor weights;
  Tensor bias;
  bool empty() const { return weights.empty(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct ForwardOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
  bool capture = false;
};

struct Gradients {
  std::vector<LayerParams> params;        // parallel to the layer list
  std::map<std::size_t, Tensor> outputs;  // d(upstream)/d(output of layer i), on request
};

class Model {
 public:
  Model() = default;
  Model(ModelSpec spec, std::vector<LayerParams> params)
      : spec_(std::move(spec)), shapes_(propagate_shapes(spec_)), params_(std::move(params)) {
    if (params_.size() != spec_.layers.size()) {
      throw Error(Errc::shape_mismatch, "expected parameters for " +
                                            std::to_string(spec_.layers.size()) + " layers");
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto [ws, bs] = expected_param_shapes(i);
      if (params_[i].weights.shape() != ws || params_[i].bias.shape() != bs) {
        throw Error(Errc::shape_mismatch, "layer " + std::to_string(i) + " parameters must be " +
                                              to_string(ws) + " and " + to_string(bs));
      }
    }
  }

  const ModelSpec& spec() const noexcept { return spec_; }
  std::size_t num_layers() const noexcept { return spec_.layers.size(); }
  const LayerSpec& layer_spec(std::size_t i) const { return spec_.layers.at(i); }
  /// Output shape of layer i without the batch axis.
  const Shape& output_shape(std::size_t i) const { return shapes_.at(i); }

  std::vector<LayerParams>& params() noexcept { return params_; }
  const std::vector<LayerParams>& params() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.weights.size() + p.bias.size();
    return n;
  }

  /// Shapes (weights, bias) that layer i's parameters must have; empty shapes when none.
  std::pair<Shape, Shape> expected_param_shapes(std::size_t i) const {
    return param_shapes(spec_, shapes_, i);
  }

  /// Index of the deepest convolution.
  std::size_t last_conv_layer() const {
    for (std::size_t i = spec_.layers.size(); i-- > 0;)
      if (is_conv(spec_.layers[i])) return i;
    throw Error(Errc::invalid_argument, "model has no convolution layer");
  }

  /// Eval-mode logits (N,K). Does not touch the activation cache.
  Tensor logits(const Tensor& batch) const {
    check_batch(batch);
    return run_layers(batch, 0, logits_layer() + 1);
  }

  /// Eval-mode probabilities. Safe for concurrent callers.
  Tensor infer(const Tensor& batch) const { return softmax(logits(batch)); }

  /// Logits from a given output of layer `layer_index` onward (eval mode).
  Tensor logits_from(std::size_t layer_index, const Tensor& activation) const {
    if (layer_index >= logits_layer()) {
      throw Error(Errc::invalid_argument, "layer " + std::to_string(layer_index) +
                                              " is not below the logits layer");
    }
    Shape expected{activation.rank() ? activation.dim(0) : 0};
    for (std::size_t d : shapes_[layer_index]) expected.push_back(d);
    if (activation.shape() != expected) {
      throw Error(Errc::shape_mismatch, "activation of layer " + std::to_string(layer_index) +
                                            " must be " + to_string(expected) + ", got " +
                                            to_string(activation.shape()));
    }
    return run_layers(activation, layer_index + 1, logits_layer() + 1);
  }

  /// Index of the layer producing logits (the one before the softmax output).
  std::size_t logits_layer() const { return spec_.layers.size() - 2; }

  /// Forward pass returning probabilities (N,K). With capture on, every layer
  /// output and dropout mask is kept for backward(); otherwise the cache is cleared.
  Tensor forward(const Tensor& batch, const ForwardOptions& options = {}) {
    check_batch(batch);
    cache_.reset();
    Cache cache;
    cache.input = batch;
    cache.outputs.resize(spec_.layers.size());
    cache.masks.resize(spec_.layers.size());
    Tensor current = batch;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      if (auto* drop = std::get_if<layer::Dropout>(&spec_.layers[i]); drop && options.train) {
        Tensor mask = dropout_mask(current.shape(), drop->rate, options.dropout_seed, i);
        for (std::size_t j = 0; j < current.size(); ++j) current[j] *= mask[j];
        if (options.capture) cache.masks[i] = std::move(mask);
      } else {
        current = apply_layer(i, current);
      }
      if (options.capture) cache.outputs[i] = current;
    }
    if (options.capture) cache_ = std::move(cache);
    return current;
  }

  bool has_cache() const noexcept { return cache_.has_value(); }

  /// Output of layer i from the last captured forward.
  const Tensor& cached_output(std::size_t i) const {
    if (!cache_) throw Error(Errc::no_cache, "no captured forward pass");
    return cache_->outputs.at(i);
  }

  /// Backpropagates `upstream`, the gradient with respect to the logits
  /// (the input of the softmax output layer). Requested layer indices also
  /// receive the gradient with respect to their outputs.
  Gradients backward(const Tensor& upstream, const std::vector<std::size_t>& want_outputs = {},
                     bool want_param_grads = true) const {
    if (!cache_) throw Error(Errc::no_cache, "backward needs a forward pass with capture on");
    const std::size_t top = logits_layer();
    const Tensor& logits = cache_->outputs[top];
    if (upstream.shape() != logits.shape()) {
      throw Error(Errc::shape_mismatch, "upstream must match logits " + to_string(logits.shape()) +
                                            ", got " + to_string(upstream.shape()));
    }
    std::size_t lowest = top;
    for (std::size_t i : want_outputs) {
      if (i > top) throw Error(Errc::invalid_argument, "no gradient for layer " + std::to_string(i));
      lowest = std::min(lowest, i);
    }
    if (want_param_grads) lowest = 0;
    auto wanted = [&](std::size_t i) {
      return std::find(want_outputs.begin(), want_outputs.end(), i) != want_outputs.end();
    };

    Gradients grads;
    grads.params.resize(spec_.layers.size());
    Tensor g = upstream;
    for (std::size_t i = top + 1; i-- > 0;) {
      if (wanted(i)) grads.outputs[i] = g;
      if (i == lowest && !want_param_grads) break;
      const Tensor& input = i == 0 ? cache_->input : cache_->outputs[i - 1];
      const bool need_input_grad = i > lowest;
      const LayerSpec& l = spec_.layers[i];
      if (auto* conv = std::get_if<layer::Conv>(&l)) {
        ConvParams cp{params_[i].weights, params_[i].bias, conv->stride, conv->padding};
        ConvGrads cg = conv2d_backward(input, cp, g, need_input_grad);
        if (want_param_grads) grads.params[i] = {std::move(cg.weights), std::move(cg.bias)};
        g = std::move(cg.input);
      } else if (std::holds_alternative<layer::Dense>(l)) {
        DenseGrads dg = dense_backward(input, params_[i].weights, g, need_input_grad);
        if (want_param_grads) grads.params[i] = {std::move(dg.weights), std::move(dg.bias)};
        g = std::move(dg.input);
      } else if (std::holds_alternative<layer::ReLU>(l)) {
        if (need_input_grad) g = relu_backward(input, g);
      } else if (std::holds_alternative<layer::MaxPool2>(l)) {
        if (need_input_grad) g = maxpool2_backward(input, g);
      } else if (std::holds_alternative<layer::Flatten>(l)) {
        if (need_input_grad) g = g.reshaped(input.shape());
      } else if (std::holds_alternative<layer::Dropout>(l)) {
        const Tensor& mask = cache_->masks[i];
        if (need_input_grad && !mask.empty())
          for (std::size_t j = 0; j < g.size(); ++j) g[j] *= mask[j];
      }
      if (!need_input_grad) break;
    }
    return grads;
  }

  /// The inverted-dropout multiplier tensor used for layer `layer_index`:
  /// element j keeps (value 1/(1-rate)) iff the j-th uniform draw of
  /// Rng(derive_seed(seed, {layer_index})) is >= rate, else 0.
  static Tensor dropout_mask(const Shape& shape, double rate, std::uint64_t seed,
                             std::size_t layer_index) {
    Tensor mask(shape);
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(layer_index)}));
    const double scale = 1.0 / (1.0 - rate);
    for (double& m : mask.values()) m = rng.uniform() >= rate ? scale : 0.0;
    return mask;
  }

 private:
  struct Cache {
    Tensor input;
    std::vector<Tensor> outputs;
    std::vector<Tensor> masks;
  };

  void check_batch(const Tensor& batch) const {
    if (batch.rank() != 4 ||
        !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape().begin() + 1)) {
      throw Error(Errc::shape_mismatch, "batch must be (N," + std::to_string(spec_.input_shape[0]) +
                                            "," + std::to_string(spec_.input_shape[1]) + "," +
                                            std::to_string(spec_.input_shape[2]) + "), got " +
                                            to_string(batch.shape()));
    }
  }

  /// Applies layer i in eval mode.
  Tensor apply_layer(std::size_t i, const Tensor& x) const {
    const LayerSpec& l = spec_.layers[i];
    if (auto* conv = std::get_if<layer::Conv>(&l)) {
      ConvParams cp{params_[i].weights, params_[i].bias, conv->stride, conv->padding};
      return conv2d(x, cp);
    }
    if (std::holds_alternative<layer::Dense>(l)) return dense(x, params_[i].weights, params_[i].bias);
    if (std::holds_alternative<layer::ReLU>(l)) return relu(x);
    if (std::holds_alternative<layer::MaxPool2>(l)) return maxpool2(x);
    if (std::holds_alternative<layer::Flatten>(l)) return x.reshaped({x.dim(0), x.size() / x.dim(0)});
    if (std::holds_alternative<layer::SoftmaxOutput>(l)) return softmax(x);
    return x;  // dropout in eval mode
  }

  Tensor run_layers(const Tensor& x, std::size_t begin, std::size_t end) const {
    Tensor current = x;
    for (std::size_t i = begin; i < end; ++i) current = apply_layer(i, current);
    return current;
  }

  ModelSpec spec_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams> params_;
  std::optional<Cache> cache_;
};

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases. Draws come from
/// Rng(init_seed) in layer order, weights in row-major order.
inline Model build_model(const ModelSpec& spec, std::uint64_t init_seed) {
  const auto shapes = propagate_shapes(spec);
  Rng rng(init_seed);
  std::vector<LayerParams> params(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [ws, bs] = param_shapes(spec, shapes, i);
    if (ws.empty()) continue;
    const std::size_t fan_in = ws.size() == 4 ? ws[1] * ws[2] * ws[3] : ws[0];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor w(ws);
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    params[i] = {std::move(w), Tensor(bs)};
  }
  return Model(spec, std::move(params));
}

}  // namespace camkit
