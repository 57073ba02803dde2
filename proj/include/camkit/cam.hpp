#pragma once

// Class activation maps: Grad-CAM and the second-order variant whose channel
// weights are (1/Z) * sum_ij (d2Y/dA_ij^2 + 2 dY/dA_ij).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/image.hpp"
#include "camkit/model.hpp"
#include "camkit/netpbm.hpp"
#include "camkit/ops.hpp"
#include "camkit/parallel.hpp"
#include "camkit/preprocess.hpp"

namespace camkit {

/// What Y^c is: the pre-softmax logit S_c, the softmax probability, or exp(S_c).
enum class ScoreKind { logit, probability, exp_logit };

enum class HessianEstimator { finite_difference, exp_fast_path };

enum class CamMethod { gradcam, gradcam_pp };

inline const char* score_kind_name(ScoreKind k) {
  switch (k) {
    case ScoreKind::logit: return "logit";
    case ScoreKind::probability: return "probability";
    case ScoreKind::exp_logit: return "exp_logit";
  }
  return "?";
}

inline ScoreKind parse_score_kind(std::string_view s) {
  if (s == "logit") return ScoreKind::logit;
  if (s == "probability") return ScoreKind::probability;
  if (s == "exp_logit") return ScoreKind::exp_logit;
  throw Error(Errc::invalid_argument, "unknown score kind '" + std::string(s) +
                                          "'; valid: logit, probability, exp_logit");
}

inline const char* cam_method_name(CamMethod m) { return m == CamMethod::gradcam ? "gradcam" : "gradcampp"; }

struct CamConfig {
  std::optional<std::size_t> target_layer;  // deepest conv when unset
  ScoreKind score_kind = ScoreKind::logit;
  double fd_step = 1e-3;
  HessianEstimator hessian = HessianEstimator::finite_difference;
};

/// Output of the target conv layer for one input, (K,U,V).
struct FeatureMapCapture {
  std::size_t layer_index = 0;
  Tensor activations;

  std::size_t maps() const { return activations.dim(0); }
  std::size_t z() const { return activations.dim(1) * activations.dim(2); }
};

struct CamWeights {
  std::vector<double> alpha;
  std::size_t class_index = 0;
  CamMethod method = CamMethod::gradcam;
};

struct Heatmap {
  Tensor raw;         // (U,V), >= 0
  Tensor normalized;  // (H,W) of the input, in [0,1]
};

struct CamResult {
  FeatureMapCapture capture;
  CamWeights weights;
  Heatmap heatmap;
};

namespace detail {

inline Tensor as_single_batch(const Model& model, const Tensor& input) {
  const Shape& in = model.spec().input_shape;
  if (input.rank() == 3 && input.shape() == in) return input.reshaped({1, in[0], in[1], in[2]});
  if (input.rank() == 4 && input.dim(0) == 1) return input;
  throw Error(Errc::shape_mismatch, "CAM input must be " + to_string(in) + " or (1," +
                                        to_string(in).substr(1) + ", got " + to_string(input.shape()));
}

inline std::size_t resolve_target(const Model& model, std::optional<std::size_t> target) {
  const std::size_t t = target ? *target : model.last_conv_layer();
  if (t >= model.num_layers() || !is_conv(model.layer_spec(t))) {
    throw Error(Errc::invalid_argument, "CAM target layer " + std::to_string(t) + " is not a conv layer");
  }
  return t;
}

inline void check_class(const Model& model, std::size_t class_index) {
  if (class_index >= model.spec().num_classes()) {
    throw Error(Errc::label_out_of_range, "class index " + std::to_string(class_index) + " >= " +
                                              std::to_string(model.spec().num_classes()));
  }
}

/// Y^c from a logits row.
inline double score_value(std::span<const double> logits, std::size_t c, ScoreKind kind) {
  switch (kind) {
    case ScoreKind::logit: return logits[c];
    case ScoreKind::exp_logit: return std::exp(logits[c]);
    case ScoreKind::probability: {
      Tensor row({1, logits.size()}, std::vector<double>(logits.begin(), logits.end()));
      return softmax(row)[c];
    }
  }
  return 0.0;
}

/// dY^c/dlogits for one logits row.
inline Tensor score_upstream(const Tensor& logits, std::size_t c, ScoreKind kind) {
  Tensor up(logits.shape());
  switch (kind) {
    case ScoreKind::logit: up[c] = 1.0; break;
    case ScoreKind::exp_logit: up[c] = std::exp(logits[c]); break;
    case ScoreKind::probability: {
      const Tensor p = softmax(logits);
      for (std::size_t k = 0; k < up.size(); ++k) up[k] = p[c] * ((k == c ? 1.0 : 0.0) - p[k]);
      break;
    }
  }
  return up;
}

struct ScoreGrad {
  FeatureMapCapture capture;
  Tensor grad;    // (K,U,V)
  Tensor logits;  // (1,K)
};

inline ScoreGrad score_grad(Model& model, const Tensor& input, std::size_t class_index,
                            std::size_t target, ScoreKind kind) {
  check_class(model, class_index);
  const Tensor batch = as_single_batch(model, input);
  model.forward(batch, {.train = false, .dropout_seed = 0, .capture = true});
  ScoreGrad out;
  out.logits = model.cached_output(model.logits_layer());
  const Gradients g = model.backward(score_upstream(out.logits, class_index, kind), {target}, false);
  const Shape& s = model.output_shape(target);
  out.capture.layer_index = target;
  out.capture.activations = model.cached_output(target).reshaped(s);
  out.grad = g.outputs.at(target).reshaped(s);
  return out;
}

/// Change of a tensor relative to a base forward pass: either sparse
/// (sorted indices) or dense (idx empty, val full-size).
struct Delta {
  bool dense = false;
  std::vector<std::size_t> idx;
  std::vector<double> val;
};

}  // namespace detail

/// Propagates a perturbation of one target-layer activation through the
/// layers above it (eval mode) and returns the change of the logits.
///
/// Changes are tracked as deltas against the captured base pass. Linear
/// layers map deltas linearly; ReLU and max-pool pass a delta through
/// unchanged while the activation pattern is unchanged, so on a piecewise
/// linear region a perturbation of -h yields exactly the negated logit change
/// of +h.
class TailEvaluator {
 public:
  /// `model` must hold a captured single-input forward pass.
  TailEvaluator(const Model& model, std::size_t target) : model_(model), target_(target) {
    if (target >= model.logits_layer()) {
      throw Error(Errc::invalid_argument, "layer " + std::to_string(target) + " is not below the logits");
    }
    for (std::size_t i = target; i <= model.logits_layer(); ++i) {
      const Tensor& t = model.cached_output(i);
      if (t.dim(0) != 1) throw Error(Errc::shape_mismatch, "tail evaluation needs a single-input capture");
      base_.push_back(&t);
    }
  }

  std::size_t target() const noexcept { return target_; }
  const Tensor& base_logits() const { return *base_.back(); }

  /// Logit change for activation element `element` (flat index) moved by `delta`.
  std::vector<double> logit_delta(std::size_t element, double delta) const {
    detail::Delta d;
    d.idx = {element};
    d.val = {delta};
    for (std::size_t i = target_ + 1; i <= model_.logits_layer(); ++i) d = step(i, std::move(d));
    const std::size_t k = base_logits().size();
    if (d.dense) return d.val;
    std::vector<double> out(k, 0.0);
    for (std::size_t j = 0; j < d.idx.size(); ++j) out[d.idx[j]] = d.val[j];
    return out;
  }

  /// Y^c(A + delta e) - Y^c(A) computed from the logit change.
  double score_delta(std::size_t element, double delta, std::size_t c, ScoreKind kind) const {
    const std::vector<double> ds = logit_delta(element, delta);
    const Tensor& s = base_logits();
    switch (kind) {
      case ScoreKind::logit: return ds[c];
      case ScoreKind::exp_logit: return std::exp(s[c]) * std::expm1(ds[c]);
      case ScoreKind::probability: {
        std::vector<double> moved(s.values().begin(), s.values().end());
        for (std::size_t k = 0; k < moved.size(); ++k) moved[k] += ds[k];
        return detail::score_value(moved, c, kind) - detail::score_value(s.values(), c, kind);
      }
    }
    return 0.0;
  }

 private:
  const Tensor& base_in(std::size_t layer) const { return *base_[layer - 1 - target_]; }

  detail::Delta step(std::size_t i, detail::Delta d) const {
    const LayerSpec& l = model_.layer_spec(i);
    if (std::holds_alternative<layer::Flatten>(l) || std::holds_alternative<layer::Dropout>(l)) return d;
    if (std::holds_alternative<layer::ReLU>(l)) return relu_step(base_in(i), std::move(d));
    if (std::holds_alternative<layer::MaxPool2>(l)) return pool_step(i, d);
    if (std::holds_alternative<layer::Dense>(l)) return dense_step(i, d);
    if (const auto* conv = std::get_if<layer::Conv>(&l)) return conv_step(i, *conv, d);
    throw Error(Errc::invalid_argument, "layer " + std::to_string(i) + " cannot be evaluated incrementally");
  }

  static detail::Delta relu_step(const Tensor& base, detail::Delta d) {
    auto rule = [](double b, double delta) {
      const double moved = b + delta;
      if (b > 0.0 && moved > 0.0) return delta;
      if (b <= 0.0 && moved <= 0.0) return 0.0;
      return std::max(moved, 0.0) - std::max(b, 0.0);
    };
    if (d.dense) {
      for (std::size_t j = 0; j < d.val.size(); ++j) d.val[j] = rule(base[j], d.val[j]);
      return d;
    }
    detail::Delta out;
    for (std::size_t j = 0; j < d.idx.size(); ++j) {
      const double v = rule(base[d.idx[j]], d.val[j]);
      if (v != 0.0) {
        out.idx.push_back(d.idx[j]);
        out.val.push_back(v);
      }
    }
    return out;
  }

  static void densify(detail::Delta& d, std::size_t size) {
    if (d.dense) return;
    std::vector<double> full(size, 0.0);
    for (std::size_t j = 0; j < d.idx.size(); ++j) full[d.idx[j]] = d.val[j];
    d = {true, {}, std::move(full)};
  }

  detail::Delta pool_step(std::size_t i, detail::Delta d) const {
    const Shape& s = model_.output_shape(i - 1);  // (C,H,W)
    const Tensor& base = base_in(i);
    const std::size_t h = s[1], w = s[2], oh = h / 2, ow = w / 2;
    std::map<std::size_t, double> changed;
    if (d.dense) {
      for (std::size_t j = 0; j < d.val.size(); ++j)
        if (d.val[j] != 0.0) changed[j] = d.val[j];
    } else {
      for (std::size_t j = 0; j < d.idx.size(); ++j) changed[d.idx[j]] = d.val[j];
    }
    std::map<std::size_t, double> out;
    for (const auto& [flat, unused] : changed) {
      const std::size_t c = flat / (h * w), y = flat / w % h, x = flat % w;
      const std::size_t o = (c * oh + y / 2) * ow + x / 2;
      if (out.count(o)) continue;
      std::size_t window[4];
      for (std::size_t k = 0; k < 4; ++k) window[k] = (c * h + (y / 2) * 2 + k / 2) * w + (x / 2) * 2 + k % 2;
      std::size_t arg_base = 0, arg_new = 0;
      double moved[4];
      for (std::size_t k = 0; k < 4; ++k) {
        auto it = changed.find(window[k]);
        moved[k] = base[window[k]] + (it == changed.end() ? 0.0 : it->second);
        if (base[window[k]] > base[window[arg_base]]) arg_base = k;
        if (moved[k] > moved[arg_new]) arg_new = k;
      }
      double delta;
      if (arg_new == arg_base) {
        auto it = changed.find(window[arg_base]);
        delta = it == changed.end() ? 0.0 : it->second;
      } else {
        delta = moved[arg_new] - base[window[arg_base]];
      }
      out[o] = delta;
    }
    detail::Delta r;
    for (const auto& [k, v] : out) {
      if (v == 0.0) continue;
      r.idx.push_back(k);
      r.val.push_back(v);
    }
    return r;
  }

  detail::Delta dense_step(std::size_t i, const detail::Delta& d) const {
    const Tensor& wt = model_.params()[i].weights;  // (F,U)
    const std::size_t units = wt.dim(1);
    detail::Delta out{true, {}, std::vector<double>(units, 0.0)};
    auto add_row = [&](std::size_t f, double v) {
      const double* row = wt.data() + f * units;
      for (std::size_t u = 0; u < units; ++u) out.val[u] += v * row[u];
    };
    if (d.dense) {
      for (std::size_t f = 0; f < d.val.size(); ++f)
        if (d.val[f] != 0.0) add_row(f, d.val[f]);
    } else {
      for (std::size_t j = 0; j < d.idx.size(); ++j) add_row(d.idx[j], d.val[j]);
    }
    return out;
  }

  detail::Delta conv_step(std::size_t i, const layer::Conv& conv, detail::Delta d) const {
    const Shape& in = model_.output_shape(i - 1);
    const Shape& out_shape = model_.output_shape(i);
    const Tensor& wt = model_.params()[i].weights;  // (O,C,k,k)
    const std::size_t h = in[1], w = in[2];
    const std::size_t oc = out_shape[0], oh = out_shape[1], ow = out_shape[2], k = conv.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(conv.padding);
    const auto stride = static_cast<std::ptrdiff_t>(conv.stride);
    if (d.dense) {
      detail::Delta sparse;
      for (std::size_t j = 0; j < d.val.size(); ++j)
        if (d.val[j] != 0.0) {
          sparse.idx.push_back(j);
          sparse.val.push_back(d.val[j]);
        }
      d = std::move(sparse);
    }
    std::map<std::size_t, double> acc;
    for (std::size_t j = 0; j < d.idx.size(); ++j) {
      const std::size_t flat = d.idx[j];
      const std::size_t c = flat / (h * w);
      const auto y = static_cast<std::ptrdiff_t>(flat / w % h), x = static_cast<std::ptrdiff_t>(flat % w);
      for (std::size_t kh = 0; kh < k; ++kh) {
        const std::ptrdiff_t ty = y + pad - static_cast<std::ptrdiff_t>(kh);
        if (ty < 0 || ty % stride != 0 || ty / stride >= static_cast<std::ptrdiff_t>(oh)) continue;
        for (std::size_t kw = 0; kw < k; ++kw) {
          const std::ptrdiff_t tx = x + pad - static_cast<std::ptrdiff_t>(kw);
          if (tx < 0 || tx % stride != 0 || tx / stride >= static_cast<std::ptrdiff_t>(ow)) continue;
          const auto oy = static_cast<std::size_t>(ty / stride), ox = static_cast<std::size_t>(tx / stride);
          for (std::size_t o = 0; o < oc; ++o)
            acc[(o * oh + oy) * ow + ox] += d.val[j] * wt.at(o, c, kh, kw);
        }
      }
    }
    detail::Delta r;
    for (const auto& [idx, v] : acc) {
      r.idx.push_back(idx);
      r.val.push_back(v);
    }
    return r;
  }

  const Model& model_;
  std::size_t target_;
  std::vector<const Tensor*> base_;
};

/// dY^c/dA for the target layer's output A, (K,U,V). Eval mode; leaves the
/// model's capture cache holding this input.
inline Tensor grad_wrt_activations(Model& model, const Tensor& input, std::size_t class_index,
                                   std::optional<std::size_t> target_layer = std::nullopt,
                                   ScoreKind score_kind = ScoreKind::logit) {
  const std::size_t t = detail::resolve_target(model, target_layer);
  return detail::score_grad(model, input, class_index, t, score_kind).grad;
}

/// True when every layer between the target and the logits is piecewise linear.
inline bool fast_path_eligible(const Model& model, std::size_t target) {
  for (std::size_t i = target + 1; i <= model.logits_layer(); ++i) {
    const LayerSpec& l = model.layer_spec(i);
    const bool linear_piece = std::holds_alternative<layer::Conv>(l) || std::holds_alternative<layer::ReLU>(l) ||
                              std::holds_alternative<layer::MaxPool2>(l) || std::holds_alternative<layer::Flatten>(l) ||
                              std::holds_alternative<layer::Dense>(l) || std::holds_alternative<layer::Dropout>(l);
    if (!linear_piece) return false;
  }
  return true;
}

/// Diagonal second derivative d2Y^c/dA_ij^2, (K,U,V).
///
/// finite_difference: (Y(A + h e) - 2 Y(A) + Y(A - h e)) / h^2 per element,
/// re-running the layers above the target incrementally.
/// exp_fast_path: exp(S_c) * (dS_c/dA)^2, valid for ScoreKind::exp_logit on
/// a piecewise-linear tail away from activation-pattern boundaries.
inline Tensor hessian_diag(Model& model, const Tensor& input, std::size_t class_index,
                           const CamConfig& cfg = {}) {
  const std::size_t t = detail::resolve_target(model, cfg.target_layer);
  if (cfg.hessian == HessianEstimator::exp_fast_path) {
    if (cfg.score_kind != ScoreKind::exp_logit || !fast_path_eligible(model, t)) {
      throw Error(Errc::ineligible_architecture,
                  "the closed-form Hessian needs score_kind exp_logit and a piecewise-linear tail; "
                  "use the finite-difference estimator");
    }
    const detail::ScoreGrad sg = detail::score_grad(model, input, class_index, t, ScoreKind::logit);
    const double e = std::exp(sg.logits[class_index]);
    Tensor out(sg.grad.shape());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = e * (sg.grad[j] * sg.grad[j]);
    return out;
  }
  if (!(cfg.fd_step > 0.0)) throw Error(Errc::invalid_argument, "fd_step must be > 0");
  detail::check_class(model, class_index);
  model.forward(detail::as_single_batch(model, input), {.train = false, .dropout_seed = 0, .capture = true});
  const TailEvaluator tail(model, t);
  const double h = cfg.fd_step;
  Tensor out(model.output_shape(t));
  parallel_for(out.size(), [&](std::size_t j) {
    const double up = tail.score_delta(j, h, class_index, cfg.score_kind);
    const double down = tail.score_delta(j, -h, class_index, cfg.score_kind);
    out[j] = (up + down) / (h * h);
  });
  return out;
}

/// Bilinear upsample of `raw` to (height, width), divided by its maximum;
/// identically zero when that maximum is not positive.
inline Tensor normalize_heatmap(const Tensor& raw, std::size_t height, std::size_t width) {
  ImageF img(raw.dim(0), raw.dim(1), 1);
  std::copy(raw.values().begin(), raw.values().end(), img.values.begin());
  const ImageF up = resample_bilinear(img, height, width);
  Tensor out({height, width});
  const double peak = *std::max_element(up.values.begin(), up.values.end());
  if (!(peak > 0.0)) return out;
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = up.values[j] / peak;
  return out;
}

/// ReLU(sum_k alpha_k A^k), summed over k in order.
inline Tensor weighted_map(const Tensor& activations, const std::vector<double>& alpha) {
  const std::size_t k = activations.dim(0), plane = activations.dim(1) * activations.dim(2);
  Tensor raw({activations.dim(1), activations.dim(2)});
  for (std::size_t p = 0; p < plane; ++p) {
    double s = 0.0;
    for (std::size_t m = 0; m < k; ++m) s += alpha[m] * activations[m * plane + p];
    raw[p] = std::max(s, 0.0);
  }
  return raw;
}

namespace detail {

inline CamResult finish_cam(const Model& model, FeatureMapCapture capture, std::vector<double> alpha,
                            std::size_t class_index, CamMethod method) {
  CamResult r;
  r.heatmap.raw = weighted_map(capture.activations, alpha);
  const Shape& in = model.spec().input_shape;
  r.heatmap.normalized = normalize_heatmap(r.heatmap.raw, in[1], in[2]);
  r.weights = {std::move(alpha), class_index, method};
  r.capture = std::move(capture);
  return r;
}

/// (1/Z) * sum over each map's plane, left to right.
inline std::vector<double> plane_means(const Tensor& t, const Tensor* extra = nullptr, double extra_scale = 0.0) {
  const std::size_t k = t.dim(0), plane = t.dim(1) * t.dim(2);
  std::vector<double> alpha(k);
  for (std::size_t m = 0; m < k; ++m) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t j = m * plane + p;
      s += extra ? (*extra)[j] + extra_scale * t[j] : t[j];
    }
    alpha[m] = s / static_cast<double>(plane);
  }
  return alpha;
}

}  // namespace detail

/// alpha_k = (1/Z) sum_ij dY/dA^k_ij; raw = ReLU(sum_k alpha_k A^k).
inline CamResult gradcam(Model& model, const Tensor& input, std::size_t class_index, const CamConfig& cfg = {}) {
  const std::size_t t = detail::resolve_target(model, cfg.target_layer);
  detail::ScoreGrad sg = detail::score_grad(model, input, class_index, t, cfg.score_kind);
  std::vector<double> alpha = detail::plane_means(sg.grad);
  return detail::finish_cam(model, std::move(sg.capture), std::move(alpha), class_index, CamMethod::gradcam);
}

/// alpha_k = (1/Z) sum_ij (d2Y/dA^k_ij^2 + 2 dY/dA^k_ij); raw = ReLU(sum_k alpha_k A^k).
inline CamResult gradcam_pp(Model& model, const Tensor& input, std::size_t class_index,
                            const CamConfig& cfg = {}) {
  const std::size_t t = detail::resolve_target(model, cfg.target_layer);
  CamConfig resolved = cfg;
  resolved.target_layer = t;
  const Tensor hess = hessian_diag(model, input, class_index, resolved);
  detail::ScoreGrad sg = detail::score_grad(model, input, class_index, t, cfg.score_kind);
  std::vector<double> alpha = detail::plane_means(sg.grad, &hess, 2.0);
  return detail::finish_cam(model, std::move(sg.capture), std::move(alpha), class_index, CamMethod::gradcam_pp);
}

/// Piecewise-linear blue -> green -> red with knots at 0, 0.5, 1.
inline std::array<double, 3> colormap(double v) {
  v = std::clamp(v, 0.0, 1.0);
  if (v <= 0.5) return {0.0, 2.0 * v, 1.0 - 2.0 * v};
  return {2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0};
}

/// 0.5 * grayscale(base) + 0.5 * colormap(v) per channel, as RGB bytes.
inline ImageU8 render_overlay(const Heatmap& heatmap, const ImageF& base) {
  const Tensor& v = heatmap.normalized;
  if (v.rank() != 2 || v.dim(0) != base.height || v.dim(1) != base.width) {
    throw Error(Errc::shape_mismatch, "heatmap " + to_string(v.shape()) + " does not match base " +
                                          std::to_string(base.height) + "x" + std::to_string(base.width));
  }
  const ImageF gray = to_grayscale(base);
  ImageF out(base.height, base.width, 3);
  for (std::size_t p = 0; p < v.size(); ++p) {
    const auto c = colormap(v[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) out.values[3 * p + ch] = 0.5 * gray.values[p] + 0.5 * c[ch];
  }
  return quantize(out);
}

/// The normalized map as an 8-bit grayscale image, round(255 v).
inline ImageU8 heatmap_image(const Heatmap& heatmap) {
  const Tensor& v = heatmap.normalized;
  ImageF img(v.dim(0), v.dim(1), 1);
  std::copy(v.values().begin(), v.values().end(), img.values.begin());
  return quantize(img);
}

/// Writes `<dir>/<stem>.<method>.<class>.pgm` (normalized map) and `.ppm` (overlay).
inline std::pair<std::filesystem::path, std::filesystem::path> write_heatmap_files(
    const CamResult& result, const ImageF& base, const std::filesystem::path& dir, const std::string& stem,
    const std::string& class_name) {
  const std::string prefix = stem + "." + cam_method_name(result.weights.method) + "." + class_name;
  const auto pgm = dir / (prefix + ".pgm");
  const auto ppm = dir / (prefix + ".ppm");
  write_netpbm(heatmap_image(result.heatmap), pgm);
  write_netpbm(render_overlay(result.heatmap, base), ppm);
  return {pgm, ppm};
}

}  // namespace camkit
