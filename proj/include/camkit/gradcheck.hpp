#pragma once

// Finite-difference verification of every backward rule and of one full
// vgg-nano loss. Elements sitting on a non-smooth point (ReLU input within h
// of 0, max-pool window whose top two values are within 2h) are excluded.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "camkit/dataset.hpp"
#include "camkit/finite_diff.hpp"
#include "camkit/image.hpp"
#include "camkit/model.hpp"
#include "camkit/ops.hpp"
#include "camkit/presets.hpp"
#include "camkit/rng.hpp"
#include "camkit/train.hpp"

namespace camkit {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  double error_floor = 1e-4;  // relative_error denominator floor
  std::uint64_t seed = 1;
  std::size_t model_samples = 6;  // sampled coordinates per parameter tensor and for the input
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  double seconds = 0.0;
  bool passed = false;
};

namespace detail {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(r * t), left to right.
inline double weighted_sum(const Tensor& r, const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += r[i] * t[i];
  return s;
}

class CheckAccumulator {
 public:
  CheckAccumulator(std::string name, const GradcheckOptions& opt)
      : opt_(opt), started_(std::chrono::steady_clock::now()) {
    result_.name = std::move(name);
  }

  void compare(const Tensor& analytic, const Tensor& numeric, const std::vector<bool>& skip = {}) {
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      if (!skip.empty() && skip[i]) {
        ++result_.skipped;
        continue;
      }
      add(analytic[i], numeric[i]);
    }
  }

  void add(double analytic, double numeric) {
    result_.max_rel_error =
        std::max(result_.max_rel_error, relative_error(analytic, numeric, opt_.error_floor));
    ++result_.checked;
  }

  void skip() { ++result_.skipped; }

  GradcheckResult finish() {
    result_.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    result_.passed = result_.checked > 0 && result_.max_rel_error <= opt_.tolerance;
    return result_;
  }

 private:
  const GradcheckOptions& opt_;
  std::chrono::steady_clock::time_point started_;
  GradcheckResult result_;
};

inline GradcheckResult check_conv(const GradcheckOptions& opt, std::size_t stride, std::size_t padding) {
  Rng rng(derive_seed(opt.seed, {1, stride, padding}));
  const Tensor x = random_tensor({2, 2, 7, 6}, rng);
  ConvParams p{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng), stride, padding};
  const Tensor y = conv2d(x, p);
  const Tensor r = random_tensor(y.shape(), rng);
  const ConvGrads g = conv2d_backward(x, p, r);
  CheckAccumulator acc("conv2d stride " + std::to_string(stride) + " padding " + std::to_string(padding), opt);
  acc.compare(g.input, finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, conv2d(t, p)); }, x, opt.step));
  acc.compare(g.weights, finite_diff_grad([&](const Tensor& w) {
                ConvParams q = p;
                q.weights = w;
                return weighted_sum(r, conv2d(x, q));
              }, p.weights, opt.step));
  acc.compare(g.bias, finite_diff_grad([&](const Tensor& b) {
                ConvParams q = p;
                q.bias = b;
                return weighted_sum(r, conv2d(x, q));
              }, p.bias, opt.step));
  return acc.finish();
}

inline GradcheckResult check_maxpool(const GradcheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, {2}));
  const Tensor x = random_tensor({2, 3, 6, 8}, rng);
  const Tensor r = random_tensor({2, 3, 3, 4}, rng);
  const Tensor g = maxpool2_backward(x, r);
  std::vector<bool> skip(x.size(), false);
  const std::size_t h = 6, w = 8;
  for (std::size_t plane = 0; plane < 6; ++plane) {
    for (std::size_t oy = 0; oy < 3; ++oy) {
      for (std::size_t ox = 0; ox < 4; ++ox) {
        std::size_t idx[4];
        for (std::size_t k = 0; k < 4; ++k) idx[k] = (plane * h + 2 * oy + k / 2) * w + 2 * ox + k % 2;
        for (std::size_t a = 0; a < 4; ++a)
          for (std::size_t b = a + 1; b < 4; ++b)
            if (std::abs(x[idx[a]] - x[idx[b]]) <= 2.0 * opt.step)
              for (std::size_t k = 0; k < 4; ++k) skip[idx[k]] = true;
      }
    }
  }
  CheckAccumulator acc("maxpool2", opt);
  acc.compare(g, finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, maxpool2(t)); }, x, opt.step), skip);
  return acc.finish();
}

inline GradcheckResult check_dense(const GradcheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, {3}));
  const Tensor x = random_tensor({3, 7}, rng);
  const Tensor w = random_tensor({7, 5}, rng);
  const Tensor b = random_tensor({5}, rng);
  const Tensor r = random_tensor({3, 5}, rng);
  const DenseGrads g = dense_backward(x, w, r);
  CheckAccumulator acc("dense", opt);
  acc.compare(g.input, finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, dense(t, w, b)); }, x, opt.step));
  acc.compare(g.weights, finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, dense(x, t, b)); }, w, opt.step));
  acc.compare(g.bias, finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, dense(x, w, t)); }, b, opt.step));
  return acc.finish();
}

inline GradcheckResult check_relu(const GradcheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, {4}));
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor r = random_tensor(x.shape(), rng);
  std::vector<bool> skip(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) skip[i] = std::abs(x[i]) <= opt.step;
  CheckAccumulator acc("relu", opt);
  acc.compare(relu_backward(x, r),
              finite_diff_grad([&](const Tensor& t) { return weighted_sum(r, relu(t)); }, x, opt.step), skip);
  return acc.finish();
}

inline GradcheckResult check_softmax_ce(const GradcheckOptions& opt) {
  Rng rng(derive_seed(opt.seed, {5}));
  const Tensor z = random_tensor({4, 3}, rng, -3.0, 3.0);
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  const LossResult lr = sparse_ce(softmax(z), labels);
  CheckAccumulator acc("softmax + sparse cross-entropy", opt);
  acc.compare(lr.grad_logits,
              finite_diff_grad([&](const Tensor& t) { return sparse_ce(softmax(t), labels).loss; }, z, opt.step));
  return acc.finish();
}

/// vgg-nano loss on two synthetic images in train mode with a fixed dropout
/// seed. Sampled coordinates of every parameter tensor and of the input are
/// checked. A coordinate is skipped as non-smooth when a ReLU or pool switch
/// falls inside [x - h, x + h]. Two signs of that: the one-sided differences
/// disagree by more than 1e-4 of the gradient scale (kink near x), or the
/// central differences at h and h/2 disagree by more than half the tolerance
/// (kink between h/2 and h, which biases only the wider stencil).
inline GradcheckResult check_vgg_nano(const GradcheckOptions& opt) {
  Model model = build_model(preset("vgg-nano", synth_class_names()), derive_seed(opt.seed, {6}));
  Rng data_rng(derive_seed(opt.seed, {7}));
  const ImageF a = synth_image(0, 128, data_rng);
  const ImageF b = synth_image(2, 128, data_rng);
  const ImageF* imgs[2] = {&a, &b};
  Tensor batch = to_batch(imgs);
  const std::vector<std::size_t> labels{0, 2};
  ForwardOptions fo;
  fo.train = true;
  fo.capture = true;
  fo.dropout_seed = derive_seed(opt.seed, {8});

  const LossResult base = sparse_ce(model.forward(batch, fo), labels);
  const Gradients grads = model.backward(base.grad_logits, {0});
  // Input gradient: chain the first conv's backward from the captured layer-0 output gradient.
  const auto& conv0 = std::get<layer::Conv>(model.layer_spec(0));
  const ConvGrads input_grads =
      conv2d_backward(batch, {model.params()[0].weights, model.params()[0].bias, conv0.stride, conv0.padding},
                      grads.outputs.at(0));

  ForwardOptions plain = fo;
  plain.capture = false;
  auto loss = [&]() { return sparse_ce(model.forward(batch, plain), labels).loss; };

  CheckAccumulator acc("vgg-nano end-to-end loss", opt);
  Rng pick(derive_seed(opt.seed, {9}));
  auto probe = [&](double& coordinate, double analytic) {
    const double saved = coordinate;
    coordinate = saved + opt.step;
    const double up = loss();
    coordinate = saved - opt.step;
    const double down = loss();
    coordinate = saved + 0.5 * opt.step;
    const double up_half = loss();
    coordinate = saved - 0.5 * opt.step;
    const double down_half = loss();
    coordinate = saved;
    const double forward_diff = (up - base.loss) / opt.step;
    const double backward_diff = (base.loss - down) / opt.step;
    const double central = (up - down) / (2.0 * opt.step);
    const double central_half = (up_half - down_half) / opt.step;
    const double scale = std::max({std::abs(forward_diff), std::abs(backward_diff), opt.error_floor});
    if (std::abs(forward_diff - backward_diff) > 1e-4 * scale ||
        std::abs(central - central_half) > 0.5 * opt.tolerance * scale) {
      acc.skip();
      return;
    }
    acc.add(analytic, central);
  };
  for (std::size_t layer = 0; layer < model.num_layers(); ++layer) {
    LayerParams& p = model.params()[layer];
    if (p.empty()) continue;
    for (std::size_t s = 0; s < opt.model_samples; ++s) {
      const auto wi = static_cast<std::size_t>(pick.below(p.weights.size()));
      probe(p.weights[wi], grads.params[layer].weights[wi]);
      const auto bi = static_cast<std::size_t>(pick.below(p.bias.size()));
      probe(p.bias[bi], grads.params[layer].bias[bi]);
    }
  }
  for (std::size_t s = 0; s < opt.model_samples; ++s) {
    const auto i = static_cast<std::size_t>(pick.below(batch.size()));
    probe(batch[i], input_grads.input[i]);
  }
  return acc.finish();
}

}  // namespace detail

/// Runs every check; the results are in a fixed order.
inline std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& opt = {}) {
  return {detail::check_conv(opt, 1, 1), detail::check_conv(opt, 2, 0), detail::check_maxpool(opt),
          detail::check_dense(opt),      detail::check_relu(opt),       detail::check_softmax_ce(opt),
          detail::check_vgg_nano(opt)};
}

}  // namespace camkit
