#pragma once

// Differentiable primitives with explicit forward and backward rules.
//
// Summation-order contract: every output of conv2d and dense is computed as
// a left-to-right sum starting from +0.0 over the reduction index, with the
// bias added last. For convolutions the reduction index runs over
// (in_channel, kernel_row, kernel_col) in row-major order. conv2d_reference
// and the im2col path in conv2d both follow it, which is what makes them
// bit-identical.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "camkit/error.hpp"
#include "camkit/parallel.hpp"
#include "camkit/tensor.hpp"

namespace camkit {

struct ConvParams {
  Tensor weights;  // (out_channels, in_channels, kernel_h, kernel_w)
  Tensor bias;     // (out_channels)
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel_h() const { return weights.dim(2); }
  std::size_t kernel_w() const { return weights.dim(3); }
};

struct ConvGrads {
  Tensor input;  // empty when not requested
  Tensor weights;
  Tensor bias;
};

struct DenseGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

/// floor((in + 2*pad - k) / stride) + 1, or an error when that is < 1.
inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                      std::size_t padding, const char* axis) {
  if (stride == 0) throw Error(Errc::invalid_argument, "convolution stride must be >= 1");
  if (in + 2 * padding < kernel) {
    throw Error(Errc::shape_mismatch, std::string("kernel ") + axis + " " + std::to_string(kernel) +
                                          " exceeds padded input " + axis + " " +
                                          std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w, stride, padding;
  std::size_t out_h, out_w;

  std::size_t reduction() const { return channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
  std::size_t in_pixels() const { return height * width; }
};

inline ConvGeometry conv_geometry(const Shape& input, const ConvParams& params) {
  if (input.size() != 4) {
    throw Error(Errc::shape_mismatch, "conv2d input must be rank 4 (N,C,H,W), got " +
                                          to_string(input));
  }
  if (params.weights.rank() != 4) {
    throw Error(Errc::shape_mismatch, "conv2d weights must be rank 4 (O,C,KH,KW), got " +
                                          to_string(params.weights.shape()));
  }
  if (params.weights.dim(1) != input[1]) {
    throw Error(Errc::shape_mismatch, "conv2d in_channels: weights expect " +
                                          std::to_string(params.weights.dim(1)) + ", input has " +
                                          std::to_string(input[1]));
  }
  if (params.bias.rank() != 1 || params.bias.dim(0) != params.weights.dim(0)) {
    throw Error(Errc::shape_mismatch, "conv2d bias must be (" +
                                          std::to_string(params.weights.dim(0)) + "), got " +
                                          to_string(params.bias.shape()));
  }
  ConvGeometry g{};
  g.batch = input[0];
  g.channels = input[1];
  g.height = input[2];
  g.width = input[3];
  g.out_channels = params.weights.dim(0);
  g.kernel_h = params.weights.dim(2);
  g.kernel_w = params.weights.dim(3);
  g.stride = params.stride;
  g.padding = params.padding;
  g.out_h = conv_output_extent(g.height, g.kernel_h, g.stride, g.padding, "height");
  g.out_w = conv_output_extent(g.width, g.kernel_w, g.stride, g.padding, "width");
  return g;
}

/// col[r * P + p] = input value feeding output pixel p through reduction index r (0 in padding).
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          double* out = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_w, 0.0);
            continue;
          }
          const double* in = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : in[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

/// Adds col entries back onto the input positions they were gathered from.
inline void col2im_add(const double* col, const ConvGeometry& g, double* x) {
  const std::size_t pixels = g.out_pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
        const double* row = col + ((c * g.kernel_h + kh) * g.kernel_w + kw) * pixels;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* in = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            in[static_cast<std::size_t>(ix)] += src[ox];
          }
        }
      }
    }
  }
}

/// Eight interleaved partial sums combined pairwise in a fixed order, so the
/// result depends only on the inputs. Not the left-to-right sum.
inline double dot8(const double* a, const double* b, std::size_t n) {
  double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t k = 0; k < 8; ++k) s[k] += a[i + k] * b[i + k];
  }
  for (std::size_t k = 0; i < n; ++i, ++k) s[k] += a[i] * b[i];
  return ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]));
}

inline std::vector<double>& scratch_buffer(std::size_t size) {
  thread_local std::vector<double> buffer;
  if (buffer.size() < size) buffer.resize(size);
  return buffer;
}

// Eight-lane double vectors. Each lane is an independent accumulator, so
// lane-wise arithmetic keeps the scalar summation order of every output.
using Lanes = double __attribute__((vector_size(64)));

inline Lanes load_lanes(const double* p) {
  Lanes v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}

inline void store_lanes(double* p, Lanes v) { __builtin_memcpy(p, &v, sizeof(v)); }

/// y[o][p] = (sum_r w[o][r] * col[r][p]) + b[o], summed over r in order.
/// Register-blocked over 4 output channels x 16 pixels.
inline void conv_gemm_forward(const double* w, const double* b, const double* col,
                              std::size_t out_channels, std::size_t reduction, std::size_t pixels,
                              double* y) {
  constexpr std::size_t kO = 4;
  std::size_t p0 = 0;
  for (; p0 + 16 <= pixels; p0 += 16) {
    std::size_t o0 = 0;
    for (; o0 + kO <= out_channels; o0 += kO) {
      Lanes a0[kO] = {}, a1[kO] = {};
      for (std::size_t r = 0; r < reduction; ++r) {
        const Lanes s0 = load_lanes(col + r * pixels + p0);
        const Lanes s1 = load_lanes(col + r * pixels + p0 + 8);
        for (std::size_t i = 0; i < kO; ++i) {
          const double wv = w[(o0 + i) * reduction + r];
          a0[i] += wv * s0;
          a1[i] += wv * s1;
        }
      }
      for (std::size_t i = 0; i < kO; ++i) {
        store_lanes(y + (o0 + i) * pixels + p0, a0[i] + b[o0 + i]);
        store_lanes(y + (o0 + i) * pixels + p0 + 8, a1[i] + b[o0 + i]);
      }
    }
    for (; o0 < out_channels; ++o0) {
      Lanes a0 = {}, a1 = {};
      for (std::size_t r = 0; r < reduction; ++r) {
        const double wv = w[o0 * reduction + r];
        a0 += wv * load_lanes(col + r * pixels + p0);
        a1 += wv * load_lanes(col + r * pixels + p0 + 8);
      }
      store_lanes(y + o0 * pixels + p0, a0 + b[o0]);
      store_lanes(y + o0 * pixels + p0 + 8, a1 + b[o0]);
    }
  }
  for (; p0 < pixels; ++p0) {
    for (std::size_t o = 0; o < out_channels; ++o) {
      double acc = 0.0;
      for (std::size_t r = 0; r < reduction; ++r) acc += w[o * reduction + r] * col[r * pixels + p0];
      y[o * pixels + p0] = acc + b[o];
    }
  }
}

/// dcol[r][p] = sum_o w[o][r] * dy[o][p], summed over o in order.
inline void conv_gemm_input_grad(const double* w, const double* dy, std::size_t out_channels,
                                 std::size_t reduction, std::size_t pixels, double* dcol) {
  constexpr std::size_t kR = 4;
  std::size_t p0 = 0;
  for (; p0 + 16 <= pixels; p0 += 16) {
    std::size_t r0 = 0;
    for (; r0 + kR <= reduction; r0 += kR) {
      Lanes a0[kR] = {}, a1[kR] = {};
      for (std::size_t o = 0; o < out_channels; ++o) {
        const Lanes s0 = load_lanes(dy + o * pixels + p0);
        const Lanes s1 = load_lanes(dy + o * pixels + p0 + 8);
        for (std::size_t i = 0; i < kR; ++i) {
          const double wv = w[o * reduction + r0 + i];
          a0[i] += wv * s0;
          a1[i] += wv * s1;
        }
      }
      for (std::size_t i = 0; i < kR; ++i) {
        store_lanes(dcol + (r0 + i) * pixels + p0, a0[i]);
        store_lanes(dcol + (r0 + i) * pixels + p0 + 8, a1[i]);
      }
    }
    for (; r0 < reduction; ++r0) {
      Lanes a0 = {}, a1 = {};
      for (std::size_t o = 0; o < out_channels; ++o) {
        const double wv = w[o * reduction + r0];
        a0 += wv * load_lanes(dy + o * pixels + p0);
        a1 += wv * load_lanes(dy + o * pixels + p0 + 8);
      }
      store_lanes(dcol + r0 * pixels + p0, a0);
      store_lanes(dcol + r0 * pixels + p0 + 8, a1);
    }
  }
  for (; p0 < pixels; ++p0) {
    for (std::size_t r = 0; r < reduction; ++r) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out_channels; ++o) acc += w[o * reduction + r] * dy[o * pixels + p0];
      dcol[r * pixels + p0] = acc;
    }
  }
}

/// dw[o][r] = dot8(dy[o], col[r]) for all pairs, blocked 4 x 4. Lane k of
/// each dot accumulates pixels p with p mod 8 == k, exactly as dot8 does.
inline void conv_gemm_weight_grad(const double* dy, const double* col, std::size_t out_channels,
                                  std::size_t reduction, std::size_t pixels, double* dw) {
  constexpr std::size_t kB = 4;
  const std::size_t full = pixels / 8 * 8;
  auto finish = [&](Lanes lanes, const double* a, const double* c) {
    for (std::size_t p = full, k = 0; p < pixels; ++p, ++k) lanes[k] += a[p] * c[p];
    return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
  };
  std::size_t o0 = 0;
  for (; o0 + kB <= out_channels; o0 += kB) {
    std::size_t r0 = 0;
    for (; r0 + kB <= reduction; r0 += kB) {
      Lanes acc[kB][kB] = {};
      for (std::size_t p = 0; p < full; p += 8) {
        Lanes c[kB];
        for (std::size_t j = 0; j < kB; ++j) c[j] = load_lanes(col + (r0 + j) * pixels + p);
        for (std::size_t i = 0; i < kB; ++i) {
          const Lanes a = load_lanes(dy + (o0 + i) * pixels + p);
          for (std::size_t j = 0; j < kB; ++j) acc[i][j] += a * c[j];
        }
      }
      for (std::size_t i = 0; i < kB; ++i)
        for (std::size_t j = 0; j < kB; ++j)
          dw[(o0 + i) * reduction + r0 + j] =
              finish(acc[i][j], dy + (o0 + i) * pixels, col + (r0 + j) * pixels);
    }
    for (; r0 < reduction; ++r0)
      for (std::size_t i = 0; i < kB; ++i)
        dw[(o0 + i) * reduction + r0] = dot8(dy + (o0 + i) * pixels, col + r0 * pixels, pixels);
  }
  for (; o0 < out_channels; ++o0)
    for (std::size_t r = 0; r < reduction; ++r)
      dw[o0 * reduction + r] = dot8(dy + o0 * pixels, col + r * pixels, pixels);
}

inline void conv_forward_sample(const double* x, const ConvParams& params, const ConvGeometry& g,
                                double* y) {
  const std::size_t pixels = g.out_pixels();
  const std::size_t reduction = g.reduction();
  std::vector<double>& col = scratch_buffer(reduction * pixels);
  im2col(x, g, col.data());
  conv_gemm_forward(params.weights.data(), params.bias.data(), col.data(), g.out_channels, reduction,
                    pixels, y);
}

}  // namespace detail

/// Direct-loop cross-correlation. The reference the faster path is checked against.
inline Tensor conv2d_reference(const Tensor& input, const ConvParams& params) {
  const auto g = detail::conv_geometry(input.shape(), params);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t oy = 0; oy < g.out_h; ++oy) {
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.channels; ++c) {
            for (std::size_t kh = 0; kh < g.kernel_h; ++kh) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + kh) -
                                        static_cast<std::ptrdiff_t>(g.padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
              for (std::size_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kw) -
                                          static_cast<std::ptrdiff_t>(g.padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                acc += input.at(n, c, iy, ix) * params.weights.at(o, c, kh, kw);
              }
            }
          }
          out.at(n, o, oy, ox) = acc + params.bias[o];
        }
      }
    }
  }
  return out;
}

/// im2col + tiled product; bit-identical to conv2d_reference.
inline Tensor conv2d(const Tensor& input, const ConvParams& params) {
  const auto g = detail::conv_geometry(input.shape(), params);
  Tensor out({g.batch, g.out_channels, g.out_h, g.out_w});
  const std::size_t in_stride = g.channels * g.in_pixels();
  const std::size_t out_stride = g.out_channels * g.out_pixels();
  parallel_for(g.batch, [&](std::size_t n) {
    detail::conv_forward_sample(input.data() + n * in_stride, params, g,
                                out.data() + n * out_stride);
  });
  return out;
}

/// Gradients of sum(grad_out * conv2d(input, params)). Per-sample weight
/// gradients are reduced in sample order, so results do not depend on threading.
inline ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params,
                                 const Tensor& grad_out, bool want_input_grad = true) {
  const auto g = detail::conv_geometry(input.shape(), params);
  const Shape expected{g.batch, g.out_channels, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw Error(Errc::shape_mismatch, "conv2d grad_out must be " + to_string(expected) +
                                          ", got " + to_string(grad_out.shape()));
  }
  const std::size_t pixels = g.out_pixels();
  const std::size_t reduction = g.reduction();
  const std::size_t wsize = g.out_channels * reduction;
  ConvGrads grads;
  if (want_input_grad) grads.input = Tensor(input.shape());
  std::vector<double> per_sample_w(g.batch * wsize);
  std::vector<double> per_sample_b(g.batch * g.out_channels);
  const std::size_t in_stride = g.channels * g.in_pixels();
  const std::size_t out_stride = g.out_channels * pixels;
  const double* w = params.weights.data();

  parallel_for(g.batch, [&](std::size_t n) {
    std::vector<double>& col = detail::scratch_buffer(reduction * pixels);
    detail::im2col(input.data() + n * in_stride, g, col.data());
    const double* dy = grad_out.data() + n * out_stride;
    double* dw = per_sample_w.data() + n * wsize;
    double* db = per_sample_b.data() + n * g.out_channels;
    detail::conv_gemm_weight_grad(dy, col.data(), g.out_channels, reduction, pixels, dw);
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* dyo = dy + o * pixels;
      double s = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) s += dyo[p];
      db[o] = s;
    }
    if (!want_input_grad) return;
    detail::conv_gemm_input_grad(w, dy, g.out_channels, reduction, pixels, col.data());
    detail::col2im_add(col.data(), g, grads.input.data() + n * in_stride);
  });

  grads.weights = Tensor(params.weights.shape());
  grads.bias = Tensor(params.bias.shape());
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t i = 0; i < wsize; ++i) grads.weights[i] += per_sample_w[n * wsize + i];
    for (std::size_t o = 0; o < g.out_channels; ++o)
      grads.bias[o] += per_sample_b[n * g.out_channels + o];
  }
  return grads;
}

namespace detail {
inline void require_pool_shape(const Shape& shape) {
  if (shape.size() != 4) {
    throw Error(Errc::shape_mismatch, "maxpool2 input must be rank 4, got " + to_string(shape));
  }
  if (shape[2] % 2 != 0) {
    throw Error(Errc::shape_mismatch, "maxpool2 height " + std::to_string(shape[2]) + " is odd");
  }
  if (shape[3] % 2 != 0) {
    throw Error(Errc::shape_mismatch, "maxpool2 width " + std::to_string(shape[3]) + " is odd");
  }
}

/// Flat offset (within the plane) of the first maximum of window (py, px),
/// scanning (0,0),(0,1),(1,0),(1,1).
inline std::size_t pool_argmax(const double* plane, std::size_t width, std::size_t py,
                               std::size_t px) {
  std::size_t best = (2 * py) * width + 2 * px;
  const std::size_t candidates[3] = {best + 1, best + width, best + width + 1};
  for (std::size_t c : candidates) {
    if (plane[c] > plane[best]) best = c;
  }
  return best;
}
}  // namespace detail

inline Tensor maxpool2(const Tensor& input) {
  detail::require_pool_shape(input.shape());
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  Tensor out({input.dim(0), input.dim(1), h / 2, w / 2});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = input.data() + pl * h * w;
    double* dst = out.data() + pl * (h / 2) * (w / 2);
    for (std::size_t py = 0; py < h / 2; ++py)
      for (std::size_t px = 0; px < w / 2; ++px)
        dst[py * (w / 2) + px] = src[detail::pool_argmax(src, w, py, px)];
  }
  return out;
}

/// Routes each pooled gradient to its window's first argmax.
inline Tensor maxpool2_backward(const Tensor& input, const Tensor& grad_out) {
  detail::require_pool_shape(input.shape());
  const std::size_t h = input.dim(2), w = input.dim(3);
  const Shape expected{input.dim(0), input.dim(1), h / 2, w / 2};
  if (grad_out.shape() != expected) {
    throw Error(Errc::shape_mismatch, "maxpool2 grad_out must be " + to_string(expected) +
                                          ", got " + to_string(grad_out.shape()));
  }
  Tensor grad(input.shape());
  const std::size_t planes = input.dim(0) * input.dim(1);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = input.data() + pl * h * w;
    const double* dy = grad_out.data() + pl * (h / 2) * (w / 2);
    double* dx = grad.data() + pl * h * w;
    for (std::size_t py = 0; py < h / 2; ++py)
      for (std::size_t px = 0; px < w / 2; ++px)
        dx[detail::pool_argmax(src, w, py, px)] += dy[py * (w / 2) + px];
  }
  return grad;
}

namespace detail {
inline void require_dense_shapes(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 2) {
    throw Error(Errc::shape_mismatch, "dense input must be rank 2 (N,F), got " +
                                          to_string(input.shape()));
  }
  if (weights.rank() != 2 || weights.dim(0) != input.dim(1)) {
    throw Error(Errc::shape_mismatch, "dense features: input has " + std::to_string(input.dim(1)) +
                                          ", weights are " + to_string(weights.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(1)) {
    throw Error(Errc::shape_mismatch, "dense units: weights give " + std::to_string(weights.dim(1)) +
                                          ", bias is " + to_string(bias.shape()));
  }
}
}  // namespace detail

/// input (N,F) times weights (F,U) plus bias (U).
inline Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  detail::require_dense_shapes(input, weights, bias);
  const std::size_t batch = input.dim(0), features = input.dim(1), units = weights.dim(1);
  constexpr std::size_t kRows = 8;
  Tensor out({batch, units});
  const std::size_t blocks = (batch + kRows - 1) / kRows;
  parallel_for(blocks, [&](std::size_t block) {
    const std::size_t n0 = block * kRows;
    const std::size_t rows = std::min(kRows, batch - n0);
    std::vector<double> acc(rows * units, 0.0);
    for (std::size_t f = 0; f < features; ++f) {
      const double* wrow = weights.data() + f * units;
      for (std::size_t i = 0; i < rows; ++i) {
        const double xv = input[(n0 + i) * features + f];
        double* a = acc.data() + i * units;
        for (std::size_t u = 0; u < units; ++u) a[u] += xv * wrow[u];
      }
    }
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t u = 0; u < units; ++u)
        out[(n0 + i) * units + u] = acc[i * units + u] + bias[u];
  });
  return out;
}

inline DenseGrads dense_backward(const Tensor& input, const Tensor& weights,
                                 const Tensor& grad_out, bool want_input_grad = true) {
  if (input.rank() != 2 || weights.rank() != 2 || weights.dim(0) != input.dim(1)) {
    throw Error(Errc::shape_mismatch, "dense_backward: input " + to_string(input.shape()) +
                                          " incompatible with weights " +
                                          to_string(weights.shape()));
  }
  const std::size_t batch = input.dim(0), features = input.dim(1), units = weights.dim(1);
  if (grad_out.shape() != Shape{batch, units}) {
    throw Error(Errc::shape_mismatch, "dense grad_out must be " + to_string({batch, units}) +
                                          ", got " + to_string(grad_out.shape()));
  }
  DenseGrads grads;
  grads.weights = Tensor(weights.shape());
  grads.bias = Tensor({units});
  if (want_input_grad) grads.input = Tensor(input.shape());
  parallel_for(features, [&](std::size_t f) {
    const double* wrow = weights.data() + f * units;
    double* gw = grads.weights.data() + f * units;
    for (std::size_t n = 0; n < batch; ++n) {
      const double* dy = grad_out.data() + n * units;
      const double xv = input[n * features + f];
      for (std::size_t u = 0; u < units; ++u) gw[u] += xv * dy[u];
      if (want_input_grad) grads.input[n * features + f] = detail::dot8(dy, wrow, units);
    }
  });
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t u = 0; u < units; ++u) grads.bias[u] += grad_out[n * units + u];
  return grads;
}

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

/// Subgradient 0 at 0.
inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  if (input.shape() != grad_out.shape()) {
    throw Error(Errc::shape_mismatch, "relu grad_out " + to_string(grad_out.shape()) +
                                          " vs input " + to_string(input.shape()));
  }
  Tensor grad(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) grad[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
  return grad;
}

/// Row-wise softmax of (N,K) logits, max-subtracted.
inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) {
    throw Error(Errc::shape_mismatch, "softmax expects (N,K), got " + to_string(logits.shape()));
  }
  if (!logits.all_finite()) throw Error(Errc::invalid_argument, "softmax input is not finite");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t n = 0; n < rows; ++n) {
    const double* z = logits.data() + n * k;
    double* p = out.data() + n * k;
    const double m = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += (p[j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < k; ++j) p[j] /= sum;
  }
  return out;
}

/// Given probs = softmax(z) and dL/dprobs, returns dL/dz.
inline Tensor softmax_backward(const Tensor& probs, const Tensor& grad_probs) {
  if (probs.rank() != 2 || probs.shape() != grad_probs.shape()) {
    throw Error(Errc::shape_mismatch, "softmax_backward shapes " + to_string(probs.shape()) +
                                          " and " + to_string(grad_probs.shape()));
  }
  const std::size_t rows = probs.dim(0), k = probs.dim(1);
  Tensor grad(probs.shape());
  for (std::size_t n = 0; n < rows; ++n) {
    const double* p = probs.data() + n * k;
    const double* g = grad_probs.data() + n * k;
    double inner = 0.0;
    for (std::size_t j = 0; j < k; ++j) inner += p[j] * g[j];
    for (std::size_t j = 0; j < k; ++j) grad[n * k + j] = p[j] * (g[j] - inner);
  }
  return grad;
}

}  // namespace camkit
