#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "camkit/finite_diff.hpp"
#include "camkit/ops.hpp"
#include "camkit/parallel.hpp"
#include "camkit/rng.hpp"
#include "camkit/tensor.hpp"

using namespace camkit;

namespace {

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double weighted(const Tensor& r, const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += r[i] * t[i];
  return s;
}

// Independent oracle: textbook seven-loop convolution written against the
// definition, with explicit zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  Tensor padded({n, c, h + 2 * pad, wd + 2 * pad});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < wd; ++xx) padded.at(a, ch, y + pad, xx + pad) = x.at(a, ch, y, xx);
  Tensor out({n, o, oh, ow});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t q = 0; q < o; ++q)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) s += padded.at(a, ch, y * stride + i, xx * stride + j) * w.at(q, ch, i, j);
          out.at(a, q, y, xx) = s + b[q];
        }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

TEST(Tensor, ShapeAndSize) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
}

TEST(Tensor, RejectsZeroDimensionAndWrongDataLength) {
  EXPECT_THROW(Tensor({2, 0}), Error);
  try {
    Tensor({2, 2}, std::vector<double>(3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_mismatch);
  }
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor r = t.reshaped({3, 2});
  EXPECT_EQ(r.vector(), t.vector());
  EXPECT_THROW((void)t.reshaped({4, 2}), Error);
}

TEST(Tensor, BitIdenticalDistinguishesSignedZero) {
  Tensor a({1}, std::vector<double>{0.0});
  Tensor b({1}, std::vector<double>{-0.0});
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(bit_identical(a, b));
}

// ---------------------------------------------------------------------------
// Rng

TEST(Rng, SplitmixReferenceValues) {
  // First outputs of splitmix64 seeded with 0, from the published reference implementation.
  std::uint64_t state = 0;
  EXPECT_EQ(splitmix64(state), 0xe220a8397b1dcdafULL);
  EXPECT_EQ(splitmix64(state), 0x6e789e6aa1b965f4ULL);
  EXPECT_EQ(splitmix64(state), 0x06c45d188009454fULL);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs = differs || x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformInUnitInterval) {
  Rng rng(1);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000, 0.5, 0.01);
}

TEST(Rng, BelowIsUnbiasedAndInRange) {
  Rng rng(2);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) {
    const auto v = rng.below(5);
    ASSERT_LT(v, 5u);
    ++counts[v];
  }
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}

TEST(Rng, NormalMoments) {
  Rng rng(3);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    ASSERT_TRUE(std::isfinite(z));
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(4);
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  rng.shuffle(std::span<int>(v));
  EXPECT_EQ(std::set<int>(v.begin(), v.end()).size(), 100u);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_NE(sorted, v);
}

TEST(Rng, DeriveSeedSeparatesTags) {
  EXPECT_NE(derive_seed(7, {0, 1}), derive_seed(7, {1, 0}));
  EXPECT_EQ(derive_seed(7, {3, 4}), derive_seed(7, {3, 4}));
  EXPECT_EQ(derive_seed(7, {}), 7u);
}

// ---------------------------------------------------------------------------
// parallel_for

TEST(Parallel, ResultsIndependentOfThreadCount) {
  const Tensor x = random_tensor({5, 2, 9, 9}, 11);
  ConvParams p{random_tensor({3, 2, 3, 3}, 12), random_tensor({3}, 13), 1, 1};
  set_thread_count(1);
  const Tensor one = conv2d(x, p);
  const ConvGrads g1 = conv2d_backward(x, p, one);
  set_thread_count(4);
  const Tensor four = conv2d(x, p);
  const ConvGrads g4 = conv2d_backward(x, p, four);
  set_thread_count(0);
  EXPECT_TRUE(bit_identical(one, four));
  EXPECT_TRUE(bit_identical(g1.weights, g4.weights));
  EXPECT_TRUE(bit_identical(g1.input, g4.input));
}

TEST(Parallel, PropagatesExceptions) {
  set_thread_count(3);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
  set_thread_count(0);
}

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, OnesKernelSumsWindow) {
  const Tensor x({1, 1, 3, 3}, 1.0);
  ConvParams p{Tensor({1, 1, 2, 2}, 1.0), Tensor({1}), 1, 0};
  const Tensor y = conv2d(x, p);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, ZeroInputGivesBias) {
  const Tensor x({2, 3, 5, 5});
  ConvParams p{random_tensor({4, 3, 3, 3}, 5), Tensor({4}, std::vector<double>{0.5, -1, 2, 3}), 2, 1};
  const Tensor y = conv2d(x, p);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < y.dim(2); ++i)
        for (std::size_t j = 0; j < y.dim(3); ++j) EXPECT_EQ(y.at(n, o, i, j), p.bias[o]);
}

TEST(Conv2d, MatchesNaiveOracle) {
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {3, 2}}) {
    const Tensor x = random_tensor({2, 3, 11, 9}, 21 + stride);
    const Tensor w = random_tensor({5, 3, 3, 3}, 22 + pad);
    const Tensor b = random_tensor({5}, 23);
    const Tensor y = conv2d(x, {w, b, stride, pad});
    const Tensor ref = naive_conv(x, w, b, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, Im2colPathBitIdenticalToReference) {
  // Shapes chosen to hit the blocked kernels and their scalar tails.
  const std::vector<std::tuple<Shape, Shape, std::size_t, std::size_t>> cases{
      {{2, 1, 16, 16}, {8, 1, 3, 3}, 1, 1}, {{1, 8, 20, 12}, {16, 8, 3, 3}, 1, 1},
      {{3, 3, 7, 5}, {5, 3, 2, 2}, 1, 0},   {{2, 2, 9, 9}, {3, 2, 3, 3}, 2, 1},
      {{1, 5, 33, 17}, {6, 5, 5, 5}, 1, 2}, {{1, 1, 4, 4}, {1, 1, 4, 4}, 1, 0},
  };
  std::uint64_t seed = 100;
  for (const auto& [xs, ws, stride, pad] : cases) {
    const Tensor x = random_tensor(xs, ++seed);
    ConvParams p{random_tensor(ws, ++seed), random_tensor({ws[0]}, ++seed), stride, pad};
    EXPECT_TRUE(bit_identical(conv2d(x, p), conv2d_reference(x, p))) << to_string(xs) << " " << to_string(ws);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  const Tensor x = random_tensor({1, 2, 5, 5}, 31);
  ConvParams p{random_tensor({3, 2, 3, 3}, 32), random_tensor({3}, 33), 2, 1};
  const Tensor r = random_tensor(conv2d(x, p).shape(), 34);
  const ConvGrads g = conv2d_backward(x, p, r);
  EXPECT_EQ(g.input.shape(), x.shape());
  EXPECT_EQ(g.weights.shape(), p.weights.shape());
  EXPECT_EQ(g.bias.shape(), p.bias.shape());
  const double h = 1e-5;
  EXPECT_LE(max_relative_error(g.input, finite_diff_grad([&](const Tensor& t) { return weighted(r, conv2d(t, p)); }, x, h)), 1e-6);
  EXPECT_LE(max_relative_error(g.weights, finite_diff_grad([&](const Tensor& t) {
                                 return weighted(r, conv2d(x, {t, p.bias, 2, 1}));
                               }, p.weights, h)),
            1e-6);
  EXPECT_LE(max_relative_error(g.bias, finite_diff_grad([&](const Tensor& t) {
                                 return weighted(r, conv2d(x, {p.weights, t, 2, 1}));
                               }, p.bias, h)),
            1e-6);
}

TEST(Conv2d, BackwardWithoutInputGrad) {
  const Tensor x = random_tensor({2, 2, 6, 6}, 41);
  ConvParams p{random_tensor({2, 2, 3, 3}, 42), random_tensor({2}, 43), 1, 1};
  const Tensor r = random_tensor({2, 2, 6, 6}, 44);
  const ConvGrads full = conv2d_backward(x, p, r, true);
  const ConvGrads lean = conv2d_backward(x, p, r, false);
  EXPECT_TRUE(lean.input.empty());
  EXPECT_TRUE(bit_identical(full.weights, lean.weights));
}

TEST(Conv2d, TranslationEquivariantOnInterior) {
  const Tensor w = random_tensor({2, 1, 3, 3}, 51);
  ConvParams p{w, Tensor({2}), 1, 1};
  Tensor x({1, 1, 12, 12});
  Rng rng(52);
  for (std::size_t y = 3; y < 7; ++y)
    for (std::size_t xx = 3; xx < 7; ++xx) x.at(0, 0, y, xx) = rng.uniform();
  Tensor shifted({1, 1, 12, 12});
  for (std::size_t y = 0; y + 2 < 12; ++y)
    for (std::size_t xx = 0; xx + 1 < 12; ++xx) shifted.at(0, 0, y + 2, xx + 1) = x.at(0, 0, y, xx);
  const Tensor a = conv2d(x, p), b = conv2d(shifted, p);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t y = 1; y < 9; ++y)
      for (std::size_t xx = 1; xx < 9; ++xx) EXPECT_EQ(a.at(0, o, y, xx), b.at(0, o, y + 2, xx + 1));
}

TEST(Conv2d, ErrorsNameTheDimension) {
  const Tensor x({1, 2, 5, 5});
  try {
    conv2d(x, {Tensor({1, 3, 3, 3}), Tensor({1}), 1, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("in_channels"), std::string::npos);
  }
  try {
    conv2d(x, {Tensor({1, 2, 7, 3}), Tensor({1}), 1, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, {Tensor({1, 2, 3, 3}), Tensor({2}), 1, 0}), Error);
  EXPECT_THROW(conv2d(x, {Tensor({1, 2, 3, 3}), Tensor({1}), 0, 0}), Error);
}

// ---------------------------------------------------------------------------
// maxpool2

TEST(MaxPool2, SingleWindow) {
  const Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(maxpool2(x)[0], 4.0);
  const Tensor g = maxpool2_backward(x, Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g.vector(), (std::vector<double>{0, 0, 0, 1}));
}

TEST(MaxPool2, TiesGoToTopLeft) {
  const Tensor x({1, 1, 4, 4}, 0.25);
  const Tensor y = maxpool2(x);
  for (double v : y.values()) EXPECT_EQ(v, 0.25);
  const Tensor g = maxpool2_backward(x, Tensor({1, 1, 2, 2}, 1.0));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(g.at(0, 0, r, c), (r % 2 == 0 && c % 2 == 0) ? 1.0 : 0.0);
  // Tie between the two bottom positions: the first in row-major order wins.
  const Tensor t({1, 1, 2, 2}, std::vector<double>{0, 1, 5, 5});
  EXPECT_EQ(maxpool2_backward(t, Tensor({1, 1, 1, 1}, 1.0)).vector(), (std::vector<double>{0, 0, 1, 0}));
}

TEST(MaxPool2, FiniteDifferencesAwayFromTies) {
  const Tensor x = random_tensor({1, 1, 6, 6}, 61);
  const Tensor r = random_tensor({1, 1, 3, 3}, 62);
  const Tensor g = maxpool2_backward(x, r);
  const Tensor fd = finite_diff_grad([&](const Tensor& t) { return weighted(r, maxpool2(t)); }, x, 1e-5);
  EXPECT_LE(max_relative_error(g, fd), 1e-6);
}

TEST(MaxPool2, OddDimensionsRejected) {
  try {
    maxpool2(Tensor({1, 1, 3, 4}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
  }
  EXPECT_THROW(maxpool2(Tensor({1, 1, 4, 5})), Error);
}

// ---------------------------------------------------------------------------
// dense

TEST(Dense, HandArithmetic) {
  const Tensor x({1, 2}, std::vector<double>{1, 2});
  const Tensor w({2, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor b({2}, std::vector<double>{10, 20});
  EXPECT_EQ(dense(x, w, b).vector(), (std::vector<double>{11, 22}));
}

TEST(Dense, IdentityWeights) {
  const Tensor x = random_tensor({3, 4}, 71);
  Tensor w({4, 4});
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
  EXPECT_EQ(dense(x, w, Tensor({4})).vector(), x.vector());
}

TEST(Dense, MatchesNaiveProductForManyRows) {
  const Tensor x = random_tensor({19, 13}, 72);
  const Tensor w = random_tensor({13, 7}, 73);
  const Tensor b = random_tensor({7}, 74);
  const Tensor y = dense(x, w, b);
  for (std::size_t n = 0; n < 19; ++n)
    for (std::size_t u = 0; u < 7; ++u) {
      double s = 0.0;
      for (std::size_t f = 0; f < 13; ++f) s += x.at(n, f) * w.at(f, u);
      EXPECT_NEAR(y.at(n, u), s + b[u], 1e-12);
    }
}

TEST(Dense, BackwardMatchesFiniteDifferences) {
  const Tensor x = random_tensor({2, 4}, 75);
  const Tensor w = random_tensor({4, 3}, 76);
  const Tensor b = random_tensor({3}, 77);
  const Tensor r = random_tensor({2, 3}, 78);
  const DenseGrads g = dense_backward(x, w, r);
  const double h = 1e-5;
  EXPECT_LE(max_relative_error(g.input, finite_diff_grad([&](const Tensor& t) { return weighted(r, dense(t, w, b)); }, x, h)), 1e-6);
  EXPECT_LE(max_relative_error(g.weights, finite_diff_grad([&](const Tensor& t) { return weighted(r, dense(x, t, b)); }, w, h)), 1e-6);
  EXPECT_LE(max_relative_error(g.bias, finite_diff_grad([&](const Tensor& t) { return weighted(r, dense(x, w, t)); }, b, h)), 1e-6);
}

TEST(Dense, ShapeErrors) {
  EXPECT_THROW(dense(Tensor({2, 3}), Tensor({4, 2}), Tensor({2})), Error);
  EXPECT_THROW(dense(Tensor({2, 3}), Tensor({3, 2}), Tensor({3})), Error);
  EXPECT_THROW(dense(Tensor({2, 3, 1}), Tensor({3, 2}), Tensor({2})), Error);
}

// ---------------------------------------------------------------------------
// relu / softmax

TEST(Relu, ForwardAndSubgradientAtZero) {
  const Tensor x({3}, std::vector<double>{-1, 0, 2});
  EXPECT_EQ(relu(x).vector(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(relu_backward(x, Tensor({3}, 1.0)).vector(), (std::vector<double>{0, 0, 1}));
}

TEST(Relu, FiniteDifferencesAwayFromZero) {
  const Tensor x = random_tensor({2, 3, 4}, 81);
  const Tensor r = random_tensor(x.shape(), 82);
  const Tensor fd = finite_diff_grad([&](const Tensor& t) { return weighted(r, relu(t)); }, x, 1e-5);
  const Tensor g = relu_backward(x, r);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (std::abs(x[i]) <= 1e-5) continue;
    EXPECT_LE(relative_error(g[i], fd[i]), 1e-6);
  }
}

TEST(Softmax, UniformAndStable) {
  const Tensor p = softmax(Tensor({1, 3}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const Tensor q = softmax(Tensor({1, 2}, std::vector<double>{1000, 0}));
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], 0.0);
  EXPECT_TRUE(q.all_finite());
}

TEST(Softmax, RowsSumToOne) {
  const Tensor p = softmax(random_tensor({20, 5}, 91, -30, 30));
  for (std::size_t n = 0; n < 20; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_GE(p.at(n, k), 0.0);
      EXPECT_LE(p.at(n, k), 1.0);
      s += p.at(n, k);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, RejectsNonFinite) {
  EXPECT_THROW(softmax(Tensor({1, 2}, std::vector<double>{NAN, 0})), Error);
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
  const Tensor z = random_tensor({3, 4}, 92, -2, 2);
  const Tensor r = random_tensor({3, 4}, 93);
  const Tensor g = softmax_backward(softmax(z), r);
  const Tensor fd = finite_diff_grad([&](const Tensor& t) { return weighted(r, softmax(t)); }, z, 1e-5);
  EXPECT_LE(max_relative_error(g, fd), 1e-6);
}

// ---------------------------------------------------------------------------
// finite_diff_grad

TEST(FiniteDiff, SumGivesOnes) {
  const Tensor x = random_tensor({7}, 95);
  const Tensor g = finite_diff_grad([](const Tensor& t) {
    double s = 0;
    for (double v : t.values()) s += v;
    return s;
  }, x, 1e-5);
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDiff, Square) {
  const Tensor x({1}, std::vector<double>{3.0});
  const Tensor g = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, x, 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_grad([](const Tensor&) { return 0.0; }, Tensor({1}), 0.0), Error);
}
