#include <gtest/gtest.h>

#include "msn/ops.hpp"
#include "test_util.hpp"

using namespace msn;
using testutil::randn;

namespace {

// Six nested loops, straight from the definition of cross-correlation.
Tensor64 naive_conv(const Tensor64& x, const Tensor64& k, const Tensor64& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.shape()[0], h = x.shape()[1], w = x.shape()[2], ci = x.shape()[3];
  const std::size_t kh = k.shape()[0], kw = k.shape()[1], co = k.shape()[3];
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  Tensor64 out(Shape{n, oh, ow, co});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t o = 0; o < co; ++o) {
          double acc = b[o];
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx)
              for (std::size_t c = 0; c < ci; ++c) {
                const long y = static_cast<long>(oy * stride + dy) - static_cast<long>(pad);
                const long xx = static_cast<long>(ox * stride + dx) - static_cast<long>(pad);
                if (y < 0 || xx < 0 || y >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
                acc += x.at(s, static_cast<std::size_t>(y), static_cast<std::size_t>(xx), c) * k.at(dy, dx, c, o);
              }
          out.at(s, oy, ox, o) = acc;
        }
  return out;
}

Tensor64 with(const Tensor64& t, std::span<const double> values) { return Tensor64(t.shape(), {values.begin(), values.end()}); }

}  // namespace

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(1);
  struct Case {
    std::size_t n, h, w, ci, co, k, stride, pad;
  };
  for (const Case c : {Case{2, 5, 5, 3, 4, 3, 1, 1}, Case{1, 7, 6, 2, 3, 3, 2, 0}, Case{3, 4, 4, 5, 2, 1, 1, 0},
                       Case{1, 6, 6, 1, 1, 5, 1, 2}}) {
    const auto x = randn(Shape{c.n, c.h, c.w, c.ci}, rng);
    const auto k = randn(Shape{c.k, c.k, c.ci, c.co}, rng);
    const auto b = randn(Shape{c.co}, rng);
    const auto got = ops::conv2d(x, k, b, c.stride, c.pad);
    const auto want = naive_conv(x, k, b, c.stride, c.pad);
    ASSERT_EQ(got.shape(), want.shape());
    EXPECT_LT(testutil::max_abs_diff(got, want), 1e-12);
  }
}

TEST(Conv2d, HandWorkedValue) {
  // 1x3x3x1 input 1..9, 2x2 kernel of ones, no padding: window sums.
  Tensor64 x(Shape{1, 3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor64 k(Shape{2, 2, 1, 1}, 1.0);
  Tensor64 b(Shape{1}, 0.5);
  const auto y = ops::conv2d(x, k, b, 1, 0);
  EXPECT_EQ(y, Tensor64(Shape{1, 2, 2, 1}, {12.5, 16.5, 24.5, 28.5}));
}

TEST(Conv2d, LinearInInput) {
  std::mt19937_64 rng(2);
  const auto a = randn(Shape{2, 4, 4, 2}, rng);
  const auto c = randn(Shape{2, 4, 4, 2}, rng);
  const auto k = randn(Shape{3, 3, 2, 3}, rng);
  const Tensor64 zero(Shape{3});
  Tensor64 mix(a.shape());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 2.0 * a[i] - 3.0 * c[i];
  const auto ya = ops::conv2d(a, k, zero, 1, 1);
  const auto yc = ops::conv2d(c, k, zero, 1, 1);
  const auto ym = ops::conv2d(mix, k, zero, 1, 1);
  for (std::size_t i = 0; i < ym.size(); ++i) EXPECT_NEAR(ym[i], 2.0 * ya[i] - 3.0 * yc[i], 1e-12);
}

TEST(Conv2d, RejectsMismatchedChannels) {
  const Tensor64 x(Shape{1, 4, 4, 3});
  const Tensor64 k(Shape{3, 3, 2, 4});
  const Tensor64 b(Shape{4});
  EXPECT_THROW(ops::conv2d(x, k, b, 1, 1), ShapeError);
  EXPECT_THROW(ops::conv2d_output_shape(Shape{1, 2, 2, 3}, Shape{5, 5, 3, 1}, 1, 0), ShapeError);
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (const auto& [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}}) {
    const auto x = randn(Shape{2, 5, 5, 2}, rng);
    const auto k = randn(Shape{3, 3, 2, 3}, rng);
    const auto b = randn(Shape{3}, rng);
    const auto w = randn(ops::conv2d_output_shape(x.shape(), k.shape(), stride, pad), rng);
    const auto g = ops::conv2d_backward(x, k, w, stride, pad);

    const auto fx = [&](std::span<const double> v) { return testutil::weighted_sum(ops::conv2d(with(x, v), k, b, stride, pad), w); };
    const auto fk = [&](std::span<const double> v) { return testutil::weighted_sum(ops::conv2d(x, with(k, v), b, stride, pad), w); };
    const auto fb = [&](std::span<const double> v) { return testutil::weighted_sum(ops::conv2d(x, k, with(b, v), stride, pad), w); };
    const auto cx = testutil::sample_coordinates(x.size(), 40, rng);
    const auto ck = testutil::sample_coordinates(k.size(), 40, rng);
    EXPECT_LT(grad_check_subset(fx, g.input.values(), x.values(), cx).max_relative_error, 1e-6);
    EXPECT_LT(grad_check_subset(fk, g.kernel.values(), k.values(), ck).max_relative_error, 1e-6);
    EXPECT_LT(grad_check(fb, g.bias.values(), b.values()).max_relative_error, 1e-6);
  }
}

TEST(Relu, ForwardAndBackward) {
  const Tensor64 x(Shape{5}, {-2.0, -0.0, 0.0, 0.5, 3.0});
  EXPECT_EQ(ops::relu(x), Tensor64(Shape{5}, {0.0, 0.0, 0.0, 0.5, 3.0}));
  const Tensor64 g(Shape{5}, {1, 2, 3, 4, 5});
  EXPECT_EQ(ops::relu_backward(x, g), Tensor64(Shape{5}, {0, 0, 0, 4, 5}));
}

TEST(MaxPool, MatchesLoopsAndRoutesGradient) {
  std::mt19937_64 rng(4);
  const auto x = randn(Shape{2, 4, 6, 3}, rng);
  const auto r = ops::max_pool2(x);
  ASSERT_EQ(r.output.shape(), (Shape{2, 2, 3, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t xx = 0; xx < 3; ++xx)
        for (std::size_t c = 0; c < 3; ++c) {
          double best = -1e300;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) best = std::max(best, x.at(n, 2 * y + dy, 2 * xx + dx, c));
          EXPECT_EQ(r.output.at(n, y, xx, c), best);
        }
  const auto g = randn(r.output.shape(), rng);
  const auto back = ops::max_pool2_backward(x.shape(), r.argmax, g);
  double routed = 0.0;
  std::size_t nonzero = 0;
  for (double v : back.values()) {
    routed += v;
    nonzero += v != 0.0;
  }
  double total = 0.0;
  for (double v : g.values()) total += v;
  EXPECT_NEAR(routed, total, 1e-12);
  EXPECT_EQ(nonzero, g.size());
}

TEST(MaxPool, TiesGoToFirstWindowElement) {
  const Tensor64 x(Shape{1, 2, 2, 1}, {7.0, 7.0, 7.0, 7.0});
  const auto r = ops::max_pool2(x);
  ASSERT_EQ(r.argmax.size(), 1u);
  EXPECT_EQ(r.argmax[0], 0u);
}

TEST(MaxPool, RejectsOddExtent) { EXPECT_THROW(ops::max_pool2(Tensor64(Shape{1, 3, 4, 1})), ShapeError); }

TEST(MaxPool, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  // Distinct values at least 0.1 apart keep every window's winner stable.
  Tensor64 x(Shape{2, 4, 4, 2});
  std::vector<double> levels(x.size());
  std::iota(levels.begin(), levels.end(), 0.0);
  std::shuffle(levels.begin(), levels.end(), rng);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.1 * levels[i];
  const auto r = ops::max_pool2(x);
  const auto w = randn(r.output.shape(), rng);
  const auto g = ops::max_pool2_backward(x.shape(), r.argmax, w);
  const auto f = [&](std::span<const double> v) { return testutil::weighted_sum(ops::max_pool2(with(x, v)).output, w); };
  EXPECT_LT(grad_check(f, g.values(), x.values()).max_relative_error, 1e-7);
}

TEST(GlobalAveragePool, MatchesLoopsAndBackward) {
  std::mt19937_64 rng(6);
  const auto x = randn(Shape{3, 2, 5, 4}, rng);
  const auto y = ops::global_average_pool(x);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c) {
      double s = 0.0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 5; ++j) s += x.at(n, i, j, c);
      EXPECT_NEAR(y.at(n, c), s / 10.0, 1e-14);
    }
  const auto w = randn(y.shape(), rng);
  const auto g = ops::global_average_pool_backward(x.shape(), w);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(g.at(n, 1, 3, c), w.at(n, c) / 10.0);
}

TEST(Linear, MatchesLoopsAndBackward) {
  std::mt19937_64 rng(7);
  const auto x = randn(Shape{4, 6}, rng);
  const auto wt = randn(Shape{6, 3}, rng);
  const auto b = randn(Shape{3}, rng);
  const auto y = ops::linear(x, wt, b);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t k = 0; k < 3; ++k) {
      double s = b[k];
      for (std::size_t d = 0; d < 6; ++d) s += x.at(n, d) * wt.at(d, k);
      EXPECT_NEAR(y.at(n, k), s, 1e-13);
    }
  const auto w = randn(y.shape(), rng);
  const auto g = ops::linear_backward(x, wt, w);
  const auto fx = [&](std::span<const double> v) { return testutil::weighted_sum(ops::linear(with(x, v), wt, b), w); };
  const auto fw = [&](std::span<const double> v) { return testutil::weighted_sum(ops::linear(x, with(wt, v), b), w); };
  const auto fb = [&](std::span<const double> v) { return testutil::weighted_sum(ops::linear(x, wt, with(b, v)), w); };
  EXPECT_LT(grad_check(fx, g.input.values(), x.values()).max_relative_error, 1e-7);
  EXPECT_LT(grad_check(fw, g.weight.values(), wt.values()).max_relative_error, 1e-7);
  EXPECT_LT(grad_check(fb, g.bias.values(), b.values()).max_relative_error, 1e-7);
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  std::mt19937_64 rng(8);
  const auto x = randn(Shape{4, 3, 3, 2}, rng, 3.0);
  const Tensor64 gamma(Shape{2}, {2.0, 0.5});
  const Tensor64 beta(Shape{2}, {1.0, -1.0});
  Tensor64 rm(Shape{2});
  Tensor64 rv(Shape{2}, 1.0);
  const auto r = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::train);

  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t i = c; i < x.size(); i += 2) mean += x[i];
    mean /= 36.0;
    double var = 0.0;
    for (std::size_t i = c; i < x.size(); i += 2) var += (x[i] - mean) * (x[i] - mean);
    var /= 36.0;
    for (std::size_t i = c; i < x.size(); i += 2) {
      EXPECT_NEAR(r.output[i], gamma[c] * (x[i] - mean) / std::sqrt(var + 1e-5) + beta[c], 1e-12);
    }
    EXPECT_NEAR(rm[c], 0.1 * mean, 1e-14);
    EXPECT_NEAR(rv[c], 0.9 + 0.1 * var, 1e-14);
  }
}

TEST(BatchNorm, InferModeUsesRunningStats) {
  const Tensor64 x(Shape{1, 1, 2, 1}, {3.0, 5.0});
  const Tensor64 gamma(Shape{1}, 1.0);
  const Tensor64 beta(Shape{1}, 0.0);
  Tensor64 rm(Shape{1}, 1.0);
  Tensor64 rv(Shape{1}, 4.0 - 1e-5);
  const auto r = ops::batch_norm(x, gamma, beta, rm, rv, ops::Mode::infer);
  EXPECT_NEAR(r.output[0], 1.0, 1e-12);
  EXPECT_NEAR(r.output[1], 2.0, 1e-12);
  EXPECT_EQ(rm[0], 1.0);
}

TEST(BatchNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const auto x = randn(Shape{3, 2, 2, 3}, rng);
  const auto gamma = randn(Shape{3}, rng);
  const auto beta = randn(Shape{3}, rng);
  const auto w = randn(x.shape(), rng);
  const auto run = [&](const Tensor64& xi, const Tensor64& g, const Tensor64& b) {
    Tensor64 rm(Shape{3});
    Tensor64 rv(Shape{3}, 1.0);
    return ops::batch_norm(xi, g, b, rm, rv, ops::Mode::train);
  };
  const auto r = run(x, gamma, beta);
  const auto g = ops::batch_norm_backward(r.cache, gamma, w);
  const auto fx = [&](std::span<const double> v) { return testutil::weighted_sum(run(with(x, v), gamma, beta).output, w); };
  const auto fg = [&](std::span<const double> v) { return testutil::weighted_sum(run(x, with(gamma, v), beta).output, w); };
  const auto fb = [&](std::span<const double> v) { return testutil::weighted_sum(run(x, gamma, with(beta, v)).output, w); };
  EXPECT_LT(grad_check(fx, g.input.values(), x.values()).max_relative_error, 1e-6);
  EXPECT_LT(grad_check(fg, g.gamma.values(), gamma.values()).max_relative_error, 1e-6);
  EXPECT_LT(grad_check(fb, g.beta.values(), beta.values()).max_relative_error, 1e-6);
}

TEST(ResidualAdd, AddsAndChecksShape) {
  const Tensor64 a(Shape{1, 1, 1, 2}, {1.0, 2.0});
  const Tensor64 b(Shape{1, 1, 1, 2}, {0.5, -2.0});
  EXPECT_EQ(ops::residual_add(a, b), Tensor64(Shape{1, 1, 1, 2}, {1.5, 0.0}));
  EXPECT_THROW(ops::residual_add(a, Tensor64(Shape{1, 1, 2, 1})), ShapeError);
}

TEST(Ops, FloatAndDoubleAgree) {
  std::mt19937_64 rng(10);
  const auto x = randn(Shape{1, 4, 4, 2}, rng);
  const auto k = randn(Shape{3, 3, 2, 2}, rng);
  const auto b = randn(Shape{2}, rng);
  const auto yd = ops::conv2d(x, k, b, 1, 1);
  const auto yf = ops::conv2d(x.cast<float>(), k.cast<float>(), b.cast<float>(), 1, 1);
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-5);
}

TEST(GradCheck, ExactOnPolynomialAndFlagsWrongGradient) {
  const std::vector<double> x = {0.3, -1.2, 2.0};
  const auto f = [](std::span<const double> v) { return v[0] * v[0] * v[1] + std::sin(v[2]); };
  const std::vector<double> good = {2 * 0.3 * -1.2, 0.09, std::cos(2.0)};
  EXPECT_LT(grad_check(f, good, x).max_relative_error, 1e-8);
  std::vector<double> bad = good;
  bad[1] *= 1.01;
  const auto r = grad_check(f, bad, x);
  EXPECT_GT(r.max_relative_error, 5e-3);
  EXPECT_EQ(r.worst_index, 1u);
  EXPECT_EQ(r.coordinates, 3u);
}

TEST(GradCheck, NonFiniteThrows) {
  const std::vector<double> x = {1.0};
  const auto f = [](std::span<const double>) { return std::nan(""); };
  const std::vector<double> g = {0.0};
  EXPECT_THROW(grad_check(f, g, x), NumericError);
}

TEST(Tensor, ShapeValidation) {
  EXPECT_THROW(Shape({}), ShapeError);
  EXPECT_THROW(Shape({1, 2, 3, 4, 5}), ShapeError);
  EXPECT_THROW(Shape({2, 0}), ShapeError);
  EXPECT_EQ(Shape({2, 3, 4}).numel(), 24u);
  EXPECT_THROW(Tensor64(Shape{2, 2}, {1.0, 2.0}), ShapeError);
  Tensor64 t(Shape{2}, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_THROW(require_finite(t, "t"), NumericError);
}
