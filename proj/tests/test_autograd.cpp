#include <gtest/gtest.h>

#include "msn/autograd.hpp"
#include "test_util.hpp"

using namespace msn;
using testutil::randn;

TEST(Tape, FanOutAccumulatesGradients) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{1, 1, 1, 3}, {1.0, -2.0, 3.0}), true);
  const Var y = ag::add(tape, x, x);
  const Var z = ag::add(tape, y, x);
  tape.backward({{z, Tensor64(Shape{1, 1, 1, 3}, 1.0)}});
  EXPECT_EQ(tape.grad(x), Tensor64(Shape{1, 1, 1, 3}, 3.0));
}

TEST(Tape, VisitsNodesInReverseOrderOnce) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0}), true);
  const Var a = ag::relu(tape, x);
  const Var b = ag::max_pool2(tape, a);
  const Var c = ag::global_average_pool(tape, b);
  tape.backward({{c, Tensor64(Shape{1, 1}, 1.0)}});
  EXPECT_EQ(tape.visit_order(), (std::vector<std::size_t>{c.index, b.index, a.index}));
  EXPECT_EQ(tape.grad(x), Tensor64(Shape{1, 2, 2, 1}, {0.0, 0.0, 0.0, 1.0}));
}

TEST(Tape, ConstantLeavesGetNoGradient) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{2, 2}, {1, 2, 3, 4}), true);
  const Var w = tape.leaf(Tensor64(Shape{2, 1}, {1, 1}), false);
  const Var b = tape.leaf(Tensor64(Shape{1}), false);
  const Var y = ag::linear(tape, x, w, b);
  tape.backward({{y, Tensor64(Shape{2, 1}, 1.0)}});
  EXPECT_TRUE(tape.grad(w).empty());
  EXPECT_EQ(tape.grad(x), Tensor64(Shape{2, 2}, 1.0));
}

TEST(Tape, RepeatedBackwardResetsGradients) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{1, 1, 1, 1}, {2.0}), true);
  const Var y = ag::add(tape, x, x);
  tape.backward({{y, Tensor64(Shape{1, 1, 1, 1}, 1.0)}});
  tape.backward({{y, Tensor64(Shape{1, 1, 1, 1}, 1.0)}});
  EXPECT_EQ(tape.grad(x)[0], 2.0);
}

TEST(Tape, NonFiniteOutputIsRejected) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{1, 1, 1, 1}, {std::numeric_limits<double>::infinity()}), true);
  const Var y = tape.leaf(Tensor64(Shape{1, 1, 1, 1}, {-std::numeric_limits<double>::infinity()}), true);
  EXPECT_THROW(ag::add(tape, x, y), NumericError);
}

TEST(Tape, SeedShapeMustMatch) {
  Tape<double> tape;
  const Var x = tape.leaf(Tensor64(Shape{2}), true);
  EXPECT_THROW(tape.backward({{x, Tensor64(Shape{3})}}), ShapeError);
}

// conv -> batch norm -> relu -> pool -> conv -> GAP -> linear, checked end to end.
TEST(Tape, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::vector<Tensor64> inputs = {randn(Shape{3, 4, 4, 2}, rng), randn(Shape{3, 3, 2, 3}, rng, 0.5),
                                  randn(Shape{3}, rng, 0.1),       randn(Shape{3}, rng),
                                  randn(Shape{3}, rng),            randn(Shape{3, 3, 3, 4}, rng, 0.5),
                                  randn(Shape{4}, rng, 0.1),       randn(Shape{4, 2}, rng),
                                  randn(Shape{2}, rng)};
  const auto weights = randn(Shape{3, 2}, rng);

  const auto run = [&](const std::vector<Tensor64>& xs, std::vector<Tensor64>* grads) {
    Tape<double> tape;
    std::vector<Var> v;
    for (const auto& x : xs) v.push_back(tape.leaf(x, true));
    Tensor64 mean(Shape{3});
    Tensor64 var(Shape{3}, 1.0);
    Var h = ag::conv2d(tape, v[0], v[1], v[2], 1, 1);
    h = ag::batch_norm(tape, h, v[3], v[4], mean, var, ops::Mode::train);
    h = ag::relu(tape, h);
    h = ag::max_pool2(tape, h);
    h = ag::conv2d(tape, h, v[5], v[6], 1, 1);
    h = ag::global_average_pool(tape, h);
    h = ag::linear(tape, h, v[7], v[8]);
    const double loss = testutil::weighted_sum(tape.value(h), weights);
    if (grads != nullptr) {
      tape.backward({{h, weights}});
      for (const Var x : v) grads->push_back(tape.grad(x));
    }
    return loss;
  };

  std::vector<Tensor64> grads;
  run(inputs, &grads);
  GradCheckOptions options;
  options.refine_factors = {0.1, 0.01};
  // The first conv bias feeds batch norm, so its true gradient is exactly zero.
  options.magnitude_floor = 1e-4;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto f = [&](std::span<const double> x) {
      auto xs = inputs;
      std::copy(x.begin(), x.end(), xs[k].data());
      return run(xs, nullptr);
    };
    const auto coords = testutil::sample_coordinates(inputs[k].size(), 30, rng);
    EXPECT_LT(grad_check_subset(f, grads[k].values(), inputs[k].values(), coords, options).max_relative_error, 1e-5)
        << "input " << k;
  }
}
