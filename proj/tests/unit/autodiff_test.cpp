#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ekd/grad_check.hpp"
#include "ekd/ops.hpp"

using namespace ekd::ad;

namespace {

Tensord random_tensor(Shape shape, std::uint64_t seed, bool grad = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensord::from(std::move(shape), std::move(v), grad);
}

}  // namespace

TEST(Ops, ReluClampsNegatives) {
  auto x = Tensorf::from({3}, {-1.f, 0.f, 2.f});
  auto y = relu(x);
  EXPECT_EQ(std::vector<float>(y.data().begin(), y.data().end()), (std::vector<float>{0, 0, 2}));
}

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
  auto y = softmax(Tensord::from({2}, {0.0, 0.0}), 0);
  EXPECT_DOUBLE_EQ(y.at(0), 0.5);
  EXPECT_DOUBLE_EQ(y.at(1), 0.5);
}

TEST(Ops, ConvOfOnesIsWindowSum) {
  auto x = Tensorf::full({1, 1, 4, 4}, 1.f);
  auto k = Tensorf::full({1, 1, 3, 3}, 1.f);
  auto y = conv2d(x, k, {1, 0});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 9.f);
}

TEST(Ops, ConvRejectsChannelMismatch) {
  auto x = Tensorf::zeros({1, 2, 4, 4});
  auto k = Tensorf::zeros({1, 3, 3, 3});
  EXPECT_THROW(conv2d(x, k), ShapeError);
}

TEST(Ops, AddRejectsShapeMismatch) {
  EXPECT_THROW(add(Tensorf::zeros({2}), Tensorf::zeros({3})), ShapeError);
  EXPECT_THROW(matmul(Tensorf::zeros({2, 3}), Tensorf::zeros({2, 3})), ShapeError);
}

TEST(Ops, NonFiniteOutputIsNumericError) {
  auto big = Tensorf::full({2}, 3e38f);
  EXPECT_THROW(add(big, big), NumericError);
}

TEST(Ops, SoftmaxRowsArePositiveAndSumToOne) {
  auto x = random_tensor({5, 7}, 3, false);
  auto y = softmax(scalar_mul(x, 20.0), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GT(y.at(r * 7 + c), 0.0);
      s += y.at(r * 7 + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-7);
  }
}

TEST(Ops, LogSoftmaxMatchesLogOfSoftmax) {
  auto x = random_tensor({4, 6}, 4, false);
  auto a = log_softmax(x, 1);
  auto b = softmax(x, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), std::log(b.at(i)), 1e-6);
}

TEST(Ops, LogSoftmaxStableForLargeLogits) {
  auto x = Tensorf::from({1, 3}, {1000.f, 0.f, -1000.f});
  auto y = log_softmax(x, 1);
  EXPECT_NEAR(y.at(0), 0.f, 1e-6);
  EXPECT_NEAR(y.at(1), -1000.f, 1e-3);
}

TEST(Ops, GlobalAvgPoolAndFlattenShapes) {
  auto x = random_tensor({2, 3, 4, 4}, 5, false);
  EXPECT_EQ(global_avg_pool2d(x).shape(), (Shape{2, 3}));
  EXPECT_EQ(flatten(x).shape(), (Shape{2, 48}));
  EXPECT_EQ(max_pool2d(x, 2, 2).shape(), (Shape{2, 3, 2, 2}));
  EXPECT_EQ(sum(x, {1, 2}).shape(), (Shape{2, 4}));
}

TEST(Backward, SquareSumGradient) {
  auto w = Tensord::from({3}, {1, 2, 3}, true);
  backward(sum(mul(w, w)));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, SharedInputAccumulates) {
  auto x = Tensord::from({2}, {1.5, -2.0}, true);
  backward(sum(add(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 2.0);

  auto y = Tensord::from({2}, {0.5, 1.0}, true);
  const int k = 4;
  Tensord acc = y;
  for (int i = 1; i < k; ++i) acc = add(acc, y);
  backward(sum(acc));
  for (double g : y.grad()) EXPECT_EQ(g, static_cast<double>(k));
}

TEST(Backward, NonScalarRootIsContractError) {
  auto x = Tensord::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scalar_mul(x, 2.0)), ContractError);
}

TEST(Backward, UntrackedRootIsNoOp) {
  auto x = Tensord::from({2}, {1, 2}, false);
  auto root = sum(x);
  EXPECT_NO_THROW(backward(root));
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(Tape<double>::collect(root).empty());
}

TEST(Backward, IsBitwiseDeterministic) {
  auto run = [] {
    auto a = random_tensor({4, 5}, 9);
    auto b = random_tensor({5, 3}, 10);
    backward(sum(softmax(matmul(a, b), 1)));
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Tape, TopologicalOrderVisitsEachOpOnce) {
  auto x = random_tensor({3}, 11);
  auto y = mul(x, x);
  auto z = add(y, y);
  auto root = sum(z);
  auto tape = Tape<double>::collect(root);
  ASSERT_EQ(tape.size(), 3u);
  const auto& ops = tape.operations();
  EXPECT_EQ(ops[0], y.node().get());
  EXPECT_EQ(ops[1], z.node().get());
  EXPECT_EQ(ops[2], root.node().get());
}

TEST(Detach, ValueIdenticalAndCutsGradient) {
  auto x = random_tensor({4}, 12);
  auto d = x.detach();
  EXPECT_FALSE(d.requires_grad());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(d.at(i), x.at(i));
  auto w = random_tensor({4}, 13);
  backward(sum(mul(w, mul(x, x).detach())));
  EXPECT_FALSE(x.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(NoGrad, ScopeSuppressesRecording) {
  auto x = random_tensor({3}, 14);
  Tensord y;
  {
    NoGradScope guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(GradCheck, ReluAwayFromKinkIsExact) {
  auto x = Tensord::from({4}, {0.5, 1.0, 2.0, 3.5}, true);
  auto r = grad_check<double>([&] { return sum(relu(x)); }, {x});
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradCheck, ReluKinkIsExcluded) {
  auto x = Tensord::from({3}, {-1.0, 0.0, 1.0}, true);
  auto r = grad_check<double>([&] { return sum(relu(x)); }, {x});
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.excluded, 1u);
}

TEST(GradCheck, MatmulChainMatchesFiniteDifferences) {
  auto a = random_tensor({3, 4}, 15);
  auto b = random_tensor({4, 5}, 16);
  auto c = random_tensor({5, 2}, 17);
  auto r = grad_check<double>([&] { return sum(mul(matmul(matmul(a, b), c), matmul(matmul(a, b), c))); },
                              {a, b, c});
  EXPECT_TRUE(r.passed) << r.summary();
  EXPECT_LT(r.max_relative_error, 1e-5);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto x = random_tensor({3}, 18);
  // Detaching inside f hides a path the finite differences still see.
  auto r = grad_check<double>([&] { return sum(mul(x, x.detach())); }, {x});
  EXPECT_FALSE(r.passed);
}

class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, RandomInputsMatchFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  auto x = random_tensor({2, 3, 5, 5}, seed);
  auto k = random_tensor({4, 3, 3, 3}, seed + 100);
  auto scale = random_tensor({4}, seed + 200);
  auto shift = random_tensor({4}, seed + 300);
  BatchNormStats<double> stats{Tensord::zeros({4}), Tensord::full({4}, 1.0)};
  auto f = [&] {
    auto y = conv2d(x, k, {2, 1});
    y = batch_norm2d(y, scale, shift, stats, {true, false});
    return sum(log_softmax(global_avg_pool2d(y), 1));
  };
  auto r = grad_check<double>(f, {x, k, scale, shift});
  EXPECT_TRUE(r.passed) << r.summary();
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 20));
