#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradinit/autodiff/grad.hpp"
#include "gradinit/autodiff/ops.hpp"

using namespace gi;
using namespace gi::ad;

namespace {

Tensor vec(std::vector<Real> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor(Shape{n}, std::move(v));
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<Real> dist(lo, hi);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = dist(rng);
  return t;
}

}  // namespace

TEST(Backward, SquareFirstAndSecondDerivative) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(3));
  Tensor f = mul(x, x);
  GradMap g = backward(tape, f, {x}, true);
  EXPECT_DOUBLE_EQ(g[0].item(), 6.0);
  ASSERT_TRUE(g[0].has_node());
  GradMap h = backward(tape, g[0], {x});
  EXPECT_DOUBLE_EQ(h[0].item(), 2.0);
}

TEST(Backward, FanOutAccumulates) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(1.5));
  GradMap g = backward(tape, add(x, x), {x});
  EXPECT_DOUBLE_EQ(g[0].item(), 2.0);
}

TEST(Backward, GradientWithoutCreateGraphIsConstant) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(2));
  GradMap g = backward(tape, mul(x, mul(x, x)), {x});
  EXPECT_DOUBLE_EQ(g[0].item(), 12.0);
  EXPECT_FALSE(g[0].has_node());
  EXPECT_EQ(tape.generation(), 0);
}

TEST(Backward, CreateGraphBumpsGeneration) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(2));
  backward(tape, mul(x, x), {x}, true);
  EXPECT_EQ(tape.generation(), 1);
}

TEST(Backward, SoftmaxMatmulMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor w = random_tensor({4, 4}, rng);
  const Tensor x = random_tensor({4, 1}, rng);
  const Tensor t = random_tensor({4, 1}, rng);
  auto f = [&](Tape&, const std::vector<Tensor>& p) {
    return sum(mul(softmax(matmul(p[0], x), 0), t));
  };
  const auto report = finite_diff_check(f, {w}, 1e-5, 1e-6);
  EXPECT_TRUE(report.pass) << "max_rel_err " << report.max_rel_err;
  EXPECT_EQ(report.coordinates, 16u);
}

TEST(Backward, RejectsNonScalarOutput) {
  Tape tape;
  Tensor x = tape.variable(vec({1, 2}));
  EXPECT_THROW(backward(tape, mul(x, x), {x}), std::invalid_argument);
}

TEST(Backward, RejectsTargetNotOnTape) {
  Tape tape, other;
  Tensor x = tape.variable(Tensor::scalar(1));
  Tensor y = other.variable(Tensor::scalar(1));
  EXPECT_THROW(backward(tape, mul(x, x), {y}), std::invalid_argument);
  EXPECT_THROW(backward(tape, mul(x, x), {Tensor::scalar(1)}), std::invalid_argument);
}

TEST(Backward, MixingTapesIsAnError) {
  Tape a, b;
  Tensor x = a.variable(Tensor::scalar(1));
  Tensor y = b.variable(Tensor::scalar(1));
  EXPECT_THROW(add(x, y), std::logic_error);
}

TEST(Backward, TapeWithoutHigherOrderRejectsCreateGraph) {
  Tape tape(TapeOptions{.higher_order = false});
  Tensor x = tape.variable(Tensor::scalar(1));
  EXPECT_THROW(backward(tape, mul(x, x), {x}, true), std::logic_error);
}

TEST(Backward, UnreachedTargetGetsZeros) {
  Tape tape;
  Tensor x = tape.variable(vec({1, 2}));
  Tensor y = tape.variable(vec({3, 4, 5}));
  GradMap g = backward(tape, sum(x), {x, y});
  EXPECT_EQ(g[1].shape(), (Shape{3}));
  for (Real v : g[1].data()) EXPECT_EQ(v, 0.0);
}

TEST(Detach, ConstantFactorInProduct) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(3));
  GradMap g = backward(tape, mul(x, detach(x)), {x});
  EXPECT_DOUBLE_EQ(g[0].item(), 3.0);
}

TEST(Detach, DetachedOutputHasZeroGradient) {
  Tape tape;
  Tensor x = tape.variable(Tensor::scalar(5));
  GradMap g = backward(tape, detach(x), {x});
  EXPECT_DOUBLE_EQ(g[0].item(), 0.0);
}

TEST(Detach, IsAbsorbing) {
  std::mt19937_64 rng(3);
  Tape tape;
  Tensor x = tape.variable(random_tensor({3, 3}, rng));
  Tensor d = detach(x);
  Tensor f = sum(exp(matmul(d, d)));
  GradMap g = backward(tape, f, {x});
  for (Real v : g[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(GradNorm, L1OverConcatenation) {
  GradMap g{{vec({1, -2}), vec({3})}};
  EXPECT_DOUBLE_EQ(grad_norm(g, 1).item(), 6.0);
}

TEST(GradNorm, L2) {
  GradMap g{{vec({3, 4})}};
  EXPECT_DOUBLE_EQ(grad_norm(g, 2).item(), 5.0);
}

TEST(GradNorm, ZeroGradientHasZeroSubgradient) {
  Tape tape;
  Tensor x = tape.variable(vec({0, 0, 0}));
  GradMap g{{mul(x, Tensor::scalar(2))}};
  Tensor n = grad_norm(g, 2);
  EXPECT_DOUBLE_EQ(n.item(), 0.0);
  GradMap d = backward(tape, n, {x});
  for (Real v : d[0].data()) EXPECT_EQ(v, 0.0);
  GradMap d1 = backward(tape, grad_norm(g, 1), {x});
  for (Real v : d1[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(GradNorm, RejectsOtherOrders) {
  GradMap g{{vec({1})}};
  EXPECT_THROW(grad_norm(g, 3), std::invalid_argument);
  EXPECT_THROW(grad_norm(GradMap{}, 2), std::invalid_argument);
}

TEST(FiniteDiff, LinearIsExact) {
  auto f = [](Tape&, const std::vector<Tensor>& p) { return scale(p[0], 3); };
  const auto r = finite_diff_check(f, {Tensor::scalar(0.37)}, 1e-4, 1e-10);
  EXPECT_LT(r.max_rel_err, 1e-10);
  EXPECT_TRUE(r.pass);
}

TEST(FiniteDiff, CubeTruncationError) {
  // Central-difference error for x^3 is h^2 f'''/6 = 1e-10 at h = 1e-5.
  auto f = [](Tape&, const std::vector<Tensor>& p) { return pow(p[0], 3); };
  const auto r = finite_diff_check(f, {Tensor::scalar(2)}, 1e-5, 1e-8);
  EXPECT_LT(r.max_rel_err, 1e-8);
}

TEST(FiniteDiff, RejectsNonPositiveStep) {
  auto f = [](Tape&, const std::vector<Tensor>& p) { return p[0]; };
  EXPECT_THROW(finite_diff_check(f, {Tensor::scalar(1)}, 0.0, 1e-6), std::invalid_argument);
}

TEST(DoubleBackward, NormOfGradientMatchesFiniteDifferences) {
  // h(x) = sum(exp(W x) * t); f(x) = ||dh/dx||_2.
  std::mt19937_64 rng(11);
  const Tensor w = random_tensor({5, 3}, rng, -0.5, 0.5);
  const Tensor t = random_tensor({5, 1}, rng);
  auto f = [&](Tape& tape, const std::vector<Tensor>& p) {
    Tensor h = sum(mul(exp(matmul(w, p[0])), t));
    GradMap g = backward(tape, h, {p[0]}, true);
    return grad_norm(g, 2);
  };
  const auto r = finite_diff_check(f, {random_tensor({3, 1}, rng)}, 1e-5, 1e-4);
  EXPECT_TRUE(r.pass) << r.max_rel_err;
}

TEST(Ops, BroadcastingAddSumsBackToOperandShape) {
  Tape tape;
  Tensor a = tape.variable(Tensor::full({2, 3}, 1));
  Tensor b = tape.variable(vec({1, 2, 3}));
  Tensor s = tape.variable(Tensor::scalar(2));
  Tensor f = sum(mul(add(a, b), s));
  GradMap g = backward(tape, f, {a, b, s});
  EXPECT_EQ(g[1].shape(), (Shape{3}));
  for (Real v : g[1].data()) EXPECT_DOUBLE_EQ(v, 4.0);
  EXPECT_DOUBLE_EQ(g[2].item(), 6 + 2 * 6.0);
}

TEST(Ops, SignAtZeroIsZero) {
  Tensor s = sign(vec({0.5, -2, 0}));
  EXPECT_EQ(s.at(0), 1);
  EXPECT_EQ(s.at(1), -1);
  EXPECT_EQ(s.at(2), 0);
}

TEST(Ops, VarianceIsBiased) {
  Tensor v = variance(Tensor(Shape{3, 1}, {1, 2, 3}), 0);
  EXPECT_NEAR(v.item(), 2.0 / 3.0, 1e-15);
}

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng);
  const Tensor w = random_tensor({2, 3, 3, 3}, rng);
  for (int stride : {1, 2}) {
    const Tensor y = conv2d(x, w, {stride, 1});
    const auto ho = y.dim(2), wo = y.dim(3);
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t o = 0; o < 2; ++o)
        for (std::int64_t i = 0; i < ho; ++i)
          for (std::int64_t j = 0; j < wo; ++j) {
            double acc = 0;
            for (std::int64_t c = 0; c < 3; ++c)
              for (int ki = 0; ki < 3; ++ki)
                for (int kj = 0; kj < 3; ++kj) {
                  const auto yy = i * stride - 1 + ki, xx = j * stride - 1 + kj;
                  if (yy < 0 || yy >= 5 || xx < 0 || xx >= 4) continue;
                  acc += x.at(((n * 3 + c) * 5 + yy) * 4 + xx) * w.at(((o * 3 + c) * 3 + ki) * 3 + kj);
                }
            EXPECT_NEAR(y.at(((n * 2 + o) * ho + i) * wo + j), acc, 1e-12);
          }
  }
}

TEST(Ops, ReshapeSharesStorageButNotNodes) {
  Tensor x = vec({1, 2, 3, 4});
  Tensor r = reshape(x, {2, 2});
  EXPECT_EQ(r.shape(), (Shape{2, 2}));
  EXPECT_EQ(r.data().data(), x.data().data());
  r.mutable_data()[0] = 9;  // copy-on-write
  EXPECT_EQ(x.at(0), 1);
}
