#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradinit/optim/optim.hpp"

using namespace gi;
using namespace gi::optim;
using gi::ad::Tensor;

namespace {

std::vector<Tensor> one(Real v) { return {Tensor::scalar(v)}; }

}  // namespace

TEST(Sgd, PlainStep) {
  auto p = one(0);
  Sgd opt;
  opt.step(p, one(1), 0.1);
  EXPECT_DOUBLE_EQ(p[0].item(), -0.1);
}

TEST(Sgd, MomentumRecursion) {
  auto p = one(0);
  Sgd opt(0.9);
  opt.step(p, one(1), 1);
  opt.step(p, one(1), 1);
  EXPECT_NEAR(p[0].item(), -2.9, 1e-15);
  EXPECT_NEAR(opt.buffers()[0].item(), 1.9, 1e-15);
}

TEST(Sgd, ZeroGradientLeavesParameters) {
  auto p = one(0.37);
  Sgd opt(0.9);
  for (int i = 0; i < 3; ++i) opt.step(p, one(0), 0.5);
  EXPECT_EQ(p[0].item(), 0.37);
}

TEST(Sgd, WeightDecayAddsToGradient) {
  auto p = one(2);
  Sgd opt(0, 0.5);
  opt.step(p, one(0), 0.1);
  EXPECT_NEAR(p[0].item(), 2 - 0.1 * 1.0, 1e-15);
}

TEST(Sgd, ShapeMismatch) {
  auto p = one(0);
  Sgd opt;
  std::vector<Tensor> g{Tensor::zeros({2})};
  EXPECT_THROW(opt.step(p, g, 0.1), std::invalid_argument);
}

TEST(Adam, FirstStepClosedForm) {
  // m_hat = g, v_hat = g^2: delta = -lr g / (|g| + eps).
  auto p = one(0);
  Adam opt;
  opt.step(p, one(0.5), 1e-3);
  EXPECT_NEAR(p[0].item(), -1e-3 * 0.5 / (0.5 + 1e-8), 1e-18);
  EXPECT_NEAR(p[0].item(), -9.99999986e-4, 1e-11);
}

TEST(Adam, FirstStepIsSignLike) {
  std::vector<Tensor> p{Tensor::zeros({2})};
  std::vector<Tensor> g{Tensor(gi::Shape{2}, {2, -0.01})};
  Adam opt;
  opt.step(p, g, 1e-3);
  EXPECT_NEAR(p[0].at(0), -1e-3, 1e-11);
  EXPECT_NEAR(p[0].at(1), 1e-3, 1e-9);
}

TEST(Adam, FirstStepSignProperty) {
  std::mt19937_64 rng(9);
  std::normal_distribution<Real> dist(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Tensor> p{Tensor::zeros({16})}, g{Tensor(gi::Shape{16})};
    for (auto& v : g[0].mutable_data()) v = dist(rng) * std::pow(10.0, dist(rng));
    Adam opt;
    opt.step(p, g, 1e-3);
    for (std::int64_t j = 0; j < 16; ++j) {
      if (std::abs(g[0].at(j)) > 1e3 * 1e-8) EXPECT_EQ(std::signbit(p[0].at(j)), !std::signbit(g[0].at(j)));
    }
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = one(1.25);
  Adam opt;
  for (int i = 0; i < 5; ++i) opt.step(p, one(0), 1e-2);
  EXPECT_EQ(p[0].item(), 1.25);
}

TEST(Adam, DecoupledWeightDecay) {
  auto p = one(1);
  Adam opt(AdamOptions{.weight_decay = 0.2, .decoupled = true});
  opt.step(p, one(0), 0.1);
  EXPECT_NEAR(p[0].item(), 1 - 0.1 * 0.2, 1e-15);
}

TEST(Clip, Examples) {
  std::vector<Tensor> g{Tensor(gi::Shape{2}, {3, 4})};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 1), 5);
  EXPECT_NEAR(g[0].at(0), 0.6, 1e-15);
  EXPECT_NEAR(g[0].at(1), 0.8, 1e-15);
  std::vector<Tensor> h{Tensor(gi::Shape{2}, {0.3, 0.4})};
  clip_global_norm(h, 1);
  EXPECT_EQ(h[0].at(0), 0.3);
  EXPECT_EQ(h[0].at(1), 0.4);
  EXPECT_THROW(clip_global_norm(h, 0), std::invalid_argument);
}

TEST(Clip, PostConditionOverRandomGradients) {
  std::mt19937_64 rng(1);
  std::normal_distribution<Real> dist(0, 10);
  for (int t = 0; t < 200; ++t) {
    std::vector<Tensor> g{Tensor(gi::Shape{5}), Tensor(gi::Shape{3})};
    for (auto& x : g) for (auto& v : x.mutable_data()) v = dist(rng);
    clip_global_norm(g, 1);
    Real sq = 0;
    for (auto& x : g) for (Real v : x.data()) sq += v * v;
    EXPECT_LE(std::sqrt(sq), 1 + 1e-12);
  }
}

TEST(Schedule, Cosine) {
  Schedule s{ScheduleKind::cosine, 0.1, 100, 0};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.1);
  EXPECT_NEAR(lr_at(s, 100), 0, 1e-17);
  EXPECT_NEAR(lr_at(s, 50), 0.05, 1e-16);
  EXPECT_THROW(lr_at(s, 101), std::out_of_range);
  EXPECT_THROW(lr_at(s, -1), std::out_of_range);
}

TEST(Schedule, WarmupAndLinear) {
  EXPECT_DOUBLE_EQ(lr_at({ScheduleKind::warmup_constant, 1, 10, 4}, 2), 0.5);
  EXPECT_DOUBLE_EQ(lr_at({ScheduleKind::warmup_constant, 1, 10, 4}, 7), 1);
  EXPECT_DOUBLE_EQ(lr_at({ScheduleKind::linear_decay, 1, 10, 0}, 5), 0.5);
  EXPECT_DOUBLE_EQ(lr_at({ScheduleKind::warmup_linear_decay, 1, 10, 2}, 6), 0.5);
  EXPECT_DOUBLE_EQ(lr_at({ScheduleKind::warmup_linear_decay, 1, 10, 2}, 10), 0);
}

TEST(Schedule, ContinuousAndNonNegative) {
  for (auto kind : {ScheduleKind::constant, ScheduleKind::cosine, ScheduleKind::warmup_constant,
                    ScheduleKind::linear_decay, ScheduleKind::warmup_linear_decay}) {
    Schedule s{kind, 0.5, 1000, 100};
    for (std::int64_t t = 0; t <= 1000; ++t) {
      EXPECT_GE(lr_at(s, t), 0);
      if (t > 0) EXPECT_LE(std::abs(lr_at(s, t) - lr_at(s, t - 1)), 0.5 / 100 + 1e-12) << to_string(kind) << " " << t;
    }
    EXPECT_EQ(schedule_kind_from_string(to_string(kind)), kind);
  }
}
