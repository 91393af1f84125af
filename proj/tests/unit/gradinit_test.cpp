#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "gradinit/autodiff/ops.hpp"
#include "gradinit/gradinit/gradinit.hpp"
#include "gradinit/nn/init.hpp"

using namespace gi;
using namespace gi::ad;
using namespace gi::gradinit;

namespace {

Tensor vec(std::vector<Real> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor(Shape{n}, std::move(v));
}

// L(theta) = 1/2 sum_i c_i theta_i^2, batch-independent.
LossProblem quadratic(std::vector<Real> w, std::vector<Real> c = {}) {
  if (c.empty()) c.assign(w.size(), 1);
  LossProblem p;
  for (std::size_t i = 0; i < w.size(); ++i) {
    p.names.push_back("w" + std::to_string(i));
    p.weights.push_back(Tensor::scalar(w[i]));
    p.is_norm.push_back(false);
  }
  p.loss = [c](std::span<const Tensor> view, const data::Batch&) {
    Tensor total = scale(mul(view[0], view[0]), c[0] / 2);
    for (std::size_t i = 1; i < view.size(); ++i) total = add(total, scale(mul(view[i], view[i]), c[i] / 2));
    return total;
  };
  return p;
}

GradInitConfig worked_config() {
  GradInitConfig c;
  c.eta = 0.1;
  c.gamma = 1;
  return c;
}

data::Dataset random_images(std::int64_t n, std::int64_t side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  data::Dataset::ImageStorage s;
  s.channels = 1;
  s.height = side;
  s.width = side;
  s.mean = {Real(0.5)};
  s.std = {Real(0.3)};
  for (std::int64_t i = 0; i < n * side * side; ++i) s.pixels.push_back(static_cast<std::uint8_t>(rng() % 256));
  for (std::int64_t i = 0; i < n; ++i) s.labels.push_back(static_cast<std::int32_t>(rng() % 10));
  return data::Dataset::images(data::DatasetKind::mnist, std::move(s));
}

const data::Batch kNoBatch{};

}  // namespace

TEST(StepImage, Examples) {
  GradMap g{{vec({3, 4})}};
  GradMap s = step_image(StepAlgo::sgd, g, 1);
  EXPECT_NEAR(s[0].at(0), 0.6, 1e-15);
  EXPECT_NEAR(s[0].at(1), 0.8, 1e-15);
  GradMap a = step_image(StepAlgo::adam, GradMap{{vec({0.5, -2, 0})}}, 1);
  EXPECT_EQ(a[0].at(0), 1);
  EXPECT_EQ(a[0].at(1), -1);
  EXPECT_EQ(a[0].at(2), 0);
  GradMap h = step_image(StepAlgo::sgd, GradMap{{vec({1, 0})}}, 0.5);
  EXPECT_EQ(h[0].at(0), 0.5);
  EXPECT_EQ(h[0].at(1), 0);
  EXPECT_THROW(step_image(StepAlgo::sgd, GradMap{{vec({0, 0})}}, 1), DegenerateGradientError);
}

TEST(StepImage, IsDetached) {
  Tape tape;
  Tensor x = tape.variable(vec({1, 2}));
  GradMap g{{mul(x, x)}};
  EXPECT_FALSE(step_image(StepAlgo::sgd, g, 1)[0].has_node());
  EXPECT_FALSE(step_image(StepAlgo::adam, g, 1)[0].has_node());
}

TEST(RecommendGamma, Examples) {
  EXPECT_NEAR(recommend_gamma(StepAlgo::sgd, 0.1), 1, 1e-15);
  EXPECT_NEAR(recommend_gamma(StepAlgo::sgd, 0.4), 0.5, 1e-15);
  EXPECT_NEAR(recommend_gamma(StepAlgo::adam, 0.001), 100, 1e-12);
  GradInitConfig c;
  EXPECT_NEAR(c.resolved_gamma(), 1, 1e-15);
}

TEST(RescaledParams, Examples) {
  Tape tape;
  std::vector<Tensor> w{vec({1, 2})};
  std::vector<Tensor> a{tape.variable(Tensor::scalar(0.5))};
  auto view = rescaled_params(w, a);
  EXPECT_EQ(view[0].at(0), 0.5);
  EXPECT_EQ(view[0].at(1), 1);
  EXPECT_THROW(rescaled_params(w, {}), std::invalid_argument);

  // L = 1/2 theta^2, W = 2, alpha = 1.5 -> dL/dalpha = theta W = 6.
  LossProblem q = quadratic({2});
  Tape t2;
  std::vector<Tensor> alpha{t2.variable(Tensor::scalar(1.5))};
  auto v = rescaled_params(q.weights, alpha);
  EXPECT_NEAR(backward(t2, q.loss(v, kNoBatch), alpha)[0].item(), 6, 1e-14);
}

TEST(RescaledParams, ScaleGradientIsInnerProduct) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 12, 12, 10}), 3);
  data::Dataset d = random_images(32, 4, 1);
  std::vector<std::int64_t> idx(32);
  for (int i = 0; i < 32; ++i) idx[static_cast<std::size_t>(i)] = i;
  data::Batch b = d.batch(idx);
  Tape tape;
  std::vector<Tensor> alphas;
  for (std::size_t i = 0; i < m.size(); ++i) alphas.push_back(tape.variable(Tensor::scalar(1)));
  auto view = rescaled_params(m, alphas);
  Tensor loss = m.forward(b, view, nn::Mode::train).loss;
  std::vector<Tensor> wrt = alphas;
  wrt.insert(wrt.end(), view.begin(), view.end());
  GradMap g = backward(tape, loss, wrt);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto w = m.blocks()[i].tensor.data();
    const auto dt = g[m.size() + i].data();
    double inner = 0;
    for (std::size_t j = 0; j < w.size(); ++j) inner += w[j] * dt[j];
    EXPECT_NEAR(g[i].item(), inner, 1e-10) << m.blocks()[i].name;
  }
}

TEST(WorkedExample, ObjectiveGrad) {
  ScaleGradient r = objective_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, worked_config());
  EXPECT_NEAR(r.grad[0], 5.8, 1e-10);
  EXPECT_NEAR(r.value, 4.205, 1e-12);
  EXPECT_NEAR(r.grad_norm, 3, 1e-15);
  EXPECT_EQ(r.second_order_evals, 0);
}

TEST(WorkedExample, ConstraintGrad) {
  GradInitConfig c = worked_config();
  ScaleGradient r = constraint_grad(quadratic({2}), {1.5}, kNoBatch, c);
  EXPECT_NEAR(r.grad[0], 2.0, 1e-10);
  EXPECT_EQ(r.second_order_evals, 1);
  c.algo = StepAlgo::adam;
  EXPECT_NEAR(constraint_grad(quadratic({2}), {1.5}, kNoBatch, c).grad[0], 2.0, 1e-10);
}

TEST(WorkedExample, Penalty) {
  const GradInitConfig c = worked_config();
  EXPECT_NEAR(penalty_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, c, 1).grad[0], 7.8, 1e-10);
  EXPECT_NEAR(penalty_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, c, 0).grad[0],
              objective_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, c).grad[0], 1e-14);
  EXPECT_THROW(penalty_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, c, -1), std::invalid_argument);
}

TEST(WorkedExample, VanishingStepReducesToLossGradient) {
  GradInitConfig c = worked_config();
  c.eta = 1e-12;
  // dL/dalpha = alpha W^2 = 6.
  EXPECT_NEAR(objective_grad(quadratic({2}), {1.5}, kNoBatch, kNoBatch, c).grad[0], 6, 1e-10);
}

TEST(WorkedExample, DetachingTheImageMatters) {
  // Two blocks, L = 1/2 (t1^2 + 3 t2^2): the normalized image depends on alpha,
  // so differentiating through it changes the answer.
  LossProblem q = quadratic({2, 1}, {1, 3});
  const std::vector<Real> a{1.5, 0.7};
  const GradInitConfig c = worked_config();
  const auto detached = objective_grad(q, a, kNoBatch, kNoBatch, c).grad;

  Tape tape;
  std::vector<Tensor> al{tape.variable(Tensor::scalar(a[0])), tape.variable(Tensor::scalar(a[1]))};
  auto view = rescaled_params(q.weights, al);
  GradMap g = backward(tape, q.loss(view, kNoBatch), view, true);
  Tensor n = grad_norm(g, 2);
  std::vector<Tensor> next;
  for (std::size_t i = 0; i < 2; ++i) next.push_back(sub(view[i], scale(div(g[i], n), c.eta)));
  GradMap live = backward(tape, q.loss(next, kNoBatch), al);

  // Hand values: theta = (3, 0.7), g = (3, 2.1), theta' = theta - 0.1 g/|g|.
  const double gn = std::hypot(3.0, 2.1);
  const double t1 = 3 - 0.1 * 3 / gn, t2 = 0.7 - 0.1 * 2.1 / gn;
  EXPECT_NEAR(detached[0], t1 * 2, 1e-12);
  EXPECT_NEAR(detached[1], 3 * t2 * 1, 1e-12);
  EXPECT_GT(std::abs(live[0].item() - detached[0]), 1e-3);
}

TEST(ConstraintGrad, MatchesFiniteDifferencesOnLinearRegression) {
  // y = w1 x + w2, squared error over a fixed batch carried in `inputs`.
  data::Batch b;
  b.inputs = Tensor(Shape{5, 1, 1, 1}, {0.3, -1.2, 0.8, 2.0, -0.5});
  LossProblem p;
  p.names = {"w", "b"};
  p.weights = {Tensor::scalar(0.9), Tensor::scalar(-0.4)};
  p.is_norm = {false, false};
  const Tensor y(Shape{5}, {1.0, -2.0, 0.5, 3.1, 0.2});
  p.loss = [y](std::span<const Tensor> v, const data::Batch& batch) {
    Tensor x = reshape(batch.inputs, {5});
    Tensor r = sub(add(mul(x, v[0]), v[1]), y);
    return mean(mul(r, r));
  };
  for (auto algo : {StepAlgo::sgd, StepAlgo::adam}) {
    GradInitConfig c;
    c.algo = algo;
    const std::vector<Real> a{1.3, 0.6};
    const auto analytic = constraint_grad(p, a, b, c).grad;
    for (std::size_t i = 0; i < 2; ++i) {
      const double h = 1e-5;
      auto ap = a, am = a;
      ap[i] += h;
      am[i] -= h;
      const double fd = (gradient_norm(p, ap, b, c.p()) - gradient_norm(p, am, b, c.p())) / (2 * h);
      EXPECT_LT(std::abs(fd - analytic[i]) / std::max({std::abs(fd), std::abs(analytic[i]), 1e-12}), 1e-4);
    }
  }
}

TEST(Clamp, Examples) {
  std::vector<Real> a{0.005, 1.5, 0.01};
  EXPECT_EQ(clamp_scales(a, 0.01), 1);
  EXPECT_EQ(a[0], 0.01);
  EXPECT_EQ(a[1], 1.5);
  EXPECT_EQ(a[2], 0.01);
}

TEST(MixBatches, Composition) {
  std::mt19937_64 rng(0);
  auto s = data::sample_indices(5000, 128, rng);
  const std::set<std::int64_t> ss(s.begin(), s.end());
  auto count_shared = [&](const std::vector<std::int64_t>& t) {
    return std::count_if(t.begin(), t.end(), [&](auto i) { return ss.count(i) > 0; });
  };
  auto half = mix_batches(s, 5000, 0.5, rng);
  EXPECT_EQ(half.size(), 128u);
  EXPECT_EQ(count_shared(half), 64);
  EXPECT_EQ(std::set<std::int64_t>(half.begin(), half.end()).size(), 128u);
  auto all = mix_batches(s, 5000, 1, rng);
  EXPECT_EQ(std::set<std::int64_t>(all.begin(), all.end()), ss);
  EXPECT_EQ(count_shared(mix_batches(s, 5000, 0, rng)), 0);
  EXPECT_EQ(count_shared(mix_batches(s, 5000, 0.3, rng)), 38);  // round(38.4)
  auto small = data::sample_indices(150, 128, rng);
  EXPECT_THROW(mix_batches(small, 150, 0.5, rng), data::DataError);
  EXPECT_THROW(mix_batches(s, 5000, 1.5, rng), std::invalid_argument);
}

TEST(MixBatches, Deterministic) {
  std::mt19937_64 a(9), b(9);
  std::vector<std::int64_t> s{1, 5, 9, 13};
  EXPECT_EQ(mix_batches(s, 100, 0.5, a), mix_batches(s, 100, 0.5, b));
}

TEST(Config, Validation) {
  GradInitConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau = -1;
  try {
    c.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("gradinit.tau"), std::string::npos);
  }
  c = {};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.fix_norm_scales = c.only_norm_scales = true;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

class RunTest : public ::testing::Test {
 protected:
  nn::Model model = nn::build_model(nn::mlp_spec({16, 24, 24, 24, 10}), 4);
  data::Dataset data = random_images(600, 4, 2);
  GradInitConfig config() const {
    GradInitConfig c;
    c.iterations = 30;
    c.batch_size = 32;
    c.seed = 5;
    return c;
  }
};

TEST_F(RunTest, ZeroMetaLearningRateKeepsOnes) {
  GradInitConfig c = config();
  c.tau = 0;
  auto r = gradinit_run(model, data, c);
  for (Real a : r.scales.alphas) EXPECT_EQ(a, 1);
}

TEST_F(RunTest, ReportInvariants) {
  const auto before = model.params();
  GradInitConfig c = config();
  // Start just below the initial gradient norm so both branches occur.
  GradInitConfig probe = c;
  probe.iterations = 1;
  c.gamma = 0.8 * gradinit_run(model, data, probe).report.records[0].grad_norm;
  auto r = gradinit_run(model, data, c);
  ASSERT_EQ(r.report.records.size(), 30u);
  std::int64_t constraint = 0;
  for (const auto& rec : r.report.records) {
    EXPECT_EQ(rec.branch == Branch::constraint, rec.grad_norm > *c.gamma) << rec.iter;
    if (rec.branch == Branch::objective) {
      EXPECT_EQ(rec.second_order_evals, 0);
      EXPECT_TRUE(rec.objective_loss.has_value());
    } else {
      EXPECT_GE(rec.second_order_evals, 1);
      ++constraint;
    }
  }
  EXPECT_EQ(constraint, r.report.constraint_iterations);
  EXPECT_GT(constraint, 0);
  EXPECT_LT(constraint, 30);
  for (Real a : r.scales.alphas) EXPECT_GE(a, c.alpha_lower);
  for (std::size_t i = 0; i < model.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(before[i].data(), model.blocks()[i].tensor.data()));
  }
  EXPECT_EQ(r.report.block_names.size(), model.size());
}

TEST_F(RunTest, Deterministic) {
  auto a = gradinit_run(model, data, config());
  auto b = gradinit_run(model, data, config());
  EXPECT_EQ(a.scales.alphas, b.scales.alphas);
}

TEST_F(RunTest, PenaltyFlagsEveryIteration) {
  auto r = penalty_run(model, data, config(), 1);
  ASSERT_EQ(r.report.records.size(), 30u);
  for (const auto& rec : r.report.records) EXPECT_EQ(rec.branch, Branch::penalty);
}

TEST_F(RunTest, AblationMasks) {
  nn::Model bn = nn::build_model(nn::mlp_spec({16, 12, 10}, true), 1);
  GradInitConfig c = config();
  c.fix_norm_scales = true;
  auto fixed = gradinit_run(bn, data, c);
  c.fix_norm_scales = false;
  c.only_norm_scales = true;
  auto only = gradinit_run(bn, data, c);
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const bool norm = nn::is_norm(bn.blocks()[i].role);
    if (norm) {
      EXPECT_EQ(fixed.scales.alphas[i], 1) << bn.blocks()[i].name;
    } else {
      EXPECT_EQ(only.scales.alphas[i], 1) << bn.blocks()[i].name;
      // Zero-initialized biases have zero scale gradient and stay put.
      if (bn.blocks()[i].role == nn::Role::fc_weight) EXPECT_NE(fixed.scales.alphas[i], 1) << bn.blocks()[i].name;
    }
  }
}

TEST_F(RunTest, DegenerateGradientSurfaces) {
  // Stationary point of the loss: g = 0 has no SGD step direction.
  EXPECT_THROW(gradinit_run(quadratic({0, 0}), data, config()), DegenerateGradientError);
  GradInitConfig c = config();
  c.algo = StepAlgo::adam;
  EXPECT_NO_THROW(gradinit_run(quadratic({0, 0}), data, c));
}

TEST_F(RunTest, RejectsSmallDataset) {
  GradInitConfig c = config();
  c.batch_size = 1000;
  EXPECT_THROW(gradinit_run(model, data, c), data::DataError);
}

TEST(ApplyScales, Examples) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 8, 10}), 2);
  const nn::Model orig = m;
  auto ones = LearnedScales::from(m, ScaleVector::ones(LossProblem::from(m)));
  apply_scales(m, ones);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_TRUE(std::ranges::equal(orig.blocks()[i].tensor.data(), m.blocks()[i].tensor.data()));
  }
  EXPECT_THROW(apply_scales(m, ones), std::logic_error);

  m.blocks()[0].tensor = vec({1, 2}).view_as({1, 2});
  LearnedScales half{{m.blocks()[0].name}, {0.5}};
  nn::Model tiny = m;
  tiny.blocks().resize(1);
  apply_scales(tiny, half);
  EXPECT_EQ(tiny.blocks()[0].tensor.at(0), 0.5);
  EXPECT_EQ(tiny.blocks()[0].tensor.at(1), 1);
}

TEST(ApplyScales, MatchesRescaledView) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 8, 8, 10}), 2);
  data::Dataset d = random_images(20, 4, 3);
  std::vector<std::int64_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  data::Batch b = d.batch(idx);
  ScaleVector s = ScaleVector::ones(LossProblem::from(m));
  for (std::size_t i = 0; i < s.size(); ++i) s.alphas[i] = 0.5 + 0.1 * static_cast<Real>(i);
  std::vector<Tensor> av;
  for (Real a : s.alphas) av.push_back(Tensor::scalar(a));
  const double via_view = m.forward(b, rescaled_params(m, av), nn::Mode::train).loss.item();
  auto learned = LearnedScales::from(m, s);
  apply_scales(m, learned);
  EXPECT_NEAR(m.forward(b, nn::Mode::train).loss.item(), via_view, 1e-12);
}
