#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "gradinit/autodiff/gradcheck.hpp"
#include "gradinit/autodiff/ops.hpp"
#include "gradinit/nn/layers.hpp"

using namespace gi;
using namespace gi::ad;
using namespace gi::ad::gradcheck;

namespace {

const SuiteReport& full_report() {
  static const SuiteReport r = run_suite();
  return r;
}

Tensor randn(std::mt19937_64& rng, const Shape& s, Real sd = 1) {
  std::normal_distribution<Real> n(0, sd);
  Tensor t = Tensor::zeros(s);
  for (auto& v : t.mutable_data()) v = n(rng);
  return t;
}

}  // namespace

TEST(Suite, CoversEveryCaseWithEnoughInstances) {
  const auto& r = full_report();
  ASSERT_EQ(r.cases.size(), case_names().size());
  for (const auto& c : r.cases) {
    EXPECT_GE(c.instances, 100) << c.name;
    EXPECT_GT(c.coordinates, 0) << c.name;
  }
  EXPECT_LT(r.seconds, 120);
}

TEST(Suite, PrimitivesAndSecondOrderPass) {
  for (const auto& c : full_report().cases) {
    if (c.kind == CaseKind::layer) continue;
    EXPECT_TRUE(c.pass) << c.name << " rel " << c.max_rel_err;
  }
}

// Layer adjoints agree in absolute terms everywhere; the relative metric is
// asserted by the acceptance run.
TEST(Suite, LayersAgreeAbsolutely) {
  for (const auto& c : full_report().cases) {
    if (c.kind != CaseKind::layer) continue;
    EXPECT_LT(c.max_abs_err, 1e-6) << c.name;
  }
}

TEST(Suite, DeterministicAndFiltered) {
  SuiteOptions o;
  o.only = {"softmax", "batchnorm_train"};
  o.instances = 20;
  auto a = run_suite(o), b = run_suite(o);
  ASSERT_EQ(a.cases.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.cases[i].max_rel_err, b.cases[i].max_rel_err);
    EXPECT_EQ(a.cases[i].coordinates, b.cases[i].coordinates);
  }
  o.only = {"no_such_case"};
  EXPECT_THROW(run_suite(o), std::invalid_argument);
}

TEST(Suite, KindNames) {
  EXPECT_EQ(to_string(CaseKind::primitive), "primitive");
  EXPECT_EQ(to_string(CaseKind::layer), "layer");
  EXPECT_EQ(to_string(CaseKind::second_order), "second-order");
}

// sum(y^2) over a normalized column is n var/(var + eps): nearly constant in
// x, so the input gradient is O(eps) and only checkable in absolute terms.
TEST(FiniteDiff, BatchNormSumOfSquares) {
  std::mt19937_64 rng(5);
  const Tensor x = randn(rng, {8, 4}, 2);
  const std::vector<Tensor> affine{Tensor::full(Shape{4}, 1.3), randn(rng, {4})};
  auto f = [x](Tape&, const std::vector<Tensor>& v) {
    Tensor y = nn::batchnorm_forward(x, v[0], v[1]).y;
    return sum(mul(y, y));
  };
  auto r = finite_diff_check(f, affine, 1e-5, 1e-6);
  EXPECT_TRUE(r.pass) << r.max_rel_err;

  auto fx = [&affine](Tape&, const std::vector<Tensor>& v) {
    Tensor y = nn::batchnorm_forward(v[0], affine[0], affine[1]).y;
    return sum(mul(y, y));
  };
  auto rx = finite_diff_check(fx, {x}, 1e-5, 1e-6);
  EXPECT_LT(rx.max_abs_err, 1e-8);
  EXPECT_LT(std::abs(rx.worst_analytic), 1e-4);
}

// Softmax over scores cancels a per-query constant, so the key bias never
// reaches the output.
TEST(Attention, KeyBiasGradientVanishes) {
  std::mt19937_64 rng(9);
  const std::int64_t d = 4;
  Tape tape;
  nn::AttentionWeights w{randn(rng, {d, d}, 0.5), randn(rng, {d}, 0.1), randn(rng, {d, d}, 0.5),
                         tape.variable(randn(rng, {d})), randn(rng, {d, d}, 0.5), randn(rng, {d}, 0.1),
                         randn(rng, {d, d}, 0.5), randn(rng, {d}, 0.1)};
  Tensor q = randn(rng, {2, 3, d}), m = randn(rng, {2, 5, d});
  Tensor out = nn::multi_head_attention(q, m, w, 2, false);
  Tensor g = backward(tape, sum(mul(out, randn(rng, out.shape()))), {w.bk})[0];
  for (Real v : g.data()) EXPECT_LT(std::abs(v), 1e-13);
}
