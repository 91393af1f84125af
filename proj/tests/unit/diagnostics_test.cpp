#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gradinit/autodiff/ops.hpp"
#include "gradinit/diagnostics/diagnostics.hpp"
#include "gradinit/nn/layers.hpp"

using namespace gi;
using namespace gi::ad;
using namespace gi::diag;

namespace {

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

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("gi_diag_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(WeightProfile, Examples) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 8, 10}), 1);
  m.blocks()[0].tensor = Tensor::full(Shape{2, 2}, 1);
  m.blocks()[1].tensor = Tensor::zeros(Shape{8});
  LayerProfile p = weight_norm_profile(m);
  ASSERT_EQ(p.size(), m.size());
  EXPECT_DOUBLE_EQ(p.records[0].weight_mag, 0.5);
  EXPECT_EQ(p.records[1].weight_mag, 0);
  EXPECT_EQ(p.records[0].block_name, "fc0.weight");
  EXPECT_FALSE(p.records[0].grad_std.has_value());
}

TEST(WeightProfile, ScalesWithLearnedFactor) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 8, 8, 10}), 1);
  const LayerProfile before = weight_norm_profile(m);
  gradinit::LearnedScales s{{}, {}};
  for (std::size_t i = 0; i < m.size(); ++i) {
    s.block_names.push_back(m.blocks()[i].name);
    s.alphas.push_back(0.25 + 0.5 * static_cast<Real>(i));
  }
  gradinit::apply_scales(m, s);
  const LayerProfile after = weight_norm_profile(m);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_NEAR(after.records[i].weight_mag, s.alphas[i] * before.records[i].weight_mag,
                1e-14 * std::max<Real>(1, after.records[i].weight_mag));
  }
}

TEST(GradVariance, BatchIndependentGradientHasZeroSpread) {
  gradinit::LossProblem q;
  q.names = {"a", "b"};
  q.weights = {Tensor(Shape{3}, {1, 2, 3}), Tensor::scalar(-1)};
  q.is_norm = {false, false};
  q.loss = [](std::span<const Tensor> v, const data::Batch&) {
    return add(sum(mul(v[0], v[0])), mul(v[1], v[1]));
  };
  auto p = grad_variance_profile(q, random_images(64, 2, 0), {4, 8, 1});
  for (const auto& r : p.records) {
    EXPECT_EQ(*r.grad_std, 0);
    EXPECT_EQ(*r.grad_rel_std, 0);
  }
}

TEST(GradVariance, HomogeneousInLossScale) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 12, 10}), 2);
  data::Dataset d = random_images(200, 4, 1);
  gradinit::LossProblem base = gradinit::LossProblem::from(m);
  gradinit::LossProblem twice = base;
  twice.loss = [&m](std::span<const Tensor> v, const data::Batch& b) {
    return scale(m.forward(b, v, nn::Mode::train).loss, 2);
  };
  const VarianceOptions o{4, 16, 3};
  auto p1 = grad_variance_profile(base, d, o);
  auto p2 = grad_variance_profile(twice, d, o);
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_NEAR(*p2.records[i].grad_std, 2 * *p1.records[i].grad_std, 1e-12 * *p2.records[i].grad_std);
    EXPECT_NEAR(*p2.records[i].grad_rel_std, *p1.records[i].grad_rel_std, 1e-10);
  }
}

TEST(GradVariance, DeepNoNormMlpGrowsTowardInput) {
  const auto root = data::resolve_data_dir("");
  if (root.empty()) GTEST_SKIP() << "DATA_DIR not set";
  data::Dataset mnist;
  try {
    mnist = data::load_mnist_dir(root, true);
  } catch (const data::DataError& e) {
    GTEST_SKIP() << e.what();
  }
  std::vector<std::int64_t> idx(2048);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  const data::Dataset d = mnist.subset(idx);
  std::vector<std::int64_t> widths{784};
  for (int i = 0; i < 8; ++i) widths.push_back(64);
  widths.push_back(10);
  for (std::uint64_t seed : {0, 1}) {
    nn::Model m = nn::build_model(nn::mlp_spec(widths), seed);
    auto p = grad_variance_profile(m, d, {16, 128, seed});
    // Hidden layers only, as with a conv-layer std ratio; the
    // classifier sees a different upstream signal.
    const Real first = *p.records.front().grad_std;
    const Real last = *p.records[p.size() - 4].grad_std;
    EXPECT_EQ(p.records[p.size() - 4].block_name, "fc7.weight");
    EXPECT_GT(first / last, 1) << seed;
  }
}

TEST(GradVariance, DeterministicAndValidated) {
  nn::Model m = nn::build_model(nn::mlp_spec({16, 8, 10}, true), 2);
  data::Dataset d = random_images(100, 4, 1);
  auto a = grad_variance_profile(m, d, {4, 16, 7});
  auto b = grad_variance_profile(m, d, {4, 16, 7});
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a.records[i].grad_std, *b.records[i].grad_std);
  EXPECT_THROW(grad_variance_profile(m, d, {1, 16, 7}), std::invalid_argument);
  EXPECT_THROW(grad_variance_profile(m, d, {16, 16, 7}), data::DataError);
}

TEST(Emit, CsvAndJson) {
  LayerProfile p;
  p.records.push_back({"fc0.weight", "fc_weight", 0.123456789123, 1.5, 0.25});
  p.records.push_back({"fc0.bias", "bias", 0, std::nullopt, std::nullopt});
  const auto csv = temp_file("p.csv");
  emit_profiles(p, csv, ProfileFormat::csv);
  std::ifstream in(csv);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), p.size() + 1);
  EXPECT_EQ(lines[0], "block_name,role,weight_mag,grad_std,grad_rel_std");
  EXPECT_EQ(lines[1], "fc0.weight,fc_weight,0.123456789,1.5,0.25");
  EXPECT_EQ(lines[2], "fc0.bias,bias,0,,");

  const auto js = temp_file("p.json");
  emit_profiles(p, js, ProfileFormat::json);
  std::ifstream jin(js);
  auto doc = nlohmann::json::parse(jin);
  ASSERT_EQ(doc.size(), 2u);
  EXPECT_EQ(doc[0]["weight_mag"].get<double>(), 0.123456789);
  EXPECT_EQ(doc[0]["grad_std"].get<double>(), 1.5);
  EXPECT_TRUE(doc[1]["grad_std"].is_null());
  std::filesystem::remove(csv);
  std::filesystem::remove(js);

  EXPECT_THROW(emit_profiles(p, "/nonexistent/dir/x.csv", ProfileFormat::csv), std::runtime_error);
  EXPECT_THROW(profile_format_from_string("xml"), std::invalid_argument);
}

TEST(BnBackward, AnalyticMatchesAutodiff) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::int64_t> nd(4, 64), dd(1, 16);
  std::normal_distribution<Real> normal(0, 1);
  double worst = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t n = nd(rng), d = dd(rng);
    std::vector<Real> xv(static_cast<std::size_t>(n * d)), gv(xv.size());
    const Real s = std::exp(normal(rng));
    for (auto& v : xv) v = s * normal(rng) + normal(rng);
    for (auto& v : gv) v = normal(rng);
    const Tensor x(Shape{n, d}, xv), g(Shape{n, d}, gv);
    Tape tape;
    Tensor xvar = tape.variable(x);
    auto bn = nn::batchnorm_forward(xvar, Tensor::full(Shape{d}, 1), Tensor::zeros(Shape{d}), kProbeEps);
    Tensor auto_dx = backward(tape, sum(mul(bn.y, g)), {xvar})[0];
    Tensor ana = bn_backward_analytic(x, g, kProbeEps);
    for (std::size_t k = 0; k < xv.size(); ++k) worst = std::max(worst, std::abs(auto_dx.data()[k] - ana.data()[k]));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(BnProbe, Examples) {
  auto small = bn_magnification_probe(64, 16, 0.5, 200, 1);  // alpha^2 sigma^2 = 0.25
  EXPECT_GT(small.var_ratio, 1);
  EXPECT_TRUE(small.predicted_magnify);
  EXPECT_NEAR(small.appendix_bound, 63.0 / 16.0, 1e-6);
  // The exact per-trial projection gives (n-2)/(n a^2 s^2) = 3.875.
  EXPECT_NEAR(small.var_ratio, small.projection_expectation, 0.05);
  auto large = bn_magnification_probe(64, 16, 2, 200, 1);  // 4
  EXPECT_LT(large.var_ratio, 1);
  EXPECT_FALSE(large.predicted_magnify);
  EXPECT_THROW(bn_magnification_probe(1, 4, 1, 200), std::invalid_argument);
  EXPECT_THROW(bn_magnification_probe(8, 4, 1, 10), std::invalid_argument);
}

TEST(BnProbe, MonotoneInScale) {
  Real prev = std::numeric_limits<Real>::infinity();
  for (Real a : {0.25, 0.5, 0.75, 1.0, 1.5}) {
    auto r = bn_magnification_probe(64, 8, a, 200, 3);
    EXPECT_LT(r.var_ratio, prev) << a;
    prev = r.var_ratio;
  }
}
