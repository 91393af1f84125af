#include "gradinit/autodiff/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>

#include "gradinit/autodiff/ops.hpp"
#include "gradinit/nn/layers.hpp"

namespace gi::ad::gradcheck {
namespace {

using Rng = std::mt19937_64;
using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct Instance {
  std::vector<Tensor> point;
  ScalarFn f;
};

using Generator = std::function<Instance(Rng&)>;

// Readouts that are polynomial of degree <= 2 along every coordinate make
// central differences exact, so a larger step only reduces roundoff.
enum class Step { smooth, exact };
constexpr double kExactStep = 1e-3;

struct Case {
  std::string name;
  CaseKind kind;
  Generator gen;
  Step step = Step::smooth;
};

// Inputs stay this far from kinks; no finite-difference step used here can cross.
constexpr Real kKinkMargin = Real(0.05);

std::int64_t uni(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

bool coin(Rng& rng) { return uni(rng, 0, 1) == 1; }

Tensor randn(Rng& rng, const Shape& shape, Real sd = 1) {
  std::normal_distribution<Real> n(0, sd);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = n(rng);
  return t;
}

Tensor uniform(Rng& rng, const Shape& shape, Real lo, Real hi) {
  std::uniform_real_distribution<Real> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) v = u(rng);
  return t;
}

// |v| >= kKinkMargin.
Tensor away_from_zero(Rng& rng, const Shape& shape) {
  Tensor t = randn(rng, shape);
  for (auto& v : t.mutable_data()) v = std::copysign(kKinkMargin + std::abs(v), v);
  return t;
}

// Entries pairwise separated by >= 0.06, so max has no near-ties.
Tensor distinct(Rng& rng, const Shape& shape) {
  const auto n = static_cast<std::size_t>(numel(shape));
  std::vector<Real> v(n);
  std::uniform_real_distribution<Real> jitter(-0.02, 0.02);
  for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<Real>(i) - static_cast<Real>(n) / 2) * Real(0.1) + jitter(rng);
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor(shape, std::move(v));
}

// Uniform draws on [-3, 3] kept kKinkMargin away from each point in `avoid`;
// used where a derivative vanishes (at the listed points, and in the saturated
// tails), since a relative error is meaningless at zero.
Tensor uniform_avoiding(Rng& rng, const Shape& shape, std::initializer_list<Real> avoid) {
  std::uniform_real_distribution<Real> n(-3, 3);
  Tensor t(shape);
  for (auto& v : t.mutable_data()) {
    auto near = [&](Real x) {
      return std::any_of(avoid.begin(), avoid.end(), [&](Real a) { return std::abs(x - a) < kKinkMargin; });
    };
    do v = n(rng);
    while (near(v));
  }
  return t;
}

// gelu'(x) = 0 at x ~ -0.7518; gelu''(x) = 0 at x = +-sqrt(2).
constexpr Real kGeluStationary = Real(-0.751791524693564);
constexpr Real kSqrt2 = Real(1.4142135623730951);

std::vector<std::int64_t> labels(Rng& rng, std::int64_t n, std::int64_t classes) {
  std::vector<std::int64_t> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = uni(rng, 0, classes - 1);
  return out;
}

Tensor readout(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

// |w| in [0.5, 1.5] with random sign, so no output is read with a near-zero
// weight.
Tensor readout_weights(Rng& rng, const Shape& shape) {
  Tensor w = uniform(rng, shape, 0.5, 1.5);
  for (auto& v : w.mutable_data()) v = coin(rng) ? v : -v;
  return w;
}

// sum(w * op(x)) with w drawn once for the instance.
Instance linear_readout(Rng& rng, std::vector<Tensor> point, OpFn op) {
  const Tensor w = readout_weights(rng, op(point).shape());
  return {std::move(point), [op, w](Tape&, const std::vector<Tensor>& v) { return readout(op(v), w); }};
}

// ||grad_x sum(w * op(x))||_2: differentiating through a backward pass.
Instance gradient_norm_readout(Rng& rng, std::vector<Tensor> point, OpFn op) {
  const Tensor w = readout_weights(rng, op(point).shape());
  return {std::move(point), [op, w](Tape& tape, const std::vector<Tensor>& v) {
            return grad_norm(backward(tape, readout(op(v), w), v, true), 2);
          }};
}

Shape random_shape(Rng& rng, int rank, std::int64_t lo = 1, std::int64_t hi = 4) {
  Shape s(static_cast<std::size_t>(rank));
  for (auto& d : s) d = uni(rng, lo, hi);
  return s;
}

// b's shape: equal to a's, a trailing suffix, or a's with some extents set to 1.
Shape broadcast_partner(Rng& rng, const Shape& a) {
  switch (uni(rng, 0, 2)) {
    case 0: return a;
    case 1: return Shape(a.end() - 1, a.end());
    default: {
      Shape b = a;
      for (auto& d : b)
        if (coin(rng)) d = 1;
      return b;
    }
  }
}

Instance binary(Rng& rng, Tensor (*op)(const Tensor&, const Tensor&), bool positive_rhs) {
  Shape a = random_shape(rng, static_cast<int>(uni(rng, 1, 3)));
  Shape b = broadcast_partner(rng, a);
  if (coin(rng)) std::swap(a, b);
  Tensor rhs = positive_rhs ? uniform(rng, b, 0.5, 2) : randn(rng, b);
  if (positive_rhs)
    for (auto& v : rhs.mutable_data()) v = coin(rng) ? v : -v;
  return linear_readout(rng, {randn(rng, a), rhs}, [op](const auto& v) { return op(v[0], v[1]); });
}

Instance unary(Rng& rng, Tensor x, OpFn op) { return linear_readout(rng, {std::move(x)}, std::move(op)); }

struct ConvSetup {
  Tensor x, w;
  Conv2dGeometry geom;
};

ConvSetup conv_setup(Rng& rng) {
  ConvSetup c;
  const std::int64_t k = coin(rng) ? 3 : 1;
  c.geom.stride = static_cast<int>(uni(rng, 1, 2));
  c.geom.padding = static_cast<int>(uni(rng, 0, 1));
  const std::int64_t h = uni(rng, std::max<std::int64_t>(k, 3), 5), wd = uni(rng, std::max<std::int64_t>(k, 3), 5);
  c.x = randn(rng, {uni(rng, 1, 2), uni(rng, 1, 3), h, wd});
  c.w = randn(rng, {uni(rng, 1, 3), c.x.dim(1), k, k});
  return c;
}

Shape conv_out_shape(const ConvSetup& c) {
  const std::int64_t k = c.w.dim(2);
  return {c.x.dim(0), c.w.dim(0), (c.x.dim(2) + 2 * c.geom.padding - k) / c.geom.stride + 1,
          (c.x.dim(3) + 2 * c.geom.padding - k) / c.geom.stride + 1};
}

// Seven variables per attention: wq, bq, wk, wv, bv, wo, bo. The key bias
// adds the same q.b to every score of a query, which softmax cancels; its
// gradient is identically zero and cannot be checked against a relative
// error, so it is held at zero here.
nn::AttentionWeights attention_weights(const std::vector<Tensor>& v, std::size_t at) {
  return {v[at], v[at + 1], v[at + 2], Tensor::zeros(Shape{v[at].dim(1)}), v[at + 3], v[at + 4], v[at + 5], v[at + 6]};
}

void push_attention(Rng& rng, std::vector<Tensor>& point, std::int64_t d) {
  const Real s = Real(1) / std::sqrt(static_cast<Real>(d));
  for (int i = 0; i < 4; ++i) {
    point.push_back(randn(rng, {d, d}, s));
    if (i != 1) point.push_back(randn(rng, {d}, Real(0.1)));
  }
}

struct AttentionSetup {
  std::vector<Tensor> point;
  int heads = 1;
  bool causal = false;
};

AttentionSetup attention_setup(Rng& rng) {
  AttentionSetup a;
  a.heads = static_cast<int>(uni(rng, 1, 2));
  // A single key makes the attention weights constant, so keys start at 2.
  a.causal = coin(rng);
  const std::int64_t d = a.heads * uni(rng, 1, 3), b = uni(rng, 1, 2), lq = uni(rng, a.causal ? 2 : 1, 3);
  const std::int64_t lk = a.causal ? lq : uni(rng, 2, 3);
  a.point = {randn(rng, {b, lq, d}), randn(rng, {b, lk, d})};
  push_attention(rng, a.point, d);
  return a;
}

struct BlockDims {
  std::int64_t b, l, lm, d, ffn;
  int heads;
};

BlockDims block_dims(Rng& rng) {
  BlockDims k{};
  k.heads = static_cast<int>(uni(rng, 1, 2));
  // LayerNorm over two features is a sign function, so d >= 3.
  k.d = k.heads == 1 ? uni(rng, 3, 4) : 2 * uni(rng, 2, 3);
  k.b = uni(rng, 1, 2);
  k.l = uni(rng, 2, 3);
  k.lm = uni(rng, 2, 3);
  k.ffn = uni(rng, 2, 5);
  return k;
}

void push_norm(Rng& rng, std::vector<Tensor>& p, std::int64_t d) {
  p.push_back(uniform(rng, {d}, 0.5, 1.5));
  p.push_back(randn(rng, {d}, Real(0.1)));
}

void push_ffn(Rng& rng, std::vector<Tensor>& p, std::int64_t d, std::int64_t f) {
  p.push_back(randn(rng, {d, f}, 1 / std::sqrt(static_cast<Real>(d))));
  p.push_back(randn(rng, {f}, Real(0.1)));
  p.push_back(randn(rng, {f, d}, 1 / std::sqrt(static_cast<Real>(f))));
  p.push_back(randn(rng, {d}, Real(0.1)));
}

struct FfnOut {
  Tensor y, pre;
};

FfnOut ffn(const Tensor& x, const std::vector<Tensor>& v, std::size_t at) {
  const std::int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  Tensor pre = nn::dense(reshape(x, {b * l, d}), v[at], v[at + 1]);
  return {reshape(nn::dense(relu(pre), v[at + 2], v[at + 3]), {b, l, d}), pre};
}

Real min_abs(const Tensor& t) {
  Real m = std::numeric_limits<Real>::infinity();
  for (Real v : t.data()) m = std::min(m, std::abs(v));
  return m;
}

Real min_value(const Tensor& t) { return *std::min_element(t.data().begin(), t.data().end()); }

// Normalization is singular at zero group variance; near it the curvature
// swamps any fixed step. Groups stay above this variance.
constexpr Real kMinGroupVariance = Real(0.1);

// Redraws until every normalization group of the draw has variance >=
// kMinGroupVariance * sd^2.
template <class GroupVar>
Tensor spread_draw(Rng& rng, const Shape& shape, Real sd, GroupVar group_var) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor x = randn(rng, shape, sd);
    if (min_value(group_var(x)) >= kMinGroupVariance * sd * sd) return x;
  }
  throw std::runtime_error("gradcheck: could not draw well-spread normalization inputs");
}

Tensor column_var(const Tensor& x) { return variance(x, 0); }
Tensor channel_var(const Tensor& x) {
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return variance(reshape(transpose(reshape(x, {n, c, hw}), {1, 0, 2}), {c, n * hw}), 1);
}
Tensor token_var(const Tensor& x) { return variance(x, -1); }

struct BlockOut {
  Tensor y, pre;
  Real min_norm_var = 0;  // over every LayerNorm input token
};

// Encoder: point = x, attn(7), ln1(2), ffn(4), ln2(2).
BlockOut encoder_block(const std::vector<Tensor>& v, int heads) {
  Tensor s1 = add(v[0], nn::multi_head_attention(v[0], v[0], attention_weights(v, 1), heads, false));
  Tensor h = nn::layer_norm(s1, v[8], v[9]);
  FfnOut f = ffn(h, v, 10);
  Tensor s2 = add(h, f.y);
  return {nn::layer_norm(s2, v[14], v[15]), f.pre, std::min(min_value(token_var(s1)), min_value(token_var(s2)))};
}

// Decoder: point = x, memory, self(7), ln1(2), cross(7), ln2(2), ffn(4), ln3(2).
BlockOut decoder_block(const std::vector<Tensor>& v, int heads) {
  Tensor s1 = add(v[0], nn::multi_head_attention(v[0], v[0], attention_weights(v, 2), heads, true));
  Tensor h = nn::layer_norm(s1, v[9], v[10]);
  Tensor s2 = add(h, nn::multi_head_attention(h, v[1], attention_weights(v, 11), heads, false));
  h = nn::layer_norm(s2, v[18], v[19]);
  FfnOut f = ffn(h, v, 20);
  Tensor s3 = add(h, f.y);
  return {nn::layer_norm(s3, v[24], v[25]), f.pre,
          std::min({min_value(token_var(s1)), min_value(token_var(s2)), min_value(token_var(s3))})};
}

// Redraws blocks whose relu pre-activations come within kKinkMargin of zero
// or whose LayerNorm inputs are nearly constant.
template <class Build, class Block>
Instance kink_free_block(Rng& rng, Build build, Block block) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto [point, heads] = build(rng);
    const BlockOut probe = block(point, heads);
    if (min_abs(probe.pre) < kKinkMargin || probe.min_norm_var < kMinGroupVariance) continue;
    return linear_readout(rng, std::move(point), [block, heads](const auto& v) { return block(v, heads).y; });
  }
  throw std::runtime_error("gradcheck: could not draw a kink-free block instance");
}

std::vector<Case> build_cases() {
  std::vector<Case> cs;
  auto prim = [&](std::string name, Generator g) { cs.push_back({std::move(name), CaseKind::primitive, std::move(g)}); };
  auto layer = [&](std::string name, Generator g) { cs.push_back({std::move(name), CaseKind::layer, std::move(g)}); };
  auto second = [&](std::string name, Generator g) {
    cs.push_back({std::move(name), CaseKind::second_order, std::move(g)});
  };
  auto any_shape = [](Rng& rng) { return random_shape(rng, static_cast<int>(uni(rng, 1, 3))); };

  prim("add", [](Rng& r) { return binary(r, add, false); });
  prim("sub", [](Rng& r) { return binary(r, sub, false); });
  prim("mul", [](Rng& r) { return binary(r, mul, false); });
  prim("div", [](Rng& r) { return binary(r, div, true); });
  prim("neg", [=](Rng& r) { return unary(r, randn(r, any_shape(r)), [](const auto& v) { return neg(v[0]); }); });
  prim("scale", [=](Rng& r) {
    const Real f = randn(r, {1}).item();
    return unary(r, randn(r, any_shape(r)), [f](const auto& v) { return scale(v[0], f); });
  });
  prim("add_scalar", [=](Rng& r) {
    return unary(r, randn(r, any_shape(r)), [](const auto& v) { return add_scalar(v[0], Real(0.7)); });
  });
  prim("matmul", [](Rng& r) {
    const bool ta = coin(r), tb = coin(r);
    const std::int64_t m = uni(r, 1, 4), k = uni(r, 1, 4), n = uni(r, 1, 4);
    Shape sa = ta ? Shape{k, m} : Shape{m, k}, sb = tb ? Shape{n, k} : Shape{k, n};
    if (coin(r)) {
      const std::int64_t b = uni(r, 1, 3);
      sa.insert(sa.begin(), b);
      sb.insert(sb.begin(), b);
    }
    return linear_readout(r, {randn(r, sa), randn(r, sb)},
                          [ta, tb](const auto& v) { return matmul(v[0], v[1], ta, tb); });
  });
  prim("conv2d", [](Rng& r) {
    ConvSetup c = conv_setup(r);
    return linear_readout(r, {c.x, c.w}, [g = c.geom](const auto& v) { return conv2d(v[0], v[1], g); });
  });
  prim("conv2d_backward_data", [](Rng& r) {
    ConvSetup c = conv_setup(r);
    const Shape xs = c.x.shape();
    return linear_readout(r, {randn(r, conv_out_shape(c)), c.w},
                          [g = c.geom, xs](const auto& v) { return conv2d_backward_data(v[0], v[1], xs, g); });
  });
  prim("conv2d_backward_filter", [](Rng& r) {
    ConvSetup c = conv_setup(r);
    const Shape ws = c.w.shape();
    return linear_readout(r, {c.x, randn(r, conv_out_shape(c))},
                          [g = c.geom, ws](const auto& v) { return conv2d_backward_filter(v[0], v[1], ws, g); });
  });
  prim("relu", [=](Rng& r) { return unary(r, away_from_zero(r, any_shape(r)), [](const auto& v) { return relu(v[0]); }); });
  prim("gelu", [=](Rng& r) {
    return unary(r, uniform_avoiding(r, any_shape(r), {kGeluStationary}), [](const auto& v) { return gelu(v[0]); });
  });
  prim("exp", [=](Rng& r) { return unary(r, randn(r, any_shape(r)), [](const auto& v) { return exp(v[0]); }); });
  prim("log", [=](Rng& r) { return unary(r, uniform(r, any_shape(r), 0.2, 3), [](const auto& v) { return log(v[0]); }); });
  prim("sqrt", [=](Rng& r) { return unary(r, uniform(r, any_shape(r), 0.2, 3), [](const auto& v) { return sqrt(v[0]); }); });
  prim("pow", [=](Rng& r) {
    static constexpr Real kExponents[] = {-1.5, 0.5, 2, 3, 2.7};
    const Real e = kExponents[uni(r, 0, 4)];
    return unary(r, uniform(r, any_shape(r), 0.3, 2), [e](const auto& v) { return pow(v[0], e); });
  });
  prim("abs", [=](Rng& r) { return unary(r, away_from_zero(r, any_shape(r)), [](const auto& v) { return abs(v[0]); }); });
  prim("sign", [=](Rng& r) {
    return unary(r, away_from_zero(r, any_shape(r)), [](const auto& v) { return mul(sign(v[0]), v[0]); });
  });
  prim("sum", [=](Rng& r) {
    const Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, -1, static_cast<std::int64_t>(s.size()) - 1));
    const bool keep = coin(r);
    return unary(r, randn(r, s), [axis, keep](const auto& v) {
      return axis < 0 ? sum(v[0]) : sum(v[0], axis, keep);
    });
  });
  prim("mean", [=](Rng& r) {
    const Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, -1, static_cast<std::int64_t>(s.size()) - 1));
    const bool keep = coin(r);
    return unary(r, randn(r, s), [axis, keep](const auto& v) { return axis < 0 ? mean(v[0]) : mean(v[0], axis, keep); });
  });
  prim("variance", [=](Rng& r) {
    Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, 0, static_cast<std::int64_t>(s.size()) - 1));
    s[static_cast<std::size_t>(axis)] = uni(r, 2, 5);
    const bool keep = coin(r);
    return unary(r, randn(r, s), [axis, keep](const auto& v) { return variance(v[0], axis, keep); });
  });
  prim("max", [=](Rng& r) {
    const Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, 0, static_cast<std::int64_t>(s.size()) - 1));
    const bool keep = coin(r);
    return unary(r, distinct(r, s), [axis, keep](const auto& v) { return max(v[0], axis, keep); });
  });
  prim("reshape", [](Rng& r) {
    const Shape s = random_shape(r, 3);
    const Shape t{s[1], s[0] * s[2]};
    return unary(r, randn(r, s), [t](const auto& v) { return reshape(v[0], t); });
  });
  prim("transpose", [](Rng& r) {
    std::vector<int> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), r);
    return unary(r, randn(r, random_shape(r, 3)), [perm](const auto& v) { return transpose(v[0], perm); });
  });
  prim("concat", [](Rng& r) {
    const Shape base = random_shape(r, 2);
    const int axis = static_cast<int>(uni(r, 0, 1));
    std::vector<Tensor> parts;
    const auto count = uni(r, 2, 3);
    for (std::int64_t i = 0; i < count; ++i) {
      Shape s = base;
      s[static_cast<std::size_t>(axis)] = uni(r, 1, 3);
      parts.push_back(randn(r, s));
    }
    return linear_readout(r, parts, [axis](const auto& v) { return concat(v, axis); });
  });
  prim("slice", [](Rng& r) {
    Shape s = random_shape(r, 2);
    const int axis = static_cast<int>(uni(r, 0, 1));
    s[static_cast<std::size_t>(axis)] = uni(r, 2, 5);
    const std::int64_t len = uni(r, 1, s[static_cast<std::size_t>(axis)] - 1);
    const std::int64_t start = uni(r, 0, s[static_cast<std::size_t>(axis)] - len);
    return unary(r, randn(r, s), [axis, start, len](const auto& v) { return slice(v[0], axis, start, len); });
  });
  prim("slice_backward", [](Rng& r) {
    Shape full = random_shape(r, 2);
    const int axis = static_cast<int>(uni(r, 0, 1));
    full[static_cast<std::size_t>(axis)] = uni(r, 2, 5);
    Shape part = full;
    part[static_cast<std::size_t>(axis)] = uni(r, 1, full[static_cast<std::size_t>(axis)] - 1);
    const std::int64_t start = uni(r, 0, full[static_cast<std::size_t>(axis)] - part[static_cast<std::size_t>(axis)]);
    return unary(r, randn(r, part), [full, axis, start](const auto& v) { return slice_backward(v[0], full, axis, start); });
  });
  prim("broadcast_to", [](Rng& r) {
    const Shape target = random_shape(r, static_cast<int>(uni(r, 1, 3)));
    const Shape from = broadcast_partner(r, target);
    return unary(r, randn(r, from), [target](const auto& v) { return broadcast_to(v[0], target); });
  });
  prim("sum_to", [](Rng& r) {
    const Shape from = random_shape(r, static_cast<int>(uni(r, 1, 3)));
    const Shape target = broadcast_partner(r, from);
    return unary(r, randn(r, from), [target](const auto& v) { return sum_to(v[0], target); });
  });
  prim("softmax", [=](Rng& r) {
    const Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, 0, static_cast<std::int64_t>(s.size()) - 1));
    return unary(r, randn(r, s), [axis](const auto& v) { return softmax(v[0], axis); });
  });
  prim("log_softmax", [=](Rng& r) {
    const Shape s = any_shape(r);
    const int axis = static_cast<int>(uni(r, 0, static_cast<std::int64_t>(s.size()) - 1));
    return unary(r, randn(r, s), [axis](const auto& v) { return log_softmax(v[0], axis); });
  });
  prim("gather_rows", [](Rng& r) {
    const Shape t{uni(r, 1, 5), uni(r, 1, 4)};
    const auto idx = labels(r, uni(r, 1, 6), t[0]);
    return unary(r, randn(r, t), [idx](const auto& v) { return gather_rows(v[0], idx); });
  });
  prim("scatter_rows", [](Rng& r) {
    const std::int64_t rows = uni(r, 1, 5);
    const auto idx = labels(r, uni(r, 1, 6), rows);
    const Shape s{static_cast<std::int64_t>(idx.size()), uni(r, 1, 4)};
    return unary(r, randn(r, s), [idx, rows](const auto& v) { return scatter_rows(v[0], idx, rows); });
  });

  layer("dense", [](Rng& r) {
    const std::int64_t n = uni(r, 1, 4), in = uni(r, 1, 5), out = uni(r, 1, 5);
    std::vector<Tensor> p{randn(r, {n, in}), randn(r, {in, out})};
    if (coin(r)) p.push_back(randn(r, {out}));
    return linear_readout(r, p, [](const auto& v) { return nn::dense(v[0], v[1], v.size() > 2 ? v[2] : Tensor()); });
  });
  layer("conv3x3", [](Rng& r) {
    const int stride = static_cast<int>(uni(r, 1, 2));
    const std::int64_t c = uni(r, 1, 3), o = uni(r, 1, 3);
    std::vector<Tensor> p{randn(r, {uni(r, 1, 2), c, uni(r, 3, 5), uni(r, 3, 5)}), randn(r, {o, c, 3, 3})};
    if (coin(r)) p.push_back(randn(r, {o}));
    return linear_readout(
        r, p, [stride](const auto& v) { return nn::conv3x3(v[0], v[1], v.size() > 2 ? v[2] : Tensor(), stride); });
  });
  layer("relu_layer", [](Rng& r) {
    return unary(r, away_from_zero(r, {uni(r, 1, 4), uni(r, 1, 6)}), [](const auto& v) { return relu(v[0]); });
  });
  layer("batchnorm_train", [](Rng& r) {
    // Batches of two standardize to +-1 whatever the input, so n starts at 3.
    const std::int64_t n = uni(r, 3, 8), d = uni(r, 1, 4);
    const Real sd = uniform(r, {1}, 0.5, 3).item();
    return linear_readout(r, {spread_draw(r, {n, d}, sd, column_var), uniform(r, {d}, 0.5, 1.5), randn(r, {d})},
                          [](const auto& v) { return nn::batchnorm_forward(v[0], v[1], v[2]).y; });
  });
  layer("batchnorm2d_train", [](Rng& r) {
    const std::int64_t c = uni(r, 1, 3);
    const Shape s{uni(r, 1, 3), c, uni(r, 1, 3), uni(r, 3, 4)};
    return linear_readout(r, {spread_draw(r, s, 1, channel_var), uniform(r, {c}, 0.5, 1.5), randn(r, {c})},
                          [](const auto& v) { return nn::batchnorm2d_forward(v[0], v[1], v[2]).y; });
  });
  layer("batchnorm_inference", [](Rng& r) {
    const std::int64_t d = uni(r, 1, 4);
    const Tensor rm = randn(r, {d}), rv = uniform(r, {d}, 0.3, 2);
    return linear_readout(r, {randn(r, {uni(r, 1, 5), d}), uniform(r, {d}, 0.5, 1.5), randn(r, {d})},
                          [rm, rv](const auto& v) { return nn::batchnorm_inference(v[0], v[1], v[2], rm, rv); });
  });
  layer("batchnorm2d_inference", [](Rng& r) {
    const std::int64_t c = uni(r, 1, 3);
    const Tensor rm = randn(r, {c}), rv = uniform(r, {c}, 0.3, 2);
    return linear_readout(r, {randn(r, {uni(r, 1, 2), c, 2, uni(r, 1, 3)}), uniform(r, {c}, 0.5, 1.5), randn(r, {c})},
                          [rm, rv](const auto& v) { return nn::batchnorm2d_inference(v[0], v[1], v[2], rm, rv); });
  });
  layer("layer_norm", [](Rng& r) {
    const std::int64_t d = uni(r, 3, 6);
    const Shape s{uni(r, 1, 2), uni(r, 1, 3), d};
    return linear_readout(r, {spread_draw(r, s, 2, token_var), uniform(r, {d}, 0.5, 1.5), randn(r, {d})},
                          [](const auto& v) { return nn::layer_norm(v[0], v[1], v[2]); });
  });
  layer("residual_add", [](Rng& r) {
    const Shape s = random_shape(r, 2);
    return linear_readout(r, {randn(r, s), randn(r, s)}, [](const auto& v) { return add(v[0], v[1]); });
  });
  layer("global_avg_pool", [](Rng& r) {
    return unary(r, randn(r, random_shape(r, 4, 1, 3)), [](const auto& v) { return nn::global_avg_pool(v[0]); });
  });
  layer("softmax_cross_entropy", [](Rng& r) {
    const std::int64_t n = uni(r, 1, 5), k = uni(r, 2, 6);
    const auto y = labels(r, n, k);
    Tensor logits = randn(r, {n, k}, 2);
    // The loss is already scalar; the readout weight only rescales it.
    return linear_readout(r, {logits}, [y](const auto& v) { return nn::softmax_cross_entropy(v[0], y); });
  });
  layer("embedding", [](Rng& r) {
    const std::int64_t vocab = uni(r, 2, 6), d = uni(r, 1, 4), b = uni(r, 1, 2), l = uni(r, 1, 3);
    const auto idx = labels(r, b * l, vocab);
    const Tensor pos = nn::sinusoidal_positions(l, d);
    return unary(r, randn(r, {vocab, d}), [idx, pos, b, l, d](const auto& v) {
      Tensor e = scale(gather_rows(v[0], idx), std::sqrt(static_cast<Real>(d)));
      return add(reshape(e, {b, l, d}), pos);
    });
  });
  layer("multi_head_attention", [](Rng& r) {
    AttentionSetup a = attention_setup(r);
    return linear_readout(r, a.point, [h = a.heads, c = a.causal](const auto& v) {
      return nn::multi_head_attention(v[0], v[1], attention_weights(v, 2), h, c);
    });
  });
  layer("postln_encoder_block", [](Rng& r) {
    auto build = [](Rng& g) {
      const BlockDims k = block_dims(g);
      std::vector<Tensor> p{randn(g, {k.b, k.l, k.d})};
      push_attention(g, p, k.d);
      push_norm(g, p, k.d);
      push_ffn(g, p, k.d, k.ffn);
      push_norm(g, p, k.d);
      return std::pair{p, k.heads};
    };
    return kink_free_block(r, build, encoder_block);
  });
  layer("postln_decoder_block", [](Rng& r) {
    auto build = [](Rng& g) {
      const BlockDims k = block_dims(g);
      std::vector<Tensor> p{randn(g, {k.b, k.l, k.d}), randn(g, {k.b, k.lm, k.d})};
      push_attention(g, p, k.d);
      push_norm(g, p, k.d);
      push_attention(g, p, k.d);
      push_norm(g, p, k.d);
      push_ffn(g, p, k.d, k.ffn);
      push_norm(g, p, k.d);
      return std::pair{p, k.heads};
    };
    return kink_free_block(r, build, decoder_block);
  });

  // Differentiating through a backward pass: every adjoint must itself be
  // recorded correctly.
  second("grad_norm/mul_div", [](Rng& r) {
    const Shape s = random_shape(r, 2);
    return gradient_norm_readout(r, {randn(r, s), uniform(r, s, 0.5, 2)},
                                 [](const auto& v) { return div(mul(v[0], v[0]), v[1]); });
  });
  second("grad_norm/exp_log_sqrt_pow", [](Rng& r) {
    const Shape s = random_shape(r, 2);
    return gradient_norm_readout(r, {uniform(r, s, 0.3, 2)}, [](const auto& v) {
      return add(add(exp(v[0]), log(v[0])), mul(sqrt(v[0]), pow(v[0], Real(2.5))));
    });
  });
  second("grad_norm/gelu", [](Rng& r) {
    return gradient_norm_readout(r, {uniform_avoiding(r, random_shape(r, 2), {kGeluStationary, -kSqrt2, kSqrt2})},
                                 [](const auto& v) { return gelu(v[0]); });
  });
  second("grad_norm/softmax", [](Rng& r) {
    return gradient_norm_readout(r, {randn(r, random_shape(r, 2, 2, 4))}, [](const auto& v) { return softmax(v[0], -1); });
  });
  second("grad_norm/log_softmax", [](Rng& r) {
    return gradient_norm_readout(r, {randn(r, random_shape(r, 2, 2, 4))},
                                 [](const auto& v) { return log_softmax(v[0], 0); });
  });
  second("grad_norm/matmul", [](Rng& r) {
    const std::int64_t m = uni(r, 1, 3), k = uni(r, 1, 3), n = uni(r, 1, 3);
    return gradient_norm_readout(r, {randn(r, {m, k}), randn(r, {k, n})},
                                 [](const auto& v) { return mul(matmul(v[0], v[1]), matmul(v[0], v[1])); });
  });
  second("grad_norm/conv2d", [](Rng& r) {
    ConvSetup c = conv_setup(r);
    return gradient_norm_readout(r, {c.x, c.w}, [g = c.geom](const auto& v) {
      Tensor y = conv2d(v[0], v[1], g);
      return mul(y, y);
    });
  });
  second("grad_norm/variance", [](Rng& r) {
    return gradient_norm_readout(r, {randn(r, {uni(r, 2, 5), uni(r, 1, 3)})}, [](const auto& v) { return variance(v[0], 0); });
  });
  second("grad_norm/batchnorm_train", [](Rng& r) {
    const std::int64_t n = uni(r, 3, 6), d = uni(r, 1, 3);
    return gradient_norm_readout(r, {spread_draw(r, {n, d}, 1, column_var), uniform(r, {d}, 0.5, 1.5), randn(r, {d})},
                                 [](const auto& v) { return nn::batchnorm_forward(v[0], v[1], v[2]).y; });
  });
  second("grad_norm/layer_norm", [](Rng& r) {
    const std::int64_t d = uni(r, 3, 5);
    return gradient_norm_readout(r, {spread_draw(r, {uni(r, 1, 3), d}, 1, token_var), uniform(r, {d}, 0.5, 1.5), randn(r, {d})},
                                 [](const auto& v) { return nn::layer_norm(v[0], v[1], v[2]); });
  });
  second("grad_norm/attention", [](Rng& r) {
    AttentionSetup a = attention_setup(r);
    return gradient_norm_readout(r, a.point, [h = a.heads, c = a.causal](const auto& v) {
      return nn::multi_head_attention(v[0], v[1], attention_weights(v, 2), h, c);
    });
  });
  second("grad_norm/dense_cross_entropy", [](Rng& r) {
    const std::int64_t n = uni(r, 1, 4), in = uni(r, 1, 4), k = uni(r, 2, 4);
    const auto y = labels(r, n, k);
    return gradient_norm_readout(r, {randn(r, {n, in}), randn(r, {in, k}), randn(r, {k})}, [y](const auto& v) {
      return nn::softmax_cross_entropy(nn::dense(v[0], v[1], v[2]), y);
    });
  });
  static const char* const kExact[] = {
      "add", "sub", "mul", "neg", "scale", "add_scalar", "matmul", "conv2d", "conv2d_backward_data",
      "conv2d_backward_filter", "relu", "abs", "sign", "sum", "mean", "variance", "max", "reshape", "transpose",
      "concat", "slice", "slice_backward", "broadcast_to", "sum_to", "gather_rows", "scatter_rows", "dense",
      "conv3x3", "relu_layer", "batchnorm_inference", "batchnorm2d_inference", "residual_add", "global_avg_pool",
      "embedding"};
  for (auto& c : cs) {
    if (std::find(std::begin(kExact), std::end(kExact), c.name) != std::end(kExact)) c.step = Step::exact;
  }
  return cs;
}

const std::vector<Case>& cases() {
  static const std::vector<Case> all = build_cases();
  return all;
}

}  // namespace

std::string to_string(CaseKind kind) {
  switch (kind) {
    case CaseKind::primitive: return "primitive";
    case CaseKind::layer: return "layer";
    case CaseKind::second_order: return "second-order";
  }
  return "unknown";
}

bool SuiteReport::pass() const {
  return std::all_of(cases.begin(), cases.end(), [](const CaseResult& c) { return c.pass; });
}

std::vector<std::string> case_names() {
  std::vector<std::string> out;
  for (const auto& c : cases()) out.push_back(c.name);
  return out;
}

SuiteReport run_suite(const SuiteOptions& opt) {
  if (opt.instances < 1) throw std::invalid_argument("gradcheck: instances must be positive");
  const auto names = case_names();
  for (const auto& n : opt.only) {
    if (std::find(names.begin(), names.end(), n) == names.end()) {
      throw std::invalid_argument("gradcheck: unknown case '" + n + "'");
    }
  }
  using Clock = std::chrono::steady_clock;
  const auto suite_start = Clock::now();
  SuiteReport report;
  std::uint64_t case_index = 0;
  for (const auto& c : cases()) {
    ++case_index;
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), c.name) == opt.only.end()) continue;
    const auto start = Clock::now();
    // Seeded per case so filtering does not change the instances drawn.
    Rng rng(opt.seed * 1000003 + case_index);
    CaseResult res;
    res.name = c.name;
    res.kind = c.kind;
    res.tol = c.kind == CaseKind::second_order ? opt.second_order_tol : opt.tol;
    for (std::int64_t i = 0; i < opt.instances; ++i) {
      Instance inst = c.gen(rng);
      const double h = c.step == Step::exact ? kExactStep : opt.h;
      const FiniteDiffReport fd = finite_diff_check(inst.f, inst.point, h, res.tol);
      if (fd.max_rel_err >= res.max_rel_err) {
        res.max_rel_err = fd.max_rel_err;
        res.worst_instance = i;
        res.worst_analytic = fd.worst_analytic;
        res.worst_numeric = fd.worst_numeric;
      }
      res.max_abs_err = std::max(res.max_abs_err, fd.max_abs_err);
      res.coordinates += static_cast<std::int64_t>(fd.coordinates);
      ++res.instances;
    }
    res.pass = res.max_rel_err < res.tol;
    res.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    report.cases.push_back(std::move(res));
  }
  report.seconds = std::chrono::duration<double>(Clock::now() - suite_start).count();
  return report;
}

}  // namespace gi::ad::gradcheck
