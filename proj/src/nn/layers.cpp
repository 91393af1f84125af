#include "gradinit/nn/layers.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "gradinit/autodiff/ops.hpp"

namespace gi::nn {

using namespace gi::ad;

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    throw std::invalid_argument("dense: input " + shape_str(x.shape()) + " does not match weight " +
                                shape_str(weight.shape()));
  }
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride) {
  Tensor y = conv2d(x, kernel, Conv2dGeometry{stride, 1});
  if (!bias.defined()) return y;
  return add(y, reshape(bias, {1, bias.size(), 1, 1}));
}

BatchNormResult batchnorm_forward(const Tensor& x, const Tensor& scale_p, const Tensor& shift,
                                  Real eps) {
  if (x.rank() != 2) throw std::invalid_argument("batchnorm_forward expects [n, d] input");
  if (x.dim(0) < 2) throw std::invalid_argument("batchnorm_forward needs a batch of at least 2");
  if (!(eps >= 0)) throw std::invalid_argument("batchnorm_forward needs eps >= 0");
  const std::int64_t d = x.dim(1);
  Tensor mu = mean(x, 0, true);
  Tensor centered = sub(x, mu);
  Tensor var = mean(mul(centered, centered), 0, true);
  Tensor y = div(centered, sqrt(add_scalar(var, eps)));
  y = add(mul(y, reshape(scale_p, {1, d})), reshape(shift, {1, d}));
  return {y, mu.detached().view_as({d}), var.detached().view_as({d})};
}

Tensor batchnorm_inference(const Tensor& x, const Tensor& scale_p, const Tensor& shift,
                           const Tensor& running_mean, const Tensor& running_var, Real eps) {
  const std::int64_t d = x.dim(1);
  Tensor y = div(sub(x, reshape(running_mean, {1, d})),
                 sqrt(add_scalar(reshape(running_var, {1, d}), eps)));
  return add(mul(y, reshape(scale_p, {1, d})), reshape(shift, {1, d}));
}

BatchNormResult batchnorm2d_forward(const Tensor& x, const Tensor& scale_p, const Tensor& shift,
                                    Real eps) {
  if (x.rank() != 4) throw std::invalid_argument("batchnorm2d_forward expects [N, C, H, W]");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (n * hw < 2) throw std::invalid_argument("batchnorm2d_forward needs at least 2 values per channel");
  Tensor flat = reshape(x, {n, c, hw});
  Tensor mu = mean(mean(flat, 2, true), 0, true);
  Tensor centered = sub(flat, mu);
  Tensor var = mean(mean(mul(centered, centered), 2, true), 0, true);
  Tensor y = div(centered, sqrt(add_scalar(var, eps)));
  y = add(mul(y, reshape(scale_p, {1, c, 1})), reshape(shift, {1, c, 1}));
  return {reshape(y, x.shape()), mu.detached().view_as({c}), var.detached().view_as({c})};
}

Tensor batchnorm2d_inference(const Tensor& x, const Tensor& scale_p, const Tensor& shift,
                             const Tensor& running_mean, const Tensor& running_var, Real eps) {
  const std::int64_t c = x.dim(1);
  const Shape s{1, c, 1, 1};
  Tensor y = div(sub(x, reshape(running_mean, s)), sqrt(add_scalar(reshape(running_var, s), eps)));
  return add(mul(y, reshape(scale_p, s)), reshape(shift, s));
}

Tensor layer_norm(const Tensor& x, const Tensor& scale_p, const Tensor& shift, Real eps) {
  Tensor centered = sub(x, mean(x, -1, true));
  Tensor var = mean(mul(centered, centered), -1, true);
  Tensor y = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(y, scale_p), shift);
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("global_avg_pool expects [N, C, H, W]");
  return mean(reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)}), 2);
}

namespace {

template <class Label>
Tensor cross_entropy_impl(const Tensor& logits, const std::vector<Label>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                                " do not match " + std::to_string(labels.size()) + " labels");
  }
  const std::int64_t n = logits.dim(0), classes = logits.dim(1);
  if (n == 0) throw std::invalid_argument("softmax_cross_entropy of empty batch");
  Tensor pick(logits.shape());
  auto p = pick.mutable_data();
  const Real w = Real(-1) / static_cast<Real>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto l = static_cast<std::int64_t>(labels[static_cast<std::size_t>(i)]);
    if (l < 0 || l >= classes) {
      throw std::out_of_range("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
    p[static_cast<std::size_t>(i * classes + l)] = w;
  }
  return sum(mul(log_softmax(logits, 1), pick));
}

}  // namespace

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  return cross_entropy_impl(logits, labels);
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  return cross_entropy_impl(logits, labels);
}

std::int64_t count_correct(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  const std::int64_t n = logits.dim(0), classes = logits.dim(1);
  auto v = logits.data();
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < classes; ++c) {
      if (v[static_cast<std::size_t>(i * classes + c)] > v[static_cast<std::size_t>(i * classes + best)]) best = c;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return correct;
}

Tensor multi_head_attention(const Tensor& query, const Tensor& memory, const AttentionWeights& w,
                            int heads, bool causal) {
  if (query.rank() != 3 || memory.rank() != 3 || query.dim(0) != memory.dim(0) ||
      query.dim(2) != memory.dim(2)) {
    throw std::invalid_argument("multi_head_attention: incompatible query/memory shapes");
  }
  const std::int64_t b = query.dim(0), lq = query.dim(1), lk = memory.dim(1), d = query.dim(2);
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("head count must divide model dim");
  const std::int64_t dh = d / heads;

  auto split_heads = [&](const Tensor& x, std::int64_t len, const Tensor& wt, const Tensor& bias) {
    Tensor proj = dense(reshape(x, {b * len, d}), wt, bias);
    return reshape(transpose(reshape(proj, {b, len, heads, dh}), {0, 2, 1, 3}), {b * heads, len, dh});
  };
  Tensor q = split_heads(query, lq, w.wq, w.bq);
  Tensor k = split_heads(memory, lk, w.wk, w.bk);
  Tensor v = split_heads(memory, lk, w.wv, w.bv);

  Tensor scores = scale(matmul(q, k, false, true), Real(1) / std::sqrt(static_cast<Real>(dh)));
  if (causal) {
    Tensor mask(Shape{lq, lk});
    auto m = mask.mutable_data();
    for (std::int64_t i = 0; i < lq; ++i)
      for (std::int64_t j = i + 1; j < lk; ++j) m[static_cast<std::size_t>(i * lk + j)] = Real(-1e9);
    scores = add(scores, mask);
  }
  Tensor ctx = matmul(softmax(scores, -1), v);
  Tensor merged = reshape(transpose(reshape(ctx, {b, heads, lq, dh}), {0, 2, 1, 3}), {b * lq, d});
  return reshape(dense(merged, w.wo, w.bo), {b, lq, d});
}

Tensor sinusoidal_positions(std::int64_t length, std::int64_t dim) {
  Tensor t(Shape{length, dim});
  auto v = t.mutable_data();
  for (std::int64_t pos = 0; pos < length; ++pos) {
    for (std::int64_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      v[static_cast<std::size_t>(pos * dim + i)] = static_cast<Real>(std::sin(pos * freq));
      if (i + 1 < dim) v[static_cast<std::size_t>(pos * dim + i + 1)] = static_cast<Real>(std::cos(pos * freq));
    }
  }
  return t;
}

}  // namespace gi::nn
