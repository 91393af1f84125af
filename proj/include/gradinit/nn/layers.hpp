#pragma once

#include <cstdint>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"

namespace gi::nn {

using ad::Tensor;

inline constexpr Real kBatchNormEps = Real(1e-5);
inline constexpr Real kLayerNormEps = Real(1e-6);

/// x [N, in] @ weight [in, out] (+ bias [out]).
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

/// 3x3 convolution with zero padding 1; bias [O] is optional.
Tensor conv3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride);

struct BatchNormResult {
  Tensor y;
  Tensor batch_mean;  // [d], no node
  Tensor batch_var;   // [d], biased, no node
};

/// Training-mode batch normalization of x [n, d] over the batch axis with the
/// biased variance: y = scale * (x - mu) / sqrt(var + eps) + shift.
BatchNormResult batchnorm_forward(const Tensor& x, const Tensor& scale, const Tensor& shift,
                                  Real eps = kBatchNormEps);
/// Inference mode with fixed statistics.
Tensor batchnorm_inference(const Tensor& x, const Tensor& scale, const Tensor& shift,
                           const Tensor& running_mean, const Tensor& running_var,
                           Real eps = kBatchNormEps);

/// Channel-wise variants for x [N, C, H, W].
BatchNormResult batchnorm2d_forward(const Tensor& x, const Tensor& scale, const Tensor& shift,
                                    Real eps = kBatchNormEps);
Tensor batchnorm2d_inference(const Tensor& x, const Tensor& scale, const Tensor& shift,
                             const Tensor& running_mean, const Tensor& running_var,
                             Real eps = kBatchNormEps);

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                  Real eps = kLayerNormEps);

/// [N, C, H, W] -> [N, C].
Tensor global_avg_pool(const Tensor& x);

/// Mean over rows of -log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& labels);
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& labels);

std::int64_t count_correct(const Tensor& logits, const std::vector<std::int64_t>& labels);

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product multi-head attention. query [B, Lq, D], memory
/// [B, Lk, D]; with `causal`, position i attends to positions <= i.
Tensor multi_head_attention(const Tensor& query, const Tensor& memory, const AttentionWeights& w,
                            int heads, bool causal);

/// Fixed sinusoidal position table [length, dim].
Tensor sinusoidal_positions(std::int64_t length, std::int64_t dim);

}  // namespace gi::nn
