#pragma once

#include <cstdint>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"

// Differentiable primitives. Every adjoint is expressed with these same ops,
// so gradients produced with create_graph can be differentiated again.
namespace gi::ad {

// Elementwise binary ops broadcast numpy-style.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, Real factor);
Tensor add_scalar(const Tensor& x, Real value);

/// op(a) @ op(b) for rank-2 operands, or batched over a shared leading extent
/// for rank-3 operands.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

struct Conv2dGeometry {
  int stride = 1;
  int padding = 1;
};

/// x: [N, C, H, W], w: [O, C, K, K] -> [N, O, Ho, Wo].
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry geom);
/// Transpose of conv2d with respect to its input.
Tensor conv2d_backward_data(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                            Conv2dGeometry geom);
/// Transpose of conv2d with respect to its kernel.
Tensor conv2d_backward_filter(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                              Conv2dGeometry geom);

Tensor relu(const Tensor& x);
/// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor pow(const Tensor& x, Real exponent);
Tensor abs(const Tensor& x);
/// sign(0) = 0; the adjoint is identically zero.
Tensor sign(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
/// Biased (1/n) variance along `axis`.
Tensor variance(const Tensor& x, int axis, bool keepdim = false);
Tensor max(const Tensor& x, int axis, bool keepdim = false);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
/// Embeds `x` at [start, start+len) of `axis` inside zeros of `full_shape`.
Tensor slice_backward(const Tensor& x, const Shape& full_shape, int axis, std::int64_t start);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums broadcast dimensions away; inverse of broadcast_to.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);

/// Rows of `table` [V, D] selected by `indices` -> [n, D].
Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices);
/// Adds row i of `x` into row indices[i] of a [rows, D] zero tensor.
Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices, std::int64_t rows);

/// Same values, no tape node.
Tensor detach(const Tensor& x);

Shape broadcast_shapes(const Shape& a, const Shape& b);

}  // namespace gi::ad
