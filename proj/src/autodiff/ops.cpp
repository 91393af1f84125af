#include "gradinit/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "gradinit/autodiff/tape.hpp"

namespace gi::ad {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tape* active_tape(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->has_node()) return t->tape()->recording() ? t->tape() : nullptr;
  }
  return nullptr;
}

Tape* active_tape(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.has_node()) return t.tape()->recording() ? t.tape() : nullptr;
  }
  return nullptr;
}

int normalize_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::out_of_range("axis out of range");
  return axis;
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

/// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::int64_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape reduced_shape(const Shape& shape, int axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[static_cast<std::size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

std::vector<std::int64_t> strides_of(const Shape& shape) {
  std::vector<std::int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

/// For each flat index of `out_shape`, the flat index of the broadcast source.
std::vector<std::int64_t> broadcast_sources(const Shape& in_shape, const Shape& out_shape) {
  const std::size_t r = out_shape.size();
  const std::size_t offset = r - in_shape.size();
  const auto in_strides = strides_of(in_shape);
  std::vector<std::int64_t> eff(r, 0);
  for (std::size_t i = 0; i < in_shape.size(); ++i) {
    eff[offset + i] = in_shape[i] == 1 ? 0 : in_strides[i];
  }
  const std::int64_t total = numel(out_shape);
  std::vector<std::int64_t> src(static_cast<std::size_t>(total));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t cur = 0;
  for (std::int64_t f = 0; f < total; ++f) {
    src[static_cast<std::size_t>(f)] = cur;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      cur += eff[ud];
      if (idx[ud] < out_shape[ud]) break;
      cur -= eff[ud] * idx[ud];
      idx[ud] = 0;
    }
  }
  return src;
}

bool broadcastable_to(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) return false;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] != 1 && in[i] != out[offset + i]) return false;
  }
  return true;
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);

Real normal_pdf(Real x) { return kInvSqrt2Pi * std::exp(Real(-0.5) * x * x); }
Real normal_cdf(Real x) { return Real(0.5) * (Real(1) + std::erf(x * kInvSqrt2)); }

/// Derivative of GELU; its own adjoint is phi(x) (2 - x^2).
Tensor gelu_derivative(const Tensor& x) {
  Tensor value = map_unary(x, [](Real v) { return normal_cdf(v) + v * normal_pdf(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return value;
  return tape->record(std::move(value), "gelu_derivative", {x},
                      [x](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        Tensor sq = mul(x, x);
                        Tensor phi = scale(exp(scale(sq, Real(-0.5))), kInvSqrt2Pi);
                        return {mul(g, mul(phi, add_scalar(neg(sq), Real(2))))};
                      });
}

// --- convolution kernels -------------------------------------------------

struct ConvDims {
  std::int64_t n, c, h, w, o, k, ho, wo;
};

ConvDims conv_dims(const Shape& x, const Shape& kernel, Conv2dGeometry g) {
  if (x.size() != 4 || kernel.size() != 4) throw std::invalid_argument("conv2d expects rank-4 operands");
  if (x[1] != kernel[1]) throw std::invalid_argument("conv2d channel mismatch");
  if (kernel[2] != kernel[3]) throw std::invalid_argument("conv2d expects square kernels");
  if (g.stride < 1 || g.padding < 0) throw std::invalid_argument("conv2d invalid geometry");
  ConvDims d{x[0], x[1], x[2], x[3], kernel[0], kernel[2], 0, 0};
  d.ho = (d.h + 2 * g.padding - d.k) / g.stride + 1;
  d.wo = (d.w + 2 * g.padding - d.k) / g.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw std::invalid_argument("conv2d output would be empty");
  return d;
}

// cols: [C*K*K, Ho*Wo] for one sample.
void im2col(const Real* img, const ConvDims& d, Conv2dGeometry g, Real* cols) {
  const std::int64_t plane = d.ho * d.wo;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.k; ++ki) {
      for (std::int64_t kj = 0; kj < d.k; ++kj) {
        Real* row = cols + ((c * d.k + ki) * d.k + kj) * plane;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            row[oy * d.wo + ox] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                      ? img[(c * d.h + iy) * d.w + ix]
                                      : Real(0);
          }
        }
      }
    }
  }
}

void col2im(const Real* cols, const ConvDims& d, Conv2dGeometry g, Real* img) {
  const std::int64_t plane = d.ho * d.wo;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t ki = 0; ki < d.k; ++ki) {
      for (std::int64_t kj = 0; kj < d.k; ++kj) {
        const Real* row = cols + ((c * d.k + ki) * d.k + kj) * plane;
        for (std::int64_t oy = 0; oy < d.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= d.h) continue;
          for (std::int64_t ox = 0; ox < d.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.padding + kj;
            if (ix < 0 || ix >= d.w) continue;
            img[(c * d.h + iy) * d.w + ix] += row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

Tensor conv_forward_values(const Tensor& x, const Tensor& w, const ConvDims& d, Conv2dGeometry g) {
  Tensor out(Shape{d.n, d.o, d.ho, d.wo});
  const std::int64_t ckk = d.c * d.k * d.k, plane = d.ho * d.wo;
  std::vector<Real> cols(static_cast<std::size_t>(ckk * plane));
  ConstMapMat wm(w.data().data(), d.o, ckk);
  auto o = out.mutable_data();
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
    MapMat(o.data() + n * d.o * plane, d.o, plane).noalias() = wm * ConstMapMat(cols.data(), ckk, plane);
  }
  return out;
}

Tensor conv_data_values(const Tensor& gout, const Tensor& w, const ConvDims& d, Conv2dGeometry g) {
  Tensor out(Shape{d.n, d.c, d.h, d.w});
  const std::int64_t ckk = d.c * d.k * d.k, plane = d.ho * d.wo;
  RowMat cols(ckk, plane);
  ConstMapMat wm(w.data().data(), d.o, ckk);
  auto o = out.mutable_data();
  for (std::int64_t n = 0; n < d.n; ++n) {
    cols.noalias() = wm.transpose() * ConstMapMat(gout.data().data() + n * d.o * plane, d.o, plane);
    col2im(cols.data(), d, g, o.data() + n * d.c * d.h * d.w);
  }
  return out;
}

Tensor conv_filter_values(const Tensor& x, const Tensor& gout, const ConvDims& d, Conv2dGeometry g) {
  Tensor out(Shape{d.o, d.c, d.k, d.k});
  const std::int64_t ckk = d.c * d.k * d.k, plane = d.ho * d.wo;
  std::vector<Real> cols(static_cast<std::size_t>(ckk * plane));
  MapMat om(out.mutable_data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
    om.noalias() += ConstMapMat(gout.data().data() + n * d.o * plane, d.o, plane) *
                    ConstMapMat(cols.data(), ckk, plane).transpose();
  }
  return out;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  require_defined(x, "broadcast_to");
  if (x.shape() == shape) return x;
  if (!broadcastable_to(x.shape(), shape)) {
    throw std::invalid_argument("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  if (x.size() == 1) {
    std::fill(o.begin(), o.end(), in[0]);
  } else {
    const auto src = broadcast_sources(x.shape(), shape);
    for (std::size_t i = 0; i < src.size(); ++i) o[i] = in[static_cast<std::size_t>(src[i])];
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape in_shape = x.shape();
  return tape->record(std::move(out), "broadcast_to", {x},
                      [in_shape](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {sum_to(g, in_shape)};
                      });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  require_defined(x, "sum_to");
  if (x.shape() == shape) return x;
  if (!broadcastable_to(shape, x.shape())) {
    throw std::invalid_argument("cannot sum " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  auto o = out.mutable_data();
  auto in = x.data();
  if (out.size() == 1) {
    Real acc = 0;
    for (Real v : in) acc += v;
    o[0] = acc;
  } else {
    const auto src = broadcast_sources(shape, x.shape());
    for (std::size_t i = 0; i < src.size(); ++i) o[static_cast<std::size_t>(src[i])] += in[i];
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape full = x.shape();
  return tape->record(std::move(out), "sum_to", {x},
                      [full](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {broadcast_to(g, full)};
                      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) {
    const Shape s = broadcast_shapes(a.shape(), b.shape());
    return add(broadcast_to(a, s), broadcast_to(b, s));
  }
  Tensor out = map_binary(a, b, [](Real x, Real y) { return x + y; });
  Tape* tape = active_tape({&a, &b});
  if (!tape) return out;
  return tape->record(std::move(out), "add", {a, b},
                      [](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {g, g};
                      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  if (a.shape() != b.shape()) {
    const Shape s = broadcast_shapes(a.shape(), b.shape());
    return sub(broadcast_to(a, s), broadcast_to(b, s));
  }
  Tensor out = map_binary(a, b, [](Real x, Real y) { return x - y; });
  Tape* tape = active_tape({&a, &b});
  if (!tape) return out;
  return tape->record(std::move(out), "sub", {a, b},
                      [](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
                        return {g, needs[1] ? neg(g) : Tensor()};
                      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) {
    const Shape s = broadcast_shapes(a.shape(), b.shape());
    return mul(broadcast_to(a, s), broadcast_to(b, s));
  }
  Tensor out = map_binary(a, b, [](Real x, Real y) { return x * y; });
  Tape* tape = active_tape({&a, &b});
  if (!tape) return out;
  return tape->record(std::move(out), "mul", {a, b},
                      [a, b](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
                        return {needs[0] ? mul(g, b) : Tensor(), needs[1] ? mul(g, a) : Tensor()};
                      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_defined(a, "div");
  require_defined(b, "div");
  if (a.shape() != b.shape()) {
    const Shape s = broadcast_shapes(a.shape(), b.shape());
    return div(broadcast_to(a, s), broadcast_to(b, s));
  }
  Tensor out = map_binary(a, b, [](Real x, Real y) { return x / y; });
  Tape* tape = active_tape({&a, &b});
  if (!tape) return out;
  return tape->record(std::move(out), "div", {a, b},
                      [a, b](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
                        Tensor ga = needs[0] ? div(g, b) : Tensor();
                        Tensor gb = needs[1] ? neg(div(mul(g, a), mul(b, b))) : Tensor();
                        return {ga, gb};
                      });
}

Tensor neg(const Tensor& x) { return scale(x, Real(-1)); }

Tensor scale(const Tensor& x, Real factor) {
  require_defined(x, "scale");
  Tensor out = map_unary(x, [factor](Real v) { return v * factor; });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "scale", {x},
                      [factor](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {scale(g, factor)};
                      });
}

Tensor add_scalar(const Tensor& x, Real value) {
  require_defined(x, "add_scalar");
  Tensor out = map_unary(x, [value](Real v) { return v + value; });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "add_scalar", {x},
                      [](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {g};
                      });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
    throw std::invalid_argument("matmul expects two rank-2 or two rank-3 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const bool batched = a.rank() == 3;
  const std::int64_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) throw std::invalid_argument("matmul batch extent mismatch");
  const std::int64_t ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
  const std::int64_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::int64_t k2 = tb ? bc : br, n = tb ? br : bc;
  if (k != k2) {
    throw std::invalid_argument("matmul inner extent mismatch: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Tensor out(batched ? Shape{batch, m, n} : Shape{m, n});
  auto o = out.mutable_data();
  for (std::int64_t s = 0; s < batch; ++s) {
    ConstMapMat am(a.data().data() + s * ar * ac, ar, ac);
    ConstMapMat bm(b.data().data() + s * br * bc, br, bc);
    MapMat om(o.data() + s * m * n, m, n);
    if (!ta && !tb) om.noalias() = am * bm;
    else if (ta && !tb) om.noalias() = am.transpose() * bm;
    else if (!ta && tb) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  }
  Tape* tape = active_tape({&a, &b});
  if (!tape) return out;
  return tape->record(
      std::move(out), "matmul", {a, b},
      [a, b, ta, tb](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
        Tensor ga, gb;
        if (!ta && !tb) {
          if (needs[0]) ga = matmul(g, b, false, true);
          if (needs[1]) gb = matmul(a, g, true, false);
        } else if (ta && !tb) {
          if (needs[0]) ga = matmul(b, g, false, true);
          if (needs[1]) gb = matmul(a, g, false, false);
        } else if (!ta && tb) {
          if (needs[0]) ga = matmul(g, b, false, false);
          if (needs[1]) gb = matmul(g, a, true, false);
        } else {
          if (needs[0]) ga = matmul(b, g, true, true);
          if (needs[1]) gb = matmul(g, a, true, true);
        }
        return {ga, gb};
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dGeometry geom) {
  require_defined(x, "conv2d");
  require_defined(w, "conv2d");
  const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
  Tensor out = conv_forward_values(x, w, d, geom);
  Tape* tape = active_tape({&x, &w});
  if (!tape) return out;
  return tape->record(
      std::move(out), "conv2d", {x, w},
      [x, w, geom](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
        return {needs[0] ? conv2d_backward_data(g, w, x.shape(), geom) : Tensor(),
                needs[1] ? conv2d_backward_filter(x, g, w.shape(), geom) : Tensor()};
      });
}

Tensor conv2d_backward_data(const Tensor& grad_out, const Tensor& w, const Shape& input_shape,
                            Conv2dGeometry geom) {
  require_defined(grad_out, "conv2d_backward_data");
  require_defined(w, "conv2d_backward_data");
  const ConvDims d = conv_dims(input_shape, w.shape(), geom);
  if (grad_out.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw std::invalid_argument("conv2d_backward_data: gradient shape mismatch");
  }
  Tensor out = conv_data_values(grad_out, w, d, geom);
  Tape* tape = active_tape({&grad_out, &w});
  if (!tape) return out;
  return tape->record(
      std::move(out), "conv2d_backward_data", {grad_out, w},
      [grad_out, w, geom](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
        return {needs[0] ? conv2d(g, w, geom) : Tensor(),
                needs[1] ? conv2d_backward_filter(g, grad_out, w.shape(), geom) : Tensor()};
      });
}

Tensor conv2d_backward_filter(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape,
                              Conv2dGeometry geom) {
  require_defined(x, "conv2d_backward_filter");
  require_defined(grad_out, "conv2d_backward_filter");
  const ConvDims d = conv_dims(x.shape(), kernel_shape, geom);
  if (grad_out.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw std::invalid_argument("conv2d_backward_filter: gradient shape mismatch");
  }
  Tensor out = conv_filter_values(x, grad_out, d, geom);
  Tape* tape = active_tape({&x, &grad_out});
  if (!tape) return out;
  return tape->record(
      std::move(out), "conv2d_backward_filter", {x, grad_out},
      [x, grad_out, geom](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
        return {needs[0] ? conv2d_backward_data(grad_out, g, x.shape(), geom) : Tensor(),
                needs[1] ? conv2d(x, g, geom) : Tensor()};
      });
}

Tensor relu(const Tensor& x) {
  require_defined(x, "relu");
  Tensor out = map_unary(x, [](Real v) { return v > 0 ? v : Real(0); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Tensor mask = map_unary(x, [](Real v) { return v > 0 ? Real(1) : Real(0); });
  return tape->record(std::move(out), "relu", {x},
                      [mask](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {mul(g, mask)};
                      });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  Tensor out = map_unary(x, [](Real v) { return v * normal_cdf(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "gelu", {x},
                      [x](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {mul(g, gelu_derivative(x))};
                      });
}

Tensor exp(const Tensor& x) {
  require_defined(x, "exp");
  Tensor out = map_unary(x, [](Real v) { return std::exp(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "exp", {x},
                      [x](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {mul(g, exp(x))};
                      });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  Tensor out = map_unary(x, [](Real v) { return std::log(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "log", {x},
                      [x](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {div(g, x)};
                      });
}

Tensor sqrt(const Tensor& x) {
  require_defined(x, "sqrt");
  Tensor out = map_unary(x, [](Real v) { return std::sqrt(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "sqrt", {x},
                      [x](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {div(g, scale(sqrt(x), Real(2)))};
                      });
}

Tensor pow(const Tensor& x, Real exponent) {
  require_defined(x, "pow");
  Tensor out = map_unary(x, [exponent](Real v) { return std::pow(v, exponent); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "pow", {x},
                      [x, exponent](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        if (exponent == Real(1)) return {g};
                        return {mul(g, scale(pow(x, exponent - Real(1)), exponent))};
                      });
}

Tensor abs(const Tensor& x) {
  require_defined(x, "abs");
  Tensor out = map_unary(x, [](Real v) { return std::abs(v); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Tensor sgn = detach(sign(x));
  return tape->record(std::move(out), "abs", {x},
                      [sgn](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {mul(g, sgn)};
                      });
}

Tensor sign(const Tensor& x) {
  require_defined(x, "sign");
  Tensor out = map_unary(x, [](Real v) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "sign", {x},
                      [](const Tensor&, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {Tensor()};
                      });
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  Real acc = 0;
  for (Real v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape full = x.shape();
  return tape->record(std::move(out), "sum", {x},
                      [full](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {broadcast_to(g, full)};
                      });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  require_defined(x, "sum");
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor out(reduced_shape(x.shape(), axis, keepdim));
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    for (std::int64_t e = 0; e < s.extent; ++e) {
      const Real* src = in.data() + (a * s.extent + e) * s.inner;
      Real* dst = o.data() + a * s.inner;
      for (std::int64_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape full = x.shape();
  Shape kept = reduced_shape(x.shape(), axis, true);
  return tape->record(std::move(out), "sum_axis", {x},
                      [full, kept](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {broadcast_to(reshape(g, kept), full)};
                      });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  if (x.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.size()));
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  require_defined(x, "mean");
  const auto extent = x.dim(axis);
  if (extent == 0) throw std::invalid_argument("mean over empty axis");
  return scale(sum(x, axis, keepdim), Real(1) / static_cast<Real>(extent));
}

Tensor variance(const Tensor& x, int axis, bool keepdim) {
  Tensor centered = sub(x, mean(x, axis, true));
  return mean(mul(centered, centered), axis, keepdim);
}

Tensor max(const Tensor& x, int axis, bool keepdim) {
  require_defined(x, "max");
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  if (s.extent == 0) throw std::invalid_argument("max over empty axis");
  Tensor out(reduced_shape(x.shape(), axis, keepdim));
  Tensor mask(x.shape());
  auto o = out.mutable_data();
  auto m = mask.mutable_data();
  auto in = x.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      std::int64_t best = 0;
      for (std::int64_t e = 1; e < s.extent; ++e) {
        if (in[static_cast<std::size_t>((a * s.extent + e) * s.inner + i)] >
            in[static_cast<std::size_t>((a * s.extent + best) * s.inner + i)]) {
          best = e;
        }
      }
      const auto idx = static_cast<std::size_t>((a * s.extent + best) * s.inner + i);
      o[static_cast<std::size_t>(a * s.inner + i)] = in[idx];
      m[idx] = 1;
    }
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape full = x.shape();
  Shape kept = reduced_shape(x.shape(), axis, true);
  return tape->record(std::move(out), "max", {x},
                      [full, kept, mask](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {mul(broadcast_to(reshape(g, kept), full), mask)};
                      });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  require_defined(x, "reshape");
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor out = x.view_as(shape);
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape original = x.shape();
  return tape->record(std::move(out), "reshape", {x},
                      [original](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {reshape(g, original)};
                      });
}

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  require_defined(x, "transpose");
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw std::invalid_argument("transpose: perm rank mismatch");
  std::vector<int> inverse(static_cast<std::size_t>(r), -1);
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<std::size_t>(i)];
    if (p < 0 || p >= r || inverse[static_cast<std::size_t>(p)] != -1) {
      throw std::invalid_argument("transpose: invalid permutation");
    }
    inverse[static_cast<std::size_t>(p)] = i;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  const auto in_strides = strides_of(x.shape());
  std::vector<std::int64_t> eff(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) eff[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t cur = 0;
  const std::int64_t total = out.size();
  for (std::int64_t f = 0; f < total; ++f) {
    o[static_cast<std::size_t>(f)] = in[static_cast<std::size_t>(cur)];
    for (int d = r - 1; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      cur += eff[ud];
      if (idx[ud] < out_shape[ud]) break;
      cur -= eff[ud] * idx[ud];
      idx[ud] = 0;
    }
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "transpose", {x},
                      [inverse](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {transpose(g, inverse)};
                      });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of no tensors");
  for (const auto& p : parts) require_defined(p, "concat");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r);
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<std::int64_t> lengths;
  for (const auto& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != parts[0].shape()[static_cast<std::size_t>(i)]) {
        throw std::invalid_argument("concat extent mismatch");
      }
    }
    lengths.push_back(p.dim(axis));
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  const AxisSplit s = split_at(out_shape, axis);
  Tensor out(out_shape);
  auto o = out.mutable_data();
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto in = parts[k].data();
    const std::int64_t chunk = lengths[k] * s.inner;
    for (std::int64_t a = 0; a < s.outer; ++a) {
      std::copy_n(in.data() + a * chunk, chunk, o.data() + (a * s.extent + offset) * s.inner);
    }
    offset += lengths[k];
  }
  Tape* tape = active_tape(parts);
  if (!tape) return out;
  return tape->record(std::move(out), "concat", parts,
                      [axis, lengths](const Tensor& g, const std::vector<bool>& needs) -> std::vector<Tensor> {
                        std::vector<Tensor> grads(lengths.size());
                        std::int64_t start = 0;
                        for (std::size_t k = 0; k < lengths.size(); ++k) {
                          if (needs[k]) grads[k] = slice(g, axis, start, lengths[k]);
                          start += lengths[k];
                        }
                        return grads;
                      });
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  require_defined(x, "slice");
  axis = normalize_axis(axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  if (start < 0 || length < 0 || start + length > s.extent) throw std::out_of_range("slice bounds");
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  Tensor out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    std::copy_n(in.data() + (a * s.extent + start) * s.inner, length * s.inner,
                o.data() + a * length * s.inner);
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  Shape full = x.shape();
  return tape->record(std::move(out), "slice", {x},
                      [full, axis, start](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {slice_backward(g, full, axis, start)};
                      });
}

Tensor slice_backward(const Tensor& x, const Shape& full_shape, int axis, std::int64_t start) {
  require_defined(x, "slice_backward");
  axis = normalize_axis(axis, static_cast<int>(full_shape.size()));
  const AxisSplit s = split_at(full_shape, axis);
  const std::int64_t length = x.dim(axis);
  if (start < 0 || start + length > s.extent) throw std::out_of_range("slice_backward bounds");
  Tensor out(full_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::int64_t a = 0; a < s.outer; ++a) {
    std::copy_n(in.data() + a * length * s.inner, length * s.inner,
                o.data() + (a * s.extent + start) * s.inner);
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "slice_backward", {x},
                      [axis, start, length](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {slice(g, axis, start, length)};
                      });
}

Tensor softmax(const Tensor& x, int axis) {
  Tensor shifted = sub(x, detach(max(x, axis, true)));
  Tensor e = exp(shifted);
  return div(e, sum(e, axis, true));
}

Tensor log_softmax(const Tensor& x, int axis) {
  Tensor shifted = sub(x, detach(max(x, axis, true)));
  return sub(shifted, log(sum(exp(shifted), axis, true)));
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& indices) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw std::invalid_argument("gather_rows expects a rank-2 table");
  const std::int64_t rows = table.dim(0), width = table.dim(1);
  Tensor out(Shape{static_cast<std::int64_t>(indices.size()), width});
  auto o = out.mutable_data();
  auto in = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows) throw std::out_of_range("gather_rows index out of range");
    std::copy_n(in.data() + indices[i] * width, width, o.data() + static_cast<std::int64_t>(i) * width);
  }
  Tape* tape = active_tape({&table});
  if (!tape) return out;
  return tape->record(std::move(out), "gather_rows", {table},
                      [indices, rows](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {scatter_rows(g, indices, rows)};
                      });
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::int64_t>& indices, std::int64_t rows) {
  require_defined(x, "scatter_rows");
  if (x.rank() != 2 || x.dim(0) != static_cast<std::int64_t>(indices.size())) {
    throw std::invalid_argument("scatter_rows shape mismatch");
  }
  const std::int64_t width = x.dim(1);
  Tensor out(Shape{rows, width});
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows) throw std::out_of_range("scatter_rows index out of range");
    Real* dst = o.data() + indices[i] * width;
    const Real* src = in.data() + static_cast<std::int64_t>(i) * width;
    for (std::int64_t j = 0; j < width; ++j) dst[j] += src[j];
  }
  Tape* tape = active_tape({&x});
  if (!tape) return out;
  return tape->record(std::move(out), "scatter_rows", {x},
                      [indices](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                        return {gather_rows(g, indices)};
                      });
}

Tensor detach(const Tensor& x) { return x.detached(); }

}  // namespace gi::ad
