#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "gradinit/autodiff/tape.hpp"
#include "gradinit/autodiff/tensor.hpp"

namespace gi::ad {

/// Gradients aligned with the `wrt` list they were requested for.
struct GradMap {
  std::vector<Tensor> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  const Tensor& operator[](std::size_t i) const { return entries[i]; }
  /// Total number of scalar entries across all tensors.
  std::int64_t numel() const;
  /// Values concatenated in entry order.
  std::vector<Real> flatten() const;
  /// Same values with every tape node dropped.
  GradMap detached() const;
};

/// Reverse-mode gradient of scalar `output` with respect to `wrt`. With
/// `create_graph` the result stays on the tape for a further backward.
/// A constant output (no node) yields zero gradients.
GradMap backward(Tape& tape, const Tensor& output, const std::vector<Tensor>& wrt,
                 bool create_graph = false);

/// l1 or l2 norm over the concatenation of all entries, recorded on the tape.
/// The l2 subgradient at the origin is taken as zero.
Tensor grad_norm(const GradMap& g, int p);

using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

struct FiniteDiffReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::size_t coordinates = 0;
  bool pass = false;
  // Values at the coordinate with the largest relative error.
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences (f(x+h e) - f(x-h e)) / 2h, coordinate by coordinate. The
/// relative error uses max(|analytic|, |numeric|, 1e-12) as denominator.
/// `f` receives tape variables in both passes, so it may differentiate
/// internally.
FiniteDiffReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& point, double h,
                                   double tol);

}  // namespace gi::ad
