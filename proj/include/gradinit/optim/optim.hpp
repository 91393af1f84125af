#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"

namespace gi::optim {

using ad::Tensor;

/// v <- mu v + (g + wd theta); theta <- theta - lr v.
class Sgd {
 public:
  explicit Sgd(Real momentum = 0, Real weight_decay = 0);
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Real lr);
  const std::vector<Tensor>& buffers() const { return velocity_; }

 private:
  Real momentum_, weight_decay_;
  std::vector<Tensor> velocity_;
};

struct AdamOptions {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = 0;
  bool decoupled = false;  // AdamW
};

/// Bias-corrected Adam; AdamW when `decoupled` (theta <- theta - lr wd theta
/// before the moment update), otherwise wd theta is added to the gradient.
class Adam {
 public:
  explicit Adam(AdamOptions options = {});
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Real lr);
  std::int64_t steps() const { return step_; }

 private:
  AdamOptions opt_;
  std::int64_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Rescales `grads` in place when their global l2 norm exceeds max_norm.
/// Returns the norm before clipping.
Real clip_global_norm(std::vector<Tensor>& grads, Real max_norm);

enum class ScheduleKind { constant, cosine, warmup_constant, linear_decay, warmup_linear_decay };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  Real base_lr = Real(0.1);
  std::int64_t total_steps = 1;
  std::int64_t warmup_steps = 0;
};

/// Learning rate at step t in [0, total_steps].
Real lr_at(const Schedule& schedule, std::int64_t t);

}  // namespace gi::optim
