#include "gradinit/optim/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gi::optim {
namespace {

void check_shapes(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw std::invalid_argument("optimizer: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw std::invalid_argument("optimizer: gradient " + std::to_string(i) + " has shape " +
                                  shape_str(grads[i].shape()) + ", parameter " + shape_str(params[i].shape()));
    }
  }
}

void init_state(std::vector<Tensor>& state, const std::vector<Tensor>& params) {
  if (!state.empty()) {
    if (state.size() != params.size()) throw std::invalid_argument("optimizer: parameter set changed");
    return;
  }
  for (const auto& p : params) state.push_back(Tensor::zeros(p.shape()));
}

}  // namespace

Sgd::Sgd(Real momentum, Real weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum < 0 || weight_decay < 0) throw std::invalid_argument("sgd: negative hyperparameter");
}

void Sgd::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Real lr) {
  check_shapes(params, grads);
  init_state(velocity_, params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto v = velocity_[i].mutable_data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j] + weight_decay_ * p[j];
      p[j] -= lr * v[j];
    }
  }
}

Adam::Adam(AdamOptions options) : opt_(options) {
  if (!(opt_.beta1 >= 0 && opt_.beta1 < 1 && opt_.beta2 >= 0 && opt_.beta2 < 1 && opt_.eps > 0)) {
    throw std::invalid_argument("adam: betas must lie in [0, 1) and eps > 0");
  }
}

void Adam::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, Real lr) {
  check_shapes(params, grads);
  init_state(m_, params);
  init_state(v_, params);
  ++step_;
  const Real c1 = 1 - std::pow(opt_.beta1, static_cast<Real>(step_));
  const Real c2 = 1 - std::pow(opt_.beta2, static_cast<Real>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto m = m_[i].mutable_data();
    auto v = v_[i].mutable_data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      Real gj = g[j];
      if (opt_.decoupled) {
        p[j] -= lr * opt_.weight_decay * p[j];
      } else {
        gj += opt_.weight_decay * p[j];
      }
      m[j] = opt_.beta1 * m[j] + (1 - opt_.beta1) * gj;
      v[j] = opt_.beta2 * v[j] + (1 - opt_.beta2) * gj * gj;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt_.eps);
    }
  }
}

Real clip_global_norm(std::vector<Tensor>& grads, Real max_norm) {
  if (!(max_norm > 0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  Real sq = 0;
  for (const auto& g : grads)
    for (Real v : g.data()) sq += v * v;
  const Real norm = std::sqrt(sq);
  if (norm > max_norm) {
    const Real f = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.mutable_data()) v *= f;
  }
  return norm;
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::warmup_constant: return "warmup-constant";
    case ScheduleKind::linear_decay: return "linear-decay";
    case ScheduleKind::warmup_linear_decay: return "warmup-linear-decay";
  }
  return "unknown";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  for (auto k : {ScheduleKind::constant, ScheduleKind::cosine, ScheduleKind::warmup_constant,
                 ScheduleKind::linear_decay, ScheduleKind::warmup_linear_decay}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown schedule '" + name + "'");
}

Real lr_at(const Schedule& s, std::int64_t t) {
  if (s.total_steps < 1 || s.warmup_steps < 0 || s.warmup_steps > s.total_steps) {
    throw std::invalid_argument("schedule: need total_steps >= 1 and 0 <= warmup_steps <= total_steps");
  }
  if (t < 0 || t > s.total_steps) {
    throw std::out_of_range("schedule step " + std::to_string(t) + " outside [0, " + std::to_string(s.total_steps) + "]");
  }
  const Real x = static_cast<Real>(t), total = static_cast<Real>(s.total_steps),
             warm = static_cast<Real>(s.warmup_steps);
  switch (s.kind) {
    case ScheduleKind::constant: return s.base_lr;
    case ScheduleKind::cosine: return Real(0.5) * s.base_lr * (1 + std::cos(std::numbers::pi_v<Real> * x / total));
    case ScheduleKind::warmup_constant:
      return t < s.warmup_steps ? s.base_lr * x / warm : s.base_lr;
    case ScheduleKind::linear_decay: return s.base_lr * (1 - x / total);
    case ScheduleKind::warmup_linear_decay:
      if (t < s.warmup_steps) return s.base_lr * x / warm;
      if (s.warmup_steps == s.total_steps) return s.base_lr;
      return s.base_lr * (total - x) / (total - warm);
  }
  return s.base_lr;
}

}  // namespace gi::optim
