#include "gradinit/harness/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <variant>

#include "gradinit/autodiff/grad.hpp"

namespace gi::harness {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adamw: return "adamw";
  }
  return "?";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  if (name == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd, adam or adamw)");
}

void TrainOptions::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw std::invalid_argument("train." + field + ": " + what);
  };
  if (!(lr >= 0)) fail("lr", "must be non-negative");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must lie in [0, 1)");
  if (!(weight_decay >= 0)) fail("weight_decay", "must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2", "must lie in [0, 1)");
  if (!(eps > 0)) fail("eps", "must be positive");
  if (warmup_steps < 0) fail("warmup_steps", "must be non-negative");
  if (epochs < 1) fail("epochs", "must be at least 1");
  if (steps_per_epoch < 0) fail("steps_per_epoch", "must be non-negative");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (!(clip_norm >= 0)) fail("clip_norm", "must be non-negative");
  if (eval_batch_size < 1) fail("eval_batch_size", "must be at least 1");
}

Evaluation evaluate(const nn::Model& model, const data::Dataset& dataset, std::int64_t batch_size) {
  Real loss_sum = 0;
  std::int64_t correct = 0, scored = 0;
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < dataset.size(); start += batch_size) {
    const std::int64_t n = std::min(batch_size, dataset.size() - start);
    idx.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const auto r = model.forward(dataset.batch(idx), nn::Mode::eval);
    loss_sum += r.loss.item() * static_cast<Real>(r.examples);
    correct += r.correct;
    scored += r.examples;
  }
  if (scored == 0) return {};
  return {loss_sum / static_cast<Real>(scored), static_cast<Real>(correct) / static_cast<Real>(scored)};
}

namespace {

using Optimizer = std::variant<optim::Sgd, optim::Adam>;

Optimizer make_optimizer(const TrainOptions& o) {
  if (o.optimizer == OptimizerKind::sgd) return optim::Sgd(o.momentum, o.weight_decay);
  optim::AdamOptions a;
  a.beta1 = o.beta1;
  a.beta2 = o.beta2;
  a.eps = o.eps;
  a.weight_decay = o.weight_decay;
  a.decoupled = o.optimizer == OptimizerKind::adamw;
  return optim::Adam(a);
}

}  // namespace

TrainResult train(nn::Model& model, const data::Dataset& train_set, const data::Dataset& test_set,
                  const TrainOptions& options, std::uint64_t seed, const StepHook& hook,
                  const EpochHook& after_epoch) {
  options.validate();
  if (train_set.size() < 1) throw data::DataError("training set is empty");
  std::mt19937_64 rng(seed);
  const std::int64_t batch = std::min(options.batch_size, train_set.size());
  const std::int64_t full_pass = (train_set.size() + batch - 1) / batch;
  const std::int64_t per_epoch = options.steps_per_epoch > 0 ? options.steps_per_epoch : full_pass;

  optim::Schedule schedule;
  schedule.kind = options.schedule;
  schedule.base_lr = options.lr;
  schedule.total_steps = per_epoch * options.epochs;
  schedule.warmup_steps = options.warmup_steps;

  Optimizer opt = make_optimizer(options);
  std::vector<Tensor> params = model.params();
  TrainResult result;
  std::vector<std::vector<std::int64_t>> order;
  std::size_t cursor = 0;

  for (std::int64_t epoch = 1; epoch <= options.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    if (result.diverged) {
      rec.train_loss = std::numeric_limits<Real>::quiet_NaN();
      rec.test_loss = std::numeric_limits<Real>::quiet_NaN();
      rec.steps = result.steps;
      result.epochs.push_back(rec);
      continue;
    }
    Real loss_sum = 0;
    std::int64_t taken = 0;
    for (std::int64_t k = 0; k < per_epoch; ++k) {
      if (cursor >= order.size()) {
        order = data::epoch_batches(train_set.size(), batch, rng);
        cursor = 0;
      }
      data::Batch b = train_set.batch(order[cursor++]);
      if (options.augment && train_set.kind() != data::DatasetKind::synth_seq) data::augment_crop_flip(b, rng);

      ad::Tape tape;
      std::vector<Tensor> vars;
      vars.reserve(params.size());
      for (const auto& p : params) vars.push_back(tape.variable(p));
      const auto fwd = model.forward(b, vars, nn::Mode::train);
      const Real loss = fwd.loss.item();
      if (!std::isfinite(loss)) {
        result.diverged = true;
        result.diverged_at_step = result.steps;
        break;
      }
      std::vector<Tensor> grads = ad::backward(tape, fwd.loss, vars).entries;
      for (auto& g : grads) g = g.detached();
      if (options.clip_norm > 0) optim::clip_global_norm(grads, options.clip_norm);
      const Real lr = optim::lr_at(schedule, result.steps);
      std::visit([&](auto& o) { o.step(params, grads, lr); }, opt);
      model.set_params(params);
      model.update_running_stats(fwd);
      ++result.steps;
      ++taken;
      loss_sum += loss;
      if (hook) hook(result.steps, loss);
    }
    rec.steps = result.steps;
    if (result.diverged) {
      rec.train_loss = std::numeric_limits<Real>::quiet_NaN();
      rec.test_loss = std::numeric_limits<Real>::quiet_NaN();
    } else {
      rec.train_loss = loss_sum / static_cast<Real>(std::max<std::int64_t>(taken, 1));
      const Evaluation ev = evaluate(model, test_set, options.eval_batch_size);
      rec.test_loss = ev.loss;
      rec.test_accuracy = std::isfinite(ev.loss) ? ev.accuracy : 0;
    }
    result.epochs.push_back(rec);
    if (after_epoch && epoch < options.epochs && after_epoch(rec)) {
      result.stopped_early = true;
      break;
    }
  }
  result.acc_first = result.epochs.front().test_accuracy;
  for (const auto& e : result.epochs) result.acc_best = std::max(result.acc_best, e.test_accuracy);
  return result;
}

}  // namespace gi::harness
