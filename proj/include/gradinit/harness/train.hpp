#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradinit/data/dataset.hpp"
#include "gradinit/nn/model.hpp"
#include "gradinit/optim/optim.hpp"

namespace gi::harness {

using ad::Tensor;

/// Non-finite values where the caller asked for them to be fatal.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { sgd, adam, adamw };
std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct TrainOptions {
  OptimizerKind optimizer = OptimizerKind::sgd;
  Real lr = Real(0.1);
  Real momentum = Real(0.9);
  Real weight_decay = Real(1e-4);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  optim::ScheduleKind schedule = optim::ScheduleKind::cosine;
  std::int64_t warmup_steps = 0;
  std::int64_t epochs = 1;
  // 0 walks the whole training set once per epoch.
  std::int64_t steps_per_epoch = 0;
  std::int64_t batch_size = 128;
  Real clip_norm = 0;  // 0 disables clipping
  bool augment = false;
  std::int64_t eval_batch_size = 500;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based
  Real train_loss = 0;     // mean over the epoch's steps; NaN once diverged
  Real test_loss = 0;
  Real test_accuracy = 0;
  std::int64_t steps = 0;  // cumulative
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  Real acc_first = 0;
  Real acc_best = 0;
  std::int64_t steps = 0;
  // A step produced a non-finite loss; training stopped there and later
  // epochs report accuracy 0.
  bool diverged = false;
  std::optional<std::int64_t> diverged_at_step;
  // An epoch hook asked to stop; fewer epochs than configured are recorded.
  bool stopped_early = false;
};

struct Evaluation {
  Real loss = 0;
  Real accuracy = 0;  // tokens for the sequence task
};

/// Eval-mode pass over the whole dataset in fixed-size chunks.
Evaluation evaluate(const nn::Model& model, const data::Dataset& dataset, std::int64_t batch_size = 500);

/// Called after every optimizer step with (step, loss).
using StepHook = std::function<void(std::int64_t, Real)>;

/// Called after each epoch's evaluation; returning true ends training.
using EpochHook = std::function<bool(const EpochRecord&)>;

/// Trains in place. Deterministic given `seed`; single-threaded.
TrainResult train(nn::Model& model, const data::Dataset& train_set, const data::Dataset& test_set,
                  const TrainOptions& options, std::uint64_t seed, const StepHook& hook = {},
                  const EpochHook& after_epoch = {});

}  // namespace gi::harness
