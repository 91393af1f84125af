#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"

namespace gi::ad {

/// Local adjoint of a primitive. Receives the gradient of the node output and
/// a mask of which inputs need a gradient; returns one tensor per input
/// (undefined where not needed). Implementations must be written in terms of
/// recordable ops so that create_graph backward works.
using BackwardFn =
    std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& needs)>;

struct TapeOptions {
  bool higher_order = true;
};

/// Append-only record of a computation. One computation per tape; tapes are
/// single-owner and not thread-safe, but independent tapes may run in parallel.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<int> inputs;
    Shape shape;
    BackwardFn backward;
  };

  explicit Tape(TapeOptions options = {}) : options_(options) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node holding a copy-on-write view of `value`.
  Tensor variable(const Tensor& value);

  /// Attach `value` as the output of primitive `op`. Returns `value` unchanged
  /// (no node) when recording is off or no input is on this tape.
  Tensor record(Tensor value, std::string op, const std::vector<Tensor>& inputs,
                BackwardFn backward);

  /// Reverse sweep from scalar `output`; one gradient per entry of `wrt`
  /// (zeros where no path exists). With create_graph the returned tensors are
  /// recorded on this tape and can be differentiated again.
  std::vector<Tensor> gradients(const Tensor& output, const std::vector<Tensor>& wrt,
                                bool create_graph);

  bool recording() const { return recording_; }
  bool higher_order() const { return options_.higher_order; }
  /// Number of create_graph backward passes run on this tape.
  int generation() const { return generation_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

 private:
  friend class RecordingGuard;

  TapeOptions options_;
  std::vector<Node> nodes_;
  bool recording_ = true;
  int generation_ = 0;
};

/// Scoped override of a tape's recording flag.
class RecordingGuard {
 public:
  RecordingGuard(Tape& tape, bool recording) : tape_(tape), previous_(tape.recording_) {
    tape_.recording_ = recording;
  }
  ~RecordingGuard() { tape_.recording_ = previous_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

}  // namespace gi::ad
