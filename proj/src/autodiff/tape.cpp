#include "gradinit/autodiff/tape.hpp"

#include <stdexcept>

#include "gradinit/autodiff/ops.hpp"

namespace gi::ad {

Tensor Tape::variable(const Tensor& value) {
  if (!value.defined()) throw std::invalid_argument("variable() of undefined tensor");
  Tensor t = value.detached();
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{"leaf", {}, value.shape(), nullptr});
  return t;
}

Tensor Tape::record(Tensor value, std::string op, const std::vector<Tensor>& inputs,
                    BackwardFn backward) {
  value.tape_ = nullptr;
  value.node_ = -1;
  bool on_tape = false;
  for (const auto& in : inputs) {
    if (!in.has_node()) continue;
    if (in.tape() != this) throw std::logic_error("op '" + op + "' mixes tensors from two tapes");
    on_tape = true;
  }
  if (!on_tape || !recording_) return value;

  Node node;
  node.op = std::move(op);
  node.shape = value.shape();
  node.backward = std::move(backward);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.has_node() ? in.node() : -1);
  value.tape_ = this;
  value.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return value;
}

std::vector<Tensor> Tape::gradients(const Tensor& output, const std::vector<Tensor>& wrt,
                                    bool create_graph) {
  if (output.size() != 1) {
    throw std::invalid_argument("backward requires a scalar output, got shape " +
                                shape_str(output.shape()));
  }
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    if (!wrt[k].has_node() || wrt[k].tape() != this) {
      throw std::invalid_argument("backward target " + std::to_string(k) + " is not on this tape");
    }
  }
  if (create_graph && !options_.higher_order) {
    throw std::logic_error("tape configured without higher-order support");
  }

  std::vector<Tensor> result(wrt.size());
  auto fill_zeros = [&] {
    for (std::size_t k = 0; k < wrt.size(); ++k) {
      if (!result[k].defined()) result[k] = Tensor::zeros(wrt[k].shape());
    }
  };
  // A constant output (no node, or a node from another tape) has zero gradient.
  if (!output.has_node() || output.tape() != this) {
    fill_zeros();
    return result;
  }

  const int out = output.node();
  const auto n = static_cast<std::size_t>(out) + 1;
  std::vector<char> is_target(n, 0), reaches(n, 0);
  for (const auto& w : wrt) {
    if (w.node() <= out) is_target[static_cast<std::size_t>(w.node())] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (is_target[i]) {
      reaches[i] = 1;
      continue;
    }
    for (int in : nodes_[i].inputs) {
      if (in >= 0 && reaches[static_cast<std::size_t>(in)]) {
        reaches[i] = 1;
        break;
      }
    }
  }

  if (create_graph) ++generation_;
  RecordingGuard guard(*this, create_graph);

  std::vector<Tensor> grads(n);
  if (reaches[static_cast<std::size_t>(out)]) grads[static_cast<std::size_t>(out)] =
      Tensor::full(output.shape(), Real(1));

  for (int i = out; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    if (!grads[ui].defined() || !nodes_[ui].backward) continue;
    const std::vector<int> inputs = nodes_[ui].inputs;
    std::vector<bool> needs(inputs.size(), false);
    bool any = false;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      needs[k] = inputs[k] >= 0 && reaches[static_cast<std::size_t>(inputs[k])];
      any = any || needs[k];
    }
    if (!any) continue;
    const BackwardFn fn = nodes_[ui].backward;
    std::vector<Tensor> local = fn(grads[ui], needs);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (!needs[k] || k >= local.size() || !local[k].defined()) continue;
      auto& slot = grads[static_cast<std::size_t>(inputs[k])];
      slot = slot.defined() ? add(slot, local[k]) : local[k];
    }
    if (!is_target[ui]) grads[ui] = Tensor();
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const int id = wrt[k].node();
    if (id <= out && grads[static_cast<std::size_t>(id)].defined()) {
      result[k] = grads[static_cast<std::size_t>(id)];
    }
  }
  fill_zeros();
  return result;
}

}  // namespace gi::ad
