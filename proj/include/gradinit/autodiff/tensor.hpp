#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gi {

#ifdef GI_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

}  // namespace gi

namespace gi::ad {

class Tape;

/// Dense row-major tensor. Storage is shared between copies; a tensor that
/// carries a tape node participates in differentiation on that tape.
///
/// A tensor with a node must not outlive the tape that recorded it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<Real> data);
  explicit Tensor(Shape shape);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, Real value);
  static Tensor scalar(Real value);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t size() const;

  std::span<const Real> data() const;
  /// Writable view. Detaches from shared storage first, so callers never
  /// mutate values saved by a tape.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::int64_t flat_index) const { return data()[flat_index]; }

  bool has_node() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  /// Same values, no node.
  Tensor detached() const;
  /// Deep copy of the values, no node.
  Tensor clone() const;
  /// Shares storage under a new shape of equal element count, no node.
  Tensor view_as(Shape shape) const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<std::vector<Real>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

}  // namespace gi::ad
