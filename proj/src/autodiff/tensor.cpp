#include "gradinit/autodiff/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace gi {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

}  // namespace gi

namespace gi::ad {

Tensor::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<Real>>(std::move(data))) {
  if (static_cast<std::int64_t>(data_->size()) != numel(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(data_->size()) +
                                " does not match shape " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_ = std::make_shared<std::vector<Real>>(static_cast<std::size_t>(numel(shape_)), Real(0));
}

Tensor Tensor::zeros(const Shape& shape) { return Tensor(shape); }

Tensor Tensor::full(const Shape& shape, Real value) {
  return Tensor(shape, std::vector<Real>(static_cast<std::size_t>(numel(shape)), value));
}

Tensor Tensor::scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw std::out_of_range("axis out of range");
  return shape_[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

std::span<const Real> Tensor::data() const {
  if (!data_) return {};
  return {data_->data(), data_->size()};
}

std::span<Real> Tensor::mutable_data() {
  if (!data_) return {};
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<Real>>(*data_);
  return {data_->data(), data_->size()};
}

Real Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::view_as(Shape shape) const {
  if (numel(shape) != size()) {
    throw std::invalid_argument("cannot view " + shape_str(shape_) + " as " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  if (!data_) return {};
  return Tensor(shape_, *data_);
}

}  // namespace gi::ad
