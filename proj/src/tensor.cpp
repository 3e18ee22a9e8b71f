#include "tpt/tensor.hpp"

#include "tpt/errors.hpp"

#include <sstream>

namespace tpt {
namespace {

void view_dims(const Shape& shape, Index& rows, Index& cols) {
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_string(shape));
  }
  cols = shape.empty() ? 1 : shape.back();
  rows = shape_numel(shape) / cols;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  Index rows = 0, cols = 0;
  view_dims(shape_, rows, cols);
  data_ = RowMatrix::Zero(rows, cols);
}

Tensor::Tensor(Shape shape, RowMatrix data) : shape_(std::move(shape)), data_(std::move(data)) {
  Index rows = 0, cols = 0;
  view_dims(shape_, rows, cols);
  if (data_.size() != rows * cols) {
    throw DimensionError("data of " + std::to_string(data_.size()) + " elements does not fit shape " +
                         shape_string(shape_));
  }
  if (data_.rows() != rows) data_ = Eigen::Map<RowMatrix>(data_.data(), rows, cols).eval();
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_(0, 0) = value;
  return t;
}

Tensor Tensor::matrix(RowMatrix data) {
  Shape shape{data.rows(), data.cols()};
  return Tensor(std::move(shape), std::move(data));
}

Tensor Tensor::vector(std::span<const double> values) {
  Tensor t(Shape{static_cast<Index>(values.size())});
  std::copy(values.begin(), values.end(), t.data_.data());
  return t;
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return vector(std::span<const double>(values.begin(), values.size()));
}

Tensor Tensor::matrix(Index rows, Index cols, std::initializer_list<double> row_major) {
  if (static_cast<Index>(row_major.size()) != rows * cols) {
    throw DimensionError("initializer size does not match " + shape_string({rows, cols}));
  }
  Tensor t(Shape{rows, cols});
  std::copy(row_major.begin(), row_major.end(), t.data_.data());
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_(0, 0);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Index rows = 0, cols = 0;
  view_dims(shape, rows, cols);
  RowMatrix m = Eigen::Map<const RowMatrix>(data_.data(), rows, cols);
  return Tensor(std::move(shape), std::move(m));
}

}  // namespace tpt
