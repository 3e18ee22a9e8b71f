#pragma once

#include <Eigen/Dense>

#include <cmath>

#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace tpt {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixT<double>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_string(const Shape& shape);

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Dense row-major array of doubles with an n-dimensional shape.
///
/// Storage is a matrix view of (product of leading dims) x (last dim), so a
/// rank-2 tensor is exactly its matrix, a vector of length d is 1 x d and a
/// scalar (empty shape) is 1 x 1. Every primitive works on that view.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, RowMatrix data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(double value);
  static Tensor matrix(RowMatrix data);
  static Tensor vector(std::span<const double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(Index rows, Index cols, std::initializer_list<double> row_major);

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return data_.size(); }
  Index rows() const noexcept { return data_.rows(); }
  Index cols() const noexcept { return data_.cols(); }

  RowMatrix& mat() noexcept { return data_; }
  const RowMatrix& mat() const noexcept { return data_; }
  std::span<double> data() noexcept { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const double> data() const noexcept {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }
  double& operator[](Index i) { return data_.data()[i]; }
  double operator[](Index i) const { return data_.data()[i]; }

  double item() const;
  Tensor reshaped(Shape shape) const;
  // x * 0 is NaN exactly for NaN and +-Inf, and the sum vectorizes.
  bool all_finite() const { return !std::isnan((data_.array() * 0.0).sum()); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  RowMatrix data_;
};

}  // namespace tpt
