#include "attmil/tensor.hpp"

#include "attmil/errors.hpp"

#include <sstream>

namespace attmil {

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("shape " + shape_string(shape) + " has a non-positive extent");
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_ = Eigen::VectorXd::Zero(shape_numel(shape_));
}

Tensor::Tensor(Shape shape, Eigen::VectorXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values) {
  Eigen::VectorXd v(static_cast<Index>(values.size()));
  Index i = 0;
  for (double x : values) v[i++] = x;
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t({m.rows(), m.cols()});
  t.matrix() = m;
  return t;
}

Tensor Tensor::from_vector(const Eigen::VectorXd& v) { return Tensor({v.size()}, v); }

RowMatrixMap Tensor::matrix() {
  if (shape_.empty()) return matrix(1, 1);
  return matrix(shape_[0], numel() / shape_[0]);
}

ConstRowMatrixMap Tensor::matrix() const {
  if (shape_.empty()) return matrix(1, 1);
  return matrix(shape_[0], numel() / shape_[0]);
}

RowMatrixMap Tensor::matrix(Index rows, Index cols) {
  if (rows * cols != numel()) throw DimensionError("cannot view " + shape_string(shape_) + " as matrix");
  return RowMatrixMap(data_.data(), rows, cols);
}

ConstRowMatrixMap Tensor::matrix(Index rows, Index cols) const {
  if (rows * cols != numel()) throw DimensionError("cannot view " + shape_string(shape_) + " as matrix");
  return ConstRowMatrixMap(data_.data(), rows, cols);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const { return data_.allFinite(); }

}  // namespace attmil
