#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace robayes {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense n-dimensional array of doubles, row-major. This is the carrier for
// every numeric object in the library: data batches, parameter vectors,
// gradients, prediction grids.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // rank-2 accessors
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  // value of a single-element tensor; throws otherwise
  double item() const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

}  // namespace robayes
