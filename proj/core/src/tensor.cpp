#include "robayes/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace robayes {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " expects " +
                                std::to_string(shape_numel(shape_)) + " elements, got " +
                                std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw std::invalid_argument("Tensor::item on shape " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace robayes
