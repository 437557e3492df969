#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "robayes/tensor.hpp"

namespace robayes {

class Tape;

// Handle to a value recorded on a Tape. Copies are cheap; the value itself
// lives on the tape and is immutable once recorded.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Result of a backward pass: gradients keyed by node id. Nodes that did not
// influence the root report a zero gradient of the node's shape.
class GradientMap {
 public:
  Tensor at(const Var& v) const;
  bool influenced(const Var& v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

// Reverse-mode differentiation record. Nodes are appended in evaluation
// order, so every parent index is smaller than its child's; the backward
// pass walks ids in strictly decreasing order. A Tape is single-threaded;
// distinct Tapes may run on distinct threads.
class Tape {
 public:
  // Given (tape, value of this node, gradient of root w.r.t. this node),
  // returns gradients w.r.t. each parent, aligned with the parents list.
  using BackwardFn =
      std::function<std::vector<Tensor>(const Tape&, const Tensor&, const Tensor&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // leaf with no parents; gradients accumulate here
  Var leaf(Tensor value);
  // recorded intermediate node
  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  // root must be scalar-valued (size 1)
  GradientMap backward(const Var& root) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn back;
  };
  std::vector<Node> nodes_;
};

// ---- recorded operations ------------------------------------------------
//
// Elementwise binaries accept equal shapes, or broadcast the smaller operand
// when its shape is a trailing suffix of the larger one (leading batch axis)
// or when it has a single element.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// [n, k] x [k, p] -> [n, p]
Var matmul(const Var& a, const Var& b);

// elementwise x^p for real p (callers keep x positive for fractional p)
Var scalar_pow(const Var& x, double p);
Var vexp(const Var& x);
// log(max(x, 1e-30)); never errors, gradient is zero on the clamped branch
Var log_clamped(const Var& x);
Var softplus(const Var& x);
Var elu(const Var& x, double alpha = 1.0);
Var clamp_min(const Var& x, double floor);
// scale * x + shift with constant coefficients
Var affine(const Var& x, double scale, double shift = 0.0);

Var sum(const Var& x);                           // -> scalar
Var sum_axis(const Var& x, std::size_t axis);    // drops the reduced axis
Var mean(const Var& x);                          // -> scalar
Var logsumexp(const Var& x, std::size_t axis);   // shift-stable

// joins k same-shaped parts along a new leading axis -> [k, ...]
Var stack0(std::span<const Var> parts);
// contiguous range of a rank-1 vector, viewed with the given shape
Var segment(const Var& x, std::size_t offset, Shape shape);
Var reshape(const Var& x, Shape shape);
// x[i, column[i]] for each row of a rank-2 tensor -> [n]
Var take_per_row(const Var& x, const std::vector<std::size_t>& column);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator-(const Var& x) { return affine(x, -1.0); }
inline Var operator*(double s, const Var& x) { return affine(x, s); }
inline Var operator*(const Var& x, double s) { return affine(x, s); }

constexpr double kLogClampFloor = 1e-30;

}  // namespace robayes
