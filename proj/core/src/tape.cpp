#include "robayes/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace robayes {

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

Tape* common_tape(const char* op, const Var& a, const Var& b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands must live on one tape");
  }
  return a.tape();
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// which operand broadcasts: 0 = neither, 1 = a is small, 2 = b is small
int bcast_mode(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return 0;
  if (shape_numel(b) == 1 || is_suffix(a, b)) return 2;
  if (shape_numel(a) == 1 || is_suffix(b, a)) return 1;
  shape_error(op, a, b);
}

// sum a full-sized gradient down to the broadcast operand's shape
Tensor reduce_to(const Tensor& up, const Shape& small_shape) {
  Tensor g(small_shape);
  const std::size_t s = g.size();
  if (s == 1) {
    double acc = 0.0;
    for (std::size_t i = 0; i < up.size(); ++i) acc += up[i];
    g[0] = acc;
  } else {
    for (std::size_t i = 0; i < up.size(); ++i) g[i % s] += up[i];
  }
  return g;
}

struct AxisSplit {
  std::size_t outer, axis, inner;
};

AxisSplit split_axis(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

}  // namespace

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("Var::value on a detached handle");
  return tape_->value(id_);
}

Tensor GradientMap::at(const Var& v) const {
  if (v.tape() != tape_) throw std::invalid_argument("GradientMap::at: Var from another tape");
  if (v.id() < grads_.size() && grads_[v.id()].has_value()) return *grads_[v.id()];
  return Tensor::zeros(tape_->value(v.id()).shape());
}

bool GradientMap::influenced(const Var& v) const {
  return v.tape() == tape_ && v.id() < grads_.size() && grads_[v.id()].has_value();
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw std::logic_error("Tape::record: parent id out of range");
  }
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

GradientMap Tape::backward(const Var& root) const {
  if (root.tape() != this) throw std::invalid_argument("backward: root from another tape");
  if (nodes_[root.id()].value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                shape_str(nodes_[root.id()].value.shape()));
  }
  GradientMap out;
  out.tape_ = this;
  out.grads_.resize(nodes_.size());
  out.grads_[root.id()] = Tensor::full(nodes_[root.id()].value.shape(), 1.0);

  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (!out.grads_[i].has_value()) continue;
    const Node& node = nodes_[i];
    if (!node.back) continue;
    std::vector<Tensor> pgrads = node.back(*this, node.value, *out.grads_[i]);
    if (pgrads.size() != node.parents.size()) {
      throw std::logic_error("backward: op returned wrong number of parent gradients");
    }
    for (std::size_t j = 0; j < pgrads.size(); ++j) {
      const std::size_t pid = node.parents[j];
      if (!pgrads[j].same_shape(nodes_[pid].value)) {
        throw std::logic_error("backward: gradient shape " + shape_str(pgrads[j].shape()) +
                               " does not match parent shape " +
                               shape_str(nodes_[pid].value.shape()));
      }
      if (!out.grads_[pid].has_value()) {
        out.grads_[pid] = std::move(pgrads[j]);
      } else {
        Tensor& acc = *out.grads_[pid];
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += pgrads[j][k];
      }
    }
  }
  return out;
}

// ---- elementwise binaries -------------------------------------------------

namespace {

template <typename Fwd>
Tensor binary_forward(int mode, const Tensor& a, const Tensor& b, Fwd f) {
  const Tensor& big = (mode == 1) ? b : a;
  Tensor out(big.shape());
  const std::size_t sa = a.size(), sb = b.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double av = (mode == 1) ? a[i % sa] : a[i];
    const double bv = (mode == 2) ? b[i % sb] : b[i];
    out[i] = f(av, bv);
  }
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape* tape = common_tape("add", a, b);
  const int mode = bcast_mode("add", a.shape(), b.shape());
  Tensor out = binary_forward(mode, a.value(), b.value(), [](double x, double y) { return x + y; });
  const Shape as = a.shape(), bs = b.shape();
  return tape->record(
      std::move(out), {a.id(), b.id()},
      [mode, as, bs](const Tape&, const Tensor&, const Tensor& up) {
        Tensor ga = (mode == 1) ? reduce_to(up, as) : up;
        Tensor gb = (mode == 2) ? reduce_to(up, bs) : up;
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      });
}

Var sub(const Var& a, const Var& b) {
  Tape* tape = common_tape("sub", a, b);
  const int mode = bcast_mode("sub", a.shape(), b.shape());
  Tensor out = binary_forward(mode, a.value(), b.value(), [](double x, double y) { return x - y; });
  const Shape as = a.shape(), bs = b.shape();
  return tape->record(
      std::move(out), {a.id(), b.id()},
      [mode, as, bs](const Tape&, const Tensor&, const Tensor& up) {
        Tensor neg(up.shape());
        for (std::size_t i = 0; i < up.size(); ++i) neg[i] = -up[i];
        Tensor ga = (mode == 1) ? reduce_to(up, as) : up;
        Tensor gb = (mode == 2) ? reduce_to(neg, bs) : std::move(neg);
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      });
}

Var mul(const Var& a, const Var& b) {
  Tape* tape = common_tape("mul", a, b);
  const int mode = bcast_mode("mul", a.shape(), b.shape());
  Tensor out = binary_forward(mode, a.value(), b.value(), [](double x, double y) { return x * y; });
  const std::size_t aid = a.id(), bid = b.id();
  return tape->record(
      std::move(out), {aid, bid},
      [mode, aid, bid](const Tape& t, const Tensor&, const Tensor& up) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        const std::size_t sa = av.size(), sb = bv.size();
        Tensor ga(av.shape());
        Tensor gb(bv.shape());
        for (std::size_t i = 0; i < up.size(); ++i) {
          const double x = (mode == 1) ? av[i % sa] : av[i];
          const double y = (mode == 2) ? bv[i % sb] : bv[i];
          if (mode == 1) {
            ga[i % sa] += up[i] * y;
          } else {
            ga[i] = up[i] * y;
          }
          if (mode == 2) {
            gb[i % sb] += up[i] * x;
          } else {
            gb[i] = up[i] * x;
          }
        }
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      });
}

// ---- matmul ----------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape* tape = common_tape("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    shape_error("matmul", av.shape(), bv.shape());
  }
  const std::size_t n = av.dim(0), k = av.dim(1), p = bv.dim(1);
  Tensor out(Shape{n, p});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + kk * p;
      double* orow = out.data() + i * p;
      for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
    }
  }
  const std::size_t aid = a.id(), bid = b.id();
  return tape->record(
      std::move(out), {aid, bid},
      [aid, bid, n, k, p](const Tape& t, const Tensor&, const Tensor& up) {
        const Tensor& av = t.value(aid);
        const Tensor& bv = t.value(bid);
        Tensor ga(Shape{n, k});
        Tensor gb(Shape{k, p});
        // ga = up * b^T
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* urow = up.data() + i * p;
            const double* brow = bv.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) acc += urow[j] * brow[j];
            ga[i * k + kk] = acc;
          }
        }
        // gb = a^T * up
        for (std::size_t i = 0; i < n; ++i) {
          const double* urow = up.data() + i * p;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = av[i * k + kk];
            if (aik == 0.0) continue;
            double* grow = gb.data() + kk * p;
            for (std::size_t j = 0; j < p; ++j) grow[j] += aik * urow[j];
          }
        }
        return std::vector<Tensor>{std::move(ga), std::move(gb)};
      });
}

// ---- elementwise unaries ----------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Var unary(const char* op, const Var& x, Fwd f, Bwd dfdx) {
  Tape* tape = x.tape();
  if (tape == nullptr) throw std::invalid_argument(std::string(op) + ": detached operand");
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return tape->record(std::move(out), {xid},
                      [xid, dfdx](const Tape& t, const Tensor& self, const Tensor& up) {
                        const Tensor& xv = t.value(xid);
                        Tensor g(xv.shape());
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          g[i] = up[i] * dfdx(xv[i], self[i]);
                        }
                        return std::vector<Tensor>{std::move(g)};
                      });
}

}  // namespace

Var scalar_pow(const Var& x, double p) {
  return unary(
      "scalar_pow", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Var vexp(const Var& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var log_clamped(const Var& x) {
  return unary(
      "log_clamped", x,
      [](double v) { return std::log(std::max(v, kLogClampFloor)); },
      [](double v, double) { return v > kLogClampFloor ? 1.0 / v : 0.0; });
}

Var softplus(const Var& x) {
  return unary(
      "softplus", x, [](double v) { return softplus_scalar(v); },
      [](double v, double) { return sigmoid(v); });
}

Var elu(const Var& x, double alpha) {
  return unary(
      "elu", x,
      [alpha](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
      [alpha](double v, double) { return v > 0.0 ? 1.0 : alpha * std::exp(v); });
}

Var clamp_min(const Var& x, double floor) {
  return unary(
      "clamp_min", x, [floor](double v) { return std::max(v, floor); },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

Var affine(const Var& x, double scale, double shift) {
  return unary(
      "affine", x, [scale, shift](double v) { return scale * v + shift; },
      [scale](double, double) { return scale; });
}

// ---- reductions -------------------------------------------------------------

Var sum(const Var& x) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const Shape xs = xv.shape();
  return tape->record(Tensor::scalar(acc), {x.id()},
                      [xs](const Tape&, const Tensor&, const Tensor& up) {
                        return std::vector<Tensor>{Tensor::full(xs, up[0])};
                      });
}

Var mean(const Var& x) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  if (xv.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const Shape xs = xv.shape();
  const double inv = 1.0 / static_cast<double>(xv.size());
  return tape->record(Tensor::scalar(acc * inv), {x.id()},
                      [xs, inv](const Tape&, const Tensor&, const Tensor& up) {
                        return std::vector<Tensor>{Tensor::full(xs, up[0] * inv)};
                      });
}

Var sum_axis(const Var& x, std::size_t axis) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis("sum_axis", xv.shape(), axis);
  Tensor out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.axis; ++a) {
      const double* src = xv.data() + (o * s.axis + a) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  const Shape xs = xv.shape();
  return tape->record(std::move(out), {x.id()},
                      [xs, s](const Tape&, const Tensor&, const Tensor& up) {
                        Tensor g(xs);
                        for (std::size_t o = 0; o < s.outer; ++o) {
                          for (std::size_t a = 0; a < s.axis; ++a) {
                            const double* src = up.data() + o * s.inner;
                            double* dst = g.data() + (o * s.axis + a) * s.inner;
                            for (std::size_t i = 0; i < s.inner; ++i) dst[i] = src[i];
                          }
                        }
                        return std::vector<Tensor>{std::move(g)};
                      });
}

Var logsumexp(const Var& x, std::size_t axis) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis("logsumexp", xv.shape(), axis);
  Tensor out(drop_axis(xv.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.axis; ++a) {
        m = std::max(m, xv[(o * s.axis + a) * s.inner + i]);
      }
      double acc = 0.0;
      for (std::size_t a = 0; a < s.axis; ++a) {
        acc += std::exp(xv[(o * s.axis + a) * s.inner + i] - m);
      }
      out[o * s.inner + i] = m + std::log(acc);
    }
  }
  const std::size_t xid = x.id();
  return tape->record(std::move(out), {xid},
                      [xid, s](const Tape& t, const Tensor& self, const Tensor& up) {
                        const Tensor& xv = t.value(xid);
                        Tensor g(xv.shape());
                        for (std::size_t o = 0; o < s.outer; ++o) {
                          for (std::size_t i = 0; i < s.inner; ++i) {
                            const double y = self[o * s.inner + i];
                            const double u = up[o * s.inner + i];
                            for (std::size_t a = 0; a < s.axis; ++a) {
                              const std::size_t idx = (o * s.axis + a) * s.inner + i;
                              g[idx] = u * std::exp(xv[idx] - y);
                            }
                          }
                        }
                        return std::vector<Tensor>{std::move(g)};
                      });
}

// ---- structural ops -----------------------------------------------------------

Var stack0(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("stack0: no parts");
  Tape* tape = parts[0].tape();
  const Shape part_shape = parts[0].shape();
  const std::size_t part_size = parts[0].value().size();
  std::vector<std::size_t> parents;
  parents.reserve(parts.size());
  Shape out_shape{parts.size()};
  out_shape.insert(out_shape.end(), part_shape.begin(), part_shape.end());
  Tensor out(out_shape);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (parts[k].tape() != tape) throw std::invalid_argument("stack0: parts from different tapes");
    if (parts[k].shape() != part_shape) {
      shape_error("stack0", part_shape, parts[k].shape());
    }
    const Tensor& pv = parts[k].value();
    std::copy(pv.data(), pv.data() + part_size, out.data() + k * part_size);
    parents.push_back(parts[k].id());
  }
  const std::size_t k_parts = parts.size();
  return tape->record(std::move(out), std::move(parents),
                      [k_parts, part_shape, part_size](const Tape&, const Tensor&,
                                                       const Tensor& up) {
                        std::vector<Tensor> grads;
                        grads.reserve(k_parts);
                        for (std::size_t k = 0; k < k_parts; ++k) {
                          Tensor g(part_shape);
                          std::copy(up.data() + k * part_size, up.data() + (k + 1) * part_size,
                                    g.data());
                          grads.push_back(std::move(g));
                        }
                        return grads;
                      });
}

Var segment(const Var& x, std::size_t offset, Shape shape) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 1) {
    throw std::invalid_argument("segment: expects a rank-1 tensor, got " +
                                shape_str(xv.shape()));
  }
  const std::size_t len = shape_numel(shape);
  if (offset + len > xv.size()) {
    throw std::invalid_argument("segment: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + len) + ") exceeds length " +
                                std::to_string(xv.size()));
  }
  Tensor out(shape, std::vector<double>(xv.data() + offset, xv.data() + offset + len));
  const Shape xs = xv.shape();
  return tape->record(std::move(out), {x.id()},
                      [xs, offset, len](const Tape&, const Tensor&, const Tensor& up) {
                        Tensor g(xs);
                        std::copy(up.data(), up.data() + len, g.data() + offset);
                        return std::vector<Tensor>{std::move(g)};
                      });
}

Var reshape(const Var& x, Shape shape) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  if (shape_numel(shape) != xv.size()) {
    shape_error("reshape", xv.shape(), shape);
  }
  Tensor out(shape, xv.vec());
  const Shape xs = xv.shape();
  return tape->record(std::move(out), {x.id()},
                      [xs](const Tape&, const Tensor&, const Tensor& up) {
                        return std::vector<Tensor>{Tensor(xs, up.vec())};
                      });
}

Var take_per_row(const Var& x, const std::vector<std::size_t>& column) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || column.size() != xv.dim(0)) {
    throw std::invalid_argument("take_per_row: shape " + shape_str(xv.shape()) +
                                " with " + std::to_string(column.size()) + " indices");
  }
  const std::size_t n = xv.dim(0), k = xv.dim(1);
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    if (column[i] >= k) throw std::invalid_argument("take_per_row: column index out of range");
    out[i] = xv[i * k + column[i]];
  }
  const Shape xs = xv.shape();
  return tape->record(std::move(out), {x.id()},
                      [xs, column, k](const Tape&, const Tensor&, const Tensor& up) {
                        Tensor g(xs);
                        for (std::size_t i = 0; i < up.size(); ++i) {
                          g[i * k + column[i]] = up[i];
                        }
                        return std::vector<Tensor>{std::move(g)};
                      });
}

}  // namespace robayes
