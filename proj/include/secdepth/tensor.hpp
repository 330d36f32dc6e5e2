#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace secdepth {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::shared_ptr<std::vector<double>> grad;  // allocated for tape leaves
  Tape* tape = nullptr;
  std::int64_t node = -1;
};

}  // namespace detail

/// Dense f64 tensor, row-major, immutable after construction. A tensor may be
/// attached to a Tape, in which case operations on it are recorded for
/// reverse-mode differentiation.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->shape = {};
    impl_->data = {0.0};
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    check_finite_buffer(data, "tensor construction");
    if (shape_numel(shape) != data.size()) {
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  static Tensor full(Shape shape, double v) {
    std::vector<double> data(shape_numel(shape), v);
    return from(std::move(shape), std::move(data));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  const std::vector<double>& data() const { return impl_->data; }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item() requires a scalar tensor, got shape " +
                                  shape_str(shape()));
    }
    return impl_->data[0];
  }

  double at(std::size_t i) const { return impl_->data.at(i); }

  double at(std::size_t y, std::size_t x) const {
    require_rank(2, "at(y,x)");
    return impl_->data[y * impl_->shape[1] + x];
  }

  double at(std::size_t y, std::size_t x, std::size_t c) const {
    require_rank(3, "at(y,x,c)");
    return impl_->data[(y * impl_->shape[1] + x) * impl_->shape[2] + c];
  }

  bool on_tape() const { return impl_->tape != nullptr; }
  Tape* tape() const { return impl_->tape; }
  std::int64_t node() const { return impl_->node; }
  bool requires_grad() const { return impl_->grad != nullptr; }

  /// Leaf gradient accumulated by Tape::backward. Throws if this tensor is not
  /// a leaf created by Tape::variable.
  const std::vector<double>& grad() const {
    if (!impl_->grad) throw std::logic_error("tensor has no gradient buffer");
    return *impl_->grad;
  }

  /// Same data, detached from any tape; no gradients flow through the result.
  Tensor detach() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;

  void require_rank(std::size_t r, const char* what) const {
    if (impl_->shape.size() != r) {
      throw std::invalid_argument(std::string(what) + " on tensor of shape " +
                                  shape_str(shape()));
    }
  }

  static void check_finite_buffer(const std::vector<double>& d, const std::string& ctx) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i])) {
        throw std::domain_error("non-finite value at index " + std::to_string(i) + " in " + ctx);
      }
    }
  }

  friend class Tape;
  friend Tensor make_op_result(Shape, std::vector<double>, const std::string&,
                               std::initializer_list<const Tensor*>,
                               std::function<void(const double*, Tape&, const std::vector<std::int64_t>&)>);
};

/// Records one forward pass for reverse-mode differentiation. Single-owner,
/// consumed by exactly one backward() call.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Creates a differentiable leaf holding a copy of the data. Gradients for
  /// the leaf accumulate into its grad buffer on backward().
  Tensor variable(Shape shape, std::vector<double> data) {
    Tensor t = Tensor::from(std::move(shape), std::move(data));
    t.impl_->tape = this;
    t.impl_->grad = std::make_shared<std::vector<double>>(t.numel(), 0.0);
    auto impl = t.impl_;
    t.impl_->node = record(t.numel(), [impl](const double* adj, Tape&, const std::vector<std::int64_t>&) {
      auto& g = *impl->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += adj[i];
    });
    return t;
  }

  Tensor variable(const Tensor& value) { return variable(value.shape(), value.data()); }

  bool consumed() const { return consumed_; }

  /// Accumulates dLoss/dLeaf into every leaf's grad buffer and consumes the
  /// tape. The loss must be a scalar produced on this tape.
  void backward(const Tensor& loss) {
    if (consumed_) throw std::logic_error("backward on a consumed tape");
    if (loss.numel() != 1) {
      throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                  shape_str(loss.shape()));
    }
    if (loss.tape() != this || loss.node() < 0) {
      throw std::invalid_argument("loss tensor is not on this tape");
    }
    consumed_ = true;
    adjoints_.assign(nodes_.size(), {});
    adjoint_for(loss.node(), 1)[0] = 1.0;
    for (std::int64_t id = loss.node(); id >= 0; --id) {
      if (adjoints_[static_cast<std::size_t>(id)].empty()) continue;
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      n.pull(adjoints_[static_cast<std::size_t>(id)].data(), *this, n.inputs);
    }
    adjoints_.clear();
  }

  // -- primitive-op support --------------------------------------------------

  using PullFn = std::function<void(const double* out_adjoint, Tape& tape,
                                    const std::vector<std::int64_t>& input_nodes)>;

  std::int64_t record(std::size_t numel, PullFn pull, std::vector<std::int64_t> inputs = {}) {
    nodes_.push_back(Node{std::move(inputs), numel, std::move(pull)});
    return static_cast<std::int64_t>(nodes_.size()) - 1;
  }

  /// Adjoint accumulation buffer for a node, zero-initialized on first use.
  double* adjoint_for(std::int64_t node, std::size_t numel) {
    auto& buf = adjoints_[static_cast<std::size_t>(node)];
    if (buf.empty()) buf.assign(numel, 0.0);
    return buf.data();
  }

 private:
  struct Node {
    std::vector<std::int64_t> inputs;
    std::size_t numel;
    PullFn pull;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> adjoints_;
  bool consumed_ = false;
};

// -- op plumbing --------------------------------------------------------------

namespace detail {

inline void check_finite_result(const std::vector<double>& d, const std::string& op) {
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw std::domain_error("non-finite value at index " + std::to_string(i) +
                              " produced by " + op);
    }
  }
}

inline Tape* common_tape(std::initializer_list<const Tensor*> inputs, const std::string& op) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      throw std::invalid_argument(op + ": inputs belong to different tapes");
    }
  }
  return tape;
}

}  // namespace detail

/// Builds an op result: validates finiteness, and when any input lives on a
/// tape, records a node whose pull function receives the result's adjoint and
/// the input node ids (−1 for inputs not on the tape).
inline Tensor make_op_result(Shape shape, std::vector<double> data, const std::string& op,
                             std::initializer_list<const Tensor*> inputs,
                             Tape::PullFn pull) {
  detail::check_finite_result(data, op);
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  Tape* tape = detail::common_tape(inputs, op);
  if (tape == nullptr) return out;
  std::vector<std::int64_t> input_nodes;
  input_nodes.reserve(inputs.size());
  for (const Tensor* t : inputs) {
    input_nodes.push_back(t->on_tape() ? t->node() : -1);
  }
  out.impl_->tape = tape;
  out.impl_->node = tape->record(out.numel(), std::move(pull), std::move(input_nodes));
  return out;
}

// -- elementwise --------------------------------------------------------------

namespace detail {

// Shapes must be equal, or one operand must be a single-element (scalar) tensor.
enum class Broadcast { kNone, kLeftScalar, kRightScalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const std::string& op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.numel() == 1) return Broadcast::kLeftScalar;
  if (b.numel() == 1) return Broadcast::kRightScalar;
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
}

template <typename Fwd, typename Dl, typename Dr>
Tensor binary_op(const Tensor& a, const Tensor& b, const std::string& op, Fwd fwd, Dl dleft,
                 Dr dright) {
  const Broadcast bc = broadcast_kind(a, b, op);
  const Shape& out_shape = (bc == Broadcast::kLeftScalar) ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double av = (bc == Broadcast::kLeftScalar) ? ad[0] : ad[i];
    const double bv = (bc == Broadcast::kRightScalar) ? bd[0] : bd[i];
    fwd(i, av, bv, out[i]);
  }
  auto ai = a;  // keep values alive for the pull closure
  auto bi = b;
  return make_op_result(
      out_shape, std::move(out), op, {&a, &b},
      [ai, bi, bc, n, dleft, dright](const double* adj, Tape& tape,
                                     const std::vector<std::int64_t>& in) {
        const auto& ad = ai.data();
        const auto& bd = bi.data();
        if (in[0] >= 0) {
          double* ga = tape.adjoint_for(in[0], ai.numel());
          for (std::size_t i = 0; i < n; ++i) {
            const double av = (bc == Broadcast::kLeftScalar) ? ad[0] : ad[i];
            const double bv = (bc == Broadcast::kRightScalar) ? bd[0] : bd[i];
            ga[(bc == Broadcast::kLeftScalar) ? 0 : i] += adj[i] * dleft(av, bv);
          }
        }
        if (in[1] >= 0) {
          double* gb = tape.adjoint_for(in[1], bi.numel());
          for (std::size_t i = 0; i < n; ++i) {
            const double av = (bc == Broadcast::kLeftScalar) ? ad[0] : ad[i];
            const double bv = (bc == Broadcast::kRightScalar) ? bd[0] : bd[i];
            gb[(bc == Broadcast::kRightScalar) ? 0 : i] += adj[i] * dright(av, bv);
          }
        }
      });
}

template <typename Fwd, typename Dx>
Tensor unary_op(const Tensor& x, const std::string& op, Fwd fwd, Dx dx) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < n; ++i) fwd(i, xd[i], out[i]);
  auto xi = x;
  return make_op_result(x.shape(), std::move(out), op, {&x},
                        [xi, n, dx](const double* adj, Tape& tape,
                                    const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], n);
                          const auto& xd = xi.data();
                          for (std::size_t i = 0; i < n; ++i) gx[i] += adj[i] * dx(xd[i]);
                        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](std::size_t, double x, double y, double& o) { o = x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](std::size_t, double x, double y, double& o) { o = x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](std::size_t, double x, double y, double& o) { o = x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "div",
      [](std::size_t i, double x, double y, double& o) {
        if (y == 0.0) {
          throw std::domain_error("div: zero divisor at index " + std::to_string(i));
        }
        o = x / y;
      },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator/(double s, const Tensor& a) { return div(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, "exp", [](std::size_t, double v, double& o) { o = std::exp(v); },
      [](double v) { return std::exp(v); });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op(
      x, "log",
      [](std::size_t i, double v, double& o) {
        if (v <= 0.0) {
          throw std::domain_error("log: non-positive argument at index " + std::to_string(i));
        }
        o = std::log(v);
      },
      [](double v) { return 1.0 / v; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary_op(
      x, "abs", [](std::size_t, double v, double& o) { o = std::abs(v); },
      [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// max(x, c) elementwise; subgradient 0 at the hinge point.
inline Tensor max_with(const Tensor& x, double c) {
  return detail::unary_op(
      x, "max_with", [c](std::size_t, double v, double& o) { o = v > c ? v : c; },
      [c](double v) { return v > c ? 1.0 : 0.0; });
}

inline Tensor pow(const Tensor& x, double p) {
  return detail::unary_op(
      x, "pow",
      [p](std::size_t i, double v, double& o) {
        o = std::pow(v, p);
        if (!std::isfinite(o)) {
          throw std::domain_error("pow: non-finite result at index " + std::to_string(i));
        }
      },
      [p](double v) { return p * std::pow(v, p - 1.0); });
}

inline Tensor relu(const Tensor& x) { return max_with(x, 0.0); }

/// Numerically stable logistic sigmoid.
inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](std::size_t, double v, double& o) {
        o = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double v) {
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return s * (1.0 - s);
      });
}

// -- reductions ---------------------------------------------------------------

namespace detail {

inline void validate_axes(const Shape& shape, const std::vector<std::size_t>& axes,
                          const std::string& op) {
  if (axes.empty()) throw std::invalid_argument(op + ": empty reduction axis list");
  std::vector<bool> seen(shape.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= shape.size()) {
      throw std::invalid_argument(op + ": axis " + std::to_string(ax) +
                                  " out of range for shape " + shape_str(shape));
    }
    if (seen[ax]) throw std::invalid_argument(op + ": duplicate axis");
    seen[ax] = true;
  }
}

}  // namespace detail

/// Sum over the given axes; reduced dimensions are dropped.
inline Tensor sum(const Tensor& x, const std::vector<std::size_t>& axes) {
  detail::validate_axes(x.shape(), axes, "sum");
  const Shape& in_shape = x.shape();
  std::vector<bool> reduced(in_shape.size(), false);
  for (std::size_t ax : axes) reduced[ax] = true;
  Shape out_shape;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (!reduced[d]) out_shape.push_back(in_shape[d]);
  }
  const std::size_t out_n = shape_numel(out_shape);
  // Map each input flat index to its output flat index once.
  std::vector<std::size_t> in_strides(in_shape.size(), 1);
  for (std::size_t d = in_shape.size(); d-- > 1;) {
    in_strides[d - 1] = in_strides[d] * in_shape[d];
  }
  std::vector<std::size_t> out_strides;
  {
    std::vector<std::size_t> tmp(out_shape.size(), 1);
    for (std::size_t d = out_shape.size(); d-- > 1;) tmp[d - 1] = tmp[d] * out_shape[d];
    out_strides = std::move(tmp);
  }
  const std::size_t in_n = x.numel();
  std::vector<std::size_t> index_map(in_n);
  for (std::size_t i = 0; i < in_n; ++i) {
    std::size_t rem = i, oi = 0, od = 0;
    for (std::size_t d = 0; d < in_shape.size(); ++d) {
      const std::size_t coord = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduced[d]) oi += coord * out_strides[od++];
    }
    index_map[i] = oi;
  }
  std::vector<double> out(out_n, 0.0);
  const auto& xd = x.data();
  for (std::size_t i = 0; i < in_n; ++i) out[index_map[i]] += xd[i];
  return make_op_result(out_shape, std::move(out), "sum", {&x},
                        [in_n, map = std::move(index_map)](const double* adj, Tape& tape,
                                                           const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], in_n);
                          for (std::size_t i = 0; i < in_n; ++i) gx[i] += adj[map[i]];
                        });
}

/// Sum over all axes, yielding a scalar.
inline Tensor sum(const Tensor& x) {
  const std::size_t n = x.numel();
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op_result({}, {total}, "sum", {&x},
                        [n](const double* adj, Tape& tape, const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], n);
                          for (std::size_t i = 0; i < n; ++i) gx[i] += adj[0];
                        });
}

inline Tensor mean(const Tensor& x) {
  return sum(x) / static_cast<double>(x.numel());
}

inline Tensor mean(const Tensor& x, const std::vector<std::size_t>& axes) {
  detail::validate_axes(x.shape(), axes, "mean");
  std::size_t k = 1;
  for (std::size_t ax : axes) k *= x.shape()[ax];
  return sum(x, axes) / static_cast<double>(k);
}

/// Population variance: mean(x^2) − mean(x)^2.
inline Tensor variance(const Tensor& x) {
  Tensor m = mean(x);
  return mean(x * x) - m * m;
}

inline Tensor variance(const Tensor& x, const std::vector<std::size_t>& axes) {
  Tensor m = mean(x, axes);
  return mean(x * x, axes) - m * m;
}

// -- structural ops -----------------------------------------------------------

/// View of a contiguous range of a rank-1 tensor, reshaped.
inline Tensor slice_range(const Tensor& x, std::size_t offset, Shape shape) {
  if (x.shape().size() != 1) {
    throw std::invalid_argument("slice_range expects a rank-1 tensor");
  }
  const std::size_t len = shape_numel(shape);
  if (offset + len > x.numel()) {
    throw std::invalid_argument("slice_range out of bounds");
  }
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                          x.data().begin() + static_cast<std::ptrdiff_t>(offset + len));
  const std::size_t in_n = x.numel();
  return make_op_result(std::move(shape), std::move(out), "slice_range", {&x},
                        [offset, len, in_n](const double* adj, Tape& tape,
                                            const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], in_n);
                          for (std::size_t i = 0; i < len; ++i) gx[offset + i] += adj[i];
                        });
}

/// Extracts channel c of an H×W×C tensor as H×W×1.
inline Tensor slice_channel(const Tensor& x, std::size_t c) {
  if (x.shape().size() != 3) {
    throw std::invalid_argument("slice_channel expects an HxWxC tensor");
  }
  const std::size_t h = x.shape()[0], w = x.shape()[1], ch = x.shape()[2];
  if (c >= ch) throw std::invalid_argument("slice_channel: channel out of range");
  std::vector<double> out(h * w);
  const auto& xd = x.data();
  for (std::size_t p = 0; p < h * w; ++p) out[p] = xd[p * ch + c];
  const std::size_t in_n = x.numel();
  return make_op_result({h, w, 1}, std::move(out), "slice_channel", {&x},
                        [h, w, ch, c, in_n](const double* adj, Tape& tape,
                                            const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], in_n);
                          for (std::size_t p = 0; p < h * w; ++p) gx[p * ch + c] += adj[p];
                        });
}

/// Concatenates two H×W×C tensors along the channel axis.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[1] != b.shape()[1]) {
    throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  const std::size_t h = a.shape()[0], w = a.shape()[1];
  const std::size_t ca = a.shape()[2], cb = b.shape()[2];
  std::vector<double> out(h * w * (ca + cb));
  const auto& ad = a.data();
  const auto& bd = b.data();
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < ca; ++c) out[p * (ca + cb) + c] = ad[p * ca + c];
    for (std::size_t c = 0; c < cb; ++c) out[p * (ca + cb) + ca + c] = bd[p * cb + c];
  }
  return make_op_result({h, w, ca + cb}, std::move(out), "concat_channels", {&a, &b},
                        [h, w, ca, cb](const double* adj, Tape& tape,
                                       const std::vector<std::int64_t>& in) {
                          if (in[0] >= 0) {
                            double* ga = tape.adjoint_for(in[0], h * w * ca);
                            for (std::size_t p = 0; p < h * w; ++p)
                              for (std::size_t c = 0; c < ca; ++c)
                                ga[p * ca + c] += adj[p * (ca + cb) + c];
                          }
                          if (in[1] >= 0) {
                            double* gb = tape.adjoint_for(in[1], h * w * cb);
                            for (std::size_t p = 0; p < h * w; ++p)
                              for (std::size_t c = 0; c < cb; ++c)
                                gb[p * cb + c] += adj[p * (ca + cb) + ca + c];
                          }
                        });
}

/// Nearest-neighbor 2× spatial upsampling of an H×W×C tensor.
inline Tensor upsample2_nearest(const Tensor& x) {
  if (x.shape().size() != 3) {
    throw std::invalid_argument("upsample2_nearest expects an HxWxC tensor");
  }
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  std::vector<double> out(4 * h * w * c);
  const auto& xd = x.data();
  for (std::size_t y = 0; y < 2 * h; ++y) {
    for (std::size_t xx = 0; xx < 2 * w; ++xx) {
      const std::size_t src = ((y / 2) * w + (xx / 2)) * c;
      const std::size_t dst = (y * 2 * w + xx) * c;
      for (std::size_t k = 0; k < c; ++k) out[dst + k] = xd[src + k];
    }
  }
  return make_op_result({2 * h, 2 * w, c}, std::move(out), "upsample2_nearest", {&x},
                        [h, w, c](const double* adj, Tape& tape,
                                  const std::vector<std::int64_t>& in) {
                          if (in[0] < 0) return;
                          double* gx = tape.adjoint_for(in[0], h * w * c);
                          for (std::size_t y = 0; y < 2 * h; ++y)
                            for (std::size_t xx = 0; xx < 2 * w; ++xx) {
                              const std::size_t src = ((y / 2) * w + (xx / 2)) * c;
                              const std::size_t dst = (y * 2 * w + xx) * c;
                              for (std::size_t k = 0; k < c; ++k) gx[src + k] += adj[dst + k];
                            }
                        });
}

/// Adds a per-channel bias (shape [C]) to an H×W×C tensor.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.shape().size() != 3 || bias.shape().size() != 1 || bias.shape()[0] != x.shape()[2]) {
    throw std::invalid_argument("bias_add: expected HxWxC and [C] tensors");
  }
  const std::size_t hw = x.shape()[0] * x.shape()[1], c = x.shape()[2];
  std::vector<double> out(x.data());
  const auto& bd = bias.data();
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] += bd[k];
  return make_op_result(x.shape(), std::move(out), "bias_add", {&x, &bias},
                        [hw, c](const double* adj, Tape& tape,
                                const std::vector<std::int64_t>& in) {
                          if (in[0] >= 0) {
                            double* gx = tape.adjoint_for(in[0], hw * c);
                            for (std::size_t i = 0; i < hw * c; ++i) gx[i] += adj[i];
                          }
                          if (in[1] >= 0) {
                            double* gb = tape.adjoint_for(in[1], c);
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k) gb[k] += adj[p * c + k];
                          }
                        });
}

// -- convolution --------------------------------------------------------------

enum class PadMode { kZero, kReplicate };

/// 2-D cross-correlation on an H×W×Cin input with a Kh×Kw×Cin×Cout kernel.
/// Differentiable w.r.t. both input and kernel.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad,
                     PadMode mode = PadMode::kZero) {
  if (x.shape().size() != 3) throw std::invalid_argument("conv2d expects an HxWxC input");
  if (kernel.shape().size() != 4) {
    throw std::invalid_argument("conv2d expects a KhxKwxCinxCout kernel");
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t h = x.shape()[0], w = x.shape()[1], cin = x.shape()[2];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1];
  if (kernel.shape()[2] != cin) {
    throw std::invalid_argument("conv2d: kernel input channels " +
                                std::to_string(kernel.shape()[2]) + " != input channels " +
                                std::to_string(cin));
  }
  const std::size_t cout = kernel.shape()[3];
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

  const auto& xd = x.data();
  const auto& kd = kernel.data();
  std::vector<double> out(oh * ow * cout, 0.0);
  const auto sample_index = [h, w, cin, mode](std::ptrdiff_t iy, std::ptrdiff_t ix) -> std::ptrdiff_t {
    if (mode == PadMode::kReplicate) {
      iy = std::min<std::ptrdiff_t>(std::max<std::ptrdiff_t>(iy, 0), static_cast<std::ptrdiff_t>(h) - 1);
      ix = std::min<std::ptrdiff_t>(std::max<std::ptrdiff_t>(ix, 0), static_cast<std::ptrdiff_t>(w) - 1);
      return (iy * static_cast<std::ptrdiff_t>(w) + ix) * static_cast<std::ptrdiff_t>(cin);
    }
    if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
        ix >= static_cast<std::ptrdiff_t>(w)) {
      return -1;  // zero padding
    }
    return (iy * static_cast<std::ptrdiff_t>(w) + ix) * static_cast<std::ptrdiff_t>(cin);
  };

  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* op = out.data() + (oy * ow + ox) * cout;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pad);
          const std::ptrdiff_t base = sample_index(iy, ix);
          if (base < 0) continue;
          const double* kp = kd.data() + ((ky * kw + kx) * cin) * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const double xv = xd[static_cast<std::size_t>(base) + ci];
            const double* kc = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) op[co] += xv * kc[co];
          }
        }
      }
    }
  }

  auto xi = x;
  auto ki = kernel;
  return make_op_result(
      {oh, ow, cout}, std::move(out), "conv2d", {&x, &kernel},
      [xi, ki, stride, pad, mode, h, w, cin, kh, kw, cout, oh, ow, sample_index](
          const double* adj, Tape& tape, const std::vector<std::int64_t>& in) {
        const auto& xd = xi.data();
        const auto& kd = ki.data();
        double* gx = in[0] >= 0 ? tape.adjoint_for(in[0], h * w * cin) : nullptr;
        double* gk = in[1] >= 0 ? tape.adjoint_for(in[1], kh * kw * cin * cout) : nullptr;
        if (gx == nullptr && gk == nullptr) return;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* ap = adj + (oy * ow + ox) * cout;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                          static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t base = sample_index(iy, ix);
                if (base < 0) continue;
                const std::size_t kbase = ((ky * kw + kx) * cin) * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const std::size_t xidx = static_cast<std::size_t>(base) + ci;
                  const double* kc = kd.data() + kbase + ci * cout;
                  if (gx != nullptr) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < cout; ++co) acc += ap[co] * kc[co];
                    gx[xidx] += acc;
                  }
                  if (gk != nullptr) {
                    const double xv = xd[xidx];
                    double* gkc = gk + kbase + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) gkc[co] += ap[co] * xv;
                  }
                }
              }
            }
          }
        }
      });
}

}  // namespace secdepth
