#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "scn/matrix.hpp"
#include "scn/rng.hpp"

namespace scn {

/// Probability clamp applied to every sigmoid output that feeds a log or an odds ratio.
inline constexpr double kProbabilityFloor = 1e-6;
/// Inputs to log are clamped to this floor.
inline constexpr double kLogFloor = 1e-12;
/// Upper cap on (1 - d) / d.
inline constexpr double kMaxWeight = 1e6;

/// A trainable tensor that outlives any single graph.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives
/// and has not been reset.
class Tensor {
 public:
  Tensor() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Matrix& value() const;
  const Matrix& grad() const;
  Shape shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  /// Value of a 1x1 tensor.
  double item() const;

 private:
  friend class Graph;
  Tensor(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so every input id precedes its consumer and backward walks the vector in
/// reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor constant(Matrix value) {
    check_finite(value, "constant");
    return push(std::move(value), {}, nullptr, false, "constant");
  }

  /// Binds a parameter as a leaf. Binding the same parameter twice returns
  /// the same node, so a network applied to several batches shares storage.
  Tensor parameter(Parameter& p, bool trainable = true) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Tensor(this, it->second);
    check_finite(p.value, p.name.c_str());
    Tensor t = push(p.value, {}, nullptr, trainable, "parameter");
    nodes_[t.id()].param = &p;
    bound_.emplace(&p, t.id());
    return t;
  }

  /// Records an op. `inputs` must already be on this graph.
  Tensor record(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
    check_finite(value, op);
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_.at(i).requires_grad;
    return push(std::move(value), std::move(inputs), needs ? std::move(fn) : nullptr, needs, op);
  }

  /// Fills the gradient of every bound parameter with d(loss)/d(param).
  /// Parameters bound as non-trainable, or unreachable from the loss, get zeros.
  void backward(const Tensor& loss) {
    if (backward_done_) throw std::logic_error("backward called twice on the same graph without reset");
    if (loss.graph_ != this) throw std::invalid_argument("loss tensor belongs to another graph");
    const Matrix& lv = nodes_[loss.id()].value;
    if (lv.rows() != 1 || lv.cols() != 1) {
      throw DimensionError("backward requires a 1x1 loss, got " + lv.shape().str());
    }
    backward_done_ = true;
    for (auto& n : nodes_) n.grad = Matrix();
    nodes_[loss.id()].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr) continue;
      if (n.requires_grad && !n.grad.empty()) {
        n.param->grad = n.grad;
      } else {
        n.param->grad = Matrix(n.value.rows(), n.value.cols());
      }
    }
  }

  void reset() {
    nodes_.clear();
    bound_.clear();
    backward_done_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  const Matrix& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

  /// Gradient slot of `id`, zero-allocated on first touch.
  Matrix& grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    const char* op = "";
  };

  static void check_finite(const Matrix& m, const char* op) {
    if (!m.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  }

  Tensor push(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs,
              const char* op) {
    Node n;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    n.requires_grad = needs;
    n.op = op;
    nodes_.push_back(std::move(n));
    return Tensor(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool backward_done_ = false;
};

inline const Matrix& Tensor::value() const { return graph_->value(id_); }
inline const Matrix& Tensor::grad() const { return graph_->grad(id_); }
inline bool Tensor::requires_grad() const { return graph_->requires_grad(id_); }
inline double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar tensor " + v.shape().str());
  return v[0];
}

namespace detail {

inline void same_graph(const Tensor& a, const Tensor& b, const char* op) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": tensors on different graphs");
}

inline void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  same_graph(a, b, op);
  require_same_shape(a.value(), b.value(), op);
}

/// Unary elementwise op with derivative expressed through (input, output).
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Deriv deriv) {
  const Matrix& x = a.value();
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {ia},
                          [ia, deriv](Graph& g, std::size_t self) {
                            const Matrix& xv = g.value(ia);
                            const Matrix& yv = g.value(self);
                            const Matrix& gy = g.grad(self);
                            Matrix& gx = g.grad_slot(ia);
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
                          },
                          op);
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::same_graph(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + a.shape().str() + " * " + b.shape().str());
  }
  Matrix out;
  gemm(a.value(), b.value(), out);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            if (g.requires_grad(ia)) gemm_nt_acc(gy, g.value(ib), g.grad_slot(ia));
                            if (g.requires_grad(ib)) gemm_tn_acc(g.value(ia), gy, g.grad_slot(ib));
                          },
                          "matmul");
}

/// a (m x n) plus a 1 x n row vector broadcast over rows.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  detail::same_graph(a, bias, "add_bias");
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw DimensionError("add_bias: bias " + bias.shape().str() + " incompatible with " + a.shape().str());
  }
  Matrix out = a.value();
  const Matrix& b = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  const std::size_t ia = a.id(), ib = bias.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            if (g.requires_grad(ia)) {
                              Matrix& ga = g.grad_slot(ia);
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
                            }
                            if (g.requires_grad(ib)) {
                              Matrix& gb = g.grad_slot(ib);
                              for (std::size_t r = 0; r < gy.rows(); ++r) {
                                for (std::size_t c = 0; c < gy.cols(); ++c) gb[c] += gy(r, c);
                              }
                            }
                          },
                          "add_bias");
}

// ---------------------------------------------------------------- elementwise

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// Clamps probabilities to [1e-6, 1 - 1e-6]. The gradient passes straight
/// through so that a saturated discriminator still receives a signal.
inline Tensor clamp_probability(const Tensor& a) {
  return detail::unary(
      a, "clamp_probability",
      [](double x) { return std::clamp(x, kProbabilityFloor, 1.0 - kProbabilityFloor); },
      [](double, double) { return 1.0; });
}

/// Natural log with inputs clamped to >= 1e-12; zero gradient below the floor.
inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x, double) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// (1 - d) / d, capped at 1e6.
inline Tensor odds_against(const Tensor& d) {
  return detail::unary(
      d, "odds_against", [](double x) { return std::min((1.0 - x) / x, kMaxWeight); },
      [](double x, double y) { return y >= kMaxWeight ? 0.0 : -1.0 / (x * x); });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "add");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            for (std::size_t id : {ia, ib}) {
                              if (!g.requires_grad(id)) continue;
                              Matrix& gx = g.grad_slot(id);
                              for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
                            }
                          },
                          "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            if (g.requires_grad(ia)) {
                              Matrix& ga = g.grad_slot(ia);
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
                            }
                            if (g.requires_grad(ib)) {
                              Matrix& gb = g.grad_slot(ib);
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
                            }
                          },
                          "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::same_shape(a, b, "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib},
                          [ia, ib](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            if (g.requires_grad(ia)) {
                              const Matrix& bv = g.value(ib);
                              Matrix& ga = g.grad_slot(ia);
                              for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
                            }
                            if (g.requires_grad(ib)) {
                              const Matrix& av = g.value(ia);
                              Matrix& gb = g.grad_slot(ib);
                              for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
                            }
                          },
                          "mul");
}

/// Scales row i of a (m x n) by column(i) of an m x 1 tensor.
inline Tensor mul_rows(const Tensor& a, const Tensor& column) {
  detail::same_graph(a, column, "mul_rows");
  if (column.cols() != 1 || column.rows() != a.rows()) {
    throw DimensionError("mul_rows: column " + column.shape().str() + " incompatible with " + a.shape().str());
  }
  Matrix out = a.value();
  const Matrix& cv = column.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (double& v : out.row(r)) v *= cv[r];
  }
  const std::size_t ia = a.id(), ic = column.id();
  return a.graph().record(std::move(out), {ia, ic},
                          [ia, ic](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            const Matrix& av = g.value(ia);
                            const Matrix& cv = g.value(ic);
                            if (g.requires_grad(ia)) {
                              Matrix& ga = g.grad_slot(ia);
                              for (std::size_t r = 0; r < ga.rows(); ++r) {
                                for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += gy(r, c) * cv[r];
                              }
                            }
                            if (g.requires_grad(ic)) {
                              Matrix& gc = g.grad_slot(ic);
                              for (std::size_t r = 0; r < av.rows(); ++r) {
                                double s = 0.0;
                                for (std::size_t c = 0; c < av.cols(); ++c) s += gy(r, c) * av(r, c);
                                gc[r] += s;
                              }
                            }
                          },
                          "mul_rows");
}

enum class Elementwise { relu, sigmoid, log, exp, mul, add, sub, scale };

/// Dispatch form of the unary kinds; `s` is the factor for `scale`.
inline Tensor elementwise(Elementwise kind, const Tensor& a, double s = 1.0) {
  switch (kind) {
    case Elementwise::relu: return relu(a);
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::log: return log(a);
    case Elementwise::exp: return exp(a);
    case Elementwise::scale: return scale(a, s);
    default: throw std::invalid_argument("elementwise: binary kind needs two operands");
  }
}

inline Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b) {
  switch (kind) {
    case Elementwise::mul: return mul(a, b);
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    default: throw std::invalid_argument("elementwise: unary kind given two operands");
  }
}

// ---------------------------------------------------------------- reductions

enum class Reduce { mean, sum, l2norm };
/// rows: collapse the row axis (m x n -> 1 x n); cols: m x n -> m x 1; all: -> 1 x 1.
enum class Axis { rows, cols, all };

inline Tensor reduce(Reduce kind, const Tensor& t, Axis axis) {
  const Matrix& x = t.value();
  if (x.empty()) throw DimensionError("reduce: empty tensor");
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t orows = axis == Axis::cols ? m : 1;
  const std::size_t ocols = axis == Axis::rows ? n : 1;
  auto out_index = [axis, n](std::size_t r, std::size_t c) -> std::size_t {
    switch (axis) {
      case Axis::rows: return c;
      case Axis::cols: return r;
      default: return 0;
    }
  };
  const double count = axis == Axis::rows ? double(m) : axis == Axis::cols ? double(n) : double(m * n);

  Matrix out(orows, ocols);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double v = x(r, c);
      out[out_index(r, c)] += kind == Reduce::l2norm ? v * v : v;
    }
  }
  if (kind == Reduce::mean) {
    for (double& v : out.values()) v /= count;
  } else if (kind == Reduce::l2norm) {
    for (double& v : out.values()) v = std::sqrt(v);
  }

  const std::size_t it = t.id();
  const char* name = kind == Reduce::mean ? "mean" : kind == Reduce::sum ? "sum" : "l2norm";
  return t.graph().record(std::move(out), {it},
                          [it, kind, count, out_index](Graph& g, std::size_t self) {
                            const Matrix& xv = g.value(it);
                            const Matrix& yv = g.value(self);
                            const Matrix& gy = g.grad(self);
                            Matrix& gx = g.grad_slot(it);
                            for (std::size_t r = 0; r < xv.rows(); ++r) {
                              for (std::size_t c = 0; c < xv.cols(); ++c) {
                                const std::size_t o = out_index(r, c);
                                double d = 1.0;
                                if (kind == Reduce::mean) {
                                  d = 1.0 / count;
                                } else if (kind == Reduce::l2norm) {
                                  // subgradient 0 at the origin
                                  d = yv[o] > 0.0 ? xv(r, c) / yv[o] : 0.0;
                                }
                                gx(r, c) += gy[o] * d;
                              }
                            }
                          },
                          name);
}

inline Tensor mean(const Tensor& t, Axis axis = Axis::all) { return reduce(Reduce::mean, t, axis); }
inline Tensor sum(const Tensor& t, Axis axis = Axis::all) { return reduce(Reduce::sum, t, axis); }
inline Tensor l2norm(const Tensor& t, Axis axis = Axis::all) { return reduce(Reduce::l2norm, t, axis); }

// ---------------------------------------------------------------- losses and misc

/// Per-row binary cross-entropy from logits, summed over columns: m x L -> m x 1.
inline Tensor bce_with_logits(const Tensor& logits, const Matrix& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const Matrix& z = logits.value();
  Matrix out(z.rows(), 1);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < z.cols(); ++c) {
      const double zi = z(r, c);
      // softplus(z) - y z, computed stably
      s += std::max(zi, 0.0) + std::log1p(std::exp(-std::abs(zi))) - targets(r, c) * zi;
    }
    out[r] = s;
  }
  const std::size_t iz = logits.id();
  return logits.graph().record(std::move(out), {iz},
                               [iz, targets](Graph& g, std::size_t self) {
                                 const Matrix& zv = g.value(iz);
                                 const Matrix& gy = g.grad(self);
                                 Matrix& gz = g.grad_slot(iz);
                                 for (std::size_t r = 0; r < zv.rows(); ++r) {
                                   for (std::size_t c = 0; c < zv.cols(); ++c) {
                                     const double x = zv(r, c);
                                     const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                               : std::exp(x) / (1.0 + std::exp(x));
                                     gz(r, c) += gy[r] * (p - targets(r, c));
                                   }
                                 }
                               },
                               "bce_with_logits");
}

/// Inverted dropout: survivors are scaled by 1/keep so the expectation is unchanged.
inline Tensor dropout(const Tensor& a, double keep, Rng& rng) {
  if (!(keep > 0.0 && keep <= 1.0)) throw std::invalid_argument("dropout: keep probability must be in (0, 1]");
  if (keep == 1.0) return a;
  const Matrix& x = a.value();
  Matrix mask(x.rows(), x.cols());
  for (double& m : mask.values()) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {ia},
                          [ia, mask = std::move(mask)](Graph& g, std::size_t self) {
                            const Matrix& gy = g.grad(self);
                            Matrix& gx = g.grad_slot(ia);
                            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * mask[i];
                          },
                          "dropout");
}

/// Copy of `a` with no path back to its inputs.
inline Tensor detach(const Tensor& a) { return a.graph().constant(a.value()); }

}  // namespace scn
