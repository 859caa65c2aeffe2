#pragma once

/**
 * @file autodiff.hpp
 * @brief Matrix-valued tape with forward tangents and reverse adjoints.
 *
 * Every node carries a primal matrix and, optionally, a tangent matrix: the
 * directional derivative with respect to a single scalar input (normalized
 * time in the PINN). Tangents are propagated eagerly while recording.
 * backward() then runs reverse mode over both slots, so a loss that reads
 * tangents (through tangent_of) is differentiated correctly with respect to
 * every leaf (reverse-over-forward).
 *
 * Elementwise binary ops broadcast a 1x1, 1xC or Rx1 operand against an RxC
 * operand. Nodes are recorded in topological order by construction and
 * backward visits them once, in reverse recording order.
 */

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "tkpinn/errors.hpp"

namespace tkp::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

/// A scalar primal/tangent pair.
struct DualValue {
  double primal = 0.0;
  double tangent = 0.0;
  friend bool operator==(const DualValue&, const DualValue&) = default;
};

class BackwardPass;
using BackwardFn = std::function<void(BackwardPass&, std::size_t self)>;

/// Adjoints of every trainable leaf, indexed by leaf handle.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::pair<std::size_t, Matrix>> grads) : grads_(std::move(grads)) {}

  /// Adjoint of `leaf`. Leaves that did not influence the loss yield zeros.
  const Matrix& operator[](Var leaf) const {
    for (const auto& [id, g] : grads_) {
      if (id == leaf.id) return g;
    }
    throw InvalidInput("variable is not a trainable leaf of this tape");
  }

  std::span<const std::pair<std::size_t, Matrix>> all() const { return grads_; }

 private:
  std::vector<std::pair<std::size_t, Matrix>> grads_;
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix tangent;  ///< empty when identically zero
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool trainable = false;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable value; tangent identically zero.
  Var leaf(Matrix value) {
    Node n;
    n.value = std::move(value);
    n.trainable = true;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Non-trainable input, optionally carrying a tangent.
  Var constant(Matrix value, Matrix tangent = {}) {
    if (tangent.size() != 0 && (tangent.rows() != value.rows() || tangent.cols() != value.cols())) {
      throw InvalidInput("tangent shape must match value shape");
    }
    Node n;
    n.value = std::move(value);
    n.tangent = std::move(tangent);
    return push(std::move(n));
  }

  Var constant(double v) { return constant(Matrix::Constant(1, 1, v)); }

  /// Records a node computed by the caller. `fn` receives the node's adjoints
  /// and must push contributions to `inputs`.
  Var record(std::vector<std::size_t> inputs, Matrix value, Matrix tangent, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.tangent = std::move(tangent);
    for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_.at(in).requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Matrix& value(Var v) const { return node(v).value; }
  bool has_tangent(Var v) const { return node(v).tangent.size() != 0; }
  /// Tangent of `v`, materialized as zeros when the node has none.
  Matrix tangent(Var v) const {
    const Node& n = node(v);
    return n.tangent.size() != 0 ? n.tangent : Matrix::Zero(n.value.rows(), n.value.cols());
  }
  const Matrix& tangent_ref(Var v) const { return node(v).tangent; }

  DualValue dual(Var v, Eigen::Index r = 0, Eigen::Index c = 0) const {
    const Node& n = node(v);
    return {n.value(r, c), n.tangent.size() != 0 ? n.tangent(r, c) : 0.0};
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool owns(Var v) const noexcept { return v.tape == this && v.id < nodes_.size(); }
  const Node& node(Var v) const {
    if (!owns(v)) throw InvalidInput("variable does not belong to this tape");
    return nodes_[v.id];
  }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  inline Gradients backward(Var loss) const;

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

/// Adjoint bookkeeping for one backward sweep.
class BackwardPass {
 public:
  explicit BackwardPass(const Tape& tape) : tape_(tape), adj_value_(tape.size()), adj_tangent_(tape.size()) {}

  const Tape::Node& node(std::size_t id) const { return tape_.node(id); }
  /// Adjoint of a node's primal slot (empty = zero).
  const Matrix& grad_value(std::size_t id) const { return adj_value_[id]; }
  /// Adjoint of a node's tangent slot (empty = zero).
  const Matrix& grad_tangent(std::size_t id) const { return adj_tangent_[id]; }

  template <typename Expr>
  void add_value(std::size_t id, Expr&& g) {
    if (!tape_.node(id).requires_grad) return;
    accumulate(adj_value_[id], std::forward<Expr>(g));
  }

  /// Contributions to a tangent slot are dropped when the node has no tangent:
  /// its tangent is the constant zero and carries no dependency.
  template <typename Expr>
  void add_tangent(std::size_t id, Expr&& g) {
    const Tape::Node& n = tape_.node(id);
    if (!n.requires_grad || n.tangent.size() == 0) return;
    accumulate(adj_tangent_[id], std::forward<Expr>(g));
  }

  bool wants_tangent(std::size_t id) const {
    const Tape::Node& n = tape_.node(id);
    return n.requires_grad && n.tangent.size() != 0;
  }
  bool wants_value(std::size_t id) const { return tape_.node(id).requires_grad; }

  void seed(std::size_t id) { adj_value_[id] = Matrix::Ones(1, 1); }
  Matrix take_value(std::size_t id) { return std::move(adj_value_[id]); }

 private:
  template <typename Expr>
  static void accumulate(Matrix& slot, Expr&& g) {
    if (slot.size() == 0) {
      if constexpr (std::is_same_v<std::remove_cvref_t<Expr>, Matrix> && !std::is_lvalue_reference_v<Expr>) {
        slot = std::move(g);
      } else {
        slot = g;
      }
    } else {
      slot += g;
    }
  }

  const Tape& tape_;
  std::vector<Matrix> adj_value_;
  std::vector<Matrix> adj_tangent_;
};

inline Gradients Tape::backward(Var loss) const {
  if (!owns(loss)) throw InvalidInput("loss node is not recorded on this tape");
  const Node& ln = nodes_[loss.id];
  if (ln.value.rows() != 1 || ln.value.cols() != 1) throw InvalidInput("loss node must be a scalar");

  BackwardPass pass(*this);
  pass.seed(loss.id);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.backward) continue;
    if (pass.grad_value(id).size() == 0 && pass.grad_tangent(id).size() == 0) continue;
    n.backward(pass, id);
  }

  std::vector<std::pair<std::size_t, Matrix>> out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].trainable) continue;
    Matrix g = pass.take_value(id);
    if (g.size() == 0) g = Matrix::Zero(nodes_[id].value.rows(), nodes_[id].value.cols());
    out.emplace_back(id, std::move(g));
  }
  return Gradients(std::move(out));
}

namespace detail {

inline Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw InvalidInput("operands belong to different tapes");
  return *a.tape;
}

inline Eigen::Index broadcast_dim(Eigen::Index a, Eigen::Index b) {
  if (a == b) return a;
  if (a == 1) return b;
  if (b == 1) return a;
  throw InvalidInput("incompatible shapes for broadcasting: " + std::to_string(a) + " vs " + std::to_string(b));
}

inline Matrix expand(const Matrix& m, Eigen::Index rows, Eigen::Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

/// Sums a broadcast adjoint back down to the operand's shape.
inline Matrix reduce_to(const Matrix& g, Eigen::Index rows, Eigen::Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
  if (rows == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

struct Operand {
  Matrix value;
  Matrix tangent;  // empty = zero
};

inline Operand expanded(const Tape& t, Var v, Eigen::Index rows, Eigen::Index cols) {
  const auto& n = t.node(v);
  return {expand(n.value, rows, cols), n.tangent.size() ? expand(n.tangent, rows, cols) : Matrix()};
}

enum class Binary { Add, Sub, Mul, Div };

inline Var binary(Var a, Var b, Binary op) {
  Tape& t = tape_of(a, b);
  const Eigen::Index rows = broadcast_dim(t.value(a).rows(), t.value(b).rows());
  const Eigen::Index cols = broadcast_dim(t.value(a).cols(), t.value(b).cols());
  Operand x = expanded(t, a, rows, cols);
  Operand y = expanded(t, b, rows, cols);
  const bool xt = x.tangent.size() != 0, yt = y.tangent.size() != 0;

  Matrix z, zt;
  switch (op) {
    case Binary::Add:
      z = x.value + y.value;
      if (xt && yt) zt = x.tangent + y.tangent;
      else if (xt) zt = x.tangent;
      else if (yt) zt = y.tangent;
      break;
    case Binary::Sub:
      z = x.value - y.value;
      if (xt && yt) zt = x.tangent - y.tangent;
      else if (xt) zt = x.tangent;
      else if (yt) zt = -y.tangent;
      break;
    case Binary::Mul:
      z = x.value.cwiseProduct(y.value);
      if (xt || yt) {
        zt = Matrix::Zero(rows, cols);
        if (xt) zt += x.tangent.cwiseProduct(y.value);
        if (yt) zt += x.value.cwiseProduct(y.tangent);
      }
      break;
    case Binary::Div:
      if ((y.value.array() == 0.0).any()) throw NumericalFailure("division by zero");
      z = x.value.cwiseQuotient(y.value);
      if (xt || yt) {
        zt = Matrix::Zero(rows, cols);
        if (xt) zt += x.tangent;
        if (yt) zt -= z.cwiseProduct(y.tangent);
        zt = zt.cwiseQuotient(y.value);
      }
      break;
  }

  const auto ar = t.value(a).rows(), ac = t.value(a).cols();
  const auto br = t.value(b).rows(), bc = t.value(b).cols();
  const std::size_t ia = a.id, ib = b.id;
  return t.record({ia, ib}, std::move(z), std::move(zt),
                  [op, ia, ib, ar, ac, br, bc, rows, cols](BackwardPass& p, std::size_t self) {
                    const Tape::Node& na = p.node(ia);
                    const Tape::Node& nb = p.node(ib);
                    const Matrix& gz = p.grad_value(self);
                    const Matrix& gt = p.grad_tangent(self);
                    const bool has_gz = gz.size() != 0, has_gt = gt.size() != 0;
                    auto zero = [&] { return Matrix::Zero(rows, cols); };
                    Matrix ga = zero(), gat = zero(), gb = zero(), gbt = zero();
                    switch (op) {
                      case Binary::Add:
                        if (has_gz) { ga += gz; gb += gz; }
                        if (has_gt) { gat += gt; gbt += gt; }
                        break;
                      case Binary::Sub:
                        if (has_gz) { ga += gz; gb -= gz; }
                        if (has_gt) { gat += gt; gbt -= gt; }
                        break;
                      case Binary::Mul: {
                        const Matrix x = expand(na.value, rows, cols);
                        const Matrix y = expand(nb.value, rows, cols);
                        if (has_gz) { ga += gz.cwiseProduct(y); gb += gz.cwiseProduct(x); }
                        if (has_gt) {
                          gat += gt.cwiseProduct(y);
                          gbt += gt.cwiseProduct(x);
                          if (nb.tangent.size()) ga += gt.cwiseProduct(expand(nb.tangent, rows, cols));
                          if (na.tangent.size()) gb += gt.cwiseProduct(expand(na.tangent, rows, cols));
                        }
                        break;
                      }
                      case Binary::Div: {
                        const Matrix x = expand(na.value, rows, cols);
                        const Matrix y = expand(nb.value, rows, cols);
                        const Matrix inv = y.cwiseInverse();
                        const Matrix inv2 = inv.cwiseProduct(inv);
                        if (has_gz) {
                          ga += gz.cwiseProduct(inv);
                          gb -= gz.cwiseProduct(x).cwiseProduct(inv2);
                        }
                        if (has_gt) {
                          gat += gt.cwiseProduct(inv);
                          gbt -= gt.cwiseProduct(x).cwiseProduct(inv2);
                          if (nb.tangent.size()) {
                            const Matrix yt = expand(nb.tangent, rows, cols);
                            ga -= gt.cwiseProduct(yt).cwiseProduct(inv2);
                            gb += 2.0 * gt.cwiseProduct(x).cwiseProduct(yt).cwiseProduct(inv2).cwiseProduct(inv);
                          }
                          if (na.tangent.size()) {
                            gb -= gt.cwiseProduct(expand(na.tangent, rows, cols)).cwiseProduct(inv2);
                          }
                        }
                        break;
                      }
                    }
                    p.add_value(ia, reduce_to(ga, ar, ac));
                    p.add_value(ib, reduce_to(gb, br, bc));
                    if (has_gt) {
                      p.add_tangent(ia, reduce_to(gat, ar, ac));
                      p.add_tangent(ib, reduce_to(gbt, br, bc));
                    }
                  });
}

/// Elementwise map z = f(a) with ż = f'(a) ȧ. `d1` and `d2` are f' and f''
/// evaluated from (a, z).
template <typename F, typename D1, typename D2>
Var unary(Var a, F f, D1 d1, D2 d2) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  Matrix z = na.value.unaryExpr(f);
  Matrix dz = na.value.binaryExpr(z, d1);
  Matrix zt;
  if (na.tangent.size()) zt = dz.cwiseProduct(na.tangent);
  const std::size_t ia = a.id;
  return t.record({ia}, std::move(z), std::move(zt),
                  [ia, dz = std::move(dz), d2](BackwardPass& p, std::size_t self) {
                    const Tape::Node& na = p.node(ia);
                    const Matrix& gz = p.grad_value(self);
                    const Matrix& gt = p.grad_tangent(self);
                    if (gz.size()) p.add_value(ia, gz.cwiseProduct(dz));
                    if (gt.size()) {
                      p.add_tangent(ia, gt.cwiseProduct(dz));
                      if (na.tangent.size()) {
                        const Matrix dd = na.value.binaryExpr(p.node(self).value, d2);
                        p.add_value(ia, gt.cwiseProduct(na.tangent).cwiseProduct(dd));
                      }
                    }
                  });
}

}  // namespace detail

inline Var operator+(Var a, Var b) { return detail::binary(a, b, detail::Binary::Add); }
inline Var operator-(Var a, Var b) { return detail::binary(a, b, detail::Binary::Sub); }
inline Var operator*(Var a, Var b) { return detail::binary(a, b, detail::Binary::Mul); }
inline Var operator/(Var a, Var b) { return detail::binary(a, b, detail::Binary::Div); }

inline Var add(Var a, Var b) { return a + b; }
inline Var sub(Var a, Var b) { return a - b; }
inline Var mul(Var a, Var b) { return a * b; }
inline Var div(Var a, Var b) { return a / b; }

/// z = c * a for a constant c.
inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  Matrix zt;
  if (na.tangent.size()) zt = c * na.tangent;
  const std::size_t ia = a.id;
  return t.record({ia}, c * na.value, std::move(zt), [ia, c](BackwardPass& p, std::size_t self) {
    if (p.grad_value(self).size()) p.add_value(ia, c * p.grad_value(self));
    if (p.grad_tangent(self).size()) p.add_tangent(ia, c * p.grad_tangent(self));
  });
}

inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }

inline Var tanh(Var a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double z) { return 1.0 - z * z; },
      [](double, double z) { return -2.0 * z * (1.0 - z * z); });
}

inline Var exp(Var a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double z) { return z; },
      [](double, double z) { return z; });
}

inline Var square(Var a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; },
      [](double, double) { return 2.0; });
}

inline Var sqrt(Var a) {
  if ((a.tape->value(a).array() <= 0.0).any()) throw NumericalFailure("sqrt of a non-positive value");
  return detail::unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double z) { return 0.5 / z; },
      [](double, double z) { return -0.25 / (z * z * z); });
}

/// min(a, 0), elementwise. The kink at 0 takes the zero branch.
inline Var min_with_zero(Var a) {
  return detail::unary(
      a, [](double x) { return x < 0.0 ? x : 0.0; }, [](double x, double) { return x < 0.0 ? 1.0 : 0.0; },
      [](double, double) { return 0.0; });
}

/// A node whose primal is the tangent of `a`. Its own tangent is zero:
/// only first derivatives with respect to the scalar input are supported.
inline Var tangent_of(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record({ia}, t.tangent(a), Matrix(), [ia](BackwardPass& p, std::size_t self) {
    if (p.grad_value(self).size()) p.add_tangent(ia, p.grad_value(self));
  });
}

/// Same primal as `a` with a zero tangent; adjoints reach `a` through the primal only.
inline Var hold_tangent(Var a) {
  Tape& t = *a.tape;
  const std::size_t ia = a.id;
  return t.record({ia}, t.value(a), Matrix(), [ia](BackwardPass& p, std::size_t self) {
    if (p.grad_value(self).size()) p.add_value(ia, p.grad_value(self));
  });
}

/// Sum of all entries, as a 1x1 node.
inline Var sum(Var a) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  Matrix zt;
  if (na.tangent.size()) zt = Matrix::Constant(1, 1, na.tangent.sum());
  const auto r = na.value.rows(), c = na.value.cols();
  const std::size_t ia = a.id;
  return t.record({ia}, Matrix::Constant(1, 1, na.value.sum()), std::move(zt),
                  [ia, r, c](BackwardPass& p, std::size_t self) {
                    if (p.grad_value(self).size()) p.add_value(ia, Matrix::Constant(r, c, p.grad_value(self)(0, 0)));
                    if (p.grad_tangent(self).size())
                      p.add_tangent(ia, Matrix::Constant(r, c, p.grad_tangent(self)(0, 0)));
                  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.tape->value(a).size());
  return scale(sum(a), 1.0 / n);
}

/// Column means over rows: RxC -> 1xC.
inline Var mean_rows(Var a) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  const auto r = na.value.rows();
  const double inv = 1.0 / static_cast<double>(r);
  Matrix zt;
  if (na.tangent.size()) zt = na.tangent.colwise().sum() * inv;
  const std::size_t ia = a.id;
  return t.record({ia}, na.value.colwise().sum() * inv, std::move(zt),
                  [ia, r, inv](BackwardPass& p, std::size_t self) {
                    if (p.grad_value(self).size()) p.add_value(ia, (p.grad_value(self) * inv).replicate(r, 1));
                    if (p.grad_tangent(self).size()) p.add_tangent(ia, (p.grad_tangent(self) * inv).replicate(r, 1));
                  });
}

/// Contiguous column block [first, first + count).
inline Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  if (first < 0 || count < 0 || first + count > na.value.cols()) throw InvalidInput("column slice out of range");
  Matrix zt;
  if (na.tangent.size()) zt = na.tangent.middleCols(first, count);
  const auto r = na.value.rows(), c = na.value.cols();
  const std::size_t ia = a.id;
  return t.record({ia}, na.value.middleCols(first, count), std::move(zt),
                  [ia, r, c, first, count](BackwardPass& p, std::size_t self) {
                    if (p.grad_value(self).size()) {
                      Matrix g = Matrix::Zero(r, c);
                      g.middleCols(first, count) = p.grad_value(self);
                      p.add_value(ia, g);
                    }
                    if (p.grad_tangent(self).size()) {
                      Matrix g = Matrix::Zero(r, c);
                      g.middleCols(first, count) = p.grad_tangent(self);
                      p.add_tangent(ia, g);
                    }
                  });
}

/// Contiguous row block [first, first + count).
inline Var slice_rows(Var a, Eigen::Index first, Eigen::Index count) {
  Tape& t = *a.tape;
  const Tape::Node& na = t.node(a);
  if (first < 0 || count < 0 || first + count > na.value.rows()) throw InvalidInput("row slice out of range");
  Matrix zt;
  if (na.tangent.size()) zt = na.tangent.middleRows(first, count);
  const auto r = na.value.rows(), c = na.value.cols();
  const std::size_t ia = a.id;
  return t.record({ia}, na.value.middleRows(first, count), std::move(zt),
                  [ia, r, c, first, count](BackwardPass& p, std::size_t self) {
                    if (p.grad_value(self).size()) {
                      Matrix g = Matrix::Zero(r, c);
                      g.middleRows(first, count) = p.grad_value(self);
                      p.add_value(ia, g);
                    }
                    if (p.grad_tangent(self).size()) {
                      Matrix g = Matrix::Zero(r, c);
                      g.middleRows(first, count) = p.grad_tangent(self);
                      p.add_tangent(ia, g);
                    }
                  });
}

/**
 * @brief Fully connected layer: z = x W + b, with x (B x in), W (in x out),
 *        b (1 x out) broadcast over rows.
 */
inline Var affine_combine(Var weights, Var inputs, Var bias) {
  Tape& t = detail::tape_of(weights, inputs);
  detail::tape_of(weights, bias);
  const Tape::Node& nw = t.node(weights);
  const Tape::Node& nx = t.node(inputs);
  const Tape::Node& nb = t.node(bias);
  if (nx.value.cols() != nw.value.rows()) throw InvalidInput("affine: input width does not match weight rows");
  if (nb.value.rows() != 1 || nb.value.cols() != nw.value.cols()) throw InvalidInput("affine: bias must be 1 x out");

  Matrix z = nx.value * nw.value;
  z.rowwise() += nb.value.row(0);
  Matrix zt;
  if (nx.tangent.size() || nw.tangent.size() || nb.tangent.size()) {
    if (nx.tangent.size()) {
      zt.noalias() = nx.tangent * nw.value;
    } else {
      zt = Matrix::Zero(z.rows(), z.cols());
    }
    if (nw.tangent.size()) zt.noalias() += nx.value * nw.tangent;
    if (nb.tangent.size()) zt.rowwise() += nb.tangent.row(0);
  }
  const std::size_t iw = weights.id, ix = inputs.id, ib = bias.id;
  return t.record({iw, ix, ib}, std::move(z), std::move(zt), [iw, ix, ib](BackwardPass& p, std::size_t self) {
    const Tape::Node& nw = p.node(iw);
    const Tape::Node& nx = p.node(ix);
    const Matrix& gz = p.grad_value(self);
    const Matrix& gt = p.grad_tangent(self);
    if (gz.size()) {
      if (p.wants_value(ix)) p.add_value(ix, gz * nw.value.transpose());
      if (p.wants_value(iw)) p.add_value(iw, nx.value.transpose() * gz);
      p.add_value(ib, gz.colwise().sum());
    }
    if (gt.size()) {
      if (p.wants_tangent(ix)) p.add_tangent(ix, gt * nw.value.transpose());
      if (p.wants_tangent(iw)) p.add_tangent(iw, nx.value.transpose() * gt);
      p.add_tangent(ib, gt.colwise().sum());
      if (nx.tangent.size() && p.wants_value(iw)) p.add_value(iw, nx.tangent.transpose() * gt);
      if (nw.tangent.size() && p.wants_value(ix)) p.add_value(ix, gt * nw.tangent.transpose());
    }
  });
}

inline constexpr double kBatchNormEpsilon = 1e-5;

/**
 * Training-mode batch normalization over rows: each column is centred by its
 * batch mean and divided by sqrt(batch variance + epsilon), then scaled and
 * shifted. The statistics are differentiated in the primal slot. For the time
 * tangent they are held fixed, so each row's tangent is the derivative of that
 * row's output with respect to its own input.
 */
inline Var batch_normalize(Var x, Var scale_row, Var shift_row, double epsilon = kBatchNormEpsilon) {
  Tape& t = *x.tape;
  if (t.value(x).rows() < 2) throw InvalidInput("batch normalization needs at least two rows");
  if (!(epsilon > 0)) throw InvalidInput("batch normalization epsilon must be positive");
  Var centred = x - hold_tangent(mean_rows(x));
  Var variance = mean_rows(square(centred));
  Var stddev = hold_tangent(sqrt(variance + t.constant(epsilon)));
  return (centred / stddev) * scale_row + shift_row;
}

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t leaf = 0;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Builds a scalar loss on a fresh tape from the given leaves.
using LossBuilder = std::function<Var(Tape&, std::span<const Var> leaves)>;

/**
 * Compares backward() against central differences on every leaf entry.
 * Relative error per entry: |a - c| / max(|a|, |c|, 1e-12).
 */
inline GradcheckReport gradcheck(const LossBuilder& build, const std::vector<Matrix>& leaf_values, double step) {
  if (!(step > 0)) throw InvalidInput("gradcheck step must be positive");

  auto evaluate = [&](const std::vector<Matrix>& values, Gradients* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(values.size());
    for (const Matrix& v : values) leaves.push_back(tape.leaf(v));
    Var loss = build(tape, leaves);
    if (grads) *grads = tape.backward(loss);
    return tape.value(loss)(0, 0);
  };

  Gradients analytic;
  evaluate(leaf_values, &analytic);
  // Leaves are the first nodes of the tape, in order.
  auto grad_of = [&](std::size_t leaf) -> const Matrix& { return analytic.all()[leaf].second; };

  GradcheckReport report;
  std::vector<Matrix> probe = leaf_values;
  for (std::size_t l = 0; l < leaf_values.size(); ++l) {
    for (Eigen::Index k = 0; k < leaf_values[l].size(); ++k) {
      const double orig = leaf_values[l](k);
      probe[l](k) = orig + step;
      const double up = evaluate(probe, nullptr);
      probe[l](k) = orig - step;
      const double down = evaluate(probe, nullptr);
      probe[l](k) = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grad_of(l)(k);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      const double err = std::abs(a - numeric) / denom;
      if (err > report.max_rel_error) report = {err, l, k, a, numeric};
    }
  }
  return report;
}

}  // namespace tkp::ad
