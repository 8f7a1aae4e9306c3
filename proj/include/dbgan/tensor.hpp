#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "dbgan/common.hpp"

// Reverse-mode autodiff over dense f64 matrices. Backward rules are
// themselves expressed as graph operations, so gradients are differentiable
// tensors and the WGAN-GP penalty can backpropagate through its own
// input-gradient (double backprop).
namespace dbgan::ad {

class Node;
using Var = std::shared_ptr<Node>;

using BackwardFn =
    std::function<std::vector<Var>(const Var& self, const Var& upstream)>;

class Node {
 public:
  Matrix value;
  bool requires_grad = false;
  std::vector<Var> parents;
  BackwardFn backward_fn;  // empty for leaves and constants
  std::uint64_t id;

  Node(Matrix v, bool rg, std::vector<Var> par, BackwardFn bw)
      : value(std::move(v)),
        requires_grad(rg),
        parents(std::move(par)),
        backward_fn(std::move(bw)),
        id(next_id()) {}

  Eigen::Index rows() const { return value.rows(); }
  Eigen::Index cols() const { return value.cols(); }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

inline Var constant(Matrix v) {
  return std::make_shared<Node>(std::move(v), false, std::vector<Var>{}, nullptr);
}

inline Var constant_scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

//! Differentiable leaf (a parameter or an input we take gradients w.r.t.).
inline Var variable(Matrix v) {
  return std::make_shared<Node>(std::move(v), true, std::vector<Var>{}, nullptr);
}

//! Same value, cut from the graph.
inline Var detach(const Var& v) { return constant(v->value); }

namespace detail {

inline bool any_grad(const std::vector<Var>& ps) {
  for (const auto& p : ps)
    if (p->requires_grad) return true;
  return false;
}

inline Var make_op(Matrix v, std::vector<Var> parents, BackwardFn bw) {
  bool rg = any_grad(parents);
  return std::make_shared<Node>(std::move(v), rg, std::move(parents),
                                rg ? std::move(bw) : nullptr);
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a->value) + " vs " + shape_str(b->value));
}

inline bool is_scalar(const Var& v) { return v->rows() == 1 && v->cols() == 1; }

}  // namespace detail

// ---- forward declarations used inside backward rules ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scalar_mul(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum(const Var& a);
Var broadcast_full(const Var& s, Eigen::Index rows, Eigen::Index cols);
Var row_sum(const Var& a);
Var col_sum(const Var& a);
Var broadcast_cols(const Var& a, Eigen::Index cols);
Var broadcast_rows(const Var& a, Eigen::Index rows);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var pad_rows(const Var& a, Eigen::Index start, Eigen::Index total);

// ---- elementwise arithmetic (scalar 1x1 operands broadcast) ----

inline Var add(const Var& a, const Var& b) {
  if (detail::is_scalar(b) && !detail::is_scalar(a)) {
    return detail::make_op(
        a->value.array() + b->value(0, 0), {a, b},
        [](const Var& self, const Var& g) -> std::vector<Var> {
          (void)self;
          return {g, sum(g)};
        });
  }
  if (detail::is_scalar(a) && !detail::is_scalar(b)) return add(b, a);
  detail::check_same_shape(a, b, "add");
  return detail::make_op(a->value + b->value, {a, b},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {g, g};
                         });
}

inline Var neg(const Var& a) {
  return detail::make_op(-a->value, {a},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {neg(g)};
                         });
}

inline Var sub(const Var& a, const Var& b) {
  if (detail::is_scalar(b) && !detail::is_scalar(a)) {
    return detail::make_op(
        a->value.array() - b->value(0, 0), {a, b},
        [](const Var&, const Var& g) -> std::vector<Var> {
          return {g, neg(sum(g))};
        });
  }
  detail::check_same_shape(a, b, "sub");
  return detail::make_op(a->value - b->value, {a, b},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {g, neg(g)};
                         });
}

inline Var mul(const Var& a, const Var& b) {
  if (detail::is_scalar(b) && !detail::is_scalar(a)) {
    return detail::make_op(
        a->value * b->value(0, 0), {a, b},
        [](const Var& self, const Var& g) -> std::vector<Var> {
          const Var& a = self->parents[0];
          const Var& b = self->parents[1];
          return {mul(g, b), sum(mul(g, a))};
        });
  }
  if (detail::is_scalar(a) && !detail::is_scalar(b)) return mul(b, a);
  detail::check_same_shape(a, b, "mul");
  return detail::make_op(
      a->value.cwiseProduct(b->value), {a, b},
      [](const Var& self, const Var& g) -> std::vector<Var> {
        return {mul(g, self->parents[1]), mul(g, self->parents[0])};
      });
}

inline Var div(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "div");
  if ((b->value.array() == 0.0).any()) throw DomainError("div: zero divisor");
  return detail::make_op(
      a->value.cwiseQuotient(b->value), {a, b},
      [](const Var& self, const Var& g) -> std::vector<Var> {
        const Var& a = self->parents[0];
        const Var& b = self->parents[1];
        return {div(g, b), neg(div(mul(g, a), mul(b, b)))};
      });
}

inline Var scalar_mul(const Var& a, double c) {
  return detail::make_op(a->value * c, {a},
                         [c](const Var&, const Var& g) -> std::vector<Var> {
                           return {scalar_mul(g, c)};
                         });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::make_op(a->value.array() + c, {a},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {g};
                         });
}

// ---- linear algebra ----

inline Var matmul(const Var& a, const Var& b) {
  if (a->cols() != b->rows())
    throw ShapeError("matmul: " + shape_str(a->value) + " * " +
                     shape_str(b->value));
  return detail::make_op(
      a->value * b->value, {a, b},
      [](const Var& self, const Var& g) -> std::vector<Var> {
        const Var& a = self->parents[0];
        const Var& b = self->parents[1];
        return {matmul(g, transpose(b)), matmul(transpose(a), g)};
      });
}

//! Sparse constant times dense variable. The sparse operand is data
//! (adjacency), never differentiated.
inline Var spmm(std::shared_ptr<const SparseMatrix> s, const Var& b,
                bool transpose_sparse = false) {
  Eigen::Index srows = transpose_sparse ? s->cols() : s->rows();
  Eigen::Index scols = transpose_sparse ? s->rows() : s->cols();
  if (scols != b->rows())
    throw ShapeError("spmm: sparse " + std::to_string(srows) + "x" +
                     std::to_string(scols) + " * " + shape_str(b->value));
  Matrix v = transpose_sparse ? Matrix(s->transpose() * b->value)
                              : Matrix(*s * b->value);
  return detail::make_op(
      std::move(v), {b},
      [s, transpose_sparse](const Var&, const Var& g) -> std::vector<Var> {
        return {spmm(s, g, !transpose_sparse)};
      });
}

inline Var transpose(const Var& a) {
  return detail::make_op(a->value.transpose(), {a},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {transpose(g)};
                         });
}

// ---- nonlinearities ----

inline Var relu(const Var& a) {
  // derivative at exactly 0 is 0 (subgradient convention)
  Matrix mask = (a->value.array() > 0.0).cast<double>();
  return detail::make_op(
      a->value.cwiseMax(0.0), {a},
      [mask = std::move(mask)](const Var&, const Var& g) -> std::vector<Var> {
        return {mul(g, constant(mask))};
      });
}

inline Var sigmoid(const Var& a) {
  Matrix v = 1.0 / (1.0 + (-a->value.array()).exp());
  return detail::make_op(
      std::move(v), {a},
      [](const Var& self, const Var& g) -> std::vector<Var> {
        Var ones = constant(Matrix::Ones(self->rows(), self->cols()));
        return {mul(g, mul(self, sub(ones, self)))};
      });
}

inline Var log_(const Var& a) {
  if ((a->value.array() <= 0.0).any())
    throw DomainError("log: non-positive input");
  return detail::make_op(a->value.array().log(), {a},
                         [](const Var& self, const Var& g) -> std::vector<Var> {
                           return {div(g, self->parents[0])};
                         });
}

inline Var square(const Var& a) {
  return detail::make_op(a->value.array().square(), {a},
                         [](const Var& self, const Var& g) -> std::vector<Var> {
                           return {mul(g, scalar_mul(self->parents[0], 2.0))};
                         });
}

inline Var sqrt_(const Var& a) {
  if ((a->value.array() < 0.0).any()) throw DomainError("sqrt: negative input");
  return detail::make_op(a->value.array().sqrt(), {a},
                         [](const Var& self, const Var& g) -> std::vector<Var> {
                           return {div(scalar_mul(g, 0.5), self)};
                         });
}

// ---- reductions and broadcasts ----

inline Var sum(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a->value.sum();
  auto r = a->rows(), c = a->cols();
  return detail::make_op(std::move(v), {a},
                         [r, c](const Var&, const Var& g) -> std::vector<Var> {
                           return {broadcast_full(g, r, c)};
                         });
}

inline Var mean(const Var& a) {
  return scalar_mul(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

inline Var broadcast_full(const Var& s, Eigen::Index rows, Eigen::Index cols) {
  if (!detail::is_scalar(s)) throw ShapeError("broadcast_full: scalar expected");
  return detail::make_op(Matrix::Constant(rows, cols, s->value(0, 0)), {s},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {sum(g)};
                         });
}

inline Var row_sum(const Var& a) {
  auto c = a->cols();
  return detail::make_op(a->value.rowwise().sum(), {a},
                         [c](const Var&, const Var& g) -> std::vector<Var> {
                           return {broadcast_cols(g, c)};
                         });
}

inline Var col_sum(const Var& a) {
  auto r = a->rows();
  return detail::make_op(a->value.colwise().sum(), {a},
                         [r](const Var&, const Var& g) -> std::vector<Var> {
                           return {broadcast_rows(g, r)};
                         });
}

inline Var broadcast_cols(const Var& a, Eigen::Index cols) {
  if (a->cols() != 1) throw ShapeError("broadcast_cols: column vector expected");
  return detail::make_op(a->value.replicate(1, cols), {a},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {row_sum(g)};
                         });
}

inline Var broadcast_rows(const Var& a, Eigen::Index rows) {
  if (a->rows() != 1) throw ShapeError("broadcast_rows: row vector expected");
  return detail::make_op(a->value.replicate(rows, 1), {a},
                         [](const Var&, const Var& g) -> std::vector<Var> {
                           return {col_sum(g)};
                         });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a->rows())
    throw ShapeError("slice_rows: out of range");
  auto total = a->rows();
  return detail::make_op(
      a->value.middleRows(start, count), {a},
      [start, total](const Var&, const Var& g) -> std::vector<Var> {
        return {pad_rows(g, start, total)};
      });
}

inline Var pad_rows(const Var& a, Eigen::Index start, Eigen::Index total) {
  Matrix v = Matrix::Zero(total, a->cols());
  v.middleRows(start, a->rows()) = a->value;
  auto count = a->rows();
  return detail::make_op(
      std::move(v), {a},
      [start, count](const Var&, const Var& g) -> std::vector<Var> {
        return {slice_rows(g, start, count)};
      });
}

inline Var concat_rows(const Var& a, const Var& b) {
  if (a->cols() != b->cols()) throw ShapeError("concat_rows: column mismatch");
  Matrix v(a->rows() + b->rows(), a->cols());
  v.topRows(a->rows()) = a->value;
  v.bottomRows(b->rows()) = b->value;
  auto ra = a->rows(), rb = b->rows();
  return detail::make_op(
      std::move(v), {a, b},
      [ra, rb](const Var&, const Var& g) -> std::vector<Var> {
        return {slice_rows(g, 0, ra), slice_rows(g, ra, rb)};
      });
}

//! sqrt(sum_j x_ij^2 + eps) per row; eps keeps the zero-gradient case finite.
inline Var rowwise_l2_norm(const Var& a, double eps = 1e-16) {
  return sqrt_(add_scalar(row_sum(square(a)), eps));
}

//! Fused clamped binary cross-entropy, mean over all entries.
//! Gradient w.r.t. pred is a constant (not differentiable again); the
//! reconstruction loss never sits under a second backward pass.
inline Var bce_mean(const Var& pred, const Matrix& target, double clamp = 1e-7) {
  if (pred->rows() != target.rows() || pred->cols() != target.cols())
    throw ShapeError("bce_mean: shape mismatch");
  Eigen::ArrayXXd p = pred->value.array().max(clamp).min(1.0 - clamp);
  double n = static_cast<double>(p.size());
  Matrix v(1, 1);
  v(0, 0) =
      -((target.array() * p.log()) + (1.0 - target.array()) * (1.0 - p).log())
           .sum() /
      n;
  Matrix grad = ((p - target.array()) / (p * (1.0 - p)) / n).matrix();
  // clamped entries sit on a constant plateau
  grad = (pred->value.array() < clamp || pred->value.array() > 1.0 - clamp)
             .select(0.0, grad.array());
  return detail::make_op(
      std::move(v), {pred},
      [grad = std::move(grad)](const Var&, const Var& g) -> std::vector<Var> {
        return {mul(broadcast_full(g, grad.rows(), grad.cols()), constant(grad))};
      });
}

// ---- backward ----

using GradientMap = std::unordered_map<const Node*, Var>;

//! Reverse-topological accumulation; returns a differentiable gradient per
//! reachable grad-requiring node.
inline GradientMap backward_graph(const Var& loss) {
  if (!detail::is_scalar(loss)) throw ShapeError("backward: loss must be scalar");
  if (!loss->requires_grad)
    throw ShapeError("backward: loss does not depend on any variable");

  // iterative DFS post-order over grad-requiring subgraph
  std::vector<Var> order;
  std::unordered_map<const Node*, int> state;  // 0 unseen, 1 open, 2 done
  std::vector<std::pair<Var, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  state[loss.get()] = 1;
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Var p = node->parents[idx++];
      if (p->requires_grad && state[p.get()] == 0) {
        state[p.get()] = 1;
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      state[node.get()] = 2;
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is post-order: parents before children; walk it backwards

  GradientMap grads;
  grads[loss.get()] = constant(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Var& node = *it;
    auto git = grads.find(node.get());
    if (git == grads.end() || !node->backward_fn) continue;
    std::vector<Var> pgrads = node->backward_fn(node, git->second);
    if (pgrads.size() != node->parents.size())
      throw std::logic_error("backward rule arity mismatch");
    for (std::size_t i = 0; i < pgrads.size(); ++i) {
      const Var& p = node->parents[i];
      if (!p->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(p.get(), pgrads[i]);
      if (!inserted) slot->second = add(slot->second, pgrads[i]);
    }
  }
  return grads;
}

//! First-order gradients as plain matrices.
inline std::unordered_map<const Node*, Matrix> backward(const Var& loss) {
  std::unordered_map<const Node*, Matrix> out;
  for (const auto& [node, g] : backward_graph(loss)) out.emplace(node, g->value);
  return out;
}

inline const Matrix& grad_of(const std::unordered_map<const Node*, Matrix>& m,
                             const Var& v) {
  auto it = m.find(v.get());
  if (it == m.end())
    throw ShapeError("no gradient recorded for requested variable");
  return it->second;
}

//! d(output)/d(input) as a differentiable tensor (double backprop support).
inline Var input_gradient(const Var& output, const Var& input) {
  auto grads = backward_graph(output);
  auto it = grads.find(input.get());
  if (it == grads.end())
    throw ShapeError("input_gradient: input is not an ancestor of output");
  return it->second;
}

//! Max relative error between backward() and central finite differences.
inline double finite_difference_check(
    const std::function<Var(const Var&)>& f, const Matrix& x,
    double step = 1e-5) {
  Var xv = variable(x);
  Var loss = f(xv);
  auto grads = backward(loss);
  Matrix analytic = grad_of(grads, xv);

  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      Matrix xp = x, xm = x;
      xp(i, j) += step;
      xm(i, j) -= step;
      double fp = f(constant(xp))->value(0, 0);
      double fm = f(constant(xm))->value(0, 0);
      double fd = (fp - fm) / (2.0 * step);
      double an = analytic(i, j);
      double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace dbgan::ad
